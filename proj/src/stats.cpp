#include "rgbd/stats.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "rgbd/errors.hpp"
#include "rgbd/fmt.hpp"

namespace rgbd {

namespace {

std::ofstream open_csv(const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    return out;
}

} // namespace

DatasetSummary summarize(const CocoDataset& ds) {
    if (ds.images.empty()) throw ContractError("summarize: dataset has no images");
    DatasetSummary s;
    s.image_count = static_cast<int>(ds.images.size());
    s.class_count = static_cast<int>(ds.categories.size());
    for (const CocoCategory& c : ds.categories) s.per_category_instance_counts[c.id] = 0;

    std::map<int, std::set<int>> image_categories;
    for (const CocoAnnotation& a : ds.annotations) {
        ++s.per_category_instance_counts[a.category_id];
        image_categories[a.image_id].insert(a.category_id);
    }
    s.mean_objects_per_image =
        static_cast<double>(ds.annotations.size()) / s.image_count;

    long long distinct_total = 0;
    for (const CocoImage& img : ds.images) {
        const auto it = image_categories.find(img.id);
        const int k = it == image_categories.end() ? 0 : static_cast<int>(it->second.size());
        distinct_total += k;
        ++s.categories_per_image_histogram[k];
    }
    s.mean_categories_per_image = static_cast<double>(distinct_total) / s.image_count;
    return s;
}

std::vector<ScalePoint> relative_scale_cdf(const CocoDataset& ds) {
    if (ds.annotations.empty())
        throw ContractError("relative_scale_cdf: dataset has no annotations");
    std::vector<double> scales;
    for (const CocoAnnotation& a : ds.annotations) {
        if (a.area <= 0.0)
            throw ValidationError("annotation " + std::to_string(a.id) +
                                  ": non-positive area");
        const CocoImage& img = ds.image_by_id(a.image_id);
        scales.push_back(std::sqrt(a.area / (static_cast<double>(img.width) * img.height)));
    }
    std::sort(scales.begin(), scales.end());
    std::vector<ScalePoint> cdf;
    const double n = static_cast<double>(scales.size());
    for (size_t i = 0; i < scales.size(); ++i)
        cdf.push_back({scales[i], static_cast<double>(i + 1) / n});
    return cdf;
}

std::vector<std::array<double, 2>> bbox_scatter(const CocoDataset& ds) {
    std::vector<std::array<double, 2>> points;
    for (const CocoAnnotation& a : ds.annotations) {
        const CocoImage& img = ds.image_by_id(a.image_id);
        const auto& b = a.bbox;
        if (b[0] < 0 || b[1] < 0 || b[2] <= 0 || b[3] <= 0 || b[0] + b[2] > img.width ||
            b[1] + b[3] > img.height)
            throw ValidationError("annotation " + std::to_string(a.id) +
                                  ": bbox exceeds image bounds");
        points.push_back({b[2] / img.width, b[3] / img.height});
    }
    return points;
}

void write_stats_csv(const CocoDataset& ds, const std::string& out_dir) {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    const fs::path dir(out_dir);

    const DatasetSummary s = summarize(ds);
    {
        auto out = open_csv(dir / "summary.csv");
        out << "image_count,class_count,mean_objects_per_image,mean_categories_per_image\n"
            << s.image_count << "," << s.class_count << "," << format_double(s.mean_objects_per_image)
            << "," << format_double(s.mean_categories_per_image) << "\n";
    }
    {
        auto out = open_csv(dir / "instances_per_category.csv");
        out << "category_id,name,instance_count\n";
        for (const CocoCategory& c : ds.categories)
            out << c.id << "," << c.name << ","
                << s.per_category_instance_counts.at(c.id) << "\n";
    }
    {
        auto out = open_csv(dir / "categories_per_image_hist.csv");
        out << "categories_per_image,image_count\n";
        for (const auto& [k, count] : s.categories_per_image_histogram)
            out << k << "," << count << "\n";
    }
    {
        auto out = open_csv(dir / "scale_cdf.csv");
        out << "relative_scale,cumulative_fraction\n";
        for (const ScalePoint& p : relative_scale_cdf(ds))
            out << format_double(p.relative_scale) << "," << format_double(p.cumulative_fraction) << "\n";
    }
    {
        auto out = open_csv(dir / "bbox_scatter.csv");
        out << "relative_width,relative_height\n";
        for (const auto& p : bbox_scatter(ds)) out << format_double(p[0]) << "," << format_double(p[1]) << "\n";
    }
}

} // namespace rgbd

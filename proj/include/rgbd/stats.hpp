#pragma once

#include <array>
#include <map>
#include <string>
#include <vector>

#include "rgbd/data.hpp"

namespace rgbd {

struct DatasetSummary {
    int image_count = 0;
    int class_count = 0;
    double mean_objects_per_image = 0.0;
    double mean_categories_per_image = 0.0;
    std::map<int, int> per_category_instance_counts;
    std::map<int, int> categories_per_image_histogram; // distinct categories -> images
};

DatasetSummary summarize(const CocoDataset& ds);

struct ScalePoint {
    double relative_scale = 0.0;      // sqrt(mask area / image area)
    double cumulative_fraction = 0.0;
};

std::vector<ScalePoint> relative_scale_cdf(const CocoDataset& ds);

// (bbox_w / image_w, bbox_h / image_h) per annotation
std::vector<std::array<double, 2>> bbox_scatter(const CocoDataset& ds);

// writes summary.csv, scale_cdf.csv, bbox_scatter.csv,
// instances_per_category.csv, categories_per_image_hist.csv
void write_stats_csv(const CocoDataset& ds, const std::string& out_dir);

} // namespace rgbd

#include "rgbd/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <set>
#include <sstream>

#include <json.hpp>

#include "rgbd/errors.hpp"

namespace rgbd {

namespace {

constexpr double kSmallMax = 32.0 * 32.0;
constexpr double kLargeMin = 96.0 * 96.0;
constexpr int kNumThresholds = 10;
constexpr int kNumBuckets = 4; // all, small, medium, large

bool bucket_contains(int bucket, double area) {
    switch (bucket) {
        case 0: return true;
        case 1: return area < kSmallMax;
        case 2: return area >= kSmallMax && area <= kLargeMin;
        default: return area > kLargeMin;
    }
}

double iou_threshold(int i) { return (50 + 5 * i) / 100.0; }

// unlike the public mask_iou, an empty union here just means "no match"
double pair_mask_iou(const Mask& a, const Mask& b) {
    int inter = 0, uni = 0;
    for (size_t i = 0; i < a.data.size(); ++i) {
        inter += a.data[i] && b.data[i];
        uni += a.data[i] || b.data[i];
    }
    return uni == 0 ? 0.0 : static_cast<double>(inter) / uni;
}

double pair_box_iou(const std::array<double, 4>& a, const std::array<double, 4>& b) {
    const double iw = std::min(a[0] + a[2], b[0] + b[2]) - std::max(a[0], b[0]);
    const double ih = std::min(a[1] + a[3], b[1] + b[3]) - std::max(a[1], b[1]);
    const double inter = std::max(0.0, iw) * std::max(0.0, ih);
    const double uni = a[2] * a[3] + b[2] * b[3] - inter;
    return uni <= 0.0 ? 0.0 : inter / uni;
}

struct GtItem {
    int image_id = 0;
    double area = 0.0; // decoded mask pixels, buckets both metrics
    Mask mask;
    std::array<double, 4> box{};
};

struct DtItem {
    int image_id = 0;
    double score = 0.0;
    double seg_area = 0.0;
    double box_area = 0.0;
    Mask mask;
    std::array<double, 4> box{};
};

// mean precision at recall {0, 0.01, ..., 1} with the envelope applied;
// flags: 1 = TP, 0 = FP, in score order, ignored detections already dropped
double interpolated_ap(const std::vector<int>& flags, int n_gt) {
    std::vector<double> recall(flags.size()), prec(flags.size());
    int tp = 0, fp = 0;
    for (size_t k = 0; k < flags.size(); ++k) {
        tp += flags[k];
        fp += 1 - flags[k];
        recall[k] = static_cast<double>(tp) / n_gt;
        prec[k] = static_cast<double>(tp) / (tp + fp);
    }
    for (int k = static_cast<int>(prec.size()) - 2; k >= 0; --k)
        prec[k] = std::max(prec[k], prec[k + 1]);
    double total = 0.0;
    for (int i = 0; i <= 100; ++i) {
        const auto it = std::lower_bound(recall.begin(), recall.end(), i / 100.0);
        if (it != recall.end()) total += prec[it - recall.begin()];
    }
    return total / 101.0;
}

ApMetrics eval_metric(const std::map<int, std::vector<GtItem>>& gt_by_cat,
                      const std::map<int, std::vector<DtItem>>& dt_by_cat, bool segm) {
    double sums[kNumThresholds][kNumBuckets] = {};
    int counts[kNumBuckets] = {};
    for (const auto& [cat, gts] : gt_by_cat) {
        std::vector<DtItem> dts;
        if (auto it = dt_by_cat.find(cat); it != dt_by_cat.end()) dts = it->second;
        std::stable_sort(dts.begin(), dts.end(),
                         [](const DtItem& a, const DtItem& b) { return a.score > b.score; });

        std::vector<std::vector<double>> iou(dts.size(), std::vector<double>(gts.size(), 0.0));
        for (size_t d = 0; d < dts.size(); ++d)
            for (size_t g = 0; g < gts.size(); ++g)
                if (dts[d].image_id == gts[g].image_id)
                    iou[d][g] = segm ? pair_mask_iou(dts[d].mask, gts[g].mask)
                                     : pair_box_iou(dts[d].box, gts[g].box);

        for (int b = 0; b < kNumBuckets; ++b) {
            int n_real = 0;
            for (const GtItem& g : gts) n_real += bucket_contains(b, g.area);
            if (n_real == 0) continue;
            counts[b] += 1;
            for (int ti = 0; ti < kNumThresholds; ++ti) {
                const double t = iou_threshold(ti);
                std::vector<char> taken(gts.size(), 0);
                std::vector<int> flags;
                for (size_t d = 0; d < dts.size(); ++d) {
                    // prefer an in-bucket GT; fall back to an ignored one
                    int best = -1;
                    double best_iou = 0.0;
                    for (size_t g = 0; g < gts.size(); ++g) {
                        if (taken[g] || !bucket_contains(b, gts[g].area)) continue;
                        if (iou[d][g] >= t && iou[d][g] > best_iou) {
                            best_iou = iou[d][g];
                            best = static_cast<int>(g);
                        }
                    }
                    if (best >= 0) {
                        taken[best] = 1;
                        flags.push_back(1);
                        continue;
                    }
                    for (size_t g = 0; g < gts.size(); ++g) {
                        if (taken[g] || bucket_contains(b, gts[g].area)) continue;
                        if (iou[d][g] >= t && iou[d][g] > best_iou) {
                            best_iou = iou[d][g];
                            best = static_cast<int>(g);
                        }
                    }
                    if (best >= 0) {
                        taken[best] = 1; // matched an out-of-bucket GT: not counted
                        continue;
                    }
                    const double own = segm ? dts[d].seg_area : dts[d].box_area;
                    if (bucket_contains(b, own)) flags.push_back(0);
                }
                sums[ti][b] += interpolated_ap(flags, n_real);
            }
        }
    }

    const auto mean_over_thresholds = [&](int b) -> std::optional<double> {
        if (counts[b] == 0) return std::nullopt;
        double s = 0.0;
        for (int ti = 0; ti < kNumThresholds; ++ti) s += sums[ti][b] / counts[b];
        return s / kNumThresholds;
    };
    ApMetrics m;
    m.ap = mean_over_thresholds(0);
    m.ap_s = mean_over_thresholds(1);
    m.ap_m = mean_over_thresholds(2);
    m.ap_l = mean_over_thresholds(3);
    if (counts[0] > 0) {
        m.ap50 = sums[0][0] / counts[0];
        m.ap75 = sums[5][0] / counts[0];
    }
    return m;
}

nlohmann::json metrics_to_json(const ApMetrics& m) {
    nlohmann::json j;
    const auto put = [&](const char* key, const std::optional<double>& v) {
        if (v) j[key] = *v;
        else j[key] = nullptr;
    };
    put("ap", m.ap);
    put("ap50", m.ap50);
    put("ap75", m.ap75);
    put("ap_s", m.ap_s);
    put("ap_m", m.ap_m);
    put("ap_l", m.ap_l);
    return j;
}

} // namespace

double mask_iou(const Mask& a, const Mask& b) {
    if (a.h != b.h || a.w != b.w)
        throw ContractError("mask_iou: dimension mismatch");
    int inter = 0, uni = 0;
    for (size_t i = 0; i < a.data.size(); ++i) {
        inter += a.data[i] && b.data[i];
        uni += a.data[i] || b.data[i];
    }
    if (uni == 0) throw ContractError("mask_iou: both masks empty");
    return static_cast<double>(inter) / uni;
}

double box_iou(const std::array<double, 4>& a, const std::array<double, 4>& b) {
    const double iw = std::min(a[0] + a[2], b[0] + b[2]) - std::max(a[0], b[0]);
    const double ih = std::min(a[1] + a[3], b[1] + b[3]) - std::max(a[1], b[1]);
    const double inter = std::max(0.0, iw) * std::max(0.0, ih);
    const double uni = a[2] * a[3] + b[2] * b[3] - inter;
    if (uni <= 0.0) throw ContractError("box_iou: both boxes empty");
    return inter / uni;
}

ApReport evaluate(const CocoDataset& gt, const std::vector<Detection>& dts) {
    std::map<int, const CocoImage*> images;
    for (const CocoImage& img : gt.images) images[img.id] = &img;
    std::set<int> cat_ids;
    for (const CocoCategory& c : gt.categories) cat_ids.insert(c.id);

    std::map<int, std::vector<GtItem>> gt_by_cat;
    for (const CocoAnnotation& ann : gt.annotations) {
        if (images.find(ann.image_id) == images.end())
            throw ContractError("evaluate: annotation " + std::to_string(ann.id) +
                                " references unknown image " + std::to_string(ann.image_id));
        if (cat_ids.count(ann.category_id) == 0)
            throw ContractError("evaluate: annotation " + std::to_string(ann.id) +
                                " references unknown category " +
                                std::to_string(ann.category_id));
        GtItem g;
        g.image_id = ann.image_id;
        g.mask = decode_annotation(gt, ann);
        g.area = g.mask.area();
        g.box = ann.bbox;
        gt_by_cat[ann.category_id].push_back(std::move(g));
    }

    std::map<int, std::vector<DtItem>> dt_by_cat;
    for (size_t i = 0; i < dts.size(); ++i) {
        const Detection& d = dts[i];
        const auto img = images.find(d.image_id);
        if (img == images.end())
            throw ContractError("evaluate: detection " + std::to_string(i) +
                                " references unknown image " + std::to_string(d.image_id));
        if (cat_ids.count(d.category_id) == 0)
            throw ContractError("evaluate: detection " + std::to_string(i) +
                                " references unknown category " +
                                std::to_string(d.category_id));
        if (!std::isfinite(d.score) || d.score < 0.0 || d.score > 1.0)
            throw ContractError("evaluate: detection " + std::to_string(i) +
                                " score must be finite in [0, 1]");
        if (d.mask.h != img->second->height || d.mask.w != img->second->width)
            throw ContractError("evaluate: detection " + std::to_string(i) +
                                " mask size does not match image " + std::to_string(d.image_id));
        DtItem item;
        item.image_id = d.image_id;
        item.score = d.score;
        item.mask = rle_to_mask(d.mask);
        item.seg_area = item.mask.area();
        item.box = d.box;
        item.box_area = d.box[2] * d.box[3];
        dt_by_cat[d.category_id].push_back(std::move(item));
    }

    ApReport report;
    report.segm = eval_metric(gt_by_cat, dt_by_cat, true);
    report.bbox = eval_metric(gt_by_cat, dt_by_cat, false);
    return report;
}

std::vector<Detection> detections_from_gt(const CocoDataset& ds) {
    std::vector<Detection> out;
    out.reserve(ds.annotations.size());
    for (const CocoAnnotation& ann : ds.annotations) {
        Detection d;
        d.image_id = ann.image_id;
        d.category_id = ann.category_id;
        d.score = 1.0;
        d.box = ann.bbox;
        d.mask = mask_to_rle(decode_annotation(ds, ann));
        out.push_back(std::move(d));
    }
    return out;
}

std::string ap_report_to_json(const ApReport& report) {
    nlohmann::json j;
    j["segm"] = metrics_to_json(report.segm);
    j["bbox"] = metrics_to_json(report.bbox);
    return j.dump(2) + "\n";
}

std::string ap_report_table(const ApReport& report) {
    std::ostringstream os;
    os << "      ";
    for (const char* col : {"ap", "ap50", "ap75", "ap_s", "ap_m", "ap_l"}) {
        os.width(8);
        os << col;
    }
    os << "\n";
    const auto row = [&](const char* name, const ApMetrics& m) {
        os << name << "  ";
        for (const auto& v : {m.ap, m.ap50, m.ap75, m.ap_s, m.ap_m, m.ap_l}) {
            char cell[16];
            if (v) std::snprintf(cell, sizeof(cell), "%.4f", *v);
            else std::snprintf(cell, sizeof(cell), "-");
            os.width(8);
            os << cell;
        }
        os << "\n";
    };
    row("segm", report.segm);
    row("bbox", report.bbox);
    return os.str();
}

std::string detections_to_json(const std::vector<Detection>& dts) {
    nlohmann::json arr = nlohmann::json::array();
    for (const Detection& d : dts)
        arr.push_back({{"image_id", d.image_id},
                       {"category_id", d.category_id},
                       {"score", d.score},
                       {"bbox", d.box},
                       {"segmentation",
                        {{"size", {d.mask.h, d.mask.w}}, {"counts", d.mask.counts}}}});
    return arr.dump(2) + "\n";
}

std::vector<Detection> detections_from_json(const std::string& text) {
    nlohmann::json arr;
    try {
        arr = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("detections: ") + e.what());
    }
    if (!arr.is_array()) throw FormatError("detections: expected a top-level array");
    std::vector<Detection> out;
    try {
        for (const auto& j : arr) {
            Detection d;
            d.image_id = j.at("image_id").get<int>();
            d.category_id = j.at("category_id").get<int>();
            d.score = j.at("score").get<double>();
            const auto box = j.at("bbox").get<std::vector<double>>();
            if (box.size() != 4) throw FormatError("detections: bbox must have 4 entries");
            std::copy(box.begin(), box.end(), d.box.begin());
            const auto& seg = j.at("segmentation");
            const auto size = seg.at("size").get<std::vector<int>>();
            if (size.size() != 2) throw FormatError("detections: size must be [h, w]");
            d.mask.h = size[0];
            d.mask.w = size[1];
            d.mask.counts = seg.at("counts").get<std::vector<int>>();
            out.push_back(std::move(d));
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("detections: ") + e.what());
    }
    return out;
}

} // namespace rgbd

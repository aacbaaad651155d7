#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "rgbd/data.hpp"

namespace rgbd {

// one predicted instance in dataset coordinates
struct Detection {
    int image_id = 0;
    int category_id = 0;
    double score = 0.0;          // finite, in [0, 1]
    std::array<double, 4> box{}; // [x, y, w, h] pixels
    Rle mask;                    // at full image resolution
};

double mask_iou(const Mask& a, const Mask& b);
double box_iou(const std::array<double, 4>& a, const std::array<double, 4>& b);

// each value in [0, 1]; nullopt when no category has GT in the bucket
struct ApMetrics {
    std::optional<double> ap; // mean over IoU 0.50:0.05:0.95
    std::optional<double> ap50;
    std::optional<double> ap75;
    std::optional<double> ap_s; // GT mask area < 32^2
    std::optional<double> ap_m; // in [32^2, 96^2]
    std::optional<double> ap_l; // > 96^2
};

struct ApReport {
    ApMetrics segm;
    ApMetrics bbox;
};

// greedy matching per category and IoU threshold, 101-point interpolated AP
// averaged over categories present in the GT annotations
ApReport evaluate(const CocoDataset& gt, const std::vector<Detection>& dts);

// GT annotations replayed as unit-score detections
std::vector<Detection> detections_from_gt(const CocoDataset& ds);

std::string ap_report_to_json(const ApReport& report);
std::string ap_report_table(const ApReport& report);

// detections as a results-style JSON array, RLE segmentations
std::string detections_to_json(const std::vector<Detection>& dts);
std::vector<Detection> detections_from_json(const std::string& text);

} // namespace rgbd

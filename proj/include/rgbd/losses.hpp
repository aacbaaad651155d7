#pragma once

#include <array>
#include <vector>

#include "rgbd/matching.hpp"
#include "rgbd/tape.hpp"

namespace rgbd {

struct LossWeights {
    double cls = 1.0;
    double l1 = 5.0;
    double giou = 2.0;
    double mask = 1.0;
    double no_object = 0.1; // CE weight of unmatched queries
};

// one ground-truth instance, box as normalized (cx, cy, w, h)
struct GtInstance {
    int class_index = 0;
    std::array<double, 4> box{};
    Tensor mask_grid; // soft target at the mask-head grid resolution
};

// head outputs for one sample, all recorded on one tape
struct PredictionVars {
    Var class_logits; // Q x (num_classes + 1); index num_classes = "no object"
    Var boxes;        // Q x 4, each in [0, 1]
    Var mask_logits;  // Q x (grid_h * grid_w)
    int grid_h = 0;
    int grid_w = 0;
};

struct LossBreakdown {
    double cls = 0.0, l1 = 0.0, giou = 0.0, mask = 0.0, total = 0.0;
};

// generalized IoU of two (cx, cy, w, h) boxes; in (-1, 1]
double giou_value(const std::array<double, 4>& a, const std::array<double, 4>& b);

// differentiable GIoU of a predicted 1x4 box row against a fixed GT box
Var giou_of_row(Var box_row, const std::array<double, 4>& gt);

// pairwise matching costs: -p(class) + l1_weight * L1 + giou_weight * (1 - GIoU)
Tensor matching_costs(const PredictionVars& pred, const std::vector<GtInstance>& gt,
                      const LossWeights& w);

// cls + box L1 + GIoU + mask (dice + BCE); unmatched queries supervised toward
// "no object". Box/mask terms are normalized by the GT count.
Var set_loss(const PredictionVars& pred, const std::vector<GtInstance>& gt,
             const MatchResult& match, const LossWeights& w, int num_classes,
             LossBreakdown* breakdown = nullptr);

// dice + BCE between one 1xG mask logit row and a soft target of equal size
Var mask_loss_row(Var logits_row, const Tensor& target);

// block-mean downsample of an H x W mask by an integer factor
Tensor downsample_mask(const Tensor& mask, int factor);

} // namespace rgbd

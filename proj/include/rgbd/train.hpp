#pragma once

#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "rgbd/data.hpp"
#include "rgbd/eval.hpp"
#include "rgbd/losses.hpp"
#include "rgbd/model.hpp"

namespace rgbd {

struct TrainSample {
    int image_id = 0;
    Tensor rgb, depth; // [3, H, W] in [0, 1]
    std::vector<GtInstance> gt;
};

struct TrainConfig {
    int epochs = 12;
    int batch_size = 4;
    double lr = 1e-3;
    double lr_drop_factor = 0.1; // applied from 2/3 of the epochs onward
    double grad_clip = 10.0;     // global-norm cap; <= 0 disables
    double aux_weight = 0.5;     // design-D auxiliary mask loss
    uint64_t seed = 1;
    LossWeights weights;

    void validate() const;
};

struct EpochStats {
    int epoch = 0;
    double loss = 0.0; // per-sample means; mask includes any auxiliary term
    double cls = 0.0, l1 = 0.0, giou = 0.0, mask = 0.0;
    double ap_seg50 = 0.0, ap_det50 = 0.0; // on the validation set
};

struct TrainResult {
    ModelParams params;
    std::vector<EpochStats> trace;
};

// loads images and converts annotations to normalized boxes + soft mask grids
std::vector<TrainSample> samples_from_coco(const CocoDataset& ds, const std::string& dir,
                                           const ModelConfig& cfg);

// full inference over a sample set, in dataset coordinates
std::vector<Detection> predict_detections(const ModelConfig& cfg, ModelParams& params,
                                          const std::vector<TrainSample>& samples);

// adaptive-moment training with per-epoch validation AP; deterministic per seed.
// val_gt supplies the evaluation ground truth for val_set (may be empty).
TrainResult train(const ModelConfig& mcfg, const TrainConfig& tcfg,
                  const std::vector<TrainSample>& train_set,
                  const std::vector<TrainSample>& val_set, const CocoDataset& val_gt,
                  std::ostream* log = nullptr);

std::string trace_to_csv(const std::vector<EpochStats>& trace);

} // namespace rgbd

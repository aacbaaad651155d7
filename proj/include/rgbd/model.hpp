#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "rgbd/fusion.hpp"
#include "rgbd/losses.hpp"

namespace rgbd {

struct StageSpec {
    int channels = 0;
    int stride = 2;
};

struct ModelConfig {
    int input_h = 64;
    int input_w = 64;
    std::vector<StageSpec> stages{{16, 2}, {32, 2}, {64, 2}, {64, 2}};
    FusionKind fusion_kind = FusionKind::IamCdf;
    // one flag per stage; a block after stage 1 is never allowed
    std::array<bool, 4> insertion_mask{false, true, true, true};
    char routing_design = 'C';
    int num_queries = 8;
    int num_classes = 3;
    uint64_t seed = 1;

    void validate() const;
    int final_channels() const { return stages.back().channels; }
    bool two_streams() const {
        return fusion_kind != FusionKind::None && fusion_kind != FusionKind::Early;
    }
    // stage-4 block already aggregates, so no extra final merge is needed
    bool block_provides_agg() const {
        return (fusion_kind == FusionKind::IamCdf || fusion_kind == FusionKind::Cdf) &&
               insertion_mask[3];
    }
    bool needs_final_merge() const { return two_streams() && !block_provides_agg(); }
};

struct StageParams {
    Tensor w, b; // w: [out, in, 3, 3]
    static StageParams init(int cin, int cout, Rng& rng);
    void collect(const std::string& prefix, ParamRefs& out);
};

struct StageVars {
    Var w, b;
};

struct LinearParams {
    Tensor w, b; // w: [in, out]
    static LinearParams init(int din, int dout, Rng& rng);
    void collect(const std::string& prefix, ParamRefs& out);
};

struct LinearVars {
    Var w, b;
};

// one fusion insertion point; which members are live depends on fusion_kind
struct FusionBlockParams {
    IamParams iam;
    CdfParams cdf;
    AttnParams attn_rgb, attn_d;
};

struct FusionBlockVars {
    IamVars iam;
    CdfVars cdf;
    AttnVars attn_rgb, attn_d;
};

struct HeadParams {
    Tensor queries; // [num_queries, C]
    Tensor pos;     // [HW_final, C] learned key positions
    LinearParams q, k, v, ffn, cls, box, mask_embed;
    StageParams up1, up2, up3; // conv after each 2x upsample on the seg path
};

struct HeadVars {
    Var queries, pos;
    LinearVars q, k, v, ffn, cls, box, mask_embed;
    StageVars up1, up2, up3;
};

struct ModelVars {
    std::vector<StageVars> rgb_stages, d_stages;
    MergeVars early_merge;
    std::vector<FusionBlockVars> blocks;
    MergeVars final_merge;
    HeadVars head;
};

struct ModelParams {
    ModelConfig cfg;
    std::vector<StageParams> rgb_stages, d_stages;
    MergeParams early_merge;
    std::vector<FusionBlockParams> blocks; // one per flagged stage, in stage order
    MergeParams final_merge;
    HeadParams head;

    static ModelParams init(const ModelConfig& cfg);
    void collect(ParamRefs& out);
    ModelVars leaf(Tape& tape);
};

struct ForwardResult {
    PredictionVars pred;
    Var det_in, seg_in;               // routed maps
    Var f_rgb_final, f_agg_final;
    Var aux_mask_logits;              // design D: mask logits from f_agg
    bool has_aux = false;
};

// (detection input, segmentation input) per design; D routes f_rgb to both
std::pair<Var, Var> route_features(char design, Var f_rgb_final, Var f_agg_final);

// rgb, depth: [3, H, W] real maps; depth replicated to 3 channels upstream
ForwardResult model_forward(Tape& tape, const Tensor& rgb, const Tensor& depth,
                            const ModelConfig& cfg, ModelVars& mv);

struct QueryDetection {
    int image_id = 0;
    int category_id = 0; // 1-based, as in the dataset
    double score = 0.0;
    std::array<double, 4> box{}; // normalized (cx, cy, w, h)
    Tensor mask;                 // H x W in {0, 1}
};

// full inference for one image: per-query best real class, thresholded mask
std::vector<QueryDetection> predict_sample(const ModelConfig& cfg, ModelParams& params,
                                      const Tensor& rgb, const Tensor& depth);

Tensor upsample_bilinear(const Tensor& grid, int out_h, int out_w);

// checkpoint = manifest JSON (config + tensor list) plus TNSR1 files
void save_checkpoint(const std::string& dir, ModelParams& params);
ModelParams load_checkpoint(const std::string& dir);

std::string model_config_to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const std::string& text);

} // namespace rgbd

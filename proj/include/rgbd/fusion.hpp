#pragma once

#include <string>
#include <utility>
#include <vector>

#include "rgbd/tape.hpp"

namespace rgbd {

using ParamRefs = std::vector<std::pair<std::string, Tensor*>>;

// ---- parameter bundles (owning tensors) and their on-tape counterparts -----

struct IamVars {
    Var w_q, b_q, w_k, b_k, w_v, b_v, w_out, b_out;
    int d_k = 0;
};

struct IamParams {
    Tensor w_q, b_q, w_k, b_k, w_v, b_v, w_out, b_out;
    int channels = 0; // C of the per-modality maps; d_k == C

    static IamParams init(int c, Rng& rng);
    void collect(const std::string& prefix, ParamRefs& out);
    IamVars leaf(Tape& tape);
};

struct CdfVars {
    Var w_gate, b_gate, w_agg, b_agg;
};

struct CdfParams {
    Tensor w_gate, b_gate, w_agg, b_agg;

    static CdfParams init(int c, Rng& rng);
    void collect(const std::string& prefix, ParamRefs& out);
    CdfVars leaf(Tape& tape);
};

struct AttnVars {
    Var w_q, b_q, w_k, b_k, w_v, b_v;
};

// one modality's q/k/v projections for the intra/inter baselines
struct AttnParams {
    Tensor w_q, b_q, w_k, b_k, w_v, b_v;

    static AttnParams init(int c, Rng& rng);
    void collect(const std::string& prefix, ParamRefs& out);
    AttnVars leaf(Tape& tape);
};

struct MergeVars {
    Var w, b;
};

// channel-concat + conv1x1 merge used by the early and late baselines
struct MergeParams {
    Tensor w, b; // w: c_out x (2 * c_in)

    static MergeParams init(int c_in, int c_out, Rng& rng);
    void collect(const std::string& prefix, ParamRefs& out);
    MergeVars leaf(Tape& tape);
};

// ---- fusion blocks ----------------------------------------------------------

struct QKVBundle {
    Var q, k, v;        // HW x C
    int modality_split; // C/2
    int hw;
    int d_k; // C
};

struct FusionOutput {
    Var f_rgb; // C x H x W, enhanced
    Var f_d;   // C x H x W, enhanced
    Var f_agg; // C x H x W
    Var w_n;   // C, entries strictly in (0, 1)
};

enum class AttnPath { Full, BlockSum };

// [f_rgb | f_d] flattened row-major over H then W: columns [0, HW) are RGB
// positions, [HW, 2HW) the depth positions at matching indices.
Var concat_modalities(Var f_rgb, Var f_d);

// C/2 x 2HW -> HW x C, row i = concat(G[:, i], G[:, HW + i])
Var qkv_reshape(Var g, int hw);
// exact inverse of qkv_reshape
Var qkv_inverse_reshape(Var o, int hw);

QKVBundle qkv_project(Var f_rgbd, const IamVars& p);

// Softmax((Q·Kᵀ) / sqrt(d_k)) row-wise. BlockSum computes the algebraically
// equal Softmax((Q_rgb·K_rgbᵀ + Q_d·K_dᵀ) / sqrt(d_k)) instead.
Var intra_attention_scores(const QKVBundle& b, AttnPath path = AttnPath::Full);

// attention-mixed features projected back to C x 2HW
Var iam_forward(Var f_rgb, Var f_d, const IamVars& p);

// channel gate + residual halves + relu-concat aggregation
FusionOutput cdf_forward(Var z, Var f_rgb, Var f_d, const CdfVars& p);

// ---- baselines ---------------------------------------------------------------

enum class FusionKind { None, Early, Late, Intra, Inter, Iam, IamCdf, Cdf };

FusionKind parse_fusion_kind(const std::string& name);
std::string fusion_kind_name(FusionKind k);

// channel-concat the two maps and restore C with a conv1x1
Var merge_concat_conv(Var f_rgb, Var f_d, const MergeVars& p);

struct StreamPair {
    Var f_rgb, f_d;
};

// per-modality self-attention with residual add
StreamPair fuse_intra(Var f_rgb, Var f_d, const AttnVars& rgb, const AttnVars& d);
// cross-attention (RGB queries attend depth keys/values and vice versa), residual
StreamPair fuse_inter(Var f_rgb, Var f_d, const AttnVars& rgb, const AttnVars& d);

struct BaselineParams {
    MergeParams merge;  // early / late
    AttnParams rgb, d;  // intra / inter
};

struct BaselineResult {
    bool single = false;
    Var merged;         // set when single
    StreamPair streams; // set otherwise
};

struct BaselineVars {
    MergeVars merge;
    AttnVars rgb, d;
};

// kind dispatch over the four baseline strategies; early/late produce one map,
// intra/inter a per-stream pair
BaselineResult fuse_baseline(FusionKind kind, Var f_rgb, Var f_d, const BaselineVars& p);

} // namespace rgbd

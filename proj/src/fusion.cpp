#include "rgbd/fusion.hpp"

#include <cmath>

#include "rgbd/errors.hpp"

namespace rgbd {

// ---- parameters ---------------------------------------------------------------

namespace {

Tensor weight(std::vector<int> shape, int fan_in, Rng& rng) {
    Tensor t = Tensor::uniform_init(std::move(shape), fan_in, rng);
    t.requires_grad = true;
    return t;
}

Tensor bias(int n) {
    Tensor t = Tensor::zeros({n});
    t.requires_grad = true;
    return t;
}

Var leaf_of(Tape& tape, Tensor& t) { return tape.leaf(t); }

} // namespace

IamParams IamParams::init(int c, Rng& rng) {
    if (c % 2 != 0) throw ContractError("iam: channel count must be even");
    IamParams p;
    p.channels = c;
    p.w_q = weight({c / 2, c}, c, rng);
    p.b_q = bias(c / 2);
    p.w_k = weight({c / 2, c}, c, rng);
    p.b_k = bias(c / 2);
    p.w_v = weight({c / 2, c}, c, rng);
    p.b_v = bias(c / 2);
    p.w_out = weight({c, c / 2}, c / 2, rng);
    p.b_out = bias(c);
    return p;
}

void IamParams::collect(const std::string& prefix, ParamRefs& out) {
    out.emplace_back(prefix + ".w_q", &w_q);
    out.emplace_back(prefix + ".b_q", &b_q);
    out.emplace_back(prefix + ".w_k", &w_k);
    out.emplace_back(prefix + ".b_k", &b_k);
    out.emplace_back(prefix + ".w_v", &w_v);
    out.emplace_back(prefix + ".b_v", &b_v);
    out.emplace_back(prefix + ".w_out", &w_out);
    out.emplace_back(prefix + ".b_out", &b_out);
}

IamVars IamParams::leaf(Tape& tape) {
    return IamVars{leaf_of(tape, w_q),   leaf_of(tape, b_q), leaf_of(tape, w_k),
                   leaf_of(tape, b_k),   leaf_of(tape, w_v), leaf_of(tape, b_v),
                   leaf_of(tape, w_out), leaf_of(tape, b_out), channels};
}

CdfParams CdfParams::init(int c, Rng& rng) {
    CdfParams p;
    p.w_gate = weight({c, c}, c, rng);
    p.b_gate = bias(c);
    p.w_agg = weight({c, 2 * c}, 2 * c, rng);
    p.b_agg = bias(c);
    return p;
}

void CdfParams::collect(const std::string& prefix, ParamRefs& out) {
    out.emplace_back(prefix + ".w_gate", &w_gate);
    out.emplace_back(prefix + ".b_gate", &b_gate);
    out.emplace_back(prefix + ".w_agg", &w_agg);
    out.emplace_back(prefix + ".b_agg", &b_agg);
}

CdfVars CdfParams::leaf(Tape& tape) {
    return CdfVars{leaf_of(tape, w_gate), leaf_of(tape, b_gate), leaf_of(tape, w_agg),
                   leaf_of(tape, b_agg)};
}

AttnParams AttnParams::init(int c, Rng& rng) {
    AttnParams p;
    p.w_q = weight({c, c}, c, rng);
    p.b_q = bias(c);
    p.w_k = weight({c, c}, c, rng);
    p.b_k = bias(c);
    p.w_v = weight({c, c}, c, rng);
    p.b_v = bias(c);
    return p;
}

void AttnParams::collect(const std::string& prefix, ParamRefs& out) {
    out.emplace_back(prefix + ".w_q", &w_q);
    out.emplace_back(prefix + ".b_q", &b_q);
    out.emplace_back(prefix + ".w_k", &w_k);
    out.emplace_back(prefix + ".b_k", &b_k);
    out.emplace_back(prefix + ".w_v", &w_v);
    out.emplace_back(prefix + ".b_v", &b_v);
}

AttnVars AttnParams::leaf(Tape& tape) {
    return AttnVars{leaf_of(tape, w_q), leaf_of(tape, b_q), leaf_of(tape, w_k),
                    leaf_of(tape, b_k), leaf_of(tape, w_v), leaf_of(tape, b_v)};
}

MergeParams MergeParams::init(int c_in, int c_out, Rng& rng) {
    MergeParams p;
    p.w = weight({c_out, 2 * c_in}, 2 * c_in, rng);
    p.b = bias(c_out);
    return p;
}

void MergeParams::collect(const std::string& prefix, ParamRefs& out) {
    out.emplace_back(prefix + ".w", &w);
    out.emplace_back(prefix + ".b", &b);
}

MergeVars MergeParams::leaf(Tape& tape) {
    return MergeVars{leaf_of(tape, w), leaf_of(tape, b)};
}

// ---- blocks --------------------------------------------------------------------

namespace {

void check_map(const Var& f, const char* op) {
    if (f.value().rank() != 3)
        throw DimensionError(std::string(op) + ": expected a C x H x W map, got " +
                             f.value().shape_str());
}

Var map_flat(Var f) {
    const std::vector<int> s = f.shape();
    return reshape(f, {s[0], s[1] * s[2]});
}

} // namespace

Var concat_modalities(Var f_rgb, Var f_d) {
    check_map(f_rgb, "concat_modalities");
    check_map(f_d, "concat_modalities");
    if (f_rgb.shape() != f_d.shape())
        throw DimensionError("concat_modalities: shape mismatch " +
                             f_rgb.value().shape_str() + " vs " + f_d.value().shape_str());
    return concat({map_flat(f_rgb), map_flat(f_d)}, 1);
}

Var qkv_reshape(Var g, int hw) {
    const auto& s = g.shape();
    if (g.value().rank() != 2 || s[1] != 2 * hw)
        throw DimensionError("qkv_reshape: expected [C/2 x 2HW] with HW = " +
                             std::to_string(hw) + ", got " + g.value().shape_str());
    Var g_rgb = slice(g, 1, 0, hw);
    Var g_d = slice(g, 1, hw, hw);
    return concat({transpose2(g_rgb), transpose2(g_d)}, 1);
}

Var qkv_inverse_reshape(Var o, int hw) {
    const auto& s = o.shape();
    if (o.value().rank() != 2 || s[0] != hw || s[1] % 2 != 0)
        throw DimensionError("qkv_inverse_reshape: expected [HW x C] with HW = " +
                             std::to_string(hw) + ", got " + o.value().shape_str());
    const int half = s[1] / 2;
    Var o_rgb = slice(o, 1, 0, half);
    Var o_d = slice(o, 1, half, half);
    return concat({transpose2(o_rgb), transpose2(o_d)}, 1);
}

QKVBundle qkv_project(Var f_rgbd, const IamVars& p) {
    const auto& s = f_rgbd.shape();
    if (f_rgbd.value().rank() != 2)
        throw DimensionError("qkv_project: expected [C x 2HW], got " +
                             f_rgbd.value().shape_str());
    const int c = s[0];
    if (c % 2 != 0) throw ContractError("qkv_project: channel count must be even");
    if (s[1] % 2 != 0 || s[1] < 2)
        throw DimensionError("qkv_project: position extent must be even and >= 2, got " +
                             f_rgbd.value().shape_str());
    const int hw = s[1] / 2;
    QKVBundle b;
    b.q = qkv_reshape(conv1x1(f_rgbd, p.w_q, p.b_q), hw);
    b.k = qkv_reshape(conv1x1(f_rgbd, p.w_k, p.b_k), hw);
    b.v = qkv_reshape(conv1x1(f_rgbd, p.w_v, p.b_v), hw);
    b.modality_split = c / 2;
    b.hw = hw;
    b.d_k = c;
    return b;
}

Var intra_attention_scores(const QKVBundle& b, AttnPath path) {
    const double s = 1.0 / std::sqrt(static_cast<double>(b.d_k));
    if (path == AttnPath::Full) return softmax_rows(matmul(b.q, transpose2(b.k)), s);
    Var q_rgb = slice(b.q, 1, 0, b.modality_split);
    Var q_d = slice(b.q, 1, b.modality_split, b.modality_split);
    Var k_rgb = slice(b.k, 1, 0, b.modality_split);
    Var k_d = slice(b.k, 1, b.modality_split, b.modality_split);
    Var logits = add(matmul(q_rgb, transpose2(k_rgb)), matmul(q_d, transpose2(k_d)));
    return softmax_rows(logits, s);
}

Var iam_forward(Var f_rgb, Var f_d, const IamVars& p) {
    Var f_rgbd = concat_modalities(f_rgb, f_d);
    QKVBundle b = qkv_project(f_rgbd, p);
    Var attn = intra_attention_scores(b);
    Var mixed = matmul(attn, b.v);                 // HW x C
    Var g = qkv_inverse_reshape(mixed, b.hw);      // C/2 x 2HW
    return conv1x1(g, p.w_out, p.b_out);           // C x 2HW
}

FusionOutput cdf_forward(Var z, Var f_rgb, Var f_d, const CdfVars& p) {
    check_map(f_rgb, "cdf_forward");
    check_map(f_d, "cdf_forward");
    const auto& ms = f_rgb.shape();
    const int c = ms[0], h = ms[1], w = ms[2];
    if (f_rgb.shape() != f_d.shape())
        throw DimensionError("cdf_forward: modality shape mismatch " +
                             f_rgb.value().shape_str() + " vs " + f_d.value().shape_str());
    const auto& zs = z.shape();
    if (z.value().rank() != 2 || zs[0] != c || zs[1] != 2 * h * w)
        throw DimensionError("cdf_forward: z " + z.value().shape_str() +
                             " does not match maps " + f_rgb.value().shape_str());

    Var w_n = sigmoid(global_avg_pool(conv1x1(z, p.w_gate, p.b_gate))); // C, in (0,1)
    Var one_minus = affine(w_n, -1.0, 1.0);

    Var rgb_flat = map_flat(f_rgb);
    Var d_flat = map_flat(f_d);
    Var rgb2 = affine(add(mul_channels(rgb_flat, w_n), rgb_flat), 0.5, 0.0);
    Var d2 = affine(add(mul_channels(d_flat, one_minus), d_flat), 0.5, 0.0);

    Var agg = conv1x1(concat({relu(rgb2), relu(d2)}, 0), p.w_agg, p.b_agg);

    FusionOutput out;
    out.f_rgb = reshape(rgb2, {c, h, w});
    out.f_d = reshape(d2, {c, h, w});
    out.f_agg = reshape(agg, {c, h, w});
    out.w_n = w_n;
    return out;
}

// ---- baselines -------------------------------------------------------------------

FusionKind parse_fusion_kind(const std::string& name) {
    if (name == "none" || name == "rgb" || name == "rgb-only") return FusionKind::None;
    if (name == "early") return FusionKind::Early;
    if (name == "late") return FusionKind::Late;
    if (name == "intra") return FusionKind::Intra;
    if (name == "inter") return FusionKind::Inter;
    if (name == "iam") return FusionKind::Iam;
    if (name == "iam+cdf") return FusionKind::IamCdf;
    if (name == "cdf") return FusionKind::Cdf;
    throw ContractError("unknown fusion kind: " + name);
}

std::string fusion_kind_name(FusionKind k) {
    switch (k) {
    case FusionKind::None: return "none";
    case FusionKind::Early: return "early";
    case FusionKind::Late: return "late";
    case FusionKind::Intra: return "intra";
    case FusionKind::Inter: return "inter";
    case FusionKind::Iam: return "iam";
    case FusionKind::IamCdf: return "iam+cdf";
    case FusionKind::Cdf: return "cdf";
    }
    throw ContractError("unknown fusion kind enum value");
}

Var merge_concat_conv(Var f_rgb, Var f_d, const MergeVars& p) {
    check_map(f_rgb, "merge_concat_conv");
    check_map(f_d, "merge_concat_conv");
    if (f_rgb.shape() != f_d.shape())
        throw DimensionError("merge_concat_conv: shape mismatch " +
                             f_rgb.value().shape_str() + " vs " + f_d.value().shape_str());
    // copy extents now: recording below may invalidate shape() references
    const int h = f_rgb.shape()[1], w = f_rgb.shape()[2];
    Var stacked = concat({map_flat(f_rgb), map_flat(f_d)}, 0); // 2C x HW
    Var merged = conv1x1(stacked, p.w, p.b);
    return reshape(merged, {merged.shape()[0], h, w});
}

namespace {

// HW x C outputs of single-head scaled dot-product attention
Var attend(Var q, Var k, Var v, int d_k) {
    Var a = softmax_rows(matmul(q, transpose2(k)), 1.0 / std::sqrt(static_cast<double>(d_k)));
    return matmul(a, v);
}

struct StreamQkv {
    Var q, k, v; // HW x C
};

StreamQkv project_stream(Var f, const AttnVars& p) {
    Var flat = map_flat(f);
    return StreamQkv{transpose2(conv1x1(flat, p.w_q, p.b_q)),
                     transpose2(conv1x1(flat, p.w_k, p.b_k)),
                     transpose2(conv1x1(flat, p.w_v, p.b_v))};
}

Var residual_add(Var f, Var attended) {
    const std::vector<int> s = f.shape();
    return add(f, reshape(transpose2(attended), s));
}

} // namespace

StreamPair fuse_intra(Var f_rgb, Var f_d, const AttnVars& rgb, const AttnVars& d) {
    check_map(f_rgb, "fuse_intra");
    check_map(f_d, "fuse_intra");
    const int c = f_rgb.shape()[0];
    StreamQkv pr = project_stream(f_rgb, rgb);
    StreamQkv pd = project_stream(f_d, d);
    return StreamPair{residual_add(f_rgb, attend(pr.q, pr.k, pr.v, c)),
                      residual_add(f_d, attend(pd.q, pd.k, pd.v, c))};
}

StreamPair fuse_inter(Var f_rgb, Var f_d, const AttnVars& rgb, const AttnVars& d) {
    check_map(f_rgb, "fuse_inter");
    check_map(f_d, "fuse_inter");
    const int c = f_rgb.shape()[0];
    StreamQkv pr = project_stream(f_rgb, rgb);
    StreamQkv pd = project_stream(f_d, d);
    // each modality queries the other's keys and values
    return StreamPair{residual_add(f_rgb, attend(pr.q, pd.k, pd.v, c)),
                      residual_add(f_d, attend(pd.q, pr.k, pr.v, c))};
}

BaselineResult fuse_baseline(FusionKind kind, Var f_rgb, Var f_d, const BaselineVars& p) {
    BaselineResult r;
    switch (kind) {
    case FusionKind::Early:
    case FusionKind::Late:
        r.single = true;
        r.merged = merge_concat_conv(f_rgb, f_d, p.merge);
        return r;
    case FusionKind::Intra:
        r.streams = fuse_intra(f_rgb, f_d, p.rgb, p.d);
        return r;
    case FusionKind::Inter:
        r.streams = fuse_inter(f_rgb, f_d, p.rgb, p.d);
        return r;
    default:
        throw ContractError("fuse_baseline: not a baseline kind: " + fusion_kind_name(kind));
    }
}

} // namespace rgbd

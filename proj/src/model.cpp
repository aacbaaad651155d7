#include "rgbd/model.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "rgbd/errors.hpp"

namespace rgbd {

void ModelConfig::validate() const {
    if (input_h < 16 || input_w < 16 || input_h % 16 != 0 || input_w % 16 != 0)
        throw ConfigError("model: input size must be a multiple of 16 and at least 16");
    if (stages.size() != 4) throw ConfigError("model: expected 4 encoder stages");
    for (const StageSpec& s : stages) {
        if (s.channels < 2 || s.channels % 2 != 0)
            throw ConfigError("model: stage channels must be even and >= 2");
        if (s.stride != 2) throw ConfigError("model: stages use stride 2");
    }
    if (insertion_mask[0])
        throw ConfigError("model: no fusion block can follow stage 1");
    if (routing_design < 'A' || routing_design > 'D')
        throw ConfigError(std::string("model: unknown routing design '") + routing_design +
                          "'");
    if (num_queries < 1) throw ConfigError("model: need at least one query");
    if (num_classes < 1) throw ConfigError("model: need at least one class");
}

StageParams StageParams::init(int cin, int cout, Rng& rng) {
    StageParams p;
    p.w = Tensor::uniform_init({cout, cin, 3, 3}, cin * 9, rng);
    p.w.requires_grad = true;
    p.b = Tensor::zeros({cout});
    p.b.requires_grad = true;
    return p;
}

void StageParams::collect(const std::string& prefix, ParamRefs& out) {
    out.emplace_back(prefix + ".w", &w);
    out.emplace_back(prefix + ".b", &b);
}

LinearParams LinearParams::init(int din, int dout, Rng& rng) {
    LinearParams p;
    p.w = Tensor::uniform_init({din, dout}, din, rng);
    p.w.requires_grad = true;
    p.b = Tensor::zeros({dout});
    p.b.requires_grad = true;
    return p;
}

void LinearParams::collect(const std::string& prefix, ParamRefs& out) {
    out.emplace_back(prefix + ".w", &w);
    out.emplace_back(prefix + ".b", &b);
}

namespace {

int head_mid_channels(int c) { return std::max(4, c / 2); }
int head_mask_channels(int c) { return std::max(4, c / 4); }

bool block_uses_iam(FusionKind k) { return k == FusionKind::Iam || k == FusionKind::IamCdf; }
bool block_uses_cdf(FusionKind k) { return k == FusionKind::IamCdf || k == FusionKind::Cdf; }
bool block_uses_attn(FusionKind k) {
    return k == FusionKind::Intra || k == FusionKind::Inter;
}
bool kind_has_blocks(FusionKind k) {
    return block_uses_iam(k) || block_uses_cdf(k) || block_uses_attn(k);
}

} // namespace

ModelParams ModelParams::init(const ModelConfig& cfg) {
    cfg.validate();
    Rng rng(cfg.seed);
    ModelParams p;
    p.cfg = cfg;
    int cin = 3;
    for (const StageSpec& s : cfg.stages) {
        p.rgb_stages.push_back(StageParams::init(cin, s.channels, rng));
        cin = s.channels;
    }
    if (cfg.two_streams()) {
        cin = 3;
        for (const StageSpec& s : cfg.stages) {
            p.d_stages.push_back(StageParams::init(cin, s.channels, rng));
            cin = s.channels;
        }
    }
    if (cfg.fusion_kind == FusionKind::Early) p.early_merge = MergeParams::init(3, 3, rng);
    if (kind_has_blocks(cfg.fusion_kind)) {
        for (int s = 0; s < 4; ++s) {
            if (!cfg.insertion_mask[s]) continue;
            const int c = cfg.stages[s].channels;
            FusionBlockParams b;
            if (block_uses_iam(cfg.fusion_kind)) b.iam = IamParams::init(c, rng);
            if (block_uses_cdf(cfg.fusion_kind)) b.cdf = CdfParams::init(c, rng);
            if (block_uses_attn(cfg.fusion_kind)) {
                b.attn_rgb = AttnParams::init(c, rng);
                b.attn_d = AttnParams::init(c, rng);
            }
            p.blocks.push_back(std::move(b));
        }
    }
    if (cfg.needs_final_merge()) {
        const int c = cfg.final_channels();
        p.final_merge = MergeParams::init(c, c, rng);
    }

    const int c = cfg.final_channels();
    const int hw = (cfg.input_h / 16) * (cfg.input_w / 16);
    p.head.queries = Tensor::uniform_init({cfg.num_queries, c}, c, rng);
    p.head.queries.requires_grad = true;
    p.head.pos = Tensor::uniform_init({hw, c}, c, rng);
    p.head.pos.requires_grad = true;
    p.head.q = LinearParams::init(c, c, rng);
    p.head.k = LinearParams::init(c, c, rng);
    p.head.v = LinearParams::init(c, c, rng);
    p.head.ffn = LinearParams::init(c, c, rng);
    p.head.cls = LinearParams::init(c, cfg.num_classes + 1, rng);
    p.head.box = LinearParams::init(c, 4, rng);
    const int mid = head_mid_channels(c), mc = head_mask_channels(c);
    p.head.mask_embed = LinearParams::init(c, mc, rng);
    p.head.up1 = StageParams::init(c, mid, rng);
    p.head.up2 = StageParams::init(mid, mc, rng);
    p.head.up3 = StageParams::init(mc, mc, rng);
    return p;
}

void ModelParams::collect(ParamRefs& out) {
    for (size_t i = 0; i < rgb_stages.size(); ++i)
        rgb_stages[i].collect("rgb_stage" + std::to_string(i + 1), out);
    for (size_t i = 0; i < d_stages.size(); ++i)
        d_stages[i].collect("d_stage" + std::to_string(i + 1), out);
    if (cfg.fusion_kind == FusionKind::Early) early_merge.collect("early_merge", out);
    int bi = 0;
    for (int s = 0; s < 4 && kind_has_blocks(cfg.fusion_kind); ++s) {
        if (!cfg.insertion_mask[s]) continue;
        FusionBlockParams& b = blocks[bi++];
        const std::string prefix = "block_stage" + std::to_string(s + 1);
        if (block_uses_iam(cfg.fusion_kind)) b.iam.collect(prefix + ".iam", out);
        if (block_uses_cdf(cfg.fusion_kind)) b.cdf.collect(prefix + ".cdf", out);
        if (block_uses_attn(cfg.fusion_kind)) {
            b.attn_rgb.collect(prefix + ".attn_rgb", out);
            b.attn_d.collect(prefix + ".attn_d", out);
        }
    }
    if (cfg.needs_final_merge()) final_merge.collect("final_merge", out);
    out.emplace_back("head.queries", &head.queries);
    out.emplace_back("head.pos", &head.pos);
    head.q.collect("head.q", out);
    head.k.collect("head.k", out);
    head.v.collect("head.v", out);
    head.ffn.collect("head.ffn", out);
    head.cls.collect("head.cls", out);
    head.box.collect("head.box", out);
    head.mask_embed.collect("head.mask_embed", out);
    head.up1.collect("head.up1", out);
    head.up2.collect("head.up2", out);
    head.up3.collect("head.up3", out);
}

ModelVars ModelParams::leaf(Tape& tape) {
    ModelVars v;
    for (StageParams& s : rgb_stages) v.rgb_stages.push_back(StageVars{tape.leaf(s.w), tape.leaf(s.b)});
    for (StageParams& s : d_stages) v.d_stages.push_back(StageVars{tape.leaf(s.w), tape.leaf(s.b)});
    if (cfg.fusion_kind == FusionKind::Early) v.early_merge = early_merge.leaf(tape);
    for (FusionBlockParams& b : blocks) {
        FusionBlockVars bv;
        if (block_uses_iam(cfg.fusion_kind)) bv.iam = b.iam.leaf(tape);
        if (block_uses_cdf(cfg.fusion_kind)) bv.cdf = b.cdf.leaf(tape);
        if (block_uses_attn(cfg.fusion_kind)) {
            bv.attn_rgb = b.attn_rgb.leaf(tape);
            bv.attn_d = b.attn_d.leaf(tape);
        }
        v.blocks.push_back(bv);
    }
    if (cfg.needs_final_merge()) v.final_merge = final_merge.leaf(tape);
    v.head.queries = tape.leaf(head.queries);
    v.head.pos = tape.leaf(head.pos);
    auto lin = [&tape](LinearParams& p) { return LinearVars{tape.leaf(p.w), tape.leaf(p.b)}; };
    v.head.q = lin(head.q);
    v.head.k = lin(head.k);
    v.head.v = lin(head.v);
    v.head.ffn = lin(head.ffn);
    v.head.cls = lin(head.cls);
    v.head.box = lin(head.box);
    v.head.mask_embed = lin(head.mask_embed);
    auto stg = [&tape](StageParams& p) { return StageVars{tape.leaf(p.w), tape.leaf(p.b)}; };
    v.head.up1 = stg(head.up1);
    v.head.up2 = stg(head.up2);
    v.head.up3 = stg(head.up3);
    return v;
}

std::pair<Var, Var> route_features(char design, Var f_rgb_final, Var f_agg_final) {
    switch (design) {
    case 'A': return {f_agg_final, f_agg_final};
    case 'B': return {f_agg_final, f_rgb_final};
    case 'C': return {f_rgb_final, f_agg_final};
    case 'D': return {f_rgb_final, f_rgb_final};
    default:
        throw ContractError(std::string("route_features: unknown design '") + design + "'");
    }
}

namespace {

// mask logits for all queries from one feature map via the shared deconv path
Var mask_logits_from(Var seg_in, Var embed, const HeadVars& h) {
    Var m1 = relu(conv3x3(upsample_nearest2x(seg_in), h.up1.w, h.up1.b, 1, 1));
    Var m2 = relu(conv3x3(upsample_nearest2x(m1), h.up2.w, h.up2.b, 1, 1));
    Var m3 = relu(conv3x3(upsample_nearest2x(m2), h.up3.w, h.up3.b, 1, 1));
    const std::vector<int> s = m3.shape();
    Var flat = reshape(m3, {s[0], s[1] * s[2]});
    return matmul(embed, flat); // [num_queries, grid_h * grid_w]
}

} // namespace

ForwardResult model_forward(Tape& tape, const Tensor& rgb, const Tensor& depth,
                            const ModelConfig& cfg, ModelVars& mv) {
    cfg.validate();
    if (rgb.rank() != 3 || rgb.shape[0] != 3 || rgb.shape[1] != cfg.input_h ||
        rgb.shape[2] != cfg.input_w)
        throw ConfigError("model_forward: rgb input " + rgb.shape_str() +
                          " does not match configured size");
    if (cfg.two_streams() || cfg.fusion_kind == FusionKind::Early)
        if (!rgb.same_shape(depth))
            throw ConfigError("model_forward: depth input " + depth.shape_str() +
                              " does not match rgb " + rgb.shape_str());

    Var x_rgb = tape.leaf(rgb);
    Var x_d = tape.leaf(depth);
    if (cfg.fusion_kind == FusionKind::Early)
        x_rgb = merge_concat_conv(x_rgb, x_d, mv.early_merge);

    const bool two = cfg.two_streams();
    Var stage_agg; // f_agg from a stage-4 aggregating block
    int bi = 0;
    for (int s = 0; s < 4; ++s) {
        x_rgb = relu(conv3x3(x_rgb, mv.rgb_stages[s].w, mv.rgb_stages[s].b,
                             cfg.stages[s].stride, 1));
        if (two)
            x_d = relu(conv3x3(x_d, mv.d_stages[s].w, mv.d_stages[s].b, cfg.stages[s].stride,
                               1));
        if (!two || !cfg.insertion_mask[s] || !kind_has_blocks(cfg.fusion_kind)) continue;

        FusionBlockVars& b = mv.blocks[bi++];
        const std::vector<int> ms = x_rgb.shape();
        const int hw = ms[1] * ms[2];
        switch (cfg.fusion_kind) {
        case FusionKind::Intra: {
            StreamPair p = fuse_intra(x_rgb, x_d, b.attn_rgb, b.attn_d);
            x_rgb = p.f_rgb;
            x_d = p.f_d;
            break;
        }
        case FusionKind::Inter: {
            StreamPair p = fuse_inter(x_rgb, x_d, b.attn_rgb, b.attn_d);
            x_rgb = p.f_rgb;
            x_d = p.f_d;
            break;
        }
        case FusionKind::Iam: {
            // residual re-injection of the mixed features, split per modality
            Var z = iam_forward(x_rgb, x_d, b.iam);
            Var z_rgb = reshape(slice(z, 1, 0, hw), ms);
            Var z_d = reshape(slice(z, 1, hw, hw), ms);
            x_rgb = add(x_rgb, z_rgb);
            x_d = add(x_d, z_d);
            break;
        }
        case FusionKind::IamCdf:
        case FusionKind::Cdf: {
            Var z = cfg.fusion_kind == FusionKind::IamCdf
                        ? iam_forward(x_rgb, x_d, b.iam)
                        : concat_modalities(x_rgb, x_d);
            FusionOutput out = cdf_forward(z, x_rgb, x_d, b.cdf);
            x_rgb = out.f_rgb;
            x_d = out.f_d;
            if (s == 3) stage_agg = out.f_agg;
            break;
        }
        default: break;
        }
    }

    ForwardResult r;
    r.f_rgb_final = x_rgb;
    if (!two) {
        r.f_agg_final = x_rgb;
    } else if (cfg.block_provides_agg()) {
        r.f_agg_final = stage_agg;
    } else {
        r.f_agg_final = merge_concat_conv(x_rgb, x_d, mv.final_merge);
    }

    auto routed = route_features(cfg.routing_design, r.f_rgb_final, r.f_agg_final);
    r.det_in = routed.first;
    r.seg_in = routed.second;

    // query head: single cross-attention layer over the detection map
    HeadVars& h = mv.head;
    const std::vector<int> ds = r.det_in.shape();
    Var det_flat = reshape(r.det_in, {ds[0], ds[1] * ds[2]});
    Var keys = add(transpose2(det_flat), h.pos); // [HW, C]
    Var qm = linear(h.queries, h.q.w, h.q.b);
    Var km = linear(keys, h.k.w, h.k.b);
    Var vm = linear(keys, h.v.w, h.v.b);
    Var attn = softmax_rows(matmul(qm, transpose2(km)),
                            1.0 / std::sqrt(static_cast<double>(ds[0])));
    Var ctx = add(h.queries, matmul(attn, vm));
    Var hidden = relu(linear(ctx, h.ffn.w, h.ffn.b));

    r.pred.class_logits = linear(hidden, h.cls.w, h.cls.b);
    r.pred.boxes = sigmoid(linear(hidden, h.box.w, h.box.b));
    Var embed = linear(hidden, h.mask_embed.w, h.mask_embed.b);
    r.pred.mask_logits = mask_logits_from(r.seg_in, embed, h);
    r.pred.grid_h = ds[1] * 8;
    r.pred.grid_w = ds[2] * 8;

    if (cfg.routing_design == 'D' && r.f_agg_final.id != r.f_rgb_final.id) {
        r.aux_mask_logits = mask_logits_from(r.f_agg_final, embed, h);
        r.has_aux = true;
    }
    return r;
}

Tensor upsample_bilinear(const Tensor& grid, int out_h, int out_w) {
    if (grid.rank() != 2)
        throw DimensionError("upsample_bilinear: expected H x W, got " + grid.shape_str());
    const int h = grid.shape[0], w = grid.shape[1];
    Tensor out = Tensor::zeros({out_h, out_w});
    const double sy = static_cast<double>(h) / out_h;
    const double sx = static_cast<double>(w) / out_w;
    for (int y = 0; y < out_h; ++y) {
        const double fy = std::min(std::max((y + 0.5) * sy - 0.5, 0.0), h - 1.0);
        const int y0 = static_cast<int>(fy);
        const int y1 = std::min(y0 + 1, h - 1);
        const double wy = fy - y0;
        for (int x = 0; x < out_w; ++x) {
            const double fx = std::min(std::max((x + 0.5) * sx - 0.5, 0.0), w - 1.0);
            const int x0 = static_cast<int>(fx);
            const int x1 = std::min(x0 + 1, w - 1);
            const double wx = fx - x0;
            out.at(y, x) = (1 - wy) * ((1 - wx) * grid.at(y0, x0) + wx * grid.at(y0, x1)) +
                           wy * ((1 - wx) * grid.at(y1, x0) + wx * grid.at(y1, x1));
        }
    }
    return out;
}

std::vector<QueryDetection> predict_sample(const ModelConfig& cfg, ModelParams& params,
                                      const Tensor& rgb, const Tensor& depth) {
    Tape tape;
    ModelVars mv = params.leaf(tape);
    ForwardResult r = model_forward(tape, rgb, depth, cfg, mv);
    const Tensor logits = r.pred.class_logits.value();
    const Tensor boxes = r.pred.boxes.value();
    const Tensor masks = r.pred.mask_logits.value();
    const int k = logits.shape[1];
    std::vector<QueryDetection> dets;
    for (int qi = 0; qi < cfg.num_queries; ++qi) {
        double mx = logits.at(qi, 0);
        for (int t = 1; t < k; ++t) mx = std::max(mx, logits.at(qi, t));
        double sum = 0.0;
        std::vector<double> p(k);
        for (int t = 0; t < k; ++t) {
            p[t] = std::exp(logits.at(qi, t) - mx);
            sum += p[t];
        }
        int best = 0;
        for (int t = 1; t < k - 1; ++t)
            if (p[t] > p[best]) best = t;
        QueryDetection d;
        d.category_id = best + 1;
        d.score = p[best] / sum;
        d.box = {boxes.at(qi, 0), boxes.at(qi, 1), boxes.at(qi, 2), boxes.at(qi, 3)};
        Tensor grid(std::vector<int>{r.pred.grid_h, r.pred.grid_w},
                    std::vector<double>(masks.data.begin() +
                                            static_cast<size_t>(qi) * r.pred.grid_h *
                                                r.pred.grid_w,
                                        masks.data.begin() +
                                            static_cast<size_t>(qi + 1) * r.pred.grid_h *
                                                r.pred.grid_w));
        Tensor up = upsample_bilinear(grid, cfg.input_h, cfg.input_w);
        Tensor bin = Tensor::zeros({cfg.input_h, cfg.input_w});
        for (size_t i = 0; i < up.data.size(); ++i) bin.data[i] = up.data[i] > 0.0 ? 1.0 : 0.0;
        d.mask = std::move(bin);
        dets.push_back(std::move(d));
    }
    return dets;
}

// ---- checkpoints -------------------------------------------------------------

namespace {

nlohmann::json config_json(const ModelConfig& cfg) {
    nlohmann::json j;
    j["input_h"] = cfg.input_h;
    j["input_w"] = cfg.input_w;
    nlohmann::json stages = nlohmann::json::array();
    for (const StageSpec& s : cfg.stages)
        stages.push_back({{"channels", s.channels}, {"stride", s.stride}});
    j["stages"] = stages;
    j["fusion_kind"] = fusion_kind_name(cfg.fusion_kind);
    j["insertion_mask"] = cfg.insertion_mask;
    j["routing_design"] = std::string(1, cfg.routing_design);
    j["num_queries"] = cfg.num_queries;
    j["num_classes"] = cfg.num_classes;
    j["seed"] = cfg.seed;
    return j;
}

ModelConfig config_from_json(const nlohmann::json& j) {
    ModelConfig cfg;
    cfg.input_h = j.at("input_h").get<int>();
    cfg.input_w = j.at("input_w").get<int>();
    cfg.stages.clear();
    for (const auto& s : j.at("stages"))
        cfg.stages.push_back(StageSpec{s.at("channels").get<int>(), s.at("stride").get<int>()});
    cfg.fusion_kind = parse_fusion_kind(j.at("fusion_kind").get<std::string>());
    auto mask = j.at("insertion_mask");
    for (int i = 0; i < 4; ++i) cfg.insertion_mask[i] = mask.at(i).get<bool>();
    const std::string rd = j.at("routing_design").get<std::string>();
    if (rd.size() != 1) throw ConfigError("checkpoint: bad routing design");
    cfg.routing_design = rd[0];
    cfg.num_queries = j.at("num_queries").get<int>();
    cfg.num_classes = j.at("num_classes").get<int>();
    cfg.seed = j.at("seed").get<uint64_t>();
    cfg.validate();
    return cfg;
}

} // namespace

std::string model_config_to_json(const ModelConfig& cfg) { return config_json(cfg).dump(2); }

ModelConfig model_config_from_json(const std::string& text) {
    try {
        return config_from_json(nlohmann::json::parse(text));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("model config: ") + e.what());
    }
}

void save_checkpoint(const std::string& dir, ModelParams& params) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    ParamRefs refs;
    params.collect(refs);
    nlohmann::json manifest;
    manifest["config"] = config_json(params.cfg);
    nlohmann::json tensors = nlohmann::json::object();
    for (auto& [name, t] : refs) {
        const std::string file = name + ".tnsr";
        write_tensor((fs::path(dir) / file).string(), *t);
        tensors[name] = file;
    }
    manifest["tensors"] = tensors;
    std::ofstream out(fs::path(dir) / "checkpoint.json");
    if (!out) throw IoError("cannot write checkpoint manifest in " + dir);
    out << manifest.dump(2) << "\n";
}

ModelParams load_checkpoint(const std::string& dir) {
    namespace fs = std::filesystem;
    std::ifstream in(fs::path(dir) / "checkpoint.json");
    if (!in) throw IoError("cannot open checkpoint manifest in " + dir);
    nlohmann::json manifest;
    try {
        in >> manifest;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("checkpoint manifest: ") + e.what());
    }
    try {
        ModelConfig cfg = config_from_json(manifest.at("config"));
        ModelParams params = ModelParams::init(cfg);
        ParamRefs refs;
        params.collect(refs);
        const auto& tensors = manifest.at("tensors");
        for (auto& [name, t] : refs) {
            if (!tensors.contains(name))
                throw FormatError("checkpoint manifest missing tensor " + name);
            Tensor loaded =
                read_tensor((fs::path(dir) / tensors.at(name).get<std::string>()).string());
            if (loaded.shape != t->shape)
                throw FormatError("checkpoint tensor " + name + " has shape " +
                                  loaded.shape_str() + ", expected " + t->shape_str());
            loaded.requires_grad = t->requires_grad;
            *t = std::move(loaded);
        }
        return params;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("checkpoint manifest: ") + e.what());
    }
}

} // namespace rgbd

#include "rgbd/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "rgbd/errors.hpp"
#include "rgbd/fmt.hpp"
#include "rgbd/matching.hpp"

namespace rgbd {

namespace {

constexpr double kAdamBeta1 = 0.9;
constexpr double kAdamBeta2 = 0.999;
constexpr double kAdamEps = 1e-8;

struct SampleLoss {
    double total = 0.0;
    LossBreakdown bd;
};

// forward + set loss for one sample on a fresh tape; leaves params first so
// leaf ids 0..P-1 line up with the collected parameter order
SampleLoss sample_loss(Tape& tape, const ModelConfig& cfg, ModelParams& params,
                       const TrainSample& s, const TrainConfig& tcfg) {
    ModelVars mv = params.leaf(tape);
    const ForwardResult r = model_forward(tape, s.rgb, s.depth, cfg, mv);

    MatchResult match;
    if (!s.gt.empty())
        match = hungarian_match(matching_costs(r.pred, s.gt, tcfg.weights));

    SampleLoss out;
    Var total = set_loss(r.pred, s.gt, match, tcfg.weights, cfg.num_classes, &out.bd);
    if (r.has_aux && tcfg.aux_weight != 0.0) {
        PredictionVars aux = r.pred;
        aux.mask_logits = r.aux_mask_logits;
        LossWeights aw;
        aw.cls = 0.0;
        aw.l1 = 0.0;
        aw.giou = 0.0;
        aw.no_object = 0.0;
        aw.mask = tcfg.weights.mask * tcfg.aux_weight;
        LossBreakdown abd;
        total = add(total, set_loss(aux, s.gt, match, aw, cfg.num_classes, &abd));
        out.bd.mask += abd.mask;
    }
    out.total = total.value().data[0];
    if (std::isfinite(out.total)) tape.backward(total);
    return out;
}

} // namespace

void TrainConfig::validate() const {
    if (epochs < 1) throw ConfigError("train config: epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("train config: batch_size must be >= 1");
    if (!std::isfinite(lr) || lr < 0.0) throw ConfigError("train config: lr must be >= 0");
    if (!std::isfinite(lr_drop_factor) || lr_drop_factor <= 0.0)
        throw ConfigError("train config: lr_drop_factor must be > 0");
    if (aux_weight < 0.0) throw ConfigError("train config: aux_weight must be >= 0");
}

std::vector<TrainSample> samples_from_coco(const CocoDataset& ds, const std::string& dir,
                                           const ModelConfig& cfg) {
    std::vector<TrainSample> out;
    out.reserve(ds.images.size());
    for (const CocoImage& img : ds.images) {
        if (img.width != cfg.input_w || img.height != cfg.input_h)
            throw ConfigError("samples_from_coco: image " + std::to_string(img.id) + " is " +
                              std::to_string(img.width) + "x" + std::to_string(img.height) +
                              ", model expects " + std::to_string(cfg.input_w) + "x" +
                              std::to_string(cfg.input_h));
        const PpmImage rgb = read_ppm(dir + "/" + img.rgb_file);
        const Pgm16Image depth = read_pgm16(dir + "/" + img.depth_file);
        if (rgb.h != img.height || rgb.w != img.width || depth.h != img.height ||
            depth.w != img.width)
            throw ValidationError("samples_from_coco: image " + std::to_string(img.id) +
                                  " files do not match the listed size");
        TrainSample s;
        s.image_id = img.id;
        s.rgb = rgb_tensor(rgb);
        s.depth = depth_tensor(depth);
        for (const CocoAnnotation& ann : ds.annotations) {
            if (ann.image_id != img.id) continue;
            if (ann.category_id < 1 || ann.category_id > cfg.num_classes)
                throw ConfigError("samples_from_coco: category " +
                                  std::to_string(ann.category_id) +
                                  " exceeds num_classes " + std::to_string(cfg.num_classes));
            GtInstance g;
            g.class_index = ann.category_id - 1;
            const double w = img.width, h = img.height;
            g.box = {(ann.bbox[0] + ann.bbox[2] / 2) / w, (ann.bbox[1] + ann.bbox[3] / 2) / h,
                     ann.bbox[2] / w, ann.bbox[3] / h};
            const Mask m = decode_annotation(ds, ann);
            Tensor full = Tensor::zeros({img.height, img.width});
            for (size_t i = 0; i < m.data.size(); ++i) full.data[i] = m.data[i] ? 1.0 : 0.0;
            g.mask_grid = downsample_mask(full, 2);
            s.gt.push_back(std::move(g));
        }
        out.push_back(std::move(s));
    }
    return out;
}

std::vector<Detection> predict_detections(const ModelConfig& cfg, ModelParams& params,
                                          const std::vector<TrainSample>& samples) {
    std::vector<Detection> dets;
    for (const TrainSample& s : samples) {
        for (const QueryDetection& q : predict_sample(cfg, params, s.rgb, s.depth)) {
            Detection d;
            d.image_id = s.image_id;
            d.category_id = q.category_id;
            d.score = q.score;
            const double w = cfg.input_w, h = cfg.input_h;
            d.box = {(q.box[0] - q.box[2] / 2) * w, (q.box[1] - q.box[3] / 2) * h,
                     q.box[2] * w, q.box[3] * h};
            Mask m(cfg.input_h, cfg.input_w);
            for (size_t i = 0; i < m.data.size(); ++i) m.data[i] = q.mask.data[i] != 0.0;
            d.mask = mask_to_rle(m);
            dets.push_back(std::move(d));
        }
    }
    return dets;
}

TrainResult train(const ModelConfig& mcfg, const TrainConfig& tcfg,
                  const std::vector<TrainSample>& train_set,
                  const std::vector<TrainSample>& val_set, const CocoDataset& val_gt,
                  std::ostream* log) {
    mcfg.validate();
    tcfg.validate();
    if (train_set.empty()) throw ContractError("train: empty training set");

    TrainResult result;
    result.params = ModelParams::init(mcfg);
    ParamRefs refs;
    result.params.collect(refs);

    std::vector<Tensor> m, v;
    m.reserve(refs.size());
    v.reserve(refs.size());
    for (const auto& [name, t] : refs) {
        m.push_back(Tensor::zeros(t->shape));
        v.push_back(Tensor::zeros(t->shape));
    }

    Rng rng(tcfg.seed);
    std::vector<int> order(train_set.size());
    std::iota(order.begin(), order.end(), 0);

    long long step = 0;
    for (int epoch = 0; epoch < tcfg.epochs; ++epoch) {
        const bool dropped = 3 * epoch >= 2 * tcfg.epochs && tcfg.epochs > 1;
        const double lr = tcfg.lr * (dropped ? tcfg.lr_drop_factor : 1.0);
        rng.shuffle(order);

        double sum_total = 0.0, sum_cls = 0.0, sum_l1 = 0.0, sum_giou = 0.0, sum_mask = 0.0;
        const int n = static_cast<int>(order.size());
        for (int start = 0, batch = 0; start < n; start += tcfg.batch_size, ++batch) {
            const int count = std::min(tcfg.batch_size, n - start);
            std::vector<Tensor> grads;
            grads.reserve(refs.size());
            for (const auto& [name, t] : refs) grads.push_back(Tensor::zeros(t->shape));

            for (int k = 0; k < count; ++k) {
                const TrainSample& s = train_set[order[start + k]];
                Tape tape;
                SampleLoss sl;
                try {
                    sl = sample_loss(tape, mcfg, result.params, s, tcfg);
                } catch (const NumericError& e) {
                    throw NumericError("train: numeric fault at epoch " + std::to_string(epoch) +
                                       " batch " + std::to_string(batch) + ": " + e.what());
                }
                if (!std::isfinite(sl.total))
                    throw NumericError(
                        "train: non-finite loss at epoch " + std::to_string(epoch) +
                        " batch " + std::to_string(batch) + ": cls=" + format_double(sl.bd.cls) +
                        " l1=" + format_double(sl.bd.l1) + " giou=" +
                        format_double(sl.bd.giou) + " mask=" + format_double(sl.bd.mask));
                sum_total += sl.total;
                sum_cls += sl.bd.cls;
                sum_l1 += sl.bd.l1;
                sum_giou += sl.bd.giou;
                sum_mask += sl.bd.mask;
                for (size_t p = 0; p < refs.size(); ++p) {
                    const Tensor g = tape.grad(static_cast<int>(p));
                    for (size_t i = 0; i < g.data.size(); ++i) grads[p].data[i] += g.data[i];
                }
            }

            double norm_sq = 0.0;
            for (Tensor& g : grads)
                for (double& x : g.data) {
                    x /= count;
                    norm_sq += x * x;
                }
            if (tcfg.grad_clip > 0.0 && norm_sq > tcfg.grad_clip * tcfg.grad_clip) {
                const double scale = tcfg.grad_clip / std::sqrt(norm_sq);
                for (Tensor& g : grads)
                    for (double& x : g.data) x *= scale;
            }

            ++step;
            const double bc1 = 1.0 - std::pow(kAdamBeta1, static_cast<double>(step));
            const double bc2 = 1.0 - std::pow(kAdamBeta2, static_cast<double>(step));
            for (size_t p = 0; p < refs.size(); ++p) {
                Tensor& param = *refs[p].second;
                for (size_t i = 0; i < param.data.size(); ++i) {
                    const double g = grads[p].data[i];
                    m[p].data[i] = kAdamBeta1 * m[p].data[i] + (1.0 - kAdamBeta1) * g;
                    v[p].data[i] = kAdamBeta2 * v[p].data[i] + (1.0 - kAdamBeta2) * g * g;
                    const double mhat = m[p].data[i] / bc1;
                    const double vhat = v[p].data[i] / bc2;
                    param.data[i] -= lr * mhat / (std::sqrt(vhat) + kAdamEps);
                }
            }
        }

        EpochStats es;
        es.epoch = epoch;
        es.loss = sum_total / n;
        es.cls = sum_cls / n;
        es.l1 = sum_l1 / n;
        es.giou = sum_giou / n;
        es.mask = sum_mask / n;
        if (!val_set.empty()) {
            const auto dets = predict_detections(mcfg, result.params, val_set);
            const ApReport report = evaluate(val_gt, dets);
            es.ap_seg50 = report.segm.ap50.value_or(0.0);
            es.ap_det50 = report.bbox.ap50.value_or(0.0);
        }
        result.trace.push_back(es);
        if (log)
            *log << "epoch " << epoch << " loss " << format_double(es.loss) << " ap_seg50 "
                 << format_double(es.ap_seg50) << " ap_det50 " << format_double(es.ap_det50)
                 << "\n";
    }
    return result;
}

std::string trace_to_csv(const std::vector<EpochStats>& trace) {
    std::ostringstream out;
    out << "epoch,loss,cls,l1,giou,mask,ap_seg50,ap_det50\n";
    for (const EpochStats& e : trace)
        out << e.epoch << "," << format_double(e.loss) << "," << format_double(e.cls) << ","
            << format_double(e.l1) << "," << format_double(e.giou) << ","
            << format_double(e.mask) << "," << format_double(e.ap_seg50) << ","
            << format_double(e.ap_det50) << "\n";
    return out.str();
}

} // namespace rgbd

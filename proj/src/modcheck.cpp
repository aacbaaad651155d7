#include <string>

#include "rgbd/errors.hpp"
#include "rgbd/fusion.hpp"
#include "rgbd/gradcheck.hpp"
#include "rgbd/losses.hpp"
#include "rgbd/matching.hpp"

namespace rgbd {

namespace {

constexpr double kStep = 1e-5;

double check_matmul(Rng& rng) {
    Tensor a = Tensor::random_uniform({5, 7}, -1, 1, rng);
    Tensor b = Tensor::random_uniform({7, 3}, -1, 1, rng);
    return gradient_check(
        [](Tape&, const std::vector<Var>& v) { return sum_all(matmul(v[0], v[1])); },
        {a, b}, kStep);
}

double check_softmax_rows(Rng& rng) {
    Tensor m = Tensor::random_uniform({4, 5}, -1, 1, rng);
    Tensor w = Tensor::random_uniform({4, 5}, -2, 2, rng);
    return gradient_check(
        [w](Tape& t, const std::vector<Var>& v) {
            // weighted reduction so the gradient is not trivially zero
            return sum_all(mul(softmax_rows(v[0], 0.7), t.leaf(w)));
        },
        {m}, kStep);
}

double check_conv1x1(Rng& rng) {
    Tensor f = Tensor::random_uniform({3, 4}, -1, 1, rng);
    Tensor w = Tensor::random_uniform({2, 3}, -1, 1, rng);
    Tensor b = Tensor::random_uniform({2}, -1, 1, rng);
    return gradient_check(
        [](Tape&, const std::vector<Var>& v) {
            return sum_all(sigmoid(conv1x1(v[0], v[1], v[2])));
        },
        {f, w, b}, kStep);
}

double check_iam(Rng& rng) {
    const int c = 4;
    IamParams p = IamParams::init(c, rng);
    std::vector<Tensor> inputs = {Tensor::random_uniform({c, 2, 2}, -1, 1, rng),
                                  Tensor::random_uniform({c, 2, 2}, -1, 1, rng),
                                  p.w_q, p.b_q, p.w_k, p.b_k,
                                  p.w_v, p.b_v, p.w_out, p.b_out};
    return gradient_check(
        [c](Tape&, const std::vector<Var>& v) {
            IamVars iv{v[2], v[3], v[4], v[5], v[6], v[7], v[8], v[9], c};
            return sum_all(iam_forward(v[0], v[1], iv));
        },
        inputs, kStep);
}

double check_cdf(Rng& rng) {
    const int c = 4, h = 2, w = 2;
    CdfParams p = CdfParams::init(c, rng);
    std::vector<Tensor> inputs = {Tensor::random_uniform({c, 2 * h * w}, -1, 1, rng),
                                  Tensor::random_uniform({c, h, w}, -1, 1, rng),
                                  Tensor::random_uniform({c, h, w}, -1, 1, rng),
                                  p.w_gate, p.b_gate, p.w_agg, p.b_agg};
    return gradient_check(
        [](Tape&, const std::vector<Var>& v) {
            CdfVars cv{v[3], v[4], v[5], v[6]};
            FusionOutput out = cdf_forward(v[0], v[1], v[2], cv);
            return add(add(sum_all(out.f_rgb), sum_all(out.f_d)),
                       add(sum_all(out.f_agg), sum_all(out.w_n)));
        },
        inputs, kStep);
}

double check_set_loss(Rng& rng) {
    const int q = 3, num_classes = 2;
    Tensor logits = Tensor::random_uniform({q, num_classes + 1}, -1, 1, rng);
    Tensor boxes = Tensor::random_uniform({q, 4}, 0.25, 0.75, rng);
    Tensor mlogits = Tensor::random_uniform({q, 4}, -1, 1, rng);
    std::vector<GtInstance> gt(2);
    gt[0].class_index = 0;
    gt[0].box = {rng.uniform(0.3, 0.5), rng.uniform(0.3, 0.5), 0.3, 0.3};
    gt[0].mask_grid = Tensor::random_uniform({2, 2}, 0, 1, rng);
    gt[1].class_index = 1;
    gt[1].box = {rng.uniform(0.5, 0.7), rng.uniform(0.5, 0.7), 0.2, 0.4};
    gt[1].mask_grid = Tensor::random_uniform({2, 2}, 0, 1, rng);
    MatchResult match;
    match.assignment = {2, 0}; // fixed across probes so the loss is smooth
    LossWeights w;
    return gradient_check(
        [&](Tape&, const std::vector<Var>& v) {
            PredictionVars pred;
            pred.class_logits = v[0];
            pred.boxes = v[1];
            pred.mask_logits = v[2];
            pred.grid_h = 2;
            pred.grid_w = 2;
            return set_loss(pred, gt, match, w, num_classes, nullptr);
        },
        {logits, boxes, mlogits}, kStep);
}

} // namespace

std::vector<std::string> gradcheck_module_names() {
    return {"matmul", "softmax_rows", "conv1x1", "iam", "cdf", "set_loss"};
}

double gradcheck_module(const std::string& name, uint64_t seed) {
    Rng rng(seed);
    if (name == "matmul") return check_matmul(rng);
    if (name == "softmax_rows") return check_softmax_rows(rng);
    if (name == "conv1x1") return check_conv1x1(rng);
    if (name == "iam") return check_iam(rng);
    if (name == "cdf") return check_cdf(rng);
    if (name == "set_loss") return check_set_loss(rng);
    throw ContractError("gradcheck: unknown module '" + name + "'");
}

} // namespace rgbd

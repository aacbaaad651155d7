#include "rgbd/losses.hpp"

#include <algorithm>
#include <cmath>

#include "rgbd/errors.hpp"

namespace rgbd {

namespace {

struct Xyxy {
    double x1, y1, x2, y2;
};

Xyxy to_xyxy(const std::array<double, 4>& b) {
    return Xyxy{b[0] - b[2] / 2, b[1] - b[3] / 2, b[0] + b[2] / 2, b[1] + b[3] / 2};
}

Var scalar_const(Tape& tape, double v) { return tape.leaf(Tensor(std::vector<int>{1, 1}, {v})); }

} // namespace

double giou_value(const std::array<double, 4>& a, const std::array<double, 4>& b) {
    const Xyxy p = to_xyxy(a), g = to_xyxy(b);
    const double iw = std::max(0.0, std::min(p.x2, g.x2) - std::max(p.x1, g.x1));
    const double ih = std::max(0.0, std::min(p.y2, g.y2) - std::max(p.y1, g.y1));
    const double inter = iw * ih;
    const double uni = (p.x2 - p.x1) * (p.y2 - p.y1) + (g.x2 - g.x1) * (g.y2 - g.y1) - inter;
    const double hull =
        (std::max(p.x2, g.x2) - std::min(p.x1, g.x1)) * (std::max(p.y2, g.y2) - std::min(p.y1, g.y1));
    if (uni <= 0.0 || hull <= 0.0) throw NumericError("giou: degenerate boxes");
    return inter / uni - (hull - uni) / hull;
}

Var giou_of_row(Var box_row, const std::array<double, 4>& gt) {
    if (box_row.value().rank() != 2 || box_row.shape()[0] != 1 || box_row.shape()[1] != 4)
        throw DimensionError("giou_of_row: expected a 1x4 box row, got " +
                             box_row.value().shape_str());
    Tape& tape = *box_row.tape;
    const Xyxy g = to_xyxy(gt);
    Var cx = slice(box_row, 1, 0, 1);
    Var cy = slice(box_row, 1, 1, 1);
    Var w = slice(box_row, 1, 2, 1);
    Var h = slice(box_row, 1, 3, 1);
    Var px1 = sub(cx, scale(w, 0.5));
    Var px2 = add(cx, scale(w, 0.5));
    Var py1 = sub(cy, scale(h, 0.5));
    Var py2 = add(cy, scale(h, 0.5));

    auto c = [&](double v) { return Tensor(std::vector<int>{1, 1}, {v}); };
    Var iw = relu(sub(emin_const(px2, c(g.x2)), emax_const(px1, c(g.x1))));
    Var ih = relu(sub(emin_const(py2, c(g.y2)), emax_const(py1, c(g.y1))));
    Var inter = mul(iw, ih);
    Var area_p = mul(w, h);
    Var area_g = scalar_const(tape, (g.x2 - g.x1) * (g.y2 - g.y1));
    Var uni = sub(add(area_p, area_g), inter);
    Var hull = mul(sub(emax_const(px2, c(g.x2)), emin_const(px1, c(g.x1))),
                   sub(emax_const(py2, c(g.y2)), emin_const(py1, c(g.y1))));
    return sub(divide(inter, uni), divide(sub(hull, uni), hull));
}

Tensor matching_costs(const PredictionVars& pred, const std::vector<GtInstance>& gt,
                      const LossWeights& w) {
    const Tensor& logits = pred.class_logits.value();
    const Tensor& boxes = pred.boxes.value();
    const int q = logits.shape[0], k = logits.shape[1];
    const int n = static_cast<int>(gt.size());
    if (n == 0) throw ContractError("matching_costs: no GT instances");
    Tensor cost = Tensor::zeros({n, q});
    for (int j = 0; j < q; ++j) {
        // softmax probabilities of this query's class row
        double mx = logits.at(j, 0);
        for (int t = 1; t < k; ++t) mx = std::max(mx, logits.at(j, t));
        double sum = 0.0;
        std::vector<double> p(k);
        for (int t = 0; t < k; ++t) {
            p[t] = std::exp(logits.at(j, t) - mx);
            sum += p[t];
        }
        for (int t = 0; t < k; ++t) p[t] /= sum;
        std::array<double, 4> pb{boxes.at(j, 0), boxes.at(j, 1), boxes.at(j, 2),
                                 boxes.at(j, 3)};
        for (int g = 0; g < n; ++g) {
            if (gt[g].class_index < 0 || gt[g].class_index >= k - 1)
                throw ContractError("matching_costs: GT class out of range");
            double l1 = 0.0;
            for (int t = 0; t < 4; ++t) l1 += std::abs(pb[t] - gt[g].box[t]);
            cost.at(g, j) = -p[gt[g].class_index] + w.l1 * l1 +
                            w.giou * (1.0 - giou_value(pb, gt[g].box));
        }
    }
    return cost;
}

Var mask_loss_row(Var logits_row, const Tensor& target) {
    if (logits_row.value().rank() != 2 || logits_row.shape()[0] != 1)
        throw DimensionError("mask_loss_row: expected a 1xG row, got " +
                             logits_row.value().shape_str());
    Tensor flat(std::vector<int>{1, static_cast<int>(target.numel())}, target.data);
    if (flat.shape[1] != logits_row.shape()[1])
        throw DimensionError("mask_loss_row: target size " + target.shape_str() +
                             " does not match logits " + logits_row.value().shape_str());
    Tape& tape = *logits_row.tape;
    Var bce = bce_with_logits(logits_row, flat);
    Var probs = sigmoid(logits_row);
    Var tgt = tape.leaf(flat);
    Var inter = sum_all(mul(probs, tgt));
    double tsum = 0.0;
    for (double v : flat.data) tsum += v;
    // dice with +1 smoothing: 1 - (2*inter + 1) / (psum + tsum + 1)
    Var denom = affine(sum_all(probs), 1.0, tsum + 1.0);
    Var dice = affine(divide(affine(inter, 2.0, 1.0), denom), -1.0, 1.0);
    return add(bce, dice);
}

Var set_loss(const PredictionVars& pred, const std::vector<GtInstance>& gt,
             const MatchResult& match, const LossWeights& w, int num_classes,
             LossBreakdown* breakdown) {
    Tape& tape = *pred.class_logits.tape;
    const int q = pred.class_logits.shape()[0];
    const int k = pred.class_logits.shape()[1];
    if (k != num_classes + 1)
        throw DimensionError("set_loss: logits width " + std::to_string(k) +
                             " does not match num_classes " + std::to_string(num_classes));
    const int n = static_cast<int>(gt.size());
    if (static_cast<int>(match.assignment.size()) != n)
        throw ContractError("set_loss: match size does not cover GT");

    std::vector<int> targets(q, num_classes); // default: "no object"
    std::vector<double> row_weights(q, w.no_object);
    std::vector<char> taken(q, 0);
    for (int g = 0; g < n; ++g) {
        const int qi = match.assignment[g];
        if (qi < 0 || qi >= q || taken[qi])
            throw ContractError("set_loss: invalid or non-injective match");
        taken[qi] = 1;
        if (gt[g].class_index < 0 || gt[g].class_index >= num_classes)
            throw ContractError("set_loss: GT class out of range");
        targets[qi] = gt[g].class_index;
        row_weights[qi] = 1.0;
    }
    Var cls = softmax_xent(pred.class_logits, targets, row_weights);

    Var total = scale(cls, w.cls);
    double l1_val = 0.0, giou_val = 0.0, mask_val = 0.0;
    if (n > 0) {
        Var l1_sum = tape.leaf(Tensor::zeros({1}));
        Var giou_sum = tape.leaf(Tensor::zeros({1}));
        Var mask_sum = tape.leaf(Tensor::zeros({1}));
        for (int g = 0; g < n; ++g) {
            const int qi = match.assignment[g];
            Var box_row = slice(pred.boxes, 0, qi, 1);
            Tensor gt_box(std::vector<int>{1, 4},
                          {gt[g].box[0], gt[g].box[1], gt[g].box[2], gt[g].box[3]});
            l1_sum = add(l1_sum, l1_to_target(box_row, gt_box));
            Var penalty = affine(giou_of_row(box_row, gt[g].box), -1.0, 1.0); // 1 - GIoU
            giou_sum = add(giou_sum, reshape(penalty, {1}));
            Var mrow = slice(pred.mask_logits, 0, qi, 1);
            mask_sum = add(mask_sum, mask_loss_row(mrow, gt[g].mask_grid));
        }
        const double inv_n = 1.0 / n;
        Var l1_term = scale(l1_sum, w.l1 * inv_n);
        Var giou_term = scale(giou_sum, w.giou * inv_n);
        Var mask_term = scale(mask_sum, w.mask * inv_n);
        total = add(add(total, l1_term), add(giou_term, mask_term));
        l1_val = l1_term.value().data[0];
        giou_val = giou_term.value().data[0];
        mask_val = mask_term.value().data[0];
    }
    if (breakdown) {
        breakdown->cls = w.cls * cls.value().data[0];
        breakdown->l1 = l1_val;
        breakdown->giou = giou_val;
        breakdown->mask = mask_val;
        breakdown->total = total.value().data[0];
    }
    return total;
}

Tensor downsample_mask(const Tensor& mask, int factor) {
    if (mask.rank() != 2)
        throw DimensionError("downsample_mask: expected H x W, got " + mask.shape_str());
    if (factor < 1 || mask.shape[0] % factor != 0 || mask.shape[1] % factor != 0)
        throw ContractError("downsample_mask: factor must divide both extents");
    const int h = mask.shape[0] / factor, w = mask.shape[1] / factor;
    Tensor out = Tensor::zeros({h, w});
    const double inv = 1.0 / (factor * factor);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double s = 0.0;
            for (int dy = 0; dy < factor; ++dy)
                for (int dx = 0; dx < factor; ++dx)
                    s += mask.at(y * factor + dy, x * factor + dx);
            out.at(y, x) = s * inv;
        }
    return out;
}

} // namespace rgbd

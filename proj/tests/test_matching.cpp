#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "rgbd/errors.hpp"
#include "rgbd/gradcheck.hpp"
#include "rgbd/losses.hpp"
#include "rgbd/matching.hpp"

using namespace rgbd;

namespace {

// brute force over injective assignments in lexicographic order; first strict
// improvement wins, so ties resolve to the lexicographically smallest
void enumerate(const Tensor& cost, int g, std::vector<char>& used, std::vector<int>& cur,
               double acc, double& best, std::vector<int>& best_assign) {
    const int n = cost.shape[0], m = cost.shape[1];
    if (g == n) {
        if (acc < best - 1e-12) {
            best = acc;
            best_assign = cur;
        }
        return;
    }
    for (int q = 0; q < m; ++q) {
        if (used[q]) continue;
        used[q] = 1;
        cur[g] = q;
        enumerate(cost, g + 1, used, cur, acc + cost.at(g, q), best, best_assign);
        used[q] = 0;
    }
}

std::vector<int> brute_force(const Tensor& cost, double* total) {
    std::vector<char> used(cost.shape[1], 0);
    std::vector<int> cur(cost.shape[0], -1), best_assign;
    double best = 1e300;
    enumerate(cost, 0, used, cur, 0.0, best, best_assign);
    if (total) *total = best;
    return best_assign;
}

} // namespace

TEST_CASE("hungarian diagonal dominance") {
    MatchResult r = hungarian_match(Tensor::from({2, 2}, {1, 9, 9, 1}));
    CHECK(r.assignment == std::vector<int>{0, 1});
    CHECK(r.total_cost == 2.0);
}

TEST_CASE("hungarian single GT picks argmin column") {
    MatchResult r = hungarian_match(Tensor::from({1, 3}, {5, 2, 7}));
    CHECK(r.assignment == std::vector<int>{1});
    CHECK(r.total_cost == 2.0);
}

TEST_CASE("hungarian ties break to the lowest query index") {
    MatchResult r = hungarian_match(Tensor::from({1, 3}, {4, 4, 4}));
    CHECK(r.assignment == std::vector<int>{0});
    // two optimal completions: (0,1)/(1,0); lexicographic pick is 0->0, 1->1
    MatchResult r2 = hungarian_match(Tensor::from({2, 2}, {1, 1, 1, 1}));
    CHECK(r2.assignment == std::vector<int>{0, 1});
    // forcing gt0 to the later column: 0->1 strictly cheaper overall
    MatchResult r3 = hungarian_match(Tensor::from({2, 2}, {5, 1, 5, 9}));
    CHECK(r3.assignment == std::vector<int>{1, 0});
}

TEST_CASE("hungarian contract errors") {
    CHECK_THROWS_AS(hungarian_match(Tensor::from({2, 1}, {1, 2})), ContractError);
    CHECK_THROWS_AS(hungarian_match(Tensor::from({2}, {1, 2})), DimensionError);
    CHECK_THROWS_AS(
        hungarian_match(Tensor::from({1, 2}, {std::nan(""), 1})), NumericError);
}

TEST_CASE("hungarian equals enumeration on random instances") {
    Rng rng(21);
    for (int trial = 0; trial < 60; ++trial) {
        const int n = rng.uniform_int(1, 5);
        const int m = rng.uniform_int(n, 7);
        Tensor cost = Tensor::random_uniform({n, m}, -4, 4, rng);
        MatchResult got = hungarian_match(cost);
        double want_total = 0;
        std::vector<int> want = brute_force(cost, &want_total);
        CHECK(got.assignment == want);
        CHECK(got.total_cost == doctest::Approx(want_total).epsilon(1e-10));
        // injectivity and cost consistency
        std::vector<int> sorted = got.assignment;
        std::sort(sorted.begin(), sorted.end());
        CHECK(std::adjacent_find(sorted.begin(), sorted.end()) == sorted.end());
        double s = 0;
        for (int g = 0; g < n; ++g) s += cost.at(g, got.assignment[g]);
        CHECK(s == doctest::Approx(got.total_cost).epsilon(1e-12));
    }
    // integer costs exercise exact ties against the oracle
    Rng rng2(22);
    for (int trial = 0; trial < 40; ++trial) {
        const int n = rng2.uniform_int(1, 4);
        const int m = rng2.uniform_int(n, 6);
        Tensor cost = Tensor::zeros({n, m});
        for (double& v : cost.data) v = rng2.uniform_int(0, 3);
        MatchResult got = hungarian_match(cost);
        CHECK(got.assignment == brute_force(cost, nullptr));
    }
}

TEST_CASE("giou hand-computed values") {
    // identical boxes
    std::array<double, 4> a{0.5, 0.5, 1.0, 1.0};
    CHECK(giou_value(a, a) == 1.0);
    // disjoint unit boxes, hull area 3: GIoU = 0 - 1/3
    std::array<double, 4> far{2.5, 0.5, 1.0, 1.0};
    CHECK(giou_value(a, far) == doctest::Approx(-1.0 / 3.0).epsilon(1e-12));
    // containment: penalty vanishes, GIoU == IoU
    std::array<double, 4> inner{0.5, 0.5, 0.5, 0.5};
    CHECK(giou_value(a, inner) == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("giou stays in (-1, 1] on random boxes") {
    Rng rng(23);
    for (int t = 0; t < 300; ++t) {
        std::array<double, 4> a{rng.uniform(0, 4), rng.uniform(0, 4), rng.uniform(0.05, 2),
                                rng.uniform(0.05, 2)};
        std::array<double, 4> b{rng.uniform(0, 4), rng.uniform(0, 4), rng.uniform(0.05, 2),
                                rng.uniform(0.05, 2)};
        double v = giou_value(a, b);
        CHECK(v > -1.0);
        CHECK(v <= 1.0);
    }
}

TEST_CASE("giou_of_row matches giou_value and differentiates") {
    Rng rng(24);
    for (int t = 0; t < 20; ++t) {
        std::array<double, 4> a{rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8),
                                rng.uniform(0.1, 0.5), rng.uniform(0.1, 0.5)};
        std::array<double, 4> g{rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8),
                                rng.uniform(0.1, 0.5), rng.uniform(0.1, 0.5)};
        Tape tape;
        Var row = tape.leaf(Tensor(std::vector<int>{1, 4}, {a[0], a[1], a[2], a[3]}));
        CHECK(giou_of_row(row, g).value().data[0] ==
              doctest::Approx(giou_value(a, g)).epsilon(1e-12));
    }
    // gradient through the compositional form
    Tensor box(std::vector<int>{1, 4}, {0.43, 0.57, 0.31, 0.24});
    std::array<double, 4> g{0.5, 0.5, 0.4, 0.4};
    double err = gradient_check(
        [g](Tape&, const std::vector<Var>& v) {
            return reshape(giou_of_row(v[0], g), {1});
        },
        {box}, 1e-5);
    CHECK(err <= 1e-5);
}

TEST_CASE("set_loss perfect prediction has zero box and mask terms") {
    // one GT, 3 queries; query 1 predicts it exactly and confidently
    Tape tape;
    const int num_classes = 2;
    Tensor logits = Tensor::zeros({3, 3});
    logits.at(0, 2) = 30.0; // no-object
    logits.at(1, 1) = 30.0; // class 1, confident
    logits.at(2, 2) = 30.0;
    Tensor boxes = Tensor::full({3, 4}, 0.5);
    GtInstance gt;
    gt.class_index = 1;
    gt.box = {0.5, 0.5, 0.5, 0.5};
    for (int i = 0; i < 4; ++i) boxes.at(1, i) = gt.box[i];
    gt.mask_grid = Tensor::zeros({2, 2});
    gt.mask_grid.at(0, 0) = 1.0;
    gt.mask_grid.at(0, 1) = 1.0;
    Tensor mlogits = Tensor::full({3, 4}, -40.0);
    mlogits.at(1, 0) = 40.0;
    mlogits.at(1, 1) = 40.0;

    PredictionVars pred;
    pred.class_logits = tape.leaf(logits);
    pred.boxes = tape.leaf(boxes);
    pred.mask_logits = tape.leaf(mlogits);
    pred.grid_h = 2;
    pred.grid_w = 2;
    MatchResult match;
    match.assignment = {1};
    LossBreakdown parts;
    LossWeights w;
    set_loss(pred, {gt}, match, w, num_classes, &parts);
    CHECK(parts.l1 == 0.0);
    CHECK(parts.giou == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(parts.cls == doctest::Approx(0.0).epsilon(1e-9));
    // dice smoothing leaves a tiny floor; BCE at +-40 logits is ~0
    CHECK(parts.mask <= 1e-3);
    CHECK(parts.total <= 1e-3);
}

TEST_CASE("set_loss disjoint unit boxes weigh in at 4/3 per giou unit") {
    Tape tape;
    // normalized frame: pred box (0,1)x(0,1) vs gt (2,3)x(0,1), hull 3 units
    Tensor boxes(std::vector<int>{1, 4}, {0.5, 0.5, 1.0, 1.0});
    Tensor logits = Tensor::zeros({1, 2});
    Tensor mlogits = Tensor::zeros({1, 1});
    GtInstance gt;
    gt.class_index = 0;
    gt.box = {2.5, 0.5, 1.0, 1.0};
    gt.mask_grid = Tensor::zeros({1, 1});
    PredictionVars pred;
    pred.class_logits = tape.leaf(logits);
    pred.boxes = tape.leaf(boxes);
    pred.mask_logits = tape.leaf(mlogits);
    pred.grid_h = 1;
    pred.grid_w = 1;
    MatchResult match;
    match.assignment = {0};
    LossWeights w;
    w.cls = 0.0;
    w.l1 = 0.0;
    w.mask = 0.0;
    w.giou = 1.0;
    LossBreakdown parts;
    set_loss(pred, {gt}, match, w, 1, &parts);
    CHECK(parts.giou == doctest::Approx(4.0 / 3.0).epsilon(1e-12));
    CHECK(parts.total == doctest::Approx(4.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("set_loss is invariant to GT permutation") {
    Rng rng(25);
    Tape tape;
    const int q = 5, num_classes = 3;
    PredictionVars pred;
    pred.class_logits = tape.leaf(Tensor::random_uniform({q, num_classes + 1}, -1, 1, rng));
    Tensor boxes = Tensor::random_uniform({q, 4}, 0.2, 0.8, rng);
    pred.boxes = tape.leaf(boxes);
    pred.mask_logits = tape.leaf(Tensor::random_uniform({q, 4}, -1, 1, rng));
    pred.grid_h = 2;
    pred.grid_w = 2;

    std::vector<GtInstance> gt(3);
    for (int i = 0; i < 3; ++i) {
        gt[i].class_index = i;
        gt[i].box = {rng.uniform(0.3, 0.7), rng.uniform(0.3, 0.7), rng.uniform(0.1, 0.3),
                     rng.uniform(0.1, 0.3)};
        gt[i].mask_grid = Tensor::random_uniform({2, 2}, 0, 1, rng);
    }
    LossWeights w;
    auto loss_of = [&](const std::vector<GtInstance>& order) {
        MatchResult m = hungarian_match(matching_costs(pred, order, w));
        LossBreakdown parts;
        set_loss(pred, order, m, w, num_classes, &parts);
        return parts.total;
    };
    double base = loss_of(gt);
    std::vector<GtInstance> swapped = {gt[2], gt[0], gt[1]};
    CHECK(loss_of(swapped) == doctest::Approx(base).epsilon(1e-12));
}

TEST_CASE("set_loss gradient vs finite differences") {
    Rng rng(26);
    const int q = 3, num_classes = 2;
    Tensor logits = Tensor::random_uniform({q, num_classes + 1}, -1, 1, rng);
    Tensor boxes = Tensor::random_uniform({q, 4}, 0.25, 0.75, rng);
    Tensor mlogits = Tensor::random_uniform({q, 4}, -1, 1, rng);
    std::vector<GtInstance> gt(2);
    gt[0].class_index = 0;
    gt[0].box = {0.4, 0.4, 0.3, 0.3};
    gt[0].mask_grid = Tensor::from({2, 2}, {1, 0, 0.5, 0});
    gt[1].class_index = 1;
    gt[1].box = {0.6, 0.6, 0.2, 0.4};
    gt[1].mask_grid = Tensor::from({2, 2}, {0, 1, 0, 0.25});
    MatchResult match;
    match.assignment = {2, 0}; // fixed across probes so the loss is smooth
    LossWeights w;
    double err = gradient_check(
        [&](Tape&, const std::vector<Var>& v) {
            PredictionVars pred;
            pred.class_logits = v[0];
            pred.boxes = v[1];
            pred.mask_logits = v[2];
            pred.grid_h = 2;
            pred.grid_w = 2;
            return set_loss(pred, gt, match, w, num_classes, nullptr);
        },
        {logits, boxes, mlogits}, 1e-5);
    CHECK(err <= 1e-5);
}

TEST_CASE("downsample_mask block means") {
    Tensor m = Tensor::from({2, 4}, {1, 1, 0, 0, 1, 0, 0, 0});
    Tensor d = downsample_mask(m, 2);
    REQUIRE(d.shape == std::vector<int>{1, 2});
    CHECK(d.at(0, 0) == 0.75);
    CHECK(d.at(0, 1) == 0.0);
    CHECK_THROWS_AS(downsample_mask(m, 3), ContractError);
}

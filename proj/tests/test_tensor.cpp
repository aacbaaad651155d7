#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>

#include "rgbd/errors.hpp"
#include "rgbd/gradcheck.hpp"
#include "rgbd/tape.hpp"
#include "rgbd/tensor.hpp"

using namespace rgbd;

namespace {

// random values kept away from kinks (relu at 0, min/max ties)
Tensor random_away_from_zero(std::vector<int> shape, Rng& rng) {
    Tensor t = Tensor::zeros(shape);
    for (double& v : t.data) {
        double m = rng.uniform(0.05, 1.0);
        v = rng.uniform() < 0.5 ? -m : m;
    }
    return t;
}

} // namespace

TEST_CASE("tensor construction and accessors") {
    Tensor t = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
    CHECK(t.rank() == 2);
    CHECK(t.numel() == 6);
    CHECK(t.size(0) == 2);
    CHECK(t.size(1) == 3);
    CHECK(t.at(1, 2) == 6.0);
    CHECK_THROWS_AS(Tensor({2, 3}, {1.0, 2.0}), DimensionError);
    CHECK_THROWS_AS(Tensor({0, 3}, {}), DimensionError);
}

TEST_CASE("rng determinism") {
    Rng a(42), b(42);
    for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
    Rng c(7);
    for (int i = 0; i < 1000; ++i) {
        double u = c.uniform();
        CHECK(u >= 0.0);
        CHECK(u < 1.0);
    }
}

TEST_CASE("matmul identity and dot product") {
    Tape tape;
    Var i2 = tape.leaf(Tensor::from({2, 2}, {1, 0, 0, 1}));
    Var m = tape.leaf(Tensor::from({2, 2}, {3, 4, 5, 6}));
    Var out = matmul(i2, m);
    CHECK(out.value().data == std::vector<double>{3, 4, 5, 6});

    Var a = tape.leaf(Tensor::from({1, 2}, {1, 2}));
    Var b = tape.leaf(Tensor::from({2, 1}, {3, 4}));
    CHECK(matmul(a, b).value().data[0] == 11.0);
}

TEST_CASE("matmul shape mismatch names both shapes") {
    Tape tape;
    Var a = tape.leaf(Tensor::zeros({2, 3}));
    Var b = tape.leaf(Tensor::zeros({4, 2}));
    try {
        matmul(a, b);
        FAIL("expected DimensionError");
    } catch (const DimensionError& e) {
        std::string msg = e.what();
        CHECK(msg.find("[2x3]") != std::string::npos);
        CHECK(msg.find("[4x2]") != std::string::npos);
    }
}

TEST_CASE("matmul gradient vs finite differences") {
    Rng rng(1);
    Tensor a = Tensor::random_uniform({5, 7}, -1, 1, rng);
    Tensor b = Tensor::random_uniform({7, 3}, -1, 1, rng);
    double err = gradient_check(
        [](Tape&, const std::vector<Var>& v) { return sum_all(matmul(v[0], v[1])); },
        {a, b}, 1e-5);
    CHECK(err <= 1e-6);
}

TEST_CASE("matmul backward closed form") {
    // dA = G·Bᵀ, dB = Aᵀ·G with G = ones for a sum reduction
    Tape tape;
    Tensor at = Tensor::from({2, 2}, {1, 2, 3, 4});
    Tensor bt = Tensor::from({2, 2}, {5, 6, 7, 8});
    at.requires_grad = true;
    bt.requires_grad = true;
    Var a = tape.leaf(at);
    Var b = tape.leaf(bt);
    tape.backward(sum_all(matmul(a, b)));
    Tensor g = Tensor::full({2, 2}, 1.0);
    Tensor da = mat_mul(g, mat_transpose(bt));
    Tensor db = mat_mul(mat_transpose(at), g);
    CHECK(tape.grad(a).data == da.data);
    CHECK(tape.grad(b).data == db.data);
}

TEST_CASE("softmax_rows symmetry and stability") {
    Tape tape;
    Var x = tape.leaf(Tensor::from({1, 2}, {0, 0}));
    Tensor y = softmax_rows(x, 1.0).value();
    CHECK(y.data[0] == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(y.data[1] == doctest::Approx(0.5).epsilon(1e-15));

    Var big = tape.leaf(Tensor::from({1, 2}, {1000, 0}));
    Tensor yb = softmax_rows(big, 1.0).value();
    CHECK(std::abs(yb.data[0] - 1.0) <= 1e-12);
    CHECK(std::abs(yb.data[1] - 0.0) <= 1e-12);
    CHECK(yb.all_finite());
}

TEST_CASE("softmax_rows row sums at large magnitude") {
    Rng rng(2);
    Tape tape;
    Var x = tape.leaf(Tensor::random_uniform({6, 5}, -1e3, 1e3, rng));
    Tensor y = softmax_rows(x, 1.0).value();
    for (int i = 0; i < 6; ++i) {
        double s = 0;
        for (int j = 0; j < 5; ++j) {
            CHECK(y.at(i, j) >= 0.0);
            s += y.at(i, j);
        }
        CHECK(std::abs(s - 1.0) <= 1e-12);
    }
}

TEST_CASE("softmax_rows rejects bad input") {
    Tape tape;
    Var nanv = tape.leaf(Tensor::from({1, 2}, {std::nan(""), 0}));
    CHECK_THROWS_AS(softmax_rows(nanv, 1.0), NumericError);
    Var ok = tape.leaf(Tensor::from({1, 2}, {0, 0}));
    CHECK_THROWS_AS(softmax_rows(ok, 0.0), ContractError);
    CHECK_THROWS_AS(softmax_rows(ok, -1.0), ContractError);
}

TEST_CASE("softmax_rows gradient vs finite differences") {
    Rng rng(3);
    Tensor m = Tensor::random_uniform({4, 4}, -1, 1, rng);
    double err = gradient_check(
        [](Tape&, const std::vector<Var>& v) {
            Var y = softmax_rows(v[0], 0.7);
            // weighted reduction so the gradient is not trivially zero
            Tape* t = v[0].tape;
            Var w = t->leaf(Tensor::from({4, 4}, {1,  2, -1, 0.5, 3, -2, 1, 0,
                                                  0.25, 1, 2, -3, 1, 1, -1, 2}));
            return sum_all(mul(y, w));
        },
        {m}, 1e-5);
    CHECK(err <= 1e-6);
}

TEST_CASE("conv1x1 identity and summing weights") {
    Tape tape;
    Var f = tape.leaf(Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6}));
    Var wi = tape.leaf(Tensor::from({2, 2}, {1, 0, 0, 1}));
    Var b0 = tape.leaf(Tensor::zeros({2}));
    CHECK(conv1x1(f, wi, b0).value().data == f.value().data);

    Var ones = tape.leaf(Tensor::full({2, 3}, 1.0));
    Var wsum = tape.leaf(Tensor::from({1, 2}, {1, 1}));
    Var b1 = tape.leaf(Tensor::zeros({1}));
    CHECK(conv1x1(ones, wsum, b1).value().data == std::vector<double>{2, 2, 2});
}

TEST_CASE("conv1x1 equals matmul plus bias bit-for-bit") {
    Rng rng(4);
    Tape tape;
    Tensor ft = Tensor::random_uniform({4, 6}, -1, 1, rng);
    Tensor wt = Tensor::random_uniform({2, 4}, -1, 1, rng);
    Tensor bt = Tensor::random_uniform({2}, -1, 1, rng);
    Var f = tape.leaf(ft);
    Var w = tape.leaf(wt);
    Var b = tape.leaf(bt);
    Tensor got = conv1x1(f, w, b).value();
    Tensor want = mat_mul(wt, ft);
    for (int o = 0; o < 2; ++o)
        for (int j = 0; j < 6; ++j) want.at(o, j) += bt.at(o);
    CHECK(got.data == want.data); // exact: shared accumulation kernel
}

TEST_CASE("conv1x1 channel mismatch") {
    Tape tape;
    Var f = tape.leaf(Tensor::zeros({3, 5}));
    Var w = tape.leaf(Tensor::zeros({2, 4}));
    Var b = tape.leaf(Tensor::zeros({2}));
    CHECK_THROWS_AS(conv1x1(f, w, b), DimensionError);
}

TEST_CASE("conv1x1 gradient vs finite differences") {
    Rng rng(5);
    Tensor f = Tensor::random_uniform({3, 4}, -1, 1, rng);
    Tensor w = Tensor::random_uniform({2, 3}, -1, 1, rng);
    Tensor b = Tensor::random_uniform({2}, -1, 1, rng);
    double err = gradient_check(
        [](Tape&, const std::vector<Var>& v) {
            return sum_all(sigmoid(conv1x1(v[0], v[1], v[2])));
        },
        {f, w, b}, 1e-5);
    CHECK(err <= 1e-5);
}

TEST_CASE("conv3x3 matches direct convolution") {
    Rng rng(6);
    Tensor ft = Tensor::random_uniform({2, 5, 4}, -1, 1, rng);
    Tensor wt = Tensor::random_uniform({3, 2, 3, 3}, -1, 1, rng);
    Tensor bt = Tensor::random_uniform({3}, -1, 1, rng);
    for (int stride : {1, 2}) {
        Tape tape;
        Var f = tape.leaf(ft);
        Var w = tape.leaf(wt);
        Var b = tape.leaf(bt);
        Tensor got = conv3x3(f, w, b, stride, 1).value();
        const int ho = (5 + 2 - 3) / stride + 1;
        const int wo = (4 + 2 - 3) / stride + 1;
        REQUIRE(got.shape == std::vector<int>{3, ho, wo});
        for (int o = 0; o < 3; ++o)
            for (int oy = 0; oy < ho; ++oy)
                for (int ox = 0; ox < wo; ++ox) {
                    double acc = bt.at(o);
                    for (int c = 0; c < 2; ++c)
                        for (int ky = 0; ky < 3; ++ky)
                            for (int kx = 0; kx < 3; ++kx) {
                                int iy = oy * stride + ky - 1;
                                int ix = ox * stride + kx - 1;
                                if (iy < 0 || iy >= 5 || ix < 0 || ix >= 4) continue;
                                acc += ft.at(c, iy, ix) * wt.data[(((size_t)o * 2 + c) * 3 + ky) * 3 + kx];
                            }
                    CHECK(got.at(o, oy, ox) == doctest::Approx(acc).epsilon(1e-12));
                }
    }
}

TEST_CASE("conv3x3 gradient vs finite differences") {
    Rng rng(7);
    Tensor f = Tensor::random_uniform({2, 4, 4}, -1, 1, rng);
    Tensor w = Tensor::random_uniform({2, 2, 3, 3}, -1, 1, rng);
    Tensor b = Tensor::random_uniform({2}, -1, 1, rng);
    for (int stride : {1, 2}) {
        double err = gradient_check(
            [stride](Tape&, const std::vector<Var>& v) {
                return sum_all(sigmoid(conv3x3(v[0], v[1], v[2], stride, 1)));
            },
            {f, w, b}, 1e-5);
        CHECK(err <= 1e-5);
    }
}

TEST_CASE("elementwise and shape ops gradient vs finite differences") {
    Rng rng(8);
    Tensor a = random_away_from_zero({3, 4}, rng);
    Tensor b = random_away_from_zero({3, 4}, rng);

    auto check1 = [&](const char* name, ScalarFn fn, std::vector<Tensor> ins) {
        INFO(name);
        CHECK(gradient_check(fn, ins, 1e-5) <= 1e-5);
    };

    check1("relu", [](Tape&, const std::vector<Var>& v) { return sum_all(relu(v[0])); }, {a});
    check1("sigmoid",
           [](Tape&, const std::vector<Var>& v) { return sum_all(sigmoid(v[0])); }, {a});
    check1("add", [](Tape&, const std::vector<Var>& v) { return sum_all(mul(add(v[0], v[1]), v[1])); },
           {a, b});
    check1("mul", [](Tape&, const std::vector<Var>& v) { return sum_all(mul(v[0], v[1])); },
           {a, b});
    check1("divide",
           [](Tape&, const std::vector<Var>& v) { return sum_all(divide(v[0], v[1])); },
           {a, b});
    check1("affine",
           [](Tape&, const std::vector<Var>& v) { return sum_all(affine(v[0], 2.5, -1.0)); },
           {a});
    check1("mean_all", [](Tape&, const std::vector<Var>& v) { return mean_all(mul(v[0], v[0])); },
           {a});
    check1("transpose+reshape",
           [](Tape&, const std::vector<Var>& v) {
               Var t = transpose2(v[0]);
               Var r = reshape(t, {2, 6});
               return sum_all(mul(r, r));
           },
           {a});
    check1("concat+slice",
           [](Tape&, const std::vector<Var>& v) {
               Var c = concat({v[0], v[1]}, 0); // 6 x 4
               Var s = slice(c, 0, 2, 3);
               Var s2 = slice(c, 1, 1, 2);
               return add(sum_all(mul(s, s)), sum_all(s2));
           },
           {a, b});
    check1("gap",
           [](Tape&, const std::vector<Var>& v) {
               Var g = global_avg_pool(v[0]);
               return sum_all(mul(g, g));
           },
           {a});
    check1("mul_channels",
           [](Tape&, const std::vector<Var>& v) {
               Var w = slice(reshape(v[1], {12, 1}), 0, 0, 3);
               return sum_all(mul_channels(v[0], reshape(w, {3})));
           },
           {a, b});

    Tensor img = random_away_from_zero({2, 3, 3}, rng);
    check1("upsample_nearest2x",
           [](Tape&, const std::vector<Var>& v) {
               return sum_all(mul(upsample_nearest2x(v[0]), upsample_nearest2x(v[0])));
           },
           {img});

    Tensor x = random_away_from_zero({4, 3}, rng);
    Tensor w = random_away_from_zero({3, 2}, rng);
    Tensor bias = random_away_from_zero({2}, rng);
    check1("linear",
           [](Tape&, const std::vector<Var>& v) {
               return sum_all(sigmoid(linear(v[0], v[1], v[2])));
           },
           {x, w, bias});
}

TEST_CASE("loss primitives gradient vs finite differences") {
    Rng rng(9);
    Tensor logits = Tensor::random_uniform({3, 4}, -1, 1, rng);
    CHECK(gradient_check(
              [](Tape&, const std::vector<Var>& v) {
                  return softmax_xent(v[0], {1, 3, 0}, {1.0, 0.1, 1.0});
              },
              {logits}, 1e-5) <= 1e-5);

    Tensor blogits = Tensor::random_uniform({2, 5}, -2, 2, rng);
    Tensor btargets = Tensor::random_uniform({2, 5}, 0, 1, rng);
    CHECK(gradient_check(
              [btargets](Tape&, const std::vector<Var>& v) {
                  return bce_with_logits(v[0], btargets);
              },
              {blogits}, 1e-5) <= 1e-5);

    Tensor x = Tensor::from({4}, {0.3, -0.8, 0.5, -0.2});
    Tensor c = Tensor::from({4}, {0.1, -0.4, 0.9, 0.4});
    CHECK(gradient_check(
              [c](Tape&, const std::vector<Var>& v) {
                  return sum_all(mul(emin_const(v[0], c), emax_const(v[0], c)));
              },
              {x}, 1e-5) <= 1e-5);

    Tensor t = Tensor::from({4}, {-0.5, 0.2, -0.1, 0.6});
    CHECK(gradient_check(
              [t](Tape&, const std::vector<Var>& v) { return l1_to_target(v[0], t); },
              {x}, 1e-5) <= 1e-5);
}

TEST_CASE("global_avg_pool basics") {
    Tape tape;
    Var c3 = tape.leaf(Tensor::full({4, 7}, 3.0));
    Tensor g = global_avg_pool(c3).value();
    REQUIRE(g.shape == std::vector<int>{4});
    for (double v : g.data) CHECK(v == 3.0);

    Var row = tape.leaf(Tensor::from({1, 3}, {1, 2, 3}));
    CHECK(global_avg_pool(row).value().data[0] == 2.0);

    Var p1 = tape.leaf(Tensor::from({1, 3}, {3, 1, 2}));
    CHECK(global_avg_pool(p1).value().data[0] == 2.0);
}

TEST_CASE("gradient_check on sum of squares") {
    Tensor x = Tensor::from({2}, {1, 2});
    Tape probe;
    Tensor leaf = x;
    leaf.requires_grad = true;
    Var v = probe.leaf(leaf);
    probe.backward(sum_all(mul(v, v)));
    Tensor g = probe.grad(v);
    CHECK(g.data == std::vector<double>{2, 4});

    double err = gradient_check(
        [](Tape&, const std::vector<Var>& v2) { return sum_all(mul(v2[0], v2[0])); }, {x},
        1e-5);
    CHECK(err <= 1e-8);
}

TEST_CASE("gradient_check contract") {
    Tensor x = Tensor::from({2}, {1, 2});
    auto fn = [](Tape&, const std::vector<Var>& v) { return sum_all(v[0]); };
    CHECK_THROWS_AS(gradient_check(fn, {x}, 1e-8), ContractError);
    CHECK_THROWS_AS(gradient_check(fn, {x}, 1e-2), ContractError);
    auto vec_fn = [](Tape&, const std::vector<Var>& v) { return v[0]; };
    CHECK_THROWS_AS(gradient_check(vec_fn, {x}, 1e-5), ContractError);
    Tensor bad = Tensor::from({1}, {std::numeric_limits<double>::infinity()});
    CHECK_THROWS_AS(gradient_check(fn, {bad}, 1e-5), NumericError);
}

TEST_CASE("tape topological invariant and unused leaves") {
    Tape tape;
    Tensor xt = Tensor::full({2, 2}, 1.0);
    xt.requires_grad = true;
    Var x = tape.leaf(xt);
    Var unused = tape.leaf(xt);
    Var y = relu(matmul(x, x));
    Var loss = sum_all(y);
    for (int id = 0; id < static_cast<int>(tape.node_count()); ++id)
        for (int in : tape.node_inputs(id)) CHECK(in < id);
    tape.backward(loss);
    Tensor gu = tape.grad(unused);
    for (double v : gu.data) CHECK(v == 0.0);
    // x feeds matmul twice: dX = G·Xᵀ + Xᵀ·G = 2·ones for X = ones
    for (double v : tape.grad(x).data) CHECK(v == doctest::Approx(4.0));
}

TEST_CASE("backward requires scalar output") {
    Tape tape;
    Tensor xt = Tensor::full({2, 2}, 1.0);
    xt.requires_grad = true;
    Var x = tape.leaf(xt);
    CHECK_THROWS_AS(tape.backward(x), ContractError);
}

TEST_CASE("tensor file round trip") {
    Rng rng(10);
    Tensor t = Tensor::random_uniform({3, 2, 4}, -5, 5, rng);
    const std::string path = "roundtrip.tnsr";
    write_tensor(path, t);
    Tensor r = read_tensor(path);
    CHECK(r.shape == t.shape);
    CHECK(r.data == t.data);
    std::remove(path.c_str());
}

TEST_CASE("tensor file rejects corruption") {
    const std::string path = "corrupt.tnsr";
    {
        std::ofstream out(path, std::ios::binary);
        out << "XXXX1";
    }
    CHECK_THROWS_AS(read_tensor(path), FormatError);
    Tensor t = Tensor::from({2}, {1, 2});
    write_tensor(path, t);
    {
        std::ofstream out(path, std::ios::binary | std::ios::app);
        out << "extra";
    }
    CHECK_THROWS_AS(read_tensor(path), FormatError);
    CHECK_THROWS_AS(read_tensor("does_not_exist.tnsr"), IoError);
    std::remove(path.c_str());
}

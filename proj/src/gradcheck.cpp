#include "rgbd/gradcheck.hpp"

#include <cmath>

#include "rgbd/errors.hpp"

namespace rgbd {

namespace {

double eval_scalar(const ScalarFn& fn, const std::vector<Tensor>& inputs) {
    Tape tape;
    std::vector<Var> vars;
    vars.reserve(inputs.size());
    for (const Tensor& t : inputs) {
        Tensor leaf = t;
        leaf.requires_grad = false;
        vars.push_back(tape.leaf(std::move(leaf)));
    }
    Var out = fn(tape, vars);
    if (out.value().numel() != 1)
        throw ContractError("gradient_check: fn must return a scalar, got shape " +
                            out.value().shape_str());
    return out.value().data[0];
}

} // namespace

double gradient_check(const ScalarFn& fn, const std::vector<Tensor>& inputs, double h) {
    if (!(h >= 1e-7 && h <= 1e-3))
        throw ContractError("gradient_check: h must lie in [1e-7, 1e-3]");
    if (inputs.empty()) throw ContractError("gradient_check: no inputs");
    for (const Tensor& t : inputs)
        if (!t.all_finite()) throw NumericError("gradient_check: non-finite input");

    // analytic pass: every input participates
    Tape tape;
    std::vector<Var> vars;
    vars.reserve(inputs.size());
    for (const Tensor& t : inputs) {
        Tensor leaf = t;
        leaf.requires_grad = true;
        vars.push_back(tape.leaf(std::move(leaf)));
    }
    Var out = fn(tape, vars);
    if (out.value().numel() != 1)
        throw ContractError("gradient_check: fn must return a scalar, got shape " +
                            out.value().shape_str());
    tape.backward(out);
    std::vector<Tensor> analytic;
    analytic.reserve(vars.size());
    for (const Var& v : vars) analytic.push_back(tape.grad(v));

    double worst = 0.0;
    std::vector<Tensor> probe = inputs;
    for (size_t t = 0; t < probe.size(); ++t) {
        for (size_t i = 0; i < probe[t].data.size(); ++i) {
            const double saved = probe[t].data[i];
            probe[t].data[i] = saved + h;
            const double fp = eval_scalar(fn, probe);
            probe[t].data[i] = saved - h;
            const double fm = eval_scalar(fn, probe);
            probe[t].data[i] = saved;
            const double numeric = (fp - fm) / (2.0 * h);
            const double a = analytic[t].data[i];
            const double denom = std::max({1.0, std::abs(a), std::abs(numeric)});
            worst = std::max(worst, std::abs(a - numeric) / denom);
        }
    }
    return worst;
}

} // namespace rgbd

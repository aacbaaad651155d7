#pragma once

#include <functional>
#include <vector>

#include "rgbd/tape.hpp"

namespace rgbd {

using ScalarFn = std::function<Var(Tape&, const std::vector<Var>&)>;

// Compares reverse-mode gradients of `fn` against central finite differences
// with step h, and returns the worst relative error
//   |analytic - numeric| / max(1, |analytic|, |numeric|)
// over every coordinate of every input. h must lie in [1e-7, 1e-3]; inputs
// must be finite; fn must produce a scalar.
double gradient_check(const ScalarFn& fn, const std::vector<Tensor>& inputs, double h);

// named end-to-end check scenarios: matmul, softmax_rows, conv1x1, iam, cdf,
// set_loss. Seed drives every random input; returns the worst relative error
// at h = 1e-5.
double gradcheck_module(const std::string& name, uint64_t seed);
std::vector<std::string> gradcheck_module_names();

} // namespace rgbd

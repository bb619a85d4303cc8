#pragma once

#include <functional>

#include "lteode/tensor.hpp"

namespace lteode {

/// Central differences (f(x + eps e_i) - f(x - eps e_i)) / (2 eps) for every
/// coordinate of x. `f` is evaluated without a tape.
Tensor finite_diff_gradient(const std::function<double(const Tensor&)>& f, const Tensor& x,
                            double eps);

/// Same, but perturbs `param` in place and calls `f()`; the original values
/// are restored before returning. Used to probe parameters that a closure
/// reads through shared handles.
Tensor finite_diff_gradient_inplace(const std::function<double()>& f, Tensor& param, double eps);

/// max_i |a_i - b_i| / max(|a_i|, |b_i|, floor). The floor keeps coordinates
/// whose true gradient is ~0 from dominating through round-off.
double max_relative_error(std::span<const double> a, std::span<const double> b,
                          double floor = 1e-6);

}  // namespace lteode

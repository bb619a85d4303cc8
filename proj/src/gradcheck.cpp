#include "lteode/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "lteode/error.hpp"

namespace lteode {

Tensor finite_diff_gradient(const std::function<double(const Tensor&)>& f, const Tensor& x,
                            double eps) {
  Tensor probe = x.clone();
  return finite_diff_gradient_inplace([&] { return f(probe); }, probe, eps);
}

Tensor finite_diff_gradient_inplace(const std::function<double()>& f, Tensor& param, double eps) {
  if (!(eps > 0.0)) throw ContractError("finite_diff_gradient: eps must be positive");
  auto values = param.mutable_data();
  std::vector<double> grad(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double saved = values[i];
    values[i] = saved + eps;
    const double up = f();
    values[i] = saved - eps;
    const double down = f();
    values[i] = saved;
    grad[i] = (up - down) / (2.0 * eps);
  }
  return Tensor(param.shape(), std::move(grad));
}

double max_relative_error(std::span<const double> a, std::span<const double> b, double floor) {
  if (a.size() != b.size()) throw DimensionError("max_relative_error: length mismatch");
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double scale = std::max({std::fabs(a[i]), std::fabs(b[i]), floor});
    worst = std::max(worst, std::fabs(a[i] - b[i]) / scale);
  }
  return worst;
}

}  // namespace lteode

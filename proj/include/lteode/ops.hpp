#pragma once

#include <cstddef>
#include <optional>
#include <utility>
#include <vector>

#include "lteode/tensor.hpp"

// Differentiable tensor operations. Every operation records a backward rule on
// the active tape when at least one input requires a gradient, and raises
// NumericError if it produces a non-finite value.
//
// Broadcasting is limited to a single-element operand in the binary
// elementwise operations; everything else needs explicit shapes.
namespace lteode::ops {

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor hadamard(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);

/// abs uses the subgradient 0 at exactly 0.
Tensor abs(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);

enum class Elementwise { add, sub, hadamard, abs, tanh, relu, scale };

/// Dispatcher over the pointwise family. `b` is required for the binary ops;
/// `factor` is used by `scale` only.
Tensor elementwise(Elementwise op, const Tensor& a, const std::optional<Tensor>& b = std::nullopt,
                   double factor = 1.0);

/// x[M x C] + bias[C] applied to every row.
Tensor add_bias(const Tensor& x, const Tensor& bias);

/// out[b] = a_op * h[b] for h[B x N x C] and a_op[N x N].
Tensor propagate(const Tensor& a_op, const Tensor& h);

/// Concatenates along the last axis; all leading extents must agree.
Tensor concat_channels(const Tensor& a, const Tensor& b);
std::pair<Tensor, Tensor> split_channels(const Tensor& x, std::size_t first_width);

/// Repeats x[N x C] into [batch x N x C].
Tensor tile_batch(const Tensor& x, std::size_t batch);

/// Divides each row of a non-negative matrix by its sum. Rows summing to zero
/// become uniform 1/cols and pass no gradient.
Tensor row_normalize(const Tensor& a);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor mean_abs_error(const Tensor& pred, const Tensor& target);

/// Same values, cut from the tape.
Tensor detach(const Tensor& a);

/// Rows `rows` of x[M x C] -> [rows.size() x C].
Tensor select_rows(const Tensor& x, const std::vector<std::size_t>& rows);
/// Inverse of select_rows: places src rows into a zero [total_rows x C] matrix.
Tensor scatter_rows(const Tensor& src, const std::vector<std::size_t>& rows,
                    std::size_t total_rows);

}  // namespace lteode::ops

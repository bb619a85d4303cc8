#include "lteode/ops.hpp"

#include <cmath>
#include <string>

#include "lteode/error.hpp"

namespace lteode::ops {

namespace {

using NodePtr = std::shared_ptr<detail::Node>;

bool tracking(std::initializer_list<const Tensor*> inputs) {
  if (active_tape() == nullptr) return false;
  for (const Tensor* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

Tensor finish(const char* op, Shape shape, std::vector<double> data, bool track) {
  for (double v : data) {
    if (!std::isfinite(v)) throw NumericError(std::string("non-finite value produced by ") + op);
  }
  return make_result(std::move(shape), std::move(data), track);
}

void record(const Tensor& out, Tape::BackwardRule rule) {
  active_tape()->record(out.node(), std::move(rule));
}

void require_rank(const char* op, const Tensor& t, std::size_t rank) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + " expects rank " + std::to_string(rank) + ", got " +
                         shape_str(t.shape()));
  }
}

// Binary pointwise shapes: equal, or one side holds a single element.
enum class Broadcast { none, scalar_a, scalar_b };

Broadcast binary_layout(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() == b.shape()) return Broadcast::none;
  if (b.numel() == 1) return Broadcast::scalar_b;
  if (a.numel() == 1) return Broadcast::scalar_a;
  throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                       shape_str(b.shape()));
}

template <typename Fwd, typename DA, typename DB>
Tensor binary(const char* op, const Tensor& a, const Tensor& b, Fwd fwd, DA da, DB db) {
  const Broadcast layout = binary_layout(op, a, b);
  const Shape out_shape = layout == Broadcast::scalar_a ? b.shape() : a.shape();
  const std::size_t n = shape_numel(out_shape);
  auto av = a.data();
  auto bv = b.data();
  auto a_at = [=](std::size_t i) { return layout == Broadcast::scalar_a ? av[0] : av[i]; };
  auto b_at = [=](std::size_t i) { return layout == Broadcast::scalar_b ? bv[0] : bv[i]; };

  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = fwd(a_at(i), b_at(i));

  const bool track = tracking({&a, &b});
  Tensor result = finish(op, out_shape, std::move(out), track);
  if (track) {
    NodePtr an = a.node();
    NodePtr bn = b.node();
    record(result, [an, bn, layout, n, da, db](std::span<const double> g) {
      auto x = [&](std::size_t i) { return layout == Broadcast::scalar_a ? an->data[0] : an->data[i]; };
      auto y = [&](std::size_t i) { return layout == Broadcast::scalar_b ? bn->data[0] : bn->data[i]; };
      if (an->requires_grad) {
        auto& ga = an->grad_buffer();
        for (std::size_t i = 0; i < n; ++i) {
          ga[layout == Broadcast::scalar_a ? 0 : i] += g[i] * da(x(i), y(i));
        }
      }
      if (bn->requires_grad) {
        auto& gb = bn->grad_buffer();
        for (std::size_t i = 0; i < n; ++i) {
          gb[layout == Broadcast::scalar_b ? 0 : i] += g[i] * db(x(i), y(i));
        }
      }
    });
  }
  return result;
}

// Pointwise unary op whose derivative is expressed through input and output.
template <typename Fwd, typename Deriv>
Tensor unary(const char* op, const Tensor& a, Fwd fwd, Deriv deriv) {
  auto av = a.data();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i]);
  const bool track = tracking({&a});
  Tensor result = finish(op, a.shape(), std::move(out), track);
  if (track) {
    NodePtr an = a.node();
    std::weak_ptr<detail::Node> rn = result.node();
    record(result, [an, rn, deriv](std::span<const double> g) {
      auto res = rn.lock();
      auto& ga = an->grad_buffer();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * deriv(an->data[i], res->data[i]);
    });
  }
  return result;
}

double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank("matmul", a, 2);
  require_rank("matmul", b, 2);
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner dimensions differ " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  auto av = a.data();
  auto bv = b.data();
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    double* row = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = av[i * k + p];
      const double* brow = bv.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += aip * brow[j];
    }
  }
  const bool track = tracking({&a, &b});
  Tensor result = finish("matmul", {m, n}, std::move(out), track);
  if (track) {
    NodePtr an = a.node();
    NodePtr bn = b.node();
    record(result, [an, bn, m, k, n](std::span<const double> g) {
      if (an->requires_grad) {
        auto& ga = an->grad_buffer();
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t p = 0; p < k; ++p) {
            double acc = 0.0;
            for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * bn->data[p * n + j];
            ga[i * k + p] += acc;
          }
        }
      }
      if (bn->requires_grad) {
        auto& gb = bn->grad_buffer();
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t p = 0; p < k; ++p) {
            const double aip = an->data[i * k + p];
            for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += aip * g[i * n + j];
          }
        }
      }
    });
  }
  return result;
}

Tensor transpose(const Tensor& a) {
  require_rank("transpose", a, 2);
  const std::size_t r = a.dim(0), c = a.dim(1);
  auto av = a.data();
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = av[i * c + j];
  }
  const bool track = tracking({&a});
  Tensor result = finish("transpose", {c, r}, std::move(out), track);
  if (track) {
    NodePtr an = a.node();
    record(result, [an, r, c](std::span<const double> g) {
      auto& ga = an->grad_buffer();
      for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += g[j * r + i];
      }
    });
  }
  return result;
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  auto av = a.data();
  const bool track = tracking({&a});
  Tensor result = make_result(std::move(shape), std::vector<double>(av.begin(), av.end()), track);
  if (track) {
    NodePtr an = a.node();
    record(result, [an](std::span<const double> g) { an->accumulate(g); });
  }
  return result;
}

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      "add", a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      "sub", a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

Tensor hadamard(const Tensor& a, const Tensor& b) {
  return binary(
      "hadamard", a, b, [](double x, double y) { return x * y; },
      [](double, double y) { return y; }, [](double x, double) { return x; });
}

Tensor scale(const Tensor& a, double factor) {
  return unary(
      "scale", a, [factor](double x) { return factor * x; },
      [factor](double, double) { return factor; });
}

Tensor abs(const Tensor& a) {
  return unary(
      "abs", a, [](double x) { return std::fabs(x); },
      [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Tensor tanh(const Tensor& a) {
  return unary(
      "tanh", a, [](double x) { return std::tanh(x); },
      [](double, double y) { return 1.0 - y * y; });
}

Tensor relu(const Tensor& a) {
  return unary(
      "relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& a) {
  return unary("sigmoid", a, stable_sigmoid, [](double, double y) { return y * (1.0 - y); });
}

Tensor elementwise(Elementwise op, const Tensor& a, const std::optional<Tensor>& b, double factor) {
  auto rhs = [&]() -> const Tensor& {
    if (!b) throw ContractError("elementwise: binary operation without a second operand");
    return *b;
  };
  switch (op) {
    case Elementwise::add: return add(a, rhs());
    case Elementwise::sub: return sub(a, rhs());
    case Elementwise::hadamard: return hadamard(a, rhs());
    case Elementwise::abs: return abs(a);
    case Elementwise::tanh: return tanh(a);
    case Elementwise::relu: return relu(a);
    case Elementwise::scale: return scale(a, factor);
  }
  throw ContractError("elementwise: unknown operation");
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  require_rank("add_bias", x, 2);
  const std::size_t m = x.dim(0), c = x.dim(1);
  if (bias.numel() != c) {
    throw DimensionError("add_bias: bias " + shape_str(bias.shape()) + " does not match " +
                         shape_str(x.shape()));
  }
  auto xv = x.data();
  auto bv = bias.data();
  std::vector<double> out(m * c);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = xv[i * c + j] + bv[j];
  }
  const bool track = tracking({&x, &bias});
  Tensor result = finish("add_bias", x.shape(), std::move(out), track);
  if (track) {
    NodePtr xn = x.node();
    NodePtr bn = bias.node();
    record(result, [xn, bn, m, c](std::span<const double> g) {
      if (xn->requires_grad) xn->accumulate(g);
      if (bn->requires_grad) {
        auto& gb = bn->grad_buffer();
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t j = 0; j < c; ++j) gb[j] += g[i * c + j];
        }
      }
    });
  }
  return result;
}

Tensor propagate(const Tensor& a_op, const Tensor& h) {
  require_rank("propagate", a_op, 2);
  require_rank("propagate", h, 3);
  const std::size_t batch = h.dim(0), n = h.dim(1), c = h.dim(2);
  if (a_op.dim(0) != n || a_op.dim(1) != n) {
    throw DimensionError("propagate: operator " + shape_str(a_op.shape()) + " vs state " +
                         shape_str(h.shape()));
  }
  auto av = a_op.data();
  auto hv = h.data();
  std::vector<double> out(batch * n * c, 0.0);
  for (std::size_t b = 0; b < batch; ++b) {
    const double* hb = hv.data() + b * n * c;
    double* ob = out.data() + b * n * c;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        const double aij = av[i * n + j];
        if (aij == 0.0) continue;
        for (std::size_t k = 0; k < c; ++k) ob[i * c + k] += aij * hb[j * c + k];
      }
    }
  }
  const bool track = tracking({&a_op, &h});
  Tensor result = finish("propagate", h.shape(), std::move(out), track);
  if (track) {
    NodePtr an = a_op.node();
    NodePtr hn = h.node();
    record(result, [an, hn, batch, n, c](std::span<const double> g) {
      if (hn->requires_grad) {
        auto& gh = hn->grad_buffer();
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < n; ++j) {
              const double aij = an->data[i * n + j];
              if (aij == 0.0) continue;
              for (std::size_t k = 0; k < c; ++k) {
                gh[(b * n + j) * c + k] += aij * g[(b * n + i) * c + k];
              }
            }
          }
        }
      }
      if (an->requires_grad) {
        auto& ga = an->grad_buffer();
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < n; ++j) {
              double acc = 0.0;
              for (std::size_t k = 0; k < c; ++k) {
                acc += g[(b * n + i) * c + k] * hn->data[(b * n + j) * c + k];
              }
              ga[i * n + j] += acc;
            }
          }
        }
      }
    });
  }
  return result;
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  if (a.rank() != b.rank() ||
      !std::equal(a.shape().begin(), a.shape().end() - 1, b.shape().begin())) {
    throw DimensionError("concat_channels: leading shapes differ " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
  const std::size_t c1 = a.shape().back(), c2 = b.shape().back();
  const std::size_t rows = a.numel() / c1;
  const std::size_t c = c1 + c2;
  auto av = a.data();
  auto bv = b.data();
  std::vector<double> out(rows * c);
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(av.data() + r * c1, c1, out.data() + r * c);
    std::copy_n(bv.data() + r * c2, c2, out.data() + r * c + c1);
  }
  Shape shape = a.shape();
  shape.back() = c;
  const bool track = tracking({&a, &b});
  Tensor result = finish("concat_channels", std::move(shape), std::move(out), track);
  if (track) {
    NodePtr an = a.node();
    NodePtr bn = b.node();
    record(result, [an, bn, rows, c1, c2, c](std::span<const double> g) {
      for (std::size_t r = 0; r < rows; ++r) {
        if (an->requires_grad) {
          auto& ga = an->grad_buffer();
          for (std::size_t k = 0; k < c1; ++k) ga[r * c1 + k] += g[r * c + k];
        }
        if (bn->requires_grad) {
          auto& gb = bn->grad_buffer();
          for (std::size_t k = 0; k < c2; ++k) gb[r * c2 + k] += g[r * c + c1 + k];
        }
      }
    });
  }
  return result;
}

std::pair<Tensor, Tensor> split_channels(const Tensor& x, std::size_t first_width) {
  const std::size_t c = x.shape().back();
  if (first_width == 0 || first_width >= c) {
    throw DimensionError("split_channels: width " + std::to_string(first_width) +
                         " cannot split " + shape_str(x.shape()));
  }
  const std::size_t rows = x.numel() / c;
  auto part = [&](std::size_t offset, std::size_t width) {
    auto xv = x.data();
    std::vector<double> out(rows * width);
    for (std::size_t r = 0; r < rows; ++r) std::copy_n(xv.data() + r * c + offset, width, out.data() + r * width);
    Shape shape = x.shape();
    shape.back() = width;
    const bool track = tracking({&x});
    Tensor result = make_result(std::move(shape), std::move(out), track);
    if (track) {
      NodePtr xn = x.node();
      record(result, [xn, rows, c, offset, width](std::span<const double> g) {
        auto& gx = xn->grad_buffer();
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t k = 0; k < width; ++k) gx[r * c + offset + k] += g[r * width + k];
        }
      });
    }
    return result;
  };
  return {part(0, first_width), part(first_width, c - first_width)};
}

Tensor tile_batch(const Tensor& x, std::size_t batch) {
  require_rank("tile_batch", x, 2);
  if (batch == 0) throw DimensionError("tile_batch: batch must be positive");
  auto xv = x.data();
  const std::size_t block = xv.size();
  std::vector<double> out(batch * block);
  for (std::size_t b = 0; b < batch; ++b) std::copy(xv.begin(), xv.end(), out.begin() + b * block);
  const bool track = tracking({&x});
  Tensor result = make_result({batch, x.dim(0), x.dim(1)}, std::move(out), track);
  if (track) {
    NodePtr xn = x.node();
    record(result, [xn, batch, block](std::span<const double> g) {
      auto& gx = xn->grad_buffer();
      for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t i = 0; i < block; ++i) gx[i] += g[b * block + i];
      }
    });
  }
  return result;
}

Tensor row_normalize(const Tensor& a) {
  require_rank("row_normalize", a, 2);
  const std::size_t r = a.dim(0), c = a.dim(1);
  auto av = a.data();
  std::vector<double> sums(r, 0.0);
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      if (av[i * c + j] < 0.0) throw ContractError("row_normalize: negative entry");
      s += av[i * c + j];
    }
    sums[i] = s;
    for (std::size_t j = 0; j < c; ++j) {
      out[i * c + j] = s > 0.0 ? av[i * c + j] / s : 1.0 / static_cast<double>(c);
    }
  }
  const bool track = tracking({&a});
  Tensor result = finish("row_normalize", a.shape(), std::move(out), track);
  if (track) {
    NodePtr an = a.node();
    std::weak_ptr<detail::Node> rn = result.node();
    record(result, [an, rn, sums, r, c](std::span<const double> g) {
      auto res = rn.lock();
      auto& ga = an->grad_buffer();
      for (std::size_t i = 0; i < r; ++i) {
        if (sums[i] <= 0.0) continue;
        double dot = 0.0;
        for (std::size_t j = 0; j < c; ++j) dot += g[i * c + j] * res->data[i * c + j];
        for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += (g[i * c + j] - dot) / sums[i];
      }
    });
  }
  return result;
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  const bool track = tracking({&a});
  Tensor result = finish("sum", {1}, {s}, track);
  if (track) {
    NodePtr an = a.node();
    record(result, [an](std::span<const double> g) {
      auto& ga = an->grad_buffer();
      for (double& v : ga) v += g[0];
    });
  }
  return result;
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

Tensor mean_abs_error(const Tensor& pred, const Tensor& target) {
  if (pred.shape() != target.shape()) {
    throw DimensionError("mean_abs_error: shape mismatch " + shape_str(pred.shape()) + " vs " +
                         shape_str(target.shape()));
  }
  return mean(abs(sub(pred, target)));
}

Tensor detach(const Tensor& a) {
  auto av = a.data();
  return make_result(a.shape(), std::vector<double>(av.begin(), av.end()), false);
}

Tensor select_rows(const Tensor& x, const std::vector<std::size_t>& rows) {
  require_rank("select_rows", x, 2);
  const std::size_t m = x.dim(0), c = x.dim(1);
  if (rows.empty()) throw DimensionError("select_rows: empty row set");
  auto xv = x.data();
  std::vector<double> out(rows.size() * c);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= m) throw DimensionError("select_rows: row index out of range");
    std::copy_n(xv.data() + rows[i] * c, c, out.data() + i * c);
  }
  const bool track = tracking({&x});
  Tensor result = make_result({rows.size(), c}, std::move(out), track);
  if (track) {
    NodePtr xn = x.node();
    record(result, [xn, rows, c](std::span<const double> g) {
      auto& gx = xn->grad_buffer();
      for (std::size_t i = 0; i < rows.size(); ++i) {
        for (std::size_t k = 0; k < c; ++k) gx[rows[i] * c + k] += g[i * c + k];
      }
    });
  }
  return result;
}

Tensor scatter_rows(const Tensor& src, const std::vector<std::size_t>& rows, std::size_t total_rows) {
  require_rank("scatter_rows", src, 2);
  const std::size_t c = src.dim(1);
  if (src.dim(0) != rows.size()) throw DimensionError("scatter_rows: row count mismatch");
  auto sv = src.data();
  std::vector<double> out(total_rows * c, 0.0);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= total_rows) throw DimensionError("scatter_rows: row index out of range");
    std::copy_n(sv.data() + i * c, c, out.data() + rows[i] * c);
  }
  const bool track = tracking({&src});
  Tensor result = make_result({total_rows, c}, std::move(out), track);
  if (track) {
    NodePtr sn = src.node();
    record(result, [sn, rows, c](std::span<const double> g) {
      auto& gs = sn->grad_buffer();
      for (std::size_t i = 0; i < rows.size(); ++i) {
        for (std::size_t k = 0; k < c; ++k) gs[i * c + k] += g[rows[i] * c + k];
      }
    });
  }
  return result;
}

}  // namespace lteode::ops

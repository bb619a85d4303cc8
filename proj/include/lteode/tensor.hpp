#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace lteode {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until the first accumulation
  bool requires_grad = false;

  std::vector<double>& grad_buffer();
  void accumulate(std::span<const double> g);
  void accumulate_at(std::size_t i, double g);
};

}  // namespace detail

/// Dense row-major float64 array with an optional gradient buffer.
///
/// A Tensor is a cheap handle: copies share the underlying value. Values are
/// treated as immutable once produced by an operation; only leaf parameters
/// are modified in place, and only by the optimizer between tape replays.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor filled(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const noexcept { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const double> data() const;
  std::span<double> mutable_data();
  double item() const;

  bool requires_grad() const;
  void set_requires_grad(bool flag);
  bool has_grad() const;
  /// Empty span when no gradient has been accumulated.
  std::span<const double> grad() const;
  void zero_grad();

  /// Deep copy of the values; the copy is a fresh leaf.
  Tensor clone(bool requires_grad = false) const;

  const std::shared_ptr<detail::Node>& node() const { return node_; }
  bool same_storage(const Tensor& other) const { return node_ == other.node_; }

 private:
  std::shared_ptr<detail::Node> node_;
};

/// Define-by-run record of differentiable operations.
class Tape {
 public:
  using BackwardRule = std::function<void(std::span<const double> out_grad)>;

  void record(std::shared_ptr<detail::Node> output, BackwardRule rule);
  std::size_t size() const noexcept { return entries_.size(); }
  void clear() noexcept { entries_.clear(); }

  /// Seeds d(loss)/d(loss) = 1 and replays every rule in reverse order.
  void backward(const Tensor& loss);

 private:
  struct Entry {
    std::shared_ptr<detail::Node> output;
    BackwardRule rule;
  };
  std::vector<Entry> entries_;
};

/// Makes `tape` the recording target of the current thread for its lifetime.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

Tape* active_tape() noexcept;

void backward(const Tensor& loss, Tape& tape);

/// Output tensor for an operation; requires_grad marks it as a tape node.
Tensor make_result(Shape shape, std::vector<double> data, bool requires_grad);

}  // namespace lteode

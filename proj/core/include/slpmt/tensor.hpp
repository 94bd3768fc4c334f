#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "slpmt/rng.hpp"

namespace slpmt {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_string(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TensorStorage {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until backward reaches this tensor
  bool requires_grad = false;
};

// Shared handle to a dense row-major float64 array. Copies alias the same
// storage; use clone() for a deep copy.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double fill, bool requires_grad = false);
  static Tensor from_values(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor normal(Shape shape, double stddev, Rng& rng, bool requires_grad = false);
  static Tensor scalar(double v, bool requires_grad = false) { return from_values({}, {v}, requires_grad); }

  bool defined() const { return static_cast<bool>(s_); }
  const Shape& shape() const { return s_->shape; }
  std::size_t rank() const { return s_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return s_->shape.at(axis); }
  std::size_t size() const { return s_->value.size(); }

  std::span<const double> values() const { return s_->value; }
  std::span<double> mutable_values() { return s_->value; }
  const double* data() const { return s_->value.data(); }
  double item() const;
  double operator[](std::size_t i) const { return s_->value[i]; }

  bool requires_grad() const { return s_->requires_grad; }
  void set_requires_grad(bool on) { s_->requires_grad = on; }

  bool has_grad() const { return !s_->grad.empty(); }
  std::span<const double> grad() const { return s_->grad; }
  // Gradient as a dense vector, zeros when backward never reached it.
  std::vector<double> grad_or_zero() const;
  std::span<double> grad_buffer();
  void clear_grad() { std::vector<double>().swap(s_->grad); }
  double grad_norm() const;

  Tensor clone() const;
  bool all_finite() const;
  bool same_storage(const Tensor& other) const { return s_ == other.s_; }

  const std::shared_ptr<TensorStorage>& storage() const { return s_; }

 private:
  explicit Tensor(std::shared_ptr<TensorStorage> s) : s_(std::move(s)) {}
  std::shared_ptr<TensorStorage> s_;
};

// Records primitive operations for reverse-mode differentiation. An op is
// recorded only when the tape is recording and one of its inputs requires
// grad; otherwise the op runs forward only.
class Tape {
 public:
  enum class Mode { record, inference };

  explicit Tape(Mode mode = Mode::record) : mode_(mode) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return mode_ == Mode::record; }
  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

  // (..., m, k) x (k, n), or batched (b..., m, k) x (b..., k, n). With
  // transpose_b the right operand is stored as (n, k) / (b..., n, k).
  Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_b = false);
  // Same-shape addition, or bias-add of a rank-1 tensor over the last axis.
  Tensor add(const Tensor& a, const Tensor& b);
  Tensor multiply(const Tensor& a, const Tensor& b);
  Tensor relu(const Tensor& x);
  Tensor softmax(const Tensor& x);
  Tensor log_softmax(const Tensor& x);
  Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = kLayerNormEps);
  // Rows of `table` (n, d) gathered into shape prefix + {d}.
  Tensor embedding(const Tensor& table, std::span<const int> ids, const Shape& prefix);
  Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
  Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end);
  Tensor transpose(const Tensor& x, std::size_t axis0, std::size_t axis1);
  Tensor reshape(const Tensor& x, Shape shape);
  Tensor scale(const Tensor& x, double factor);
  Tensor sum(const Tensor& x);
  Tensor mean(const Tensor& x);
  // Entries where mask != 0 are replaced by `fill` and receive no gradient.
  Tensor masked_fill(const Tensor& x, std::span<const std::uint8_t> mask, double fill);
  Tensor dropout(const Tensor& x, double rate, Rng& rng);

  // Seeds d(loss)/d(loss) = 1 and replays the recorded nodes in reverse.
  void backward(const Tensor& loss);

  static constexpr double kLayerNormEps = 1e-5;

 private:
  using Storage = std::shared_ptr<TensorStorage>;
  bool wants_record(std::initializer_list<const Tensor*> inputs) const;
  Tensor make_output(Shape shape, bool requires_grad) const;
  void record(std::function<void()> fn) { nodes_.push_back(std::move(fn)); }

  Mode mode_;
  std::vector<std::function<void()>> nodes_;
};

using ScalarFunction = std::function<Tensor(Tape&, const Tensor&)>;

// Max over components of |analytic - central difference| / max(1, |analytic|).
double finite_difference_check(const ScalarFunction& f, const Tensor& x, double step);

}  // namespace slpmt

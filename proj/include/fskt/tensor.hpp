#pragma once

// Dense float-64 tensors with tape-based reverse-mode differentiation.
//
// A Tensor is a handle: copies share the same storage, so a parameter held
// by a model and the same parameter referenced from a Tape are one object.
// Values are treated as immutable once an operation has produced them; only
// the optimizer and the gradient checker write through mutable_values().

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "fskt/rng.hpp"

namespace fskt {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

namespace detail {

struct TensorStorage {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;  // empty until a gradient is accumulated
  bool requires_grad = false;
};

}  // namespace detail

class Tensor {
 public:
  // Scalar zero.
  Tensor();
  // Throws DimensionError if product(shape) != values.size() and
  // NumericalError if any value is not finite.
  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor filled(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor vector(std::vector<double> values, bool requires_grad = false);
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values,
                       bool requires_grad = false);
  static Tensor identity(std::size_t n, bool requires_grad = false);

  const Shape& shape() const { return storage_->shape; }
  std::size_t rank() const { return storage_->shape.size(); }
  std::size_t size() const { return storage_->values.size(); }
  // Matrix accessors; rows() of a 1-D tensor is 1.
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const double> values() const { return storage_->values; }
  double operator[](std::size_t i) const { return storage_->values[i]; }
  double at(std::size_t row, std::size_t col) const;
  // Value of a single-element tensor.
  double item() const;

  bool requires_grad() const { return storage_->requires_grad; }
  bool has_grad() const { return !storage_->grad.empty(); }
  // Empty span when no gradient has been accumulated.
  std::span<const double> grad() const { return storage_->grad; }
  void clear_grad() { storage_->grad.clear(); }

  // Fresh storage with the same values and no gradient tracking.
  Tensor detach() const;
  // Fresh storage with the same values, marked as a trainable leaf.
  Tensor clone_as_leaf() const;

  // In-place write access for optimizers and finite-difference probes.
  std::span<double> mutable_values() { return storage_->values; }

  bool same_storage(const Tensor& other) const { return storage_ == other.storage_; }
  const void* identity_key() const { return storage_.get(); }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorStorage> storage)
      : storage_(std::move(storage)) {}

  std::shared_ptr<detail::TensorStorage> storage_;

  friend class Tape;
};

// Ordered record of differentiable operations. Operations append to the
// tape only when one of their inputs requires a gradient and the tape is
// recording; backward() replays the records in reverse, exactly once.
class Tape {
 public:
  enum class Mode { kRecord, kInference };

  explicit Tape(Mode mode = Mode::kRecord) : mode_(mode) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return mode_ == Mode::kRecord; }
  std::size_t size() const { return records_.size(); }

  // Seeds d(loss)/d(loss) = 1 and propagates gradients to every leaf that
  // requires them. The loss must be a single-element tensor produced on this
  // tape. A second call throws: re-record the forward pass instead.
  void backward(const Tensor& loss);

  // Number of records whose backward rule ran during the last backward().
  std::size_t last_backward_visits() const { return visits_; }

  using BackwardFn = std::function<void(std::span<const double> grad_out)>;

  // Wraps freshly computed values into an output tensor and, when needed,
  // records the backward rule. Used by the operation implementations.
  Tensor emit(const char* op, Shape shape, std::vector<double> values,
              std::initializer_list<const Tensor*> inputs, BackwardFn backward);
  Tensor emit(const char* op, Shape shape, std::vector<double> values,
              const std::vector<Tensor>& inputs, BackwardFn backward);

  // Adds `delta` into the gradient of `t` if t requires a gradient.
  static void accumulate(const Tensor& t, std::span<const double> delta);
  static void accumulate_at(const Tensor& t, std::size_t index, double delta);

 private:
  struct Record {
    std::shared_ptr<detail::TensorStorage> output;
    BackwardFn backward;
  };

  Mode mode_;
  std::vector<Record> records_;
  bool consumed_ = false;
  std::size_t visits_ = 0;
};

// ---- differentiable operations -------------------------------------------

Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b);
Tensor transpose(Tape& tape, const Tensor& x);
Tensor add(Tape& tape, const Tensor& a, const Tensor& b);
Tensor sub(Tape& tape, const Tensor& a, const Tensor& b);
Tensor scale(Tape& tape, const Tensor& x, double factor);
// x + s for a single-element tensor s, added to every entry.
Tensor add_scalar(Tape& tape, const Tensor& x, const Tensor& s);
// ReLU with subgradient 0 at exactly 0.
Tensor relu(Tape& tape, const Tensor& x);
// Hadamard product of identically shaped tensors.
Tensor elementwise_mul(Tape& tape, const Tensor& a, const Tensor& b);
// x[n x d] * v[d] applied to every row.
Tensor mul_row_broadcast(Tape& tape, const Tensor& x, const Tensor& v);
// x[n x d] + v[d] applied to every row.
Tensor add_row_broadcast(Tape& tape, const Tensor& x, const Tensor& v);
// Column means of x[n x d]; result has shape [d].
Tensor mean_rows(Tape& tape, const Tensor& x);
Tensor sum(Tape& tape, const Tensor& x);
Tensor mean(Tape& tape, const Tensor& x);
// Row i of x[n x d] as a [d] vector.
Tensor row(Tape& tape, const Tensor& x, std::size_t i);
// Rows of x[n x d] in the given order; result [m x d].
Tensor select_rows(Tape& tape, const Tensor& x, std::span<const std::size_t> rows);
// out[r] = x[r, index[r]] for x[n x c]; result [n].
Tensor pick(Tape& tape, const Tensor& x, std::span<const std::size_t> index);
// Stacks k vectors of length n as the columns of an [n x k] matrix.
Tensor stack_columns(Tape& tape, const std::vector<Tensor>& columns);
// -log softmax(logits)[target] for logits[C]; scalar result.
Tensor softmax_cross_entropy(Tape& tape, const Tensor& logits, std::size_t target);
// Row-wise cross-entropy of logits[n x c] against targets[n]; result [n].
Tensor cross_entropy_rows(Tape& tape, const Tensor& logits, std::span<const std::size_t> targets);
// Sum over elements of 0.5 d^2 (|d| < 1) or |d| - 0.5, d = pred - target.
Tensor smooth_l1(Tape& tape, const Tensor& pred, const Tensor& target);

// ---- optimization ----------------------------------------------------------

struct NamedParameter {
  std::string name;
  Tensor tensor;
};

// SGD with momentum and L2 weight decay:
//   v <- momentum * v + grad + weight_decay * param
//   param <- param - lr * v
class SgdState {
 public:
  SgdState(double learning_rate, double momentum, double weight_decay);

  double learning_rate() const { return learning_rate_; }
  double momentum() const { return momentum_; }
  double weight_decay() const { return weight_decay_; }
  void set_learning_rate(double lr);

  // Velocity buffer for a parameter name; empty if never stepped.
  std::span<const double> velocity(const std::string& name) const;
  std::size_t buffer_count() const { return buffers_.size(); }

 private:
  struct Buffer {
    const void* owner = nullptr;
    std::vector<double> velocity;
  };

  double learning_rate_;
  double momentum_;
  double weight_decay_;
  std::vector<std::pair<std::string, Buffer>> buffers_;

  Buffer& buffer_for(const NamedParameter& p);

  friend void sgd_step(std::span<const NamedParameter>, SgdState&);
};

// Applies one update to every parameter and clears their gradients. Throws
// LookupError naming the first parameter without an accumulated gradient.
// A buffer whose parameter storage changed (e.g. a grown classifier) is
// reset to zero.
void sgd_step(std::span<const NamedParameter> params, SgdState& state);

// ---- verification ----------------------------------------------------------

// Max over coordinates of |analytic - central difference| / max(1, |analytic|).
using ScalarFunction = std::function<Tensor(Tape&, const Tensor&)>;
double grad_check(const ScalarFunction& f, const Tensor& point, double epsilon = 1e-5);

// Same measure over every entry of every parameter, for a loss that closes
// over the parameters. Parameter gradients are cleared on return.
using LossFunction = std::function<Tensor(Tape&)>;
double grad_check(const LossFunction& loss, std::span<const Tensor> params,
                  double epsilon = 1e-5);

// ---- initialization --------------------------------------------------------

// Uniform(-sqrt(6/(fan_in+fan_out)), +sqrt(6/(fan_in+fan_out))) weights.
Tensor glorot_uniform(std::size_t fan_in, std::size_t fan_out, Rng& rng,
                      bool requires_grad = true);

}  // namespace fskt

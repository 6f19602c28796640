#include "fskt/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "fskt/errors.hpp"

namespace fskt {

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << " x ";
    out << shape[i];
  }
  out << ']';
  return out.str();
}

namespace {

void require_finite(std::span<const double> values, const char* where) {
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      std::ostringstream msg;
      msg << where << ": non-finite value " << values[i] << " at index " << i;
      throw NumericalError(msg.str());
    }
  }
}

void require_rank2(const Tensor& t, const char* op) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(op) + ": expected a matrix, got shape " +
                         shape_string(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) +
                         " vs " + shape_string(b.shape()));
  }
}

}  // namespace

// ---- Tensor ----------------------------------------------------------------

Tensor::Tensor() : Tensor(Shape{}, std::vector<double>{0.0}) {}

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad)
    : storage_(std::make_shared<detail::TensorStorage>()) {
  if (shape_size(shape) != values.size()) {
    throw DimensionError("tensor shape " + shape_string(shape) + " holds " +
                         std::to_string(shape_size(shape)) + " values, got " +
                         std::to_string(values.size()));
  }
  require_finite(values, "tensor");
  storage_->shape = std::move(shape);
  storage_->values = std::move(values);
  storage_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return filled(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::filled(Shape shape, double value, bool requires_grad) {
  const std::size_t n = shape_size(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor(Shape{}, {value}, requires_grad);
}

Tensor Tensor::vector(std::vector<double> values, bool requires_grad) {
  const std::size_t n = values.size();
  return Tensor(Shape{n}, std::move(values), requires_grad);
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> values,
                      bool requires_grad) {
  return Tensor(Shape{rows, cols}, std::move(values), requires_grad);
}

Tensor Tensor::identity(std::size_t n, bool requires_grad) {
  std::vector<double> v(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) v[i * n + i] = 1.0;
  return matrix(n, n, std::move(v), requires_grad);
}

std::size_t Tensor::rows() const {
  if (rank() == 2) return shape()[0];
  if (rank() == 1) return 1;
  throw DimensionError("rows(): tensor of shape " + shape_string(shape()) + " is not a matrix");
}

std::size_t Tensor::cols() const {
  if (rank() == 2) return shape()[1];
  if (rank() == 1) return shape()[0];
  throw DimensionError("cols(): tensor of shape " + shape_string(shape()) + " is not a matrix");
}

double Tensor::at(std::size_t row, std::size_t col) const {
  return storage_->values[row * cols() + col];
}

double Tensor::item() const {
  if (size() != 1) {
    throw DimensionError("item(): tensor of shape " + shape_string(shape()) +
                         " is not a single value");
  }
  return storage_->values[0];
}

Tensor Tensor::detach() const {
  return Tensor(storage_->shape, storage_->values, false);
}

Tensor Tensor::clone_as_leaf() const {
  return Tensor(storage_->shape, storage_->values, true);
}

// ---- Tape ------------------------------------------------------------------

Tensor Tape::emit(const char* op, Shape shape, std::vector<double> values,
                  std::initializer_list<const Tensor*> inputs, BackwardFn backward) {
  bool needs_grad = false;
  for (const Tensor* t : inputs) needs_grad = needs_grad || t->requires_grad();
  require_finite(values, op);
  auto storage = std::make_shared<detail::TensorStorage>();
  storage->shape = std::move(shape);
  storage->values = std::move(values);
  storage->requires_grad = needs_grad && recording();
  if (storage->requires_grad) {
    if (consumed_) {
      throw Error(std::string(op) + ": tape already replayed; record a new forward pass");
    }
    records_.push_back(Record{storage, std::move(backward)});
  }
  return Tensor(std::move(storage));
}

Tensor Tape::emit(const char* op, Shape shape, std::vector<double> values,
                  const std::vector<Tensor>& inputs, BackwardFn backward) {
  bool needs_grad = false;
  for (const Tensor& t : inputs) needs_grad = needs_grad || t.requires_grad();
  require_finite(values, op);
  auto storage = std::make_shared<detail::TensorStorage>();
  storage->shape = std::move(shape);
  storage->values = std::move(values);
  storage->requires_grad = needs_grad && recording();
  if (storage->requires_grad) {
    if (consumed_) {
      throw Error(std::string(op) + ": tape already replayed; record a new forward pass");
    }
    records_.push_back(Record{storage, std::move(backward)});
  }
  return Tensor(std::move(storage));
}

void Tape::accumulate(const Tensor& t, std::span<const double> delta) {
  auto& s = *t.storage_;
  if (!s.requires_grad) return;
  if (s.grad.empty()) s.grad.assign(s.values.size(), 0.0);
  for (std::size_t i = 0; i < delta.size(); ++i) s.grad[i] += delta[i];
}

void Tape::accumulate_at(const Tensor& t, std::size_t index, double delta) {
  auto& s = *t.storage_;
  if (!s.requires_grad) return;
  if (s.grad.empty()) s.grad.assign(s.values.size(), 0.0);
  s.grad[index] += delta;
}

void Tape::backward(const Tensor& loss) {
  if (consumed_) throw Error("backward: tape already replayed; record a new forward pass");
  if (!recording()) throw Error("backward: inference tape records no operations");
  if (loss.size() != 1) {
    throw DimensionError("backward: loss must be a single value, got shape " +
                         shape_string(loss.shape()));
  }
  if (!loss.requires_grad()) throw Error("backward: loss does not depend on any parameter");
  const bool on_tape = std::any_of(records_.begin(), records_.end(), [&](const Record& r) {
    return r.output == loss.storage_;
  });
  if (!on_tape) throw Error("backward: loss was not produced on this tape");

  consumed_ = true;
  visits_ = 0;
  loss.storage_->grad.assign(1, 1.0);
  for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
    ++visits_;
    if (!it->output->grad.empty()) it->backward(it->output->grad);
  }
  // Drop the closures so intermediate storage can be released.
  records_.clear();
  records_.shrink_to_fit();
}

// ---- operations ------------------------------------------------------------

Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k) {
    throw DimensionError("matmul: inner dimensions differ, " + shape_string(a.shape()) +
                         " x " + shape_string(b.shape()));
  }
  std::vector<double> out(m * n, 0.0);
  const auto av = a.values();
  const auto bv = b.values();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = av[i * k + p];
      if (aip == 0.0) continue;
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] += aip * bv[p * n + j];
    }
  }
  return tape.emit("matmul", {m, n}, std::move(out), {&a, &b},
                   [a, b, m, k, n](std::span<const double> g) {
                     const auto av = a.values();
                     const auto bv = b.values();
                     if (a.requires_grad()) {
                       std::vector<double> ga(m * k, 0.0);
                       for (std::size_t i = 0; i < m; ++i)
                         for (std::size_t j = 0; j < n; ++j) {
                           const double gij = g[i * n + j];
                           if (gij == 0.0) continue;
                           for (std::size_t p = 0; p < k; ++p) ga[i * k + p] += gij * bv[p * n + j];
                         }
                       Tape::accumulate(a, ga);
                     }
                     if (b.requires_grad()) {
                       std::vector<double> gb(k * n, 0.0);
                       for (std::size_t i = 0; i < m; ++i)
                         for (std::size_t p = 0; p < k; ++p) {
                           const double aip = av[i * k + p];
                           if (aip == 0.0) continue;
                           for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += aip * g[i * n + j];
                         }
                       Tape::accumulate(b, gb);
                     }
                   });
}

Tensor transpose(Tape& tape, const Tensor& x) {
  require_rank2(x, "transpose");
  const std::size_t r = x.shape()[0], c = x.shape()[1];
  std::vector<double> out(r * c);
  const auto xv = x.values();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = xv[i * c + j];
  return tape.emit("transpose", {c, r}, std::move(out), {&x}, [x, r, c](std::span<const double> g) {
    std::vector<double> gx(r * c);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) gx[i * c + j] = g[j * r + i];
    Tape::accumulate(x, gx);
  });
}

Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return tape.emit("add", a.shape(), std::move(out), {&a, &b}, [a, b](std::span<const double> g) {
    Tape::accumulate(a, g);
    Tape::accumulate(b, g);
  });
}

Tensor sub(Tape& tape, const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return tape.emit("sub", a.shape(), std::move(out), {&a, &b}, [a, b](std::span<const double> g) {
    Tape::accumulate(a, g);
    if (b.requires_grad()) {
      std::vector<double> gb(g.begin(), g.end());
      for (double& v : gb) v = -v;
      Tape::accumulate(b, gb);
    }
  });
}

Tensor scale(Tape& tape, const Tensor& x, double factor) {
  std::vector<double> out(x.values().begin(), x.values().end());
  for (double& v : out) v *= factor;
  return tape.emit("scale", x.shape(), std::move(out), {&x},
                   [x, factor](std::span<const double> g) {
                     std::vector<double> gx(g.begin(), g.end());
                     for (double& v : gx) v *= factor;
                     Tape::accumulate(x, gx);
                   });
}

Tensor add_scalar(Tape& tape, const Tensor& x, const Tensor& s) {
  if (s.size() != 1) {
    throw DimensionError("add_scalar: expected a single value, got shape " +
                         shape_string(s.shape()));
  }
  const double v = s[0];
  std::vector<double> out(x.values().begin(), x.values().end());
  for (double& e : out) e += v;
  return tape.emit("add_scalar", x.shape(), std::move(out), {&x, &s},
                   [x, s](std::span<const double> g) {
                     Tape::accumulate(x, g);
                     double total = 0.0;
                     for (double e : g) total += e;
                     Tape::accumulate_at(s, 0, total);
                   });
}

Tensor relu(Tape& tape, const Tensor& x) {
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] > 0.0 ? x[i] : 0.0;
  return tape.emit("relu", x.shape(), std::move(out), {&x}, [x](std::span<const double> g) {
    std::vector<double> gx(g.size());
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] = x[i] > 0.0 ? g[i] : 0.0;
    Tape::accumulate(x, gx);
  });
}

Tensor elementwise_mul(Tape& tape, const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "elementwise_mul");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return tape.emit("elementwise_mul", a.shape(), std::move(out), {&a, &b},
                   [a, b](std::span<const double> g) {
                     if (a.requires_grad()) {
                       std::vector<double> ga(g.size());
                       for (std::size_t i = 0; i < ga.size(); ++i) ga[i] = g[i] * b[i];
                       Tape::accumulate(a, ga);
                     }
                     if (b.requires_grad()) {
                       std::vector<double> gb(g.size());
                       for (std::size_t i = 0; i < gb.size(); ++i) gb[i] = g[i] * a[i];
                       Tape::accumulate(b, gb);
                     }
                   });
}

namespace {

void require_row_vector(const Tensor& x, const Tensor& v, const char* op) {
  require_rank2(x, op);
  if (v.rank() != 1 || v.size() != x.shape()[1]) {
    throw DimensionError(std::string(op) + ": cannot broadcast " + shape_string(v.shape()) +
                         " over rows of " + shape_string(x.shape()));
  }
}

}  // namespace

Tensor mul_row_broadcast(Tape& tape, const Tensor& x, const Tensor& v) {
  require_row_vector(x, v, "mul_row_broadcast");
  const std::size_t n = x.shape()[0], d = x.shape()[1];
  std::vector<double> out(n * d);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] = x[i * d + j] * v[j];
  return tape.emit("mul_row_broadcast", {n, d}, std::move(out), {&x, &v},
                   [x, v, n, d](std::span<const double> g) {
                     if (x.requires_grad()) {
                       std::vector<double> gx(n * d);
                       for (std::size_t i = 0; i < n; ++i)
                         for (std::size_t j = 0; j < d; ++j) gx[i * d + j] = g[i * d + j] * v[j];
                       Tape::accumulate(x, gx);
                     }
                     if (v.requires_grad()) {
                       std::vector<double> gv(d, 0.0);
                       for (std::size_t i = 0; i < n; ++i)
                         for (std::size_t j = 0; j < d; ++j) gv[j] += g[i * d + j] * x[i * d + j];
                       Tape::accumulate(v, gv);
                     }
                   });
}

Tensor add_row_broadcast(Tape& tape, const Tensor& x, const Tensor& v) {
  require_row_vector(x, v, "add_row_broadcast");
  const std::size_t n = x.shape()[0], d = x.shape()[1];
  std::vector<double> out(n * d);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] = x[i * d + j] + v[j];
  return tape.emit("add_row_broadcast", {n, d}, std::move(out), {&x, &v},
                   [x, v, n, d](std::span<const double> g) {
                     Tape::accumulate(x, g);
                     if (v.requires_grad()) {
                       std::vector<double> gv(d, 0.0);
                       for (std::size_t i = 0; i < n; ++i)
                         for (std::size_t j = 0; j < d; ++j) gv[j] += g[i * d + j];
                       Tape::accumulate(v, gv);
                     }
                   });
}

Tensor mean_rows(Tape& tape, const Tensor& x) {
  require_rank2(x, "mean_rows");
  const std::size_t n = x.shape()[0], d = x.shape()[1];
  if (n == 0) throw DimensionError("mean_rows: empty input");
  std::vector<double> out(d, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) out[j] += x[i * d + j];
  for (double& v : out) v /= static_cast<double>(n);
  return tape.emit("mean_rows", {d}, std::move(out), {&x}, [x, n, d](std::span<const double> g) {
    std::vector<double> gx(n * d);
    const double w = 1.0 / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j) gx[i * d + j] = g[j] * w;
    Tape::accumulate(x, gx);
  });
}

Tensor sum(Tape& tape, const Tensor& x) {
  double total = 0.0;
  for (double v : x.values()) total += v;
  return tape.emit("sum", {}, {total}, {&x}, [x](std::span<const double> g) {
    Tape::accumulate(x, std::vector<double>(x.size(), g[0]));
  });
}

Tensor mean(Tape& tape, const Tensor& x) {
  if (x.size() == 0) throw DimensionError("mean: empty input");
  double total = 0.0;
  for (double v : x.values()) total += v;
  const double n = static_cast<double>(x.size());
  return tape.emit("mean", {}, {total / n}, {&x}, [x, n](std::span<const double> g) {
    Tape::accumulate(x, std::vector<double>(x.size(), g[0] / n));
  });
}

Tensor row(Tape& tape, const Tensor& x, std::size_t i) {
  require_rank2(x, "row");
  const std::size_t n = x.shape()[0], d = x.shape()[1];
  if (i >= n) {
    throw DimensionError("row: index " + std::to_string(i) + " outside " + shape_string(x.shape()));
  }
  std::vector<double> out(x.values().begin() + static_cast<std::ptrdiff_t>(i * d),
                          x.values().begin() + static_cast<std::ptrdiff_t>((i + 1) * d));
  return tape.emit("row", {d}, std::move(out), {&x}, [x, i, d](std::span<const double> g) {
    for (std::size_t j = 0; j < d; ++j) Tape::accumulate_at(x, i * d + j, g[j]);
  });
}

Tensor select_rows(Tape& tape, const Tensor& x, std::span<const std::size_t> rows) {
  require_rank2(x, "select_rows");
  const std::size_t n = x.shape()[0], d = x.shape()[1];
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  std::vector<double> out;
  out.reserve(idx.size() * d);
  for (std::size_t r : idx) {
    if (r >= n) {
      throw DimensionError("select_rows: index " + std::to_string(r) + " outside " +
                           shape_string(x.shape()));
    }
    for (std::size_t j = 0; j < d; ++j) out.push_back(x[r * d + j]);
  }
  return tape.emit("select_rows", {idx.size(), d}, std::move(out), {&x},
                   [x, idx, d](std::span<const double> g) {
                     for (std::size_t k = 0; k < idx.size(); ++k)
                       for (std::size_t j = 0; j < d; ++j)
                         Tape::accumulate_at(x, idx[k] * d + j, g[k * d + j]);
                   });
}

Tensor pick(Tape& tape, const Tensor& x, std::span<const std::size_t> index) {
  require_rank2(x, "pick");
  const std::size_t n = x.shape()[0], c = x.shape()[1];
  if (index.size() != n) {
    throw DimensionError("pick: " + std::to_string(index.size()) + " indices for " +
                         shape_string(x.shape()));
  }
  std::vector<std::size_t> idx(index.begin(), index.end());
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (idx[i] >= c) throw DimensionError("pick: column index outside " + shape_string(x.shape()));
    out[i] = x[i * c + idx[i]];
  }
  return tape.emit("pick", {n}, std::move(out), {&x}, [x, idx, c](std::span<const double> g) {
    for (std::size_t i = 0; i < idx.size(); ++i) Tape::accumulate_at(x, i * c + idx[i], g[i]);
  });
}

Tensor stack_columns(Tape& tape, const std::vector<Tensor>& columns) {
  if (columns.empty()) throw DimensionError("stack_columns: no columns");
  const std::size_t n = columns.front().size(), k = columns.size();
  for (const Tensor& col : columns) {
    if (col.rank() != 1 || col.size() != n) {
      throw DimensionError("stack_columns: column of shape " + shape_string(col.shape()) +
                           ", expected [" + std::to_string(n) + "]");
    }
  }
  std::vector<double> out(n * k);
  for (std::size_t j = 0; j < k; ++j)
    for (std::size_t i = 0; i < n; ++i) out[i * k + j] = columns[j][i];
  return tape.emit("stack_columns", {n, k}, std::move(out), columns,
                   [columns, n, k](std::span<const double> g) {
                     for (std::size_t j = 0; j < k; ++j) {
                       if (!columns[j].requires_grad()) continue;
                       std::vector<double> gc(n);
                       for (std::size_t i = 0; i < n; ++i) gc[i] = g[i * k + j];
                       Tape::accumulate(columns[j], gc);
                     }
                   });
}

namespace {

// Softmax of one row with max-shift; returns log-sum-exp.
double stable_softmax(std::span<const double> z, std::span<double> prob) {
  const double zmax = *std::max_element(z.begin(), z.end());
  double total = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    prob[i] = std::exp(z[i] - zmax);
    total += prob[i];
  }
  for (double& p : prob) p /= total;
  return zmax + std::log(total);
}

}  // namespace

Tensor softmax_cross_entropy(Tape& tape, const Tensor& logits, std::size_t target) {
  if (logits.rank() != 1 || logits.size() == 0) {
    throw DimensionError("softmax_cross_entropy: logits must be a non-empty vector, got " +
                         shape_string(logits.shape()));
  }
  const std::size_t c = logits.size();
  if (target >= c) {
    throw ValidationError("softmax_cross_entropy: target " + std::to_string(target) +
                          " out of range for " + std::to_string(c) + " classes");
  }
  std::vector<double> prob(c);
  const double lse = stable_softmax(logits.values(), prob);
  const double loss = lse - logits[target];
  return tape.emit("softmax_cross_entropy", {}, {loss}, {&logits},
                   [logits, prob, target](std::span<const double> g) {
                     std::vector<double> gl(prob);
                     gl[target] -= 1.0;
                     for (double& v : gl) v *= g[0];
                     Tape::accumulate(logits, gl);
                   });
}

Tensor cross_entropy_rows(Tape& tape, const Tensor& logits, std::span<const std::size_t> targets) {
  require_rank2(logits, "cross_entropy_rows");
  const std::size_t n = logits.shape()[0], c = logits.shape()[1];
  if (targets.size() != n) {
    throw DimensionError("cross_entropy_rows: " + std::to_string(targets.size()) +
                         " targets for " + shape_string(logits.shape()));
  }
  if (c == 0) throw DimensionError("cross_entropy_rows: zero classes");
  std::vector<std::size_t> tgt(targets.begin(), targets.end());
  std::vector<double> prob(n * c);
  std::vector<double> out(n);
  const auto lv = logits.values();
  for (std::size_t i = 0; i < n; ++i) {
    if (tgt[i] >= c) {
      throw ValidationError("cross_entropy_rows: target " + std::to_string(tgt[i]) +
                            " out of range for " + std::to_string(c) + " classes");
    }
    const double lse = stable_softmax(lv.subspan(i * c, c), std::span(prob).subspan(i * c, c));
    out[i] = lse - lv[i * c + tgt[i]];
  }
  return tape.emit("cross_entropy_rows", {n}, std::move(out), {&logits},
                   [logits, prob, tgt, n, c](std::span<const double> g) {
                     std::vector<double> gl(n * c);
                     for (std::size_t i = 0; i < n; ++i) {
                       for (std::size_t j = 0; j < c; ++j) gl[i * c + j] = prob[i * c + j] * g[i];
                       gl[i * c + tgt[i]] -= g[i];
                     }
                     Tape::accumulate(logits, gl);
                   });
}

Tensor smooth_l1(Tape& tape, const Tensor& pred, const Tensor& target) {
  require_same_shape(pred, target, "smooth_l1");
  double total = 0.0;
  std::vector<double> slope(pred.size());
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = pred[i] - target[i];
    if (std::abs(d) < 1.0) {
      total += 0.5 * d * d;
      slope[i] = d;
    } else {
      total += std::abs(d) - 0.5;
      slope[i] = d > 0.0 ? 1.0 : -1.0;
    }
  }
  return tape.emit("smooth_l1", {}, {total}, {&pred, &target},
                   [pred, target, slope](std::span<const double> g) {
                     std::vector<double> gp(slope);
                     for (double& v : gp) v *= g[0];
                     Tape::accumulate(pred, gp);
                     if (target.requires_grad()) {
                       for (double& v : gp) v = -v;
                       Tape::accumulate(target, gp);
                     }
                   });
}

// ---- SGD -------------------------------------------------------------------

SgdState::SgdState(double learning_rate, double momentum, double weight_decay)
    : learning_rate_(learning_rate), momentum_(momentum), weight_decay_(weight_decay) {
  if (!(learning_rate > 0.0)) throw ConfigError("SGD learning rate must be positive");
  if (momentum < 0.0 || weight_decay < 0.0) {
    throw ConfigError("SGD momentum and weight decay must be non-negative");
  }
}

void SgdState::set_learning_rate(double lr) {
  if (!(lr > 0.0)) throw ConfigError("SGD learning rate must be positive");
  learning_rate_ = lr;
}

std::span<const double> SgdState::velocity(const std::string& name) const {
  for (const auto& [key, buf] : buffers_)
    if (key == name) return buf.velocity;
  return {};
}

SgdState::Buffer& SgdState::buffer_for(const NamedParameter& p) {
  for (auto& [key, buf] : buffers_) {
    if (key != p.name) continue;
    if (buf.owner != p.tensor.identity_key() || buf.velocity.size() != p.tensor.size()) {
      buf.owner = p.tensor.identity_key();
      buf.velocity.assign(p.tensor.size(), 0.0);
    }
    return buf;
  }
  buffers_.emplace_back(p.name, Buffer{p.tensor.identity_key(),
                                       std::vector<double>(p.tensor.size(), 0.0)});
  return buffers_.back().second;
}

void sgd_step(std::span<const NamedParameter> params, SgdState& state) {
  for (const NamedParameter& p : params) {
    if (!p.tensor.has_grad()) throw LookupError("sgd_step: no gradient for parameter '" + p.name + "'");
  }
  for (const NamedParameter& p : params) {
    auto& buf = state.buffer_for(p);
    Tensor t = p.tensor;
    auto values = t.mutable_values();
    const auto grad = t.grad();
    for (std::size_t i = 0; i < values.size(); ++i) {
      buf.velocity[i] = state.momentum_ * buf.velocity[i] + grad[i] + state.weight_decay_ * values[i];
      values[i] -= state.learning_rate_ * buf.velocity[i];
    }
    require_finite(values, ("sgd_step(" + p.name + ")").c_str());
    t.clear_grad();
  }
}

// ---- verification ----------------------------------------------------------

namespace {

double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max(1.0, std::abs(analytic));
}

double evaluate_scalar(const std::function<Tensor(Tape&)>& f, std::size_t coord, double sign) {
  Tape probe(Tape::Mode::kInference);
  const double v = f(probe).item();
  if (!std::isfinite(v)) {
    std::ostringstream msg;
    msg << "grad_check: non-finite value at coordinate " << coord << " (" << (sign > 0 ? '+' : '-')
        << "epsilon)";
    throw NumericalError(msg.str());
  }
  return v;
}

}  // namespace

double grad_check(const ScalarFunction& f, const Tensor& point, double epsilon) {
  Tensor x = point.clone_as_leaf();
  return grad_check([&](Tape& tape) { return f(tape, x); }, std::span<const Tensor>(&x, 1),
                    epsilon);
}

double grad_check(const LossFunction& loss, std::span<const Tensor> params, double epsilon) {
  std::vector<Tensor> ps(params.begin(), params.end());
  for (Tensor& p : ps) p.clear_grad();

  std::vector<std::vector<double>> analytic;
  {
    Tape tape;
    Tensor value = loss(tape);
    if (!std::isfinite(value.item())) throw NumericalError("grad_check: non-finite loss");
    if (value.requires_grad()) tape.backward(value);
    for (Tensor& p : ps) {
      if (p.has_grad())
        analytic.emplace_back(p.grad().begin(), p.grad().end());
      else
        analytic.emplace_back(p.size(), 0.0);
      p.clear_grad();
    }
  }

  double worst = 0.0;
  for (std::size_t k = 0; k < ps.size(); ++k) {
    auto values = ps[k].mutable_values();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + epsilon;
      const double up = evaluate_scalar(loss, i, +1.0);
      values[i] = saved - epsilon;
      const double down = evaluate_scalar(loss, i, -1.0);
      values[i] = saved;
      const double numeric = (up - down) / (2.0 * epsilon);
      worst = std::max(worst, relative_error(analytic[k][i], numeric));
    }
  }
  return worst;
}

Tensor glorot_uniform(std::size_t fan_in, std::size_t fan_out, Rng& rng, bool requires_grad) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::vector<double> v(fan_in * fan_out);
  for (double& w : v) w = rng.uniform(-bound, bound);
  return Tensor::matrix(fan_in, fan_out, std::move(v), requires_grad);
}

}  // namespace fskt

#include "glad/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>

#include "glad/error.hpp"

namespace glad {

using detail::TensorStorage;
using StoragePtr = std::shared_ptr<TensorStorage>;

struct TensorAccess {
  static const StoragePtr& storage(const Tensor& t) { return t.s_; }
};

std::string shape_str(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << ',';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

// ---- Tensor --------------------------------------------------------------

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad) {
  if (shape.empty()) shape = {1};
  for (auto d : shape) {
    if (d == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
  }
  if (shape_numel(shape) != data.size()) {
    throw DimensionError("tensor data length " + std::to_string(data.size()) +
                         " does not match shape " + shape_str(shape));
  }
  s_ = std::make_shared<TensorStorage>();
  s_->shape = std::move(shape);
  s_->data = std::move(data);
  s_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return filled(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::filled(Shape shape, double value, bool requires_grad) {
  const auto n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value) { return Tensor({1}, {value}); }

Tensor Tensor::vector(std::vector<double> values) {
  const auto n = values.size();
  return Tensor({n}, std::move(values));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> values) {
  return Tensor({rows, cols}, std::move(values));
}

double Tensor::at(std::size_t row, std::size_t col) const {
  if (rank() != 2) throw DimensionError("at(row, col) needs a 2-D tensor, got " + shape_str(shape()));
  return s_->data.at(row * s_->shape[1] + col);
}

double Tensor::item() const {
  if (size() != 1) throw ContractError("item() on non-scalar tensor of shape " + shape_str(shape()));
  return s_->data[0];
}

void Tensor::set_requires_grad(bool value) {
  if (!is_leaf()) throw ContractError("requires_grad can only be changed on leaf tensors");
  s_->requires_grad = value;
  if (!value) s_->grad.clear();
}

std::vector<double> Tensor::grad() const {
  if (s_->grad.empty()) return std::vector<double>(s_->data.size(), 0.0);
  return s_->grad;
}

std::optional<std::size_t> Tensor::node_id() const {
  if (is_leaf()) return std::nullopt;
  return s_->node_id;
}

Tensor Tensor::clone() const { return Tensor(s_->shape, s_->data, s_->requires_grad && is_leaf()); }

Tensor Tensor::detach() const { return Tensor(s_->shape, s_->data, false); }

// ---- Tape ----------------------------------------------------------------

namespace {

std::atomic<std::uint64_t> next_tape_id{1};
thread_local Tape* current_tape = nullptr;

bool all_finite(const std::vector<double>& v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

}  // namespace

Tape::Tape() : id_(next_tape_id.fetch_add(1)) {}

void Tape::reset() {
  nodes_.clear();
  consumed_ = false;
  id_ = next_tape_id.fetch_add(1);
}

Tensor Tape::record(Shape shape, std::vector<double> data, const std::vector<Tensor>& inputs, Vjp vjp) {
  if (consumed_) throw LifecycleError("cannot record on a tape that has already run backward");
  for (const auto& in : inputs) {
    const auto& s = TensorAccess::storage(in);
    if (s->tape_id != 0 && s->tape_id != id_) {
      throw LifecycleError("operand was recorded on a different or stale tape");
    }
  }
  Tensor out(std::move(shape), std::move(data), true);
  out.s_->tape_id = id_;
  out.s_->node_id = nodes_.size();
  nodes_.push_back(Node{out.s_, std::move(vjp)});
  return out;
}

void Tape::backward(const Tensor& root) {
  if (!root.defined()) throw ContractError("backward on undefined tensor");
  const auto& rs = root.s_;
  if (rs->tape_id != id_) throw LifecycleError("backward root was not recorded on this tape (stale or foreign)");
  if (consumed_) throw LifecycleError("backward already ran on this tape; reset() before reuse");
  if (rs->data.size() != 1) throw ContractError("backward root must be a scalar, got shape " + shape_str(rs->shape));
  consumed_ = true;
  rs->ensure_grad();
  rs->grad[0] = 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    const auto& out = it->output;
    if (out->grad.empty()) continue;  // not on any path to the root
    if (!all_finite(out->grad)) throw NumericError("non-finite gradient during backward");
    it->vjp(out->grad);
  }
}

TapeScope::TapeScope(Tape* tape) : previous_(current_tape) { current_tape = tape; }

TapeScope::~TapeScope() { current_tape = previous_; }

Tape* active_tape() { return current_tape; }

// ---- op helpers ------------------------------------------------------------

namespace {

bool wants_grad(const std::vector<Tensor>& inputs) {
  if (!current_tape) return false;
  return std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
}

// Builds the result of an op; the VJP factory is only invoked when recording.
template <typename MakeVjp>
Tensor finish(Shape shape, std::vector<double> data, const std::vector<Tensor>& inputs, MakeVjp&& make_vjp) {
  if (!wants_grad(inputs)) return Tensor(std::move(shape), std::move(data), false);
  return current_tape->record(std::move(shape), std::move(data), inputs, make_vjp());
}

// Grad buffer of an operand, or nullptr when it does not participate.
double* grad_of(const StoragePtr& s) {
  if (!s->requires_grad) return nullptr;
  s->ensure_grad();
  return s->grad.data();
}

void require_rank(const Tensor& t, std::size_t r, const char* op) {
  if (t.rank() != r) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(r) + ", got shape " +
                         shape_str(t.shape()));
  }
}

std::size_t last_dim(const Tensor& t) { return t.shape().back(); }

// Broadcast check for add/sub: true when b repeats over a's leading dims.
bool trailing_match(const Shape& a, const Shape& b) {
  if (b.size() > a.size()) return false;
  return std::equal(b.rbegin(), b.rend(), a.rbegin());
}

Tensor add_like(const Tensor& a, const Tensor& b, double sign, const char* op) {
  const bool same = a.shape() == b.shape();
  if (!same && !trailing_match(a.shape(), b.shape())) {
    throw DimensionError(std::string(op) + ": incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  const std::size_t n = a.size();
  const std::size_t m = b.size();
  std::vector<double> out(n);
  auto ad = a.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < n; ++i) out[i] = ad[i] + sign * bd[i % m];
  return finish(a.shape(), std::move(out), {a, b}, [&] {
    auto sa = TensorAccess::storage(a);
    auto sb = TensorAccess::storage(b);
    return [sa, sb, sign, n, m](const std::vector<double>& g) {
      if (double* ga = grad_of(sa)) {
        for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
      }
      if (double* gb = grad_of(sb)) {
        for (std::size_t i = 0; i < n; ++i) gb[i % m] += sign * g[i];
      }
    };
  });
}

template <typename Fwd, typename Deriv>
Tensor unary(const Tensor& a, Fwd fwd, Deriv deriv) {
  const std::size_t n = a.size();
  std::vector<double> out(n);
  auto ad = a.data();
  for (std::size_t i = 0; i < n; ++i) out[i] = fwd(ad[i]);
  return finish(a.shape(), out, {a}, [&] {
    auto sa = TensorAccess::storage(a);
    // deriv(x, y) gives dy/dx from the input and the output value
    return [sa, out, deriv](const std::vector<double>& g) {
      if (double* ga = grad_of(sa)) {
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * deriv(sa->data[i], out[i]);
      }
    };
  });
}

}  // namespace

// ---- ops -------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: cannot multiply " + shape_str(a.shape()) + " by " + shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(m * n, 0.0);
  auto ad = a.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = ad[i * k + p];
      const double* brow = &bd[p * n];
      double* orow = &out[i * n];
      for (std::size_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
    }
  }
  return finish({m, n}, std::move(out), {a, b}, [&] {
    auto sa = TensorAccess::storage(a);
    auto sb = TensorAccess::storage(b);
    return [sa, sb, m, k, n](const std::vector<double>& g) {
      if (double* ga = grad_of(sa)) {
        const auto& bd = sb->data;
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t p = 0; p < k; ++p) {
            double acc = 0.0;
            for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * bd[p * n + j];
            ga[i * k + p] += acc;
          }
        }
      }
      if (double* gb = grad_of(sb)) {
        const auto& ad = sa->data;
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t p = 0; p < k; ++p) {
            const double aip = ad[i * k + p];
            for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += aip * g[i * n + j];
          }
        }
      }
    };
  });
}

Tensor transpose(const Tensor& a) {
  require_rank(a, 2, "transpose");
  const std::size_t r = a.dim(0), c = a.dim(1);
  std::vector<double> out(r * c);
  auto ad = a.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = ad[i * c + j];
  return finish({c, r}, std::move(out), {a}, [&] {
    auto sa = TensorAccess::storage(a);
    return [sa, r, c](const std::vector<double>& g) {
      if (double* ga = grad_of(sa)) {
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += g[j * r + i];
      }
    };
  });
}

Tensor add(const Tensor& a, const Tensor& b) { return add_like(a, b, 1.0, "add"); }

Tensor sub(const Tensor& a, const Tensor& b) { return add_like(a, b, -1.0, "sub"); }

Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("mul: shapes differ " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  const std::size_t n = a.size();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] * b[i];
  return finish(a.shape(), std::move(out), {a, b}, [&] {
    auto sa = TensorAccess::storage(a);
    auto sb = TensorAccess::storage(b);
    return [sa, sb, n](const std::vector<double>& g) {
      if (double* ga = grad_of(sa)) {
        for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * sb->data[i];
      }
      if (double* gb = grad_of(sb)) {
        for (std::size_t i = 0; i < n; ++i) gb[i] += g[i] * sa->data[i];
      }
    };
  });
}

Tensor scale(const Tensor& a, double c) {
  return unary(a, [c](double x) { return c * x; }, [c](double, double) { return c; });
}

Tensor relu(const Tensor& a) {
  return unary(
      a, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor tanh(const Tensor& a) {
  return unary(a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Tensor exp(const Tensor& a) {
  return unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  for (double x : a.data()) {
    if (!(x > 0.0)) throw DomainError("log: operand must be strictly positive, got " + std::to_string(x));
  }
  return unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor concat(const Tensor& a, const Tensor& b) {
  if (a.rank() != b.rank() || !std::equal(a.shape().begin(), a.shape().end() - 1, b.shape().begin())) {
    throw DimensionError("concat: leading dimensions differ " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
  const std::size_t p = last_dim(a), q = last_dim(b);
  const std::size_t rows = a.size() / p;
  std::vector<double> out(rows * (p + q));
  auto ad = a.data();
  auto bd = b.data();
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(&ad[r * p], p, &out[r * (p + q)]);
    std::copy_n(&bd[r * q], q, &out[r * (p + q) + p]);
  }
  Shape shape = a.shape();
  shape.back() = p + q;
  return finish(std::move(shape), std::move(out), {a, b}, [&] {
    auto sa = TensorAccess::storage(a);
    auto sb = TensorAccess::storage(b);
    return [sa, sb, rows, p, q](const std::vector<double>& g) {
      double* ga = grad_of(sa);
      double* gb = grad_of(sb);
      for (std::size_t r = 0; r < rows; ++r) {
        if (ga)
          for (std::size_t j = 0; j < p; ++j) ga[r * p + j] += g[r * (p + q) + j];
        if (gb)
          for (std::size_t j = 0; j < q; ++j) gb[r * q + j] += g[r * (p + q) + p + j];
      }
    };
  });
}

Tensor l2_normalize(const Tensor& v) {
  const std::size_t d = last_dim(v);
  const std::size_t rows = v.size() / d;
  std::vector<double> out(v.size());
  std::vector<double> norms(rows);
  auto vd = v.data();
  for (std::size_t r = 0; r < rows; ++r) {
    double ss = 0.0;
    for (std::size_t j = 0; j < d; ++j) ss += vd[r * d + j] * vd[r * d + j];
    const double nrm = std::sqrt(ss);
    if (!(nrm >= kNormFloor)) {
      throw DegenerateInputError("l2_normalize: row " + std::to_string(r) + " has norm below 1e-12");
    }
    norms[r] = nrm;
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = vd[r * d + j] / nrm;
  }
  return finish(v.shape(), out, {v}, [&] {
    auto sv = TensorAccess::storage(v);
    return [sv, out, norms, rows, d](const std::vector<double>& g) {
      double* gv = grad_of(sv);
      if (!gv) return;
      for (std::size_t r = 0; r < rows; ++r) {
        double yg = 0.0;
        for (std::size_t j = 0; j < d; ++j) yg += out[r * d + j] * g[r * d + j];
        for (std::size_t j = 0; j < d; ++j) gv[r * d + j] += (g[r * d + j] - out[r * d + j] * yg) / norms[r];
      }
    };
  });
}

namespace {

std::vector<double> softmax_values(const Tensor& logits, bool take_log) {
  const std::size_t c = last_dim(logits);
  const std::size_t rows = logits.size() / c;
  auto x = logits.data();
  std::vector<double> out(logits.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = &x[r * c];
    for (std::size_t j = 0; j < c; ++j) {
      if (!std::isfinite(row[j])) throw NumericError("softmax: non-finite logit");
    }
    const double mx = *std::max_element(row, row + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(row[j] - mx);
    const double log_z = std::log(z);
    for (std::size_t j = 0; j < c; ++j) {
      const double ls = row[j] - mx - log_z;
      out[r * c + j] = take_log ? ls : std::exp(row[j] - mx) / z;
    }
  }
  return out;
}

}  // namespace

Tensor softmax(const Tensor& logits) {
  const std::size_t c = last_dim(logits);
  const std::size_t rows = logits.size() / c;
  auto out = softmax_values(logits, false);
  return finish(logits.shape(), out, {logits}, [&] {
    auto sl = TensorAccess::storage(logits);
    return [sl, out, rows, c](const std::vector<double>& g) {
      double* gl = grad_of(sl);
      if (!gl) return;
      for (std::size_t r = 0; r < rows; ++r) {
        double gy = 0.0;
        for (std::size_t j = 0; j < c; ++j) gy += g[r * c + j] * out[r * c + j];
        for (std::size_t j = 0; j < c; ++j) gl[r * c + j] += out[r * c + j] * (g[r * c + j] - gy);
      }
    };
  });
}

Tensor log_softmax(const Tensor& logits) {
  const std::size_t c = last_dim(logits);
  const std::size_t rows = logits.size() / c;
  auto out = softmax_values(logits, true);
  return finish(logits.shape(), out, {logits}, [&] {
    auto sl = TensorAccess::storage(logits);
    return [sl, out, rows, c](const std::vector<double>& g) {
      double* gl = grad_of(sl);
      if (!gl) return;
      for (std::size_t r = 0; r < rows; ++r) {
        double gs = 0.0;
        for (std::size_t j = 0; j < c; ++j) gs += g[r * c + j];
        for (std::size_t j = 0; j < c; ++j) gl[r * c + j] += g[r * c + j] - std::exp(out[r * c + j]) * gs;
      }
    };
  });
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double x : a.data()) s += x;
  return finish({1}, {s}, {a}, [&] {
    auto sa = TensorAccess::storage(a);
    return [sa](const std::vector<double>& g) {
      if (double* ga = grad_of(sa)) {
        for (std::size_t i = 0; i < sa->data.size(); ++i) ga[i] += g[0];
      }
    };
  });
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.size())); }

Tensor sum_last(const Tensor& a) {
  const std::size_t d = last_dim(a);
  const std::size_t rows = a.size() / d;
  std::vector<double> out(rows, 0.0);
  auto ad = a.data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < d; ++j) out[r] += ad[r * d + j];
  Shape shape(a.shape().begin(), a.shape().end() - 1);
  if (shape.empty()) shape = {1};
  return finish(std::move(shape), std::move(out), {a}, [&] {
    auto sa = TensorAccess::storage(a);
    return [sa, rows, d](const std::vector<double>& g) {
      if (double* ga = grad_of(sa)) {
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < d; ++j) ga[r * d + j] += g[r];
      }
    };
  });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.size()) {
    throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  std::vector<double> out(a.data().begin(), a.data().end());
  return finish(std::move(shape), std::move(out), {a}, [&] {
    auto sa = TensorAccess::storage(a);
    return [sa](const std::vector<double>& g) {
      if (double* ga = grad_of(sa)) {
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
    };
  });
}

Tensor gather_rows(const Tensor& a, std::span<const std::size_t> rows) {
  if (rows.empty()) throw DimensionError("gather_rows: empty index list");
  const std::size_t n_rows = a.dim(0);
  const std::size_t width = a.size() / n_rows;
  std::vector<double> out(rows.size() * width);
  auto ad = a.data();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= n_rows) {
      throw DimensionError("gather_rows: index " + std::to_string(rows[i]) + " out of range for " +
                           shape_str(a.shape()));
    }
    std::copy_n(&ad[rows[i] * width], width, &out[i * width]);
  }
  Shape shape = a.shape();
  shape[0] = rows.size();
  return finish(std::move(shape), std::move(out), {a}, [&] {
    auto sa = TensorAccess::storage(a);
    std::vector<std::size_t> idx(rows.begin(), rows.end());
    return [sa, idx, width](const std::vector<double>& g) {
      if (double* ga = grad_of(sa)) {
        for (std::size_t i = 0; i < idx.size(); ++i)
          for (std::size_t j = 0; j < width; ++j) ga[idx[i] * width + j] += g[i * width + j];
      }
    };
  });
}

Tensor pick(const Tensor& a, std::span<const std::size_t> cols) {
  require_rank(a, 2, "pick");
  const std::size_t rows = a.dim(0), c = a.dim(1);
  if (cols.size() != rows) {
    throw DimensionError("pick: " + std::to_string(cols.size()) + " indices for " + shape_str(a.shape()));
  }
  std::vector<double> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    if (cols[r] >= c) throw DimensionError("pick: column " + std::to_string(cols[r]) + " out of range");
    out[r] = a[r * c + cols[r]];
  }
  return finish({rows}, std::move(out), {a}, [&] {
    auto sa = TensorAccess::storage(a);
    std::vector<std::size_t> idx(cols.begin(), cols.end());
    return [sa, idx, c](const std::vector<double>& g) {
      if (double* ga = grad_of(sa)) {
        for (std::size_t r = 0; r < idx.size(); ++r) ga[r * c + idx[r]] += g[r];
      }
    };
  });
}

}  // namespace glad

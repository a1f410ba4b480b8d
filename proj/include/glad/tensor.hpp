#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace glad {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

namespace detail {

struct TensorStorage {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until a backward pass touches it
  bool requires_grad = false;
  std::uint64_t tape_id = 0;  // 0 for leaves
  std::size_t node_id = 0;

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
};

}  // namespace detail

// Dense row-major array of doubles. Copies share storage (handle semantics);
// use clone() for a deep copy.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor filled(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value);
  static Tensor vector(std::vector<double> values);
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values);

  bool defined() const { return static_cast<bool>(s_); }
  const Shape& shape() const { return s_->shape; }
  std::size_t rank() const { return s_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return s_->shape.at(axis); }
  std::size_t size() const { return s_->data.size(); }

  std::span<const double> data() const { return s_->data; }
  std::span<double> mutable_data() { return s_->data; }
  double operator[](std::size_t i) const { return s_->data[i]; }
  double at(std::size_t row, std::size_t col) const;
  double item() const;

  bool requires_grad() const { return s_->requires_grad; }
  void set_requires_grad(bool value);
  bool has_grad() const { return !s_->grad.empty(); }
  // Zero-filled view when no gradient has been accumulated yet.
  std::vector<double> grad() const;
  void zero_grad() { s_->grad.clear(); }

  bool is_leaf() const { return s_->tape_id == 0; }
  std::optional<std::size_t> node_id() const;

  Tensor clone() const;
  Tensor detach() const;
  bool same_storage(const Tensor& other) const { return s_ == other.s_; }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorStorage> s) : s_(std::move(s)) {}

  std::shared_ptr<detail::TensorStorage> s_;

  friend class Tape;
  friend struct TensorAccess;
};

// Append-only record of operations for one forward pass. Nodes are appended in
// execution order, so reverse iteration is a valid topological order.
class Tape {
 public:
  using Vjp = std::function<void(const std::vector<double>& out_grad)>;

  Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Propagates d(root)/d(leaf) into every leaf that requires grad. A tape can
  // be run backward once; reset() starts a fresh recording.
  void backward(const Tensor& root);
  void reset();

  std::size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }
  std::uint64_t id() const { return id_; }

  // Low-level hook used by the op library.
  Tensor record(Shape shape, std::vector<double> data,
                const std::vector<Tensor>& inputs, Vjp vjp);

 private:
  struct Node {
    std::shared_ptr<detail::TensorStorage> output;
    Vjp vjp;
  };

  std::uint64_t id_;
  std::vector<Node> nodes_;
  bool consumed_ = false;
};

// Makes `tape` the thread's recording target for the guard's lifetime.
// Passing nullptr disables recording (evaluation mode).
class TapeScope {
 public:
  explicit TapeScope(Tape* tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

Tape* active_tape();

// ---- differentiable ops -------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

// add/sub accept equal shapes, or `b` matching the trailing dims of `a`
// (broadcast over the leading batch dimension).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor relu(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);

Tensor concat(const Tensor& a, const Tensor& b);
Tensor l2_normalize(const Tensor& v);
Tensor softmax(const Tensor& logits);
Tensor log_softmax(const Tensor& logits);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
// Reduces the last axis.
Tensor sum_last(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);
// Selects first-axis slices; repeated indices accumulate in backward.
Tensor gather_rows(const Tensor& a, std::span<const std::size_t> rows);
// out[i] = a[i, cols[i]] for a 2-D input.
Tensor pick(const Tensor& a, std::span<const std::size_t> cols);

inline constexpr double kNormFloor = 1e-12;

}  // namespace glad

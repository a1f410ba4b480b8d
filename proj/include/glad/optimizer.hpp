#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "glad/objective.hpp"
#include "glad/tensor.hpp"

namespace glad {

using FlatVector = std::vector<double>;

// Ordered set of trainable tensors with a flattened view. Entry order fixes
// the layout of every gradient, perturbation and update vector.
class ParamSet {
 public:
  struct Entry {
    std::string name;
    Tensor tensor;
    std::size_t offset;
  };

  ParamSet() = default;
  explicit ParamSet(const std::vector<std::pair<std::string, Tensor>>& named);

  void add(std::string name, Tensor tensor);

  std::size_t size() const { return total_; }
  std::size_t count() const { return entries_.size(); }
  const std::vector<Entry>& entries() const { return entries_; }

  FlatVector values() const;
  void set_values(std::span<const double> flat);
  // theta += step * direction
  void add_scaled(std::span<const double> direction, double step);

  FlatVector gradients() const;
  void zero_grad();

  // Offsets of each entry plus the total, i.e. count() + 1 boundaries.
  std::vector<std::size_t> boundaries() const;

 private:
  void check_length(std::size_t n, const char* what) const;

  std::vector<Entry> entries_;
  std::size_t total_ = 0;
};

enum class ProjectionScope { global, per_tensor };

std::string to_string(ProjectionScope s);
ProjectionScope parse_projection_scope(const std::string& name);

struct GradRegConfig {
  double rho = 0.1;
  double alpha = 0.5;
  double delta = 1e-12;
  ProjectionScope scope = ProjectionScope::global;

  void validate() const;
};

enum class UpdateKind { sgd, sgd_momentum };

std::string to_string(UpdateKind k);
UpdateKind parse_update_kind(const std::string& name);

struct UpdateRule {
  UpdateKind kind = UpdateKind::sgd_momentum;
  double base_lr = 0.001;
  double momentum = 0.9;
  std::size_t total_steps = 1;

  void validate() const;
  double lr(std::size_t t) const;
};

// Per-run optimizer state (momentum buffer).
struct UpdateState {
  FlatVector velocity;
};

// base * (1 + cos(pi t / T)) / 2, for 0 <= t <= T.
double cosine_lr(std::size_t t, std::size_t total, double base);

using LossFn = std::function<LossEval()>;

struct GradientEval {
  FlatVector grad;
  double loss = 0.0;
  double ce = 0.0;
  double kl = 0.0;
};

// One recorded forward + backward at the current parameters. Throws
// NumericError on a non-finite loss or gradient. Parameters are untouched.
GradientEval compute_gradient(const LossFn& loss_fn, ParamSet& params);

// Number of compute_gradient calls made on this thread so far.
std::size_t gradient_pass_count();

// rho * g / ||g||, or an empty vector when ||g|| <= 1e-12 (skip signal).
FlatVector sam_perturbation(std::span<const double> g, double rho);

// Gradient at theta + eps. Parameters are restored bit-exactly on return,
// including when the evaluation throws.
GradientEval perturbed_gradient(const LossFn& loss_fn, ParamSet& params, std::span<const double> eps);

struct ProjectionResult {
  FlatVector grad;
  bool projected = false;
};

// Removes the component of g_prime that opposes g when <g, g_prime> < 0:
//   g' - <g, g'> / (||g||^2 + delta) * g
// With per-tensor scope the test and projection run independently on each
// [boundaries[i], boundaries[i+1]) segment.
ProjectionResult project_conflict(std::span<const double> g, std::span<const double> g_prime, double delta,
                                  ProjectionScope scope = ProjectionScope::global,
                                  std::span<const std::size_t> boundaries = {});

// (1 - alpha) g + alpha g'
FlatVector fuse_gradients(std::span<const double> g, std::span<const double> g_prime, double alpha);

struct StepReport {
  std::size_t step = 0;
  double lr = 0.0;
  double loss = 0.0;
  double ce = 0.0;
  double kl = 0.0;
  double perturbed_loss = 0.0;
  double dot = 0.0;  // <g, g'> before projection
  int dot_sign = 0;
  bool projected = false;
  bool perturbation_skipped = false;
  double norm_g = 0.0;
  double norm_g_prime = 0.0;  // after projection
  double norm_fused = 0.0;
  double fused_dot_g = 0.0;  // <g_f, g>
  std::size_t passes = 0;

  std::string to_json_line() const;
};

// Applies theta <- theta - lr(t) * update(direction) per the rule.
void apply_update(ParamSet& params, std::span<const double> direction, const UpdateRule& rule, UpdateState& state,
                  std::size_t t);

// Conflict-filtered gradient fusion followed by the update rule: two
// forward/backward passes (theta and theta + eps). On error theta is left
// unchanged.
StepReport regularized_step(const LossFn& loss_fn, ParamSet& params, const GradRegConfig& cfg,
                            const UpdateRule& rule, UpdateState& state, std::size_t t);

// Plain gradient step (one pass).
StepReport gradient_step(const LossFn& loss_fn, ParamSet& params, const UpdateRule& rule, UpdateState& state,
                         std::size_t t);

// SAM step: update with the gradient taken at theta + eps (two passes).
StepReport sam_step(const LossFn& loss_fn, ParamSet& params, double rho, const UpdateRule& rule,
                    UpdateState& state, std::size_t t);

double dot(std::span<const double> a, std::span<const double> b);
double norm2(std::span<const double> a);

}  // namespace glad

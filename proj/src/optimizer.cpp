#include "glad/optimizer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include <nlohmann/json.hpp>

#include "glad/error.hpp"

namespace glad {

// ---- ParamSet ---------------------------------------------------------------

ParamSet::ParamSet(const std::vector<std::pair<std::string, Tensor>>& named) {
  for (const auto& [name, t] : named) add(name, t);
}

void ParamSet::add(std::string name, Tensor tensor) {
  if (!tensor.defined() || !tensor.is_leaf() || !tensor.requires_grad()) {
    throw ContractError("ParamSet entry '" + name + "' must be a trainable leaf tensor");
  }
  for (const auto& e : entries_) {
    if (e.name == name) throw ContractError("duplicate ParamSet entry '" + name + "'");
  }
  const std::size_t n = tensor.size();
  entries_.push_back(Entry{std::move(name), std::move(tensor), total_});
  total_ += n;
}

void ParamSet::check_length(std::size_t n, const char* what) const {
  if (n != total_) {
    throw ContractError(std::string(what) + ": vector of length " + std::to_string(n) +
                        " does not match parameter count " + std::to_string(total_));
  }
}

FlatVector ParamSet::values() const {
  FlatVector out;
  out.reserve(total_);
  for (const auto& e : entries_) out.insert(out.end(), e.tensor.data().begin(), e.tensor.data().end());
  return out;
}

void ParamSet::set_values(std::span<const double> flat) {
  check_length(flat.size(), "set_values");
  for (auto& e : entries_) {
    auto dst = e.tensor.mutable_data();
    std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(e.offset), dst.size(), dst.begin());
  }
}

void ParamSet::add_scaled(std::span<const double> direction, double step) {
  check_length(direction.size(), "add_scaled");
  for (auto& e : entries_) {
    auto dst = e.tensor.mutable_data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += step * direction[e.offset + i];
  }
}

FlatVector ParamSet::gradients() const {
  FlatVector out;
  out.reserve(total_);
  for (const auto& e : entries_) {
    const auto g = e.tensor.grad();
    out.insert(out.end(), g.begin(), g.end());
  }
  return out;
}

void ParamSet::zero_grad() {
  for (auto& e : entries_) e.tensor.zero_grad();
}

std::vector<std::size_t> ParamSet::boundaries() const {
  std::vector<std::size_t> out;
  for (const auto& e : entries_) out.push_back(e.offset);
  out.push_back(total_);
  return out;
}

// ---- config -------------------------------------------------------------------

std::string to_string(ProjectionScope s) { return s == ProjectionScope::global ? "global" : "per_tensor"; }

ProjectionScope parse_projection_scope(const std::string& name) {
  if (name == "global") return ProjectionScope::global;
  if (name == "per_tensor") return ProjectionScope::per_tensor;
  throw ConfigError("unknown projection scope '" + name + "' (expected global or per_tensor)");
}

void GradRegConfig::validate() const {
  if (!(rho > 0.0)) throw ConfigError("gradreg.rho must be positive");
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("gradreg.alpha must lie in [0, 1]");
  if (!(delta > 0.0)) throw ConfigError("gradreg.delta must be positive");
}

std::string to_string(UpdateKind k) { return k == UpdateKind::sgd ? "sgd" : "sgd_momentum"; }

UpdateKind parse_update_kind(const std::string& name) {
  if (name == "sgd") return UpdateKind::sgd;
  if (name == "sgd_momentum") return UpdateKind::sgd_momentum;
  throw ConfigError("unknown update rule '" + name + "' (expected sgd or sgd_momentum)");
}

void UpdateRule::validate() const {
  if (!(base_lr >= 0.0)) throw ConfigError("train.lr must be non-negative");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("train.momentum must lie in [0, 1)");
  if (total_steps == 0) throw ConfigError("total step count must be positive");
}

double UpdateRule::lr(std::size_t t) const { return cosine_lr(t, total_steps, base_lr); }

double cosine_lr(std::size_t t, std::size_t total, double base) {
  if (total == 0) throw ContractError("cosine_lr: total steps must be positive");
  if (t > total) {
    throw ContractError("cosine_lr: step " + std::to_string(t) + " beyond schedule end " + std::to_string(total));
  }
  if (t == total) return 0.0;
  const double phase = std::numbers::pi * static_cast<double>(t) / static_cast<double>(total);
  return base * (1.0 + std::cos(phase)) / 2.0;
}

// ---- vector helpers -----------------------------------------------------------

double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ContractError("dot: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

// ---- gradient evaluation ------------------------------------------------------

namespace {

thread_local std::size_t pass_counter = 0;

bool finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

}  // namespace

std::size_t gradient_pass_count() { return pass_counter; }

GradientEval compute_gradient(const LossFn& loss_fn, ParamSet& params) {
  ++pass_counter;
  params.zero_grad();
  Tape tape;
  GradientEval out;
  {
    TapeScope scope(&tape);
    LossEval loss = loss_fn();
    out.loss = loss.total.item();
    out.ce = loss.ce;
    out.kl = loss.kl;
    if (!std::isfinite(out.loss)) throw NumericError("non-finite loss " + std::to_string(out.loss));
    tape.backward(loss.total);
  }
  out.grad = params.gradients();
  params.zero_grad();
  if (!finite(out.grad)) throw NumericError("non-finite gradient");
  return out;
}

FlatVector sam_perturbation(std::span<const double> g, double rho) {
  const double n = norm2(g);
  if (!(n > kNormFloor)) return {};
  FlatVector eps(g.size());
  const double s = rho / n;
  for (std::size_t i = 0; i < g.size(); ++i) eps[i] = s * g[i];
  return eps;
}

namespace {

// Restores a parameter snapshot on scope exit.
class ParamRestore {
 public:
  explicit ParamRestore(ParamSet& params) : params_(params), snapshot_(params.values()) {}
  ~ParamRestore() { params_.set_values(snapshot_); }
  ParamRestore(const ParamRestore&) = delete;
  ParamRestore& operator=(const ParamRestore&) = delete;

 private:
  ParamSet& params_;
  FlatVector snapshot_;
};

}  // namespace

GradientEval perturbed_gradient(const LossFn& loss_fn, ParamSet& params, std::span<const double> eps) {
  if (eps.size() != params.size()) {
    throw ContractError("perturbation of length " + std::to_string(eps.size()) + " does not conform to " +
                        std::to_string(params.size()) + " parameters");
  }
  ParamRestore restore(params);
  params.add_scaled(eps, 1.0);
  return compute_gradient(loss_fn, params);
}

// ---- Algorithm pieces ----------------------------------------------------------

namespace {

// Dot product with error-free products and compensated summation.
double accurate_dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0, c = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double p = a[i] * b[i];
    const double pe = std::fma(a[i], b[i], -p);
    const double t = s + p;
    const double z = t - s;
    c += (s - (t - z)) + (p - z) + pe;
    s = t;
  }
  return s + c;
}

bool project_segment(std::span<const double> g, std::span<double> gp, double delta) {
  const double d = dot(g, gp);
  if (!(d < 0.0)) return false;
  const double gg = dot(g, g);
  const double coeff = d / (gg + delta);
  for (std::size_t i = 0; i < g.size(); ++i) gp[i] -= coeff * g[i];
  // Rounding can leave <g, g'> marginally positive; push it back below zero
  // by a few ulps of the summed magnitudes.
  double mag = 0.0;
  for (std::size_t i = 0; i < g.size(); ++i) mag += std::abs(g[i] * gp[i]);
  const double margin = 2.0 * std::numeric_limits<double>::epsilon() * mag;
  const double r = accurate_dot(g, gp);
  if (r > -margin && gg > 0.0) {
    const double fix = (r + margin) / gg;
    for (std::size_t i = 0; i < g.size(); ++i) gp[i] -= fix * g[i];
  }
  return true;
}

}  // namespace

ProjectionResult project_conflict(std::span<const double> g, std::span<const double> g_prime, double delta,
                                  ProjectionScope scope, std::span<const std::size_t> boundaries) {
  if (g.size() != g_prime.size()) {
    throw ContractError("project_conflict: lengths differ (" + std::to_string(g.size()) + " vs " +
                        std::to_string(g_prime.size()) + ")");
  }
  if (!(delta > 0.0)) throw ConfigError("project_conflict: delta must be positive");
  ProjectionResult out{FlatVector(g_prime.begin(), g_prime.end()), false};
  if (scope == ProjectionScope::global || boundaries.empty()) {
    out.projected = project_segment(g, out.grad, delta);
    return out;
  }
  if (boundaries.front() != 0 || boundaries.back() != g.size() ||
      !std::is_sorted(boundaries.begin(), boundaries.end())) {
    throw ContractError("project_conflict: segment boundaries do not cover the vector");
  }
  std::span<double> whole(out.grad);
  for (std::size_t s = 0; s + 1 < boundaries.size(); ++s) {
    const std::size_t lo = boundaries[s], n = boundaries[s + 1] - lo;
    if (project_segment(g.subspan(lo, n), whole.subspan(lo, n), delta)) out.projected = true;
  }
  return out;
}

FlatVector fuse_gradients(std::span<const double> g, std::span<const double> g_prime, double alpha) {
  if (g.size() != g_prime.size()) throw ContractError("fuse_gradients: lengths differ");
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("fuse_gradients: alpha must lie in [0, 1]");
  FlatVector out(g.size());
  const double keep = 1.0 - alpha;
  for (std::size_t i = 0; i < g.size(); ++i) out[i] = keep * g[i] + alpha * g_prime[i];
  return out;
}

void apply_update(ParamSet& params, std::span<const double> direction, const UpdateRule& rule, UpdateState& state,
                  std::size_t t) {
  const double lr = rule.lr(t);
  if (rule.kind == UpdateKind::sgd) {
    params.add_scaled(direction, -lr);
    return;
  }
  if (state.velocity.empty()) state.velocity.assign(params.size(), 0.0);
  if (state.velocity.size() != direction.size()) throw ContractError("momentum buffer size mismatch");
  for (std::size_t i = 0; i < direction.size(); ++i) {
    state.velocity[i] = rule.momentum * state.velocity[i] + direction[i];
  }
  params.add_scaled(state.velocity, -lr);
}

namespace {

int sign_of(double x) { return x > 0.0 ? 1 : (x < 0.0 ? -1 : 0); }

}  // namespace

StepReport regularized_step(const LossFn& loss_fn, ParamSet& params, const GradRegConfig& cfg,
                            const UpdateRule& rule, UpdateState& state, std::size_t t) {
  cfg.validate();
  StepReport rep;
  rep.step = t;
  rep.lr = rule.lr(t);

  const GradientEval base = compute_gradient(loss_fn, params);
  rep.passes = 1;
  rep.loss = base.loss;
  rep.ce = base.ce;
  rep.kl = base.kl;
  rep.norm_g = norm2(base.grad);

  FlatVector g_prime;
  const FlatVector eps = sam_perturbation(base.grad, cfg.rho);
  if (eps.empty()) {
    // Perturbation undefined at a vanishing gradient; fall back to g.
    rep.perturbation_skipped = true;
    rep.perturbed_loss = base.loss;
    g_prime = base.grad;
  } else {
    GradientEval shifted = perturbed_gradient(loss_fn, params, eps);
    rep.passes = 2;
    rep.perturbed_loss = shifted.loss;
    g_prime = std::move(shifted.grad);
  }

  rep.dot = dot(base.grad, g_prime);
  rep.dot_sign = sign_of(rep.dot);
  const auto bounds = params.boundaries();
  ProjectionResult filtered = project_conflict(base.grad, g_prime, cfg.delta, cfg.scope, bounds);
  rep.projected = filtered.projected;
  rep.norm_g_prime = norm2(filtered.grad);

  const FlatVector fused = fuse_gradients(base.grad, filtered.grad, cfg.alpha);
  rep.norm_fused = norm2(fused);
  rep.fused_dot_g = dot(fused, base.grad);

  apply_update(params, fused, rule, state, t);
  return rep;
}

StepReport gradient_step(const LossFn& loss_fn, ParamSet& params, const UpdateRule& rule, UpdateState& state,
                         std::size_t t) {
  StepReport rep;
  rep.step = t;
  rep.lr = rule.lr(t);
  const GradientEval base = compute_gradient(loss_fn, params);
  rep.passes = 1;
  rep.loss = base.loss;
  rep.ce = base.ce;
  rep.kl = base.kl;
  rep.perturbed_loss = base.loss;
  rep.norm_g = norm2(base.grad);
  rep.norm_g_prime = rep.norm_g;
  rep.norm_fused = rep.norm_g;
  rep.dot = rep.fused_dot_g = dot(base.grad, base.grad);
  rep.dot_sign = sign_of(rep.dot);
  rep.perturbation_skipped = true;
  apply_update(params, base.grad, rule, state, t);
  return rep;
}

StepReport sam_step(const LossFn& loss_fn, ParamSet& params, double rho, const UpdateRule& rule,
                    UpdateState& state, std::size_t t) {
  if (!(rho > 0.0)) throw ConfigError("sam rho must be positive");
  StepReport rep;
  rep.step = t;
  rep.lr = rule.lr(t);
  const GradientEval base = compute_gradient(loss_fn, params);
  rep.passes = 1;
  rep.loss = base.loss;
  rep.ce = base.ce;
  rep.kl = base.kl;
  rep.norm_g = norm2(base.grad);

  FlatVector direction;
  const FlatVector eps = sam_perturbation(base.grad, rho);
  if (eps.empty()) {
    rep.perturbation_skipped = true;
    rep.perturbed_loss = base.loss;
    direction = base.grad;
  } else {
    GradientEval shifted = perturbed_gradient(loss_fn, params, eps);
    rep.passes = 2;
    rep.perturbed_loss = shifted.loss;
    direction = std::move(shifted.grad);
  }
  rep.dot = dot(base.grad, direction);
  rep.dot_sign = sign_of(rep.dot);
  rep.norm_g_prime = rep.norm_fused = norm2(direction);
  rep.fused_dot_g = rep.dot;
  apply_update(params, direction, rule, state, t);
  return rep;
}

std::string StepReport::to_json_line() const {
  nlohmann::ordered_json j;
  j["step"] = step;
  j["lr"] = lr;
  j["loss"] = loss;
  j["ce"] = ce;
  j["kl"] = kl;
  j["perturbed_loss"] = perturbed_loss;
  j["dot"] = dot;
  j["dot_sign"] = dot_sign;
  j["projected"] = projected;
  j["perturbation_skipped"] = perturbation_skipped;
  j["norm_g"] = norm_g;
  j["norm_g_prime"] = norm_g_prime;
  j["norm_fused"] = norm_fused;
  j["fused_dot_g"] = fused_dot_g;
  j["passes"] = passes;
  return j.dump();
}

}  // namespace glad

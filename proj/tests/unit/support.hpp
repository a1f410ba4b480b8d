#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "glad/rng.hpp"
#include "glad/tensor.hpp"

namespace oracle {

using glad::Rng;
using glad::Shape;
using glad::Tensor;

inline Tensor random_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0, bool requires_grad = true) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  std::vector<double> v(n);
  for (auto& x : v) x = lo + (hi - lo) * rng.uniform();
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

inline std::vector<double> random_vector(Rng& rng, std::size_t n, double sd = 1.0) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.normal(0.0, sd);
  return v;
}

using Functional = std::function<Tensor(const std::vector<Tensor>&)>;

// Gradients of a scalar functional through the tape.
inline std::vector<std::vector<double>> analytic_grads(const Functional& f, const std::vector<Tensor>& inputs) {
  for (auto t : inputs) t.zero_grad();
  glad::Tape tape;
  {
    glad::TapeScope scope(&tape);
    tape.backward(f(inputs));
  }
  std::vector<std::vector<double>> out;
  for (const auto& t : inputs) out.push_back(t.grad());
  return out;
}

// Central differences, evaluated with recording disabled.
inline std::vector<std::vector<double>> numeric_grads(const Functional& f, const std::vector<Tensor>& inputs,
                                                      double h = 1e-5) {
  glad::TapeScope off(nullptr);
  std::vector<std::vector<double>> out;
  for (auto t : inputs) {
    std::vector<double> g(t.size());
    auto data = t.mutable_data();
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double x0 = data[i];
      data[i] = x0 + h;
      const double up = f(inputs).item();
      data[i] = x0 - h;
      const double down = f(inputs).item();
      data[i] = x0;
      g[i] = (up - down) / (2.0 * h);
    }
    out.push_back(std::move(g));
  }
  return out;
}

// ||a - b|| / max(||a||, ||b||), over all input blocks jointly.
inline double relative_error(const std::vector<std::vector<double>>& a, const std::vector<std::vector<double>>& b) {
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    for (std::size_t i = 0; i < a[k].size(); ++i) {
      diff += (a[k][i] - b[k][i]) * (a[k][i] - b[k][i]);
      na += a[k][i] * a[k][i];
      nb += b[k][i] * b[k][i];
    }
  }
  const double scale = std::sqrt(std::max(na, nb));
  return scale < 1e-300 ? std::sqrt(diff) : std::sqrt(diff) / scale;
}

inline double gradient_check(const Functional& f, const std::vector<Tensor>& inputs, double h = 1e-5) {
  return relative_error(analytic_grads(f, inputs), numeric_grads(f, inputs, h));
}

// Random-weighted sum so every output element contributes to the check.
inline Tensor weighted_sum(const Tensor& y, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> w(y.size());
  for (auto& x : w) x = rng.normal();
  return glad::sum(glad::mul(y, Tensor(y.shape(), std::move(w))));
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

struct OpCase {
  const char* name;
  std::function<std::vector<Tensor>(Rng&)> inputs;
  Functional f;
};

// One entry per differentiable tensor op, each reduced to a scalar.
inline std::vector<OpCase> op_cases() {
  using namespace glad;
  return {
      {"matmul", [](Rng& r) { return std::vector{random_tensor(r, {3, 4}), random_tensor(r, {4, 2})}; },
       [](const std::vector<Tensor>& in) { return weighted_sum(matmul(in[0], in[1]), 1); }},
      {"transpose", [](Rng& r) { return std::vector{random_tensor(r, {3, 4})}; },
       [](const std::vector<Tensor>& in) { return weighted_sum(transpose(in[0]), 2); }},
      {"add", [](Rng& r) { return std::vector{random_tensor(r, {2, 3}), random_tensor(r, {2, 3})}; },
       [](const std::vector<Tensor>& in) { return weighted_sum(add(in[0], in[1]), 3); }},
      {"add-broadcast", [](Rng& r) { return std::vector{random_tensor(r, {4, 3}), random_tensor(r, {3})}; },
       [](const std::vector<Tensor>& in) { return weighted_sum(add(in[0], in[1]), 4); }},
      {"sub", [](Rng& r) { return std::vector{random_tensor(r, {2, 3}), random_tensor(r, {3})}; },
       [](const std::vector<Tensor>& in) { return weighted_sum(sub(in[0], in[1]), 5); }},
      {"mul", [](Rng& r) { return std::vector{random_tensor(r, {2, 3}), random_tensor(r, {2, 3})}; },
       [](const std::vector<Tensor>& in) { return weighted_sum(mul(in[0], in[1]), 6); }},
      {"scale", [](Rng& r) { return std::vector{random_tensor(r, {5})}; },
       [](const std::vector<Tensor>& in) { return weighted_sum(scale(in[0], -1.7), 7); }},
      {"relu", [](Rng& r) { return std::vector{random_tensor(r, {6})}; },
       [](const std::vector<Tensor>& in) { return weighted_sum(relu(in[0]), 8); }},
      {"tanh", [](Rng& r) { return std::vector{random_tensor(r, {6}, -2, 2)}; },
       [](const std::vector<Tensor>& in) { return weighted_sum(glad::tanh(in[0]), 9); }},
      {"exp", [](Rng& r) { return std::vector{random_tensor(r, {6})}; },
       [](const std::vector<Tensor>& in) { return weighted_sum(glad::exp(in[0]), 10); }},
      {"log", [](Rng& r) { return std::vector{random_tensor(r, {6}, 0.2, 3.0)}; },
       [](const std::vector<Tensor>& in) { return weighted_sum(glad::log(in[0]), 11); }},
      {"concat", [](Rng& r) { return std::vector{random_tensor(r, {2, 3}), random_tensor(r, {2, 2})}; },
       [](const std::vector<Tensor>& in) { return weighted_sum(concat(in[0], in[1]), 12); }},
      {"l2_normalize", [](Rng& r) { return std::vector{random_tensor(r, {3, 5})}; },
       [](const std::vector<Tensor>& in) { return weighted_sum(l2_normalize(in[0]), 13); }},
      {"softmax", [](Rng& r) { return std::vector{random_tensor(r, {2, 4}, -3, 3)}; },
       [](const std::vector<Tensor>& in) { return weighted_sum(softmax(in[0]), 14); }},
      {"log_softmax", [](Rng& r) { return std::vector{random_tensor(r, {2, 4}, -3, 3)}; },
       [](const std::vector<Tensor>& in) { return weighted_sum(log_softmax(in[0]), 15); }},
      {"mean", [](Rng& r) { return std::vector{random_tensor(r, {3, 2})}; },
       [](const std::vector<Tensor>& in) { return mean(mul(in[0], in[0])); }},
      {"sum_last", [](Rng& r) { return std::vector{random_tensor(r, {2, 3, 4})}; },
       [](const std::vector<Tensor>& in) { return weighted_sum(sum_last(in[0]), 16); }},
      {"reshape", [](Rng& r) { return std::vector{random_tensor(r, {2, 6})}; },
       [](const std::vector<Tensor>& in) { return weighted_sum(reshape(in[0], {3, 4}), 17); }},
      {"gather_rows",
       [](Rng& r) { return std::vector{random_tensor(r, {3, 2})}; },
       [](const std::vector<Tensor>& in) {
         const std::vector<std::size_t> rows{2, 0, 2, 1};
         return weighted_sum(gather_rows(in[0], rows), 18);
       }},
      {"pick",
       [](Rng& r) { return std::vector{random_tensor(r, {3, 4})}; },
       [](const std::vector<Tensor>& in) {
         const std::vector<std::size_t> cols{3, 0, 1};
         return weighted_sum(pick(in[0], cols), 19);
       }},
  };
}

}  // namespace oracle

#include "glad/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "glad/error.hpp"
#include "glad/rng.hpp"

namespace glad {

nlohmann::ordered_json Metrics::to_json() const {
  nlohmann::ordered_json j;
  j["base_acc"] = base_acc;
  j["novel_acc"] = novel_acc;
  j["hm"] = hm;
  j["per_domain"] = nlohmann::ordered_json::object();
  for (const auto& [k, v] : per_domain) j["per_domain"][k] = v;
  j["transfer"] = nlohmann::ordered_json::object();
  for (const auto& [k, v] : transfer) j["transfer"][k] = v;
  if (flatness) {
    j["flatness"] = *flatness;
  } else {
    j["flatness"] = nullptr;
  }
  return j;
}

Metrics Metrics::from_json(const nlohmann::json& j) {
  Metrics m;
  m.base_acc = j.at("base_acc").get<double>();
  m.novel_acc = j.at("novel_acc").get<double>();
  m.hm = j.at("hm").get<double>();
  for (const auto& [k, v] : j.at("per_domain").items()) m.per_domain[k] = v.get<double>();
  for (const auto& [k, v] : j.at("transfer").items()) m.transfer[k] = v.get<double>();
  if (j.contains("flatness") && !j.at("flatness").is_null()) m.flatness = j.at("flatness").get<double>();
  return m;
}

double harmonic_mean(double base, double novel) {
  if (base < 0.0 || novel < 0.0) throw ContractError("harmonic_mean: accuracies must be non-negative");
  if (base + novel == 0.0) return 0.0;
  return 2.0 * base * novel / (base + novel);
}

double argmax_accuracy(const Tensor& logits, std::span<const std::uint32_t> labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size()) {
    throw DimensionError("argmax_accuracy: " + std::to_string(labels.size()) + " labels for logits " +
                         shape_str(logits.shape()));
  }
  if (labels.empty()) throw ContractError("argmax_accuracy: empty split");
  const std::size_t c = logits.dim(1);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto row = logits.data().subspan(i * c, c);
    const auto best = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
    if (best == labels[i]) ++correct;
  }
  return 100.0 * static_cast<double>(correct) / static_cast<double>(labels.size());
}

double accuracy(const AdaptedModel& model, const SampleSet& samples, const Matrix& class_texts) {
  if (samples.size() == 0) throw ContractError("accuracy: split '" + to_string(samples.split) + "' is empty");
  TapeScope no_tape(nullptr);
  const Tensor logits = model.logits(samples.x.to_tensor(), class_texts.to_tensor(), true);
  return argmax_accuracy(logits, samples.labels);
}

double accuracy(const AdaptedModel& model, const TaskBundle& bundle, Split split) {
  return accuracy(model, bundle.samples(split), bundle.texts(split));
}

double median(std::vector<double> values) {
  if (values.empty()) throw ContractError("median of empty list");
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  return n % 2 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

FlatnessResult flatness_probe(ParamSet& params, const LossFn& loss_fn, double rho, std::size_t trials,
                              std::uint64_t seed) {
  if (trials < 1) throw ContractError("flatness_probe: trials must be at least 1");
  if (!(rho >= 0.0)) throw ContractError("flatness_probe: rho must be non-negative");
  const FlatVector theta = params.values();
  auto evaluate = [&] {
    TapeScope no_tape(nullptr);
    return loss_fn().total.item();
  };
  FlatnessResult out;
  const double base = evaluate();
  if (!std::isfinite(base)) throw NumericError("flatness_probe: non-finite loss at the unperturbed point");
  Rng rng(mix_seed(seed, 606));
  FlatVector u(theta.size()), shifted(theta.size());
  for (std::size_t t = 0; t < trials; ++t) {
    double ss = 0.0;
    for (auto& v : u) {
      v = rng.normal();
      ss += v * v;
    }
    const double n = std::sqrt(ss);
    for (std::size_t i = 0; i < u.size(); ++i) shifted[i] = theta[i] + rho * (u[i] / n);
    params.set_values(shifted);
    double value = 0.0;
    bool ok = true;
    try {
      value = evaluate();
      ok = std::isfinite(value);
    } catch (const Error&) {
      ok = false;
    }
    params.set_values(theta);
    if (!ok) {
      ++out.discarded;
      continue;
    }
    out.increases.push_back(value - base);
  }
  if (out.increases.empty()) throw NumericError("flatness_probe: every trial failed");
  double s = 0.0;
  for (double v : out.increases) s += v;
  out.mean_increase = s / static_cast<double>(out.increases.size());
  out.median_increase = median(out.increases);
  return out;
}

Metrics median_metrics(const std::vector<Metrics>& all) {
  if (all.empty()) throw ContractError("median_metrics: no metrics");
  auto field = [&](auto get) {
    std::vector<double> v;
    for (const auto& m : all) v.push_back(get(m));
    return median(std::move(v));
  };
  Metrics out;
  out.base_acc = field([](const Metrics& m) { return m.base_acc; });
  out.novel_acc = field([](const Metrics& m) { return m.novel_acc; });
  out.hm = field([](const Metrics& m) { return m.hm; });
  for (const auto& [k, v] : all.front().per_domain) {
    out.per_domain[k] = field([&](const Metrics& m) { return m.per_domain.at(k); });
  }
  for (const auto& [k, v] : all.front().transfer) {
    out.transfer[k] = field([&](const Metrics& m) { return m.transfer.at(k); });
  }
  if (all.front().flatness) {
    out.flatness = field([](const Metrics& m) { return m.flatness.value_or(0.0); });
  }
  return out;
}

std::string format_percent(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", v);
  return buf;
}

}  // namespace glad

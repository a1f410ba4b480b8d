#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "glad/models.hpp"
#include "glad/optimizer.hpp"
#include "glad/synth_bench.hpp"

namespace glad {

struct Metrics {
  double base_acc = 0.0;   // percent
  double novel_acc = 0.0;  // percent
  double hm = 0.0;         // percent
  std::map<std::string, double> per_domain;  // shift label -> base-class accuracy
  std::map<std::string, double> transfer;    // target label -> accuracy
  std::optional<double> flatness;

  nlohmann::ordered_json to_json() const;
  static Metrics from_json(const nlohmann::json& j);
  bool operator==(const Metrics&) const = default;
};

// 2bn / (b + n); defined as 0 when both are 0.
double harmonic_mean(double base, double novel);

// Percent of rows whose argmax equals the label.
double argmax_accuracy(const Tensor& logits, std::span<const std::uint32_t> labels);

// Split accuracy: test_novel is scored against novel class texts, the other
// splits against base class texts. Weights are not modified.
double accuracy(const AdaptedModel& model, const TaskBundle& bundle, Split split);
double accuracy(const AdaptedModel& model, const SampleSet& samples, const Matrix& class_texts);

struct FlatnessResult {
  double mean_increase = 0.0;
  double median_increase = 0.0;
  std::vector<double> increases;
  std::size_t discarded = 0;
};

// Mean of L(theta + rho u) - L(theta) over `trials` directions u drawn
// uniformly on the unit sphere of the flattened parameter space. Parameters
// are restored bit-exactly. Trials with a numeric failure are discarded.
FlatnessResult flatness_probe(ParamSet& params, const LossFn& loss_fn, double rho, std::size_t trials,
                              std::uint64_t seed);

// Each field is the median across seeds.
Metrics median_metrics(const std::vector<Metrics>& all);

double median(std::vector<double> values);

std::string format_percent(double v);

}  // namespace glad

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "glad/metrics.hpp"
#include "glad/models.hpp"
#include "glad/objective.hpp"
#include "glad/optimizer.hpp"
#include "glad/pretrain.hpp"
#include "glad/synth_bench.hpp"

namespace glad {

struct AblationFlags {
  bool use_sam_only = false;
  bool use_gradreg = true;
  bool use_alignnet = true;
  bool use_kl = true;
  // SAM row via the fusion path (alpha = 1, projection on) instead of a pure
  // SAM update.
  bool sam_fusion = false;
};

struct TrainConfig {
  std::size_t epochs = 20;
  std::size_t batch_size = 32;
  UpdateKind rule = UpdateKind::sgd_momentum;
  // Desk-scale rate; 0.001 barely moves the 16-dim toy adapters.
  double lr = 0.2;
  double momentum = 0.9;
};

struct EvalConfig {
  std::vector<DomainShift> shifts;
  std::size_t transfer_targets = 0;
  std::size_t flatness_trials = 0;
  double flatness_rho = 0.1;
};

struct ExperimentConfig {
  std::string label = "run";
  TaskSpec task;
  ModelConfig model;
  AlignNetConfig alignnet;
  bool alignnet_at_eval = true;
  PretrainConfig pretrain;
  GradRegConfig gradreg;
  LossConfig loss;
  TrainConfig train;
  AblationFlags flags;
  EvalConfig eval;
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};

  // Throws ConfigError naming the offending key.
  void validate() const;

  // Canonical flat key = value form, in a fixed key order.
  std::vector<std::pair<std::string, std::string>> to_kv() const;
  void set(const std::string& key, const std::string& value);
  static const std::vector<std::string>& keys();

  std::uint64_t hash() const;
  std::string hash_hex() const;
};

// Parses "key = value" lines; '#' starts a comment. Unknown keys and bad
// values raise ConfigError with the key and line number.
void apply_config_text(ExperimentConfig& cfg, const std::string& text);
ExperimentConfig load_config_file(const std::filesystem::path& path);
std::string config_text(const ExperimentConfig& cfg);

enum class TrainMode { plain, sam, gradreg };

std::string to_string(TrainMode m);
TrainMode resolve_mode(const ExperimentConfig& cfg);

enum class AblationRow { a, b, c, d, e };

char row_letter(AblationRow r);
AblationRow parse_row(const std::string& s);
// Applies the row's component flags to a copy of `base`:
//   (a) LoRA, CE only   (b) + SAM   (c) + GradReg   (d) + AlignNet
//   (e) + GradReg + AlignNet
ExperimentConfig with_row(const ExperimentConfig& base, AblationRow row);

struct SeedResult {
  std::uint64_t seed = 0;
  bool ok = true;
  std::string error;
  Metrics metrics;
  PretrainReport pretrain;
  std::string step_log;  // file name relative to the run directory
  std::size_t steps = 0;
};

struct RunRecord {
  std::uint32_t format_version = 1;
  std::string label;
  std::string config_hash;
  std::vector<std::pair<std::string, std::string>> config;
  std::vector<SeedResult> seeds;
  Metrics median;
  bool failed = false;
  double wall_clock_seconds = 0.0;  // the only non-deterministic field

  nlohmann::ordered_json to_json() const;
  static RunRecord from_json(const nlohmann::json& j);
  bool operator==(const RunRecord& other) const;
};

struct RunOptions {
  // Where step logs, checkpoints and the record go. Empty: nothing written.
  std::filesystem::path out_dir;
  // Frozen-backbone cache. Empty: GLAD_CACHE_DIR, or memory only.
  std::filesystem::path cache_dir;
  bool use_env_cache = true;
  bool write_checkpoints = true;
};

// Everything produced for one seed, for callers that need the trained model.
struct SeedArtifacts {
  SeedResult result;
  std::optional<AdaptedModel> model;
  std::vector<StepReport> steps;
};

// Pretrains (or loads from cache) the frozen backbone for a seed.
DualEncoder obtain_backbone(const ExperimentConfig& cfg, const TaskBundle& bundle, std::uint64_t seed,
                            const RunOptions& opts, PretrainReport* report = nullptr);
std::string backbone_cache_key(const ExperimentConfig& cfg, std::uint64_t seed);
void clear_backbone_memory_cache();

TaskSpec task_for_seed(const ExperimentConfig& cfg, std::uint64_t seed);

// Loss closure over the whole training split, for probes and diagnostics.
LossFn training_loss(const AdaptedModel& model, const TaskBundle& bundle, const LossConfig& loss);
LossConfig effective_loss(const ExperimentConfig& cfg);

SeedArtifacts run_seed(const ExperimentConfig& cfg, std::uint64_t seed, const RunOptions& opts);
RunRecord run_experiment(const ExperimentConfig& cfg, const RunOptions& opts = {});

struct AblationTable {
  std::vector<RunRecord> rows;  // in order a..e
};

// Runs rows (a)-(e) over shared seeds and task bundles. A failing row is
// recorded as failed and the grid continues.
AblationTable run_ablation_grid(const ExperimentConfig& base, const RunOptions& opts = {});

enum class ResultFormat { json, csv, markdown };

ResultFormat parse_result_format(const std::string& s);
std::string render_results(const std::vector<RunRecord>& records, ResultFormat format);
void emit_results(const std::vector<RunRecord>& records, ResultFormat format, const std::filesystem::path& path);
std::vector<RunRecord> load_records(const std::filesystem::path& path);

inline constexpr const char* kCsvHeader = "label,config_hash,seeds,base_acc,novel_acc,hm,flatness,failed";

void write_text_file(const std::filesystem::path& path, const std::string& text);

}  // namespace glad

#include "glad/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <mutex>
#include <numeric>
#include <sstream>

#include "glad/error.hpp"
#include "glad/rng.hpp"

namespace glad {

// ---- value formatting ----------------------------------------------------------

namespace {

// Shortest of %.15g / %.17g that reads back to the same double.
std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.15g", v);
  if (std::strtod(buf, nullptr) != v) std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}
std::string fmt(std::size_t v) { return std::to_string(v); }
std::string fmt(bool v) { return v ? "true" : "false"; }

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep)) {
    cur = trim(cur);
    if (!cur.empty()) out.push_back(cur);
  }
  return out;
}

double parse_double(const std::string& key, const std::string& s) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ConfigError(key + ": expected a real number, got '" + s + "'");
  }
}

std::uint64_t parse_u64(const std::string& key, const std::string& s) {
  if (s.empty() || s.find_first_not_of("0123456789") != std::string::npos) {
    throw ConfigError(key + ": expected a non-negative integer, got '" + s + "'");
  }
  try {
    return std::stoull(s);
  } catch (const std::exception&) {
    throw ConfigError(key + ": integer out of range '" + s + "'");
  }
}

bool parse_bool(const std::string& key, const std::string& s) {
  if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
  if (s == "false" || s == "0" || s == "no" || s == "off") return false;
  throw ConfigError(key + ": expected true/false, got '" + s + "'");
}

std::string shift_label(const DomainShift& s) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%s@%g", to_string(s.kind).c_str(), s.magnitude);
  return buf;
}

std::string fmt_shifts(const std::vector<DomainShift>& shifts) {
  std::string out;
  for (const auto& s : shifts) {
    if (!out.empty()) out += ',';
    out += to_string(s.kind) + ":" + fmt(s.magnitude);
  }
  return out;
}

std::vector<DomainShift> parse_shifts(const std::string& key, const std::string& s) {
  std::vector<DomainShift> out;
  for (const auto& item : split(s, ',')) {
    const auto colon = item.find(':');
    if (colon == std::string::npos) throw ConfigError(key + ": expected kind:magnitude, got '" + item + "'");
    DomainShift shift;
    try {
      shift.kind = parse_shift_kind(trim(item.substr(0, colon)));
    } catch (const ConfigError& e) {
      throw ConfigError(key + ": " + e.what());
    }
    shift.magnitude = parse_double(key, trim(item.substr(colon + 1)));
    out.push_back(shift);
  }
  return out;
}

std::string fmt_seeds(const std::vector<std::uint64_t>& seeds) {
  std::string out;
  for (auto s : seeds) {
    if (!out.empty()) out += ',';
    out += std::to_string(s);
  }
  return out;
}

template <typename Parse>
auto wrap_enum(const std::string& key, const std::string& value, Parse parse) {
  try {
    return parse(value);
  } catch (const ConfigError& e) {
    throw ConfigError(key + ": " + e.what());
  }
}

struct Field {
  std::string key;
  std::function<std::string(const ExperimentConfig&)> get;
  std::function<void(ExperimentConfig&, const std::string&, const std::string&)> set;
};

#define GLAD_SIZE_FIELD(KEY, MEMBER)                                                                    \
  Field {                                                                                               \
    KEY, [](const ExperimentConfig& c) { return fmt(static_cast<std::size_t>(c.MEMBER)); },            \
        [](ExperimentConfig& c, const std::string& k, const std::string& v) {                           \
          c.MEMBER = static_cast<decltype(c.MEMBER)>(parse_u64(k, v));                                  \
        }                                                                                               \
  }
#define GLAD_REAL_FIELD(KEY, MEMBER)                                                                    \
  Field {                                                                                               \
    KEY, [](const ExperimentConfig& c) { return fmt(c.MEMBER); },                                       \
        [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.MEMBER = parse_double(k, v); } \
  }
#define GLAD_BOOL_FIELD(KEY, MEMBER)                                                                    \
  Field {                                                                                               \
    KEY, [](const ExperimentConfig& c) { return fmt(c.MEMBER); },                                       \
        [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.MEMBER = parse_bool(k, v); } \
  }

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      GLAD_SIZE_FIELD("task.d_in", task.d_in),
      GLAD_SIZE_FIELD("task.n_pretrain", task.n_pretrain),
      GLAD_SIZE_FIELD("task.n_base", task.n_base),
      GLAD_SIZE_FIELD("task.n_novel", task.n_novel),
      GLAD_SIZE_FIELD("task.shots", task.shots),
      GLAD_REAL_FIELD("task.sigma_img", task.sigma_img),
      GLAD_REAL_FIELD("task.sigma_txt", task.sigma_txt),
      GLAD_SIZE_FIELD("task.test_per_class", task.test_per_class),
      GLAD_SIZE_FIELD("model.hidden", model.hidden),
      GLAD_SIZE_FIELD("model.embed", model.embed),
      GLAD_REAL_FIELD("model.temperature", model.temperature),
      Field{"model.activation", [](const ExperimentConfig& c) { return to_string(c.model.activation); },
            [](ExperimentConfig& c, const std::string& k, const std::string& v) {
              c.model.activation = wrap_enum(k, v, parse_activation);
            }},
      GLAD_SIZE_FIELD("lora.rank", model.lora.rank),
      GLAD_REAL_FIELD("lora.gamma", model.lora.gamma),
      GLAD_REAL_FIELD("lora.init_std", model.lora.init_std),
      GLAD_SIZE_FIELD("alignnet.hidden1", alignnet.hidden1),
      GLAD_SIZE_FIELD("alignnet.hidden2", alignnet.hidden2),
      GLAD_BOOL_FIELD("alignnet.renormalize", alignnet.renormalize),
      GLAD_BOOL_FIELD("alignnet.at_eval", alignnet_at_eval),
      GLAD_SIZE_FIELD("pretrain.epochs", pretrain.epochs),
      GLAD_SIZE_FIELD("pretrain.batch_classes", pretrain.batch_classes),
      GLAD_REAL_FIELD("pretrain.lr", pretrain.lr),
      GLAD_REAL_FIELD("pretrain.momentum", pretrain.momentum),
      GLAD_SIZE_FIELD("pretrain.heldout_classes", pretrain.heldout_classes),
      GLAD_REAL_FIELD("gradreg.rho", gradreg.rho),
      GLAD_REAL_FIELD("gradreg.alpha", gradreg.alpha),
      GLAD_REAL_FIELD("gradreg.delta", gradreg.delta),
      Field{"gradreg.scope", [](const ExperimentConfig& c) { return to_string(c.gradreg.scope); },
            [](ExperimentConfig& c, const std::string& k, const std::string& v) {
              c.gradreg.scope = wrap_enum(k, v, parse_projection_scope);
            }},
      GLAD_REAL_FIELD("loss.kl_weight", loss.kl_weight),
      Field{"loss.kl_direction", [](const ExperimentConfig& c) { return to_string(c.loss.kl_direction); },
            [](ExperimentConfig& c, const std::string& k, const std::string& v) {
              c.loss.kl_direction = wrap_enum(k, v, parse_kl_direction);
            }},
      GLAD_SIZE_FIELD("train.epochs", train.epochs),
      GLAD_SIZE_FIELD("train.batch_size", train.batch_size),
      Field{"train.rule", [](const ExperimentConfig& c) { return to_string(c.train.rule); },
            [](ExperimentConfig& c, const std::string& k, const std::string& v) {
              c.train.rule = wrap_enum(k, v, parse_update_kind);
            }},
      GLAD_REAL_FIELD("train.lr", train.lr),
      GLAD_REAL_FIELD("train.momentum", train.momentum),
      GLAD_BOOL_FIELD("flags.use_sam_only", flags.use_sam_only),
      GLAD_BOOL_FIELD("flags.use_gradreg", flags.use_gradreg),
      GLAD_BOOL_FIELD("flags.use_alignnet", flags.use_alignnet),
      GLAD_BOOL_FIELD("flags.use_kl", flags.use_kl),
      GLAD_BOOL_FIELD("flags.sam_fusion", flags.sam_fusion),
      Field{"eval.shifts", [](const ExperimentConfig& c) { return fmt_shifts(c.eval.shifts); },
            [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.eval.shifts = parse_shifts(k, v); }},
      GLAD_SIZE_FIELD("eval.transfer_targets", eval.transfer_targets),
      GLAD_SIZE_FIELD("eval.flatness_trials", eval.flatness_trials),
      GLAD_REAL_FIELD("eval.flatness_rho", eval.flatness_rho),
      Field{"seeds", [](const ExperimentConfig& c) { return fmt_seeds(c.seeds); },
            [](ExperimentConfig& c, const std::string& k, const std::string& v) {
              c.seeds.clear();
              for (const auto& s : split(v, ',')) c.seeds.push_back(parse_u64(k, s));
            }},
  };
  return table;
}

#undef GLAD_SIZE_FIELD
#undef GLAD_REAL_FIELD
#undef GLAD_BOOL_FIELD

}  // namespace

// ---- ExperimentConfig ---------------------------------------------------------------

void ExperimentConfig::validate() const {
  auto wrap = [](const std::string& prefix, auto&& fn) {
    try {
      fn();
    } catch (const ConfigError& e) {
      throw ConfigError(prefix + ": " + e.what());
    }
  };
  wrap("task", [&] {
    TaskSpec t = task;
    t.seed = t.pool_seed = 1;
    t.validate();
  });
  wrap("gradreg", [&] { gradreg.validate(); });
  wrap("loss", [&] { loss.validate(); });
  if (seeds.empty()) throw ConfigError("seeds: at least one seed is required");
  if (task.d_in != model.d_in) throw ConfigError("model.d_in must equal task.d_in");
  if (model.hidden == 0 || model.embed == 0) throw ConfigError("model.hidden and model.embed must be positive");
  if (!(model.temperature > 0.0)) throw ConfigError("model.temperature must be positive");
  const std::size_t narrow = std::min({model.d_in, model.hidden, model.embed});
  if (model.lora.rank == 0 || 2 * model.lora.rank > std::min(narrow, model.hidden)) {
    throw ConfigError("lora.rank must satisfy 1 <= r <= min(M, N) / 2 for every adapted layer");
  }
  if (alignnet.hidden1 == 0 || alignnet.hidden2 == 0) throw ConfigError("alignnet hidden sizes must be positive");
  if (train.epochs == 0) throw ConfigError("train.epochs must be positive");
  if (train.batch_size == 0) throw ConfigError("train.batch_size must be positive");
  if (!(train.lr >= 0.0)) throw ConfigError("train.lr must be non-negative");
  if (!(train.momentum >= 0.0 && train.momentum < 1.0)) throw ConfigError("train.momentum must lie in [0, 1)");
  if (flags.use_sam_only && flags.use_gradreg) {
    throw ConfigError("flags.use_sam_only and flags.use_gradreg are mutually exclusive");
  }
  if (pretrain.epochs == 0) throw ConfigError("pretrain.epochs must be positive");
  if (pretrain.heldout_classes < 2 || pretrain.heldout_classes + 2 > task.n_pretrain) {
    throw ConfigError("pretrain.heldout_classes must lie in [2, task.n_pretrain - 2]");
  }
  for (const auto& s : eval.shifts) {
    if (!(s.magnitude >= 0.0)) throw ConfigError("eval.shifts: magnitudes must be non-negative");
  }
  if (eval.flatness_trials > 0 && !(eval.flatness_rho >= 0.0)) {
    throw ConfigError("eval.flatness_rho must be non-negative");
  }
}

std::vector<std::pair<std::string, std::string>> ExperimentConfig::to_kv() const {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& f : fields()) out.emplace_back(f.key, f.get(*this));
  return out;
}

void ExperimentConfig::set(const std::string& key, const std::string& value) {
  for (const auto& f : fields()) {
    if (f.key == key) {
      f.set(*this, key, trim(value));
      if (key == "task.d_in") model.d_in = task.d_in;
      return;
    }
  }
  throw ConfigError("unknown config key '" + key + "'");
}

const std::vector<std::string>& ExperimentConfig::keys() {
  static const std::vector<std::string> k = [] {
    std::vector<std::string> out;
    for (const auto& f : fields()) out.push_back(f.key);
    return out;
  }();
  return k;
}

std::uint64_t ExperimentConfig::hash() const {
  const std::string text = config_text(*this);
  return fnv1a(text.data(), text.size());
}

std::string ExperimentConfig::hash_hex() const {
  char buf[20];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(hash()));
  return buf;
}

void apply_config_text(ExperimentConfig& cfg, const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(lineno) + ": expected 'key = value'");
    }
    try {
      cfg.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError("config line " + std::to_string(lineno) + ": " + e.what());
    }
  }
}

ExperimentConfig load_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config file '" + path.string() + "'");
  std::stringstream buf;
  buf << in.rdbuf();
  ExperimentConfig cfg;
  apply_config_text(cfg, buf.str());
  return cfg;
}

std::string config_text(const ExperimentConfig& cfg) {
  std::string out;
  for (const auto& [k, v] : cfg.to_kv()) out += k + " = " + v + "\n";
  return out;
}

// ---- modes and rows ----------------------------------------------------------------

std::string to_string(TrainMode m) {
  switch (m) {
    case TrainMode::plain: return "plain";
    case TrainMode::sam: return "sam";
    case TrainMode::gradreg: return "gradreg";
  }
  return "?";
}

TrainMode resolve_mode(const ExperimentConfig& cfg) {
  if (cfg.flags.use_sam_only && cfg.flags.use_gradreg) {
    throw ConfigError("flags.use_sam_only and flags.use_gradreg are mutually exclusive");
  }
  if (cfg.flags.use_sam_only) return cfg.flags.sam_fusion ? TrainMode::gradreg : TrainMode::sam;
  if (cfg.flags.use_gradreg) return TrainMode::gradreg;
  return TrainMode::plain;
}

char row_letter(AblationRow r) { return static_cast<char>('a' + static_cast<int>(r)); }

AblationRow parse_row(const std::string& s) {
  if (s.size() == 1 && s[0] >= 'a' && s[0] <= 'e') return static_cast<AblationRow>(s[0] - 'a');
  throw ConfigError("ablation row must be one of a, b, c, d, e; got '" + s + "'");
}

ExperimentConfig with_row(const ExperimentConfig& base, AblationRow row) {
  ExperimentConfig c = base;
  c.label = std::string(1, row_letter(row));
  c.flags.use_sam_only = row == AblationRow::b;
  c.flags.use_gradreg = row == AblationRow::c || row == AblationRow::e;
  c.flags.use_alignnet = row == AblationRow::d || row == AblationRow::e;
  c.flags.use_kl = row != AblationRow::a;
  return c;
}

// ---- RunRecord ---------------------------------------------------------------------

namespace {

nlohmann::ordered_json pretrain_json(const PretrainReport& p) {
  nlohmann::ordered_json j;
  j["initial_heldout_acc"] = p.initial_heldout_acc;
  j["heldout_acc"] = p.heldout_acc;
  j["chance"] = p.chance;
  j["final_loss"] = p.final_loss;
  j["steps"] = p.steps;
  return j;
}

PretrainReport pretrain_from_json(const nlohmann::json& j) {
  PretrainReport p;
  p.initial_heldout_acc = j.at("initial_heldout_acc").get<double>();
  p.heldout_acc = j.at("heldout_acc").get<double>();
  p.chance = j.at("chance").get<double>();
  p.final_loss = j.at("final_loss").get<double>();
  p.steps = j.at("steps").get<std::size_t>();
  return p;
}

}  // namespace

nlohmann::ordered_json RunRecord::to_json() const {
  nlohmann::ordered_json j;
  j["format_version"] = format_version;
  j["label"] = label;
  j["config_hash"] = config_hash;
  j["config"] = nlohmann::ordered_json::object();
  for (const auto& [k, v] : config) j["config"][k] = v;
  j["seeds"] = nlohmann::ordered_json::array();
  for (const auto& s : seeds) {
    nlohmann::ordered_json sj;
    sj["seed"] = s.seed;
    sj["ok"] = s.ok;
    sj["error"] = s.error;
    sj["steps"] = s.steps;
    sj["step_log"] = s.step_log;
    sj["pretrain"] = pretrain_json(s.pretrain);
    sj["metrics"] = s.metrics.to_json();
    j["seeds"].push_back(sj);
  }
  j["median"] = median.to_json();
  j["failed"] = failed;
  j["timing"] = {{"wall_clock_seconds", wall_clock_seconds}};
  return j;
}

RunRecord RunRecord::from_json(const nlohmann::json& j) {
  RunRecord r;
  r.format_version = j.at("format_version").get<std::uint32_t>();
  r.label = j.at("label").get<std::string>();
  r.config_hash = j.at("config_hash").get<std::string>();
  // nlohmann::json sorts keys, so restore the canonical order.
  const auto& cj = j.at("config");
  for (const auto& key : ExperimentConfig::keys()) {
    if (cj.contains(key)) r.config.emplace_back(key, cj.at(key).get<std::string>());
  }
  for (const auto& sj : j.at("seeds")) {
    SeedResult s;
    s.seed = sj.at("seed").get<std::uint64_t>();
    s.ok = sj.at("ok").get<bool>();
    s.error = sj.at("error").get<std::string>();
    s.steps = sj.at("steps").get<std::size_t>();
    s.step_log = sj.at("step_log").get<std::string>();
    s.pretrain = pretrain_from_json(sj.at("pretrain"));
    s.metrics = Metrics::from_json(sj.at("metrics"));
    r.seeds.push_back(std::move(s));
  }
  r.median = Metrics::from_json(j.at("median"));
  r.failed = j.at("failed").get<bool>();
  r.wall_clock_seconds = j.at("timing").at("wall_clock_seconds").get<double>();
  return r;
}

bool RunRecord::operator==(const RunRecord& other) const { return to_json().dump() == other.to_json().dump(); }

// ---- backbone cache ----------------------------------------------------------------

namespace {

struct CachedBackbone {
  DualEncoder model;
  PretrainReport report;
};

std::mutex cache_mutex;
std::map<std::string, CachedBackbone>& memory_cache() {
  static std::map<std::string, CachedBackbone> cache;
  return cache;
}

std::filesystem::path resolve_cache_dir(const RunOptions& opts) {
  if (!opts.cache_dir.empty()) return opts.cache_dir;
  if (opts.use_env_cache) {
    if (const char* env = std::getenv("GLAD_CACHE_DIR"); env && *env) return env;
  }
  return {};
}

}  // namespace

void clear_backbone_memory_cache() {
  std::lock_guard lock(cache_mutex);
  memory_cache().clear();
}

std::string backbone_cache_key(const ExperimentConfig& cfg, std::uint64_t seed) {
  std::string text = "seed=" + std::to_string(seed) + "\n";
  for (const auto& [k, v] : cfg.to_kv()) {
    const bool relevant = k == "task.d_in" || k == "task.n_pretrain" || k == "task.sigma_img" ||
                          k == "task.sigma_txt" || k.rfind("model.", 0) == 0 || k.rfind("lora.", 0) == 0 ||
                          k.rfind("pretrain.", 0) == 0;
    if (relevant) text += k + "=" + v + "\n";
  }
  char buf[40];
  std::snprintf(buf, sizeof(buf), "backbone-%016llx",
                static_cast<unsigned long long>(fnv1a(text.data(), text.size())));
  return buf;
}

DualEncoder obtain_backbone(const ExperimentConfig& cfg, const TaskBundle& bundle, std::uint64_t seed,
                            const RunOptions& opts, PretrainReport* report) {
  const std::string key = backbone_cache_key(cfg, seed);
  {
    std::lock_guard lock(cache_mutex);
    auto it = memory_cache().find(key);
    if (it != memory_cache().end()) {
      if (report) *report = it->second.report;
      return it->second.model.clone();
    }
  }
  const auto dir = resolve_cache_dir(opts);
  const auto ckpt = dir.empty() ? std::filesystem::path{} : dir / (key + ".ckpt");
  const auto meta = dir.empty() ? std::filesystem::path{} : dir / (key + ".json");
  std::optional<CachedBackbone> entry;
  if (!dir.empty() && std::filesystem::exists(ckpt) && std::filesystem::exists(meta)) {
    std::ifstream in(meta);
    const auto j = nlohmann::json::parse(in);
    entry.emplace(CachedBackbone{load_backbone(ckpt), pretrain_from_json(j)});
  } else {
    DualEncoder model(cfg.model, mix_seed(seed, 1));
    std::vector<std::uint32_t> downstream = bundle.base_ids;
    downstream.insert(downstream.end(), bundle.novel_ids.begin(), bundle.novel_ids.end());
    const PretrainReport rep = pretrain_backbone(model, pretrain_corpus(bundle), downstream, cfg.pretrain, seed);
    entry.emplace(CachedBackbone{std::move(model), rep});
    if (!dir.empty()) {
      std::filesystem::create_directories(dir);
      save_backbone(ckpt, entry->model);
      write_text_file(meta, pretrain_json(rep).dump(2) + "\n");
    }
  }
  if (report) *report = entry->report;
  DualEncoder out = entry->model.clone();
  std::lock_guard lock(cache_mutex);
  memory_cache().insert_or_assign(key, std::move(*entry));
  return out;
}

// ---- training -------------------------------------------------------------------------

TaskSpec task_for_seed(const ExperimentConfig& cfg, std::uint64_t seed) {
  TaskSpec spec = cfg.task;
  spec.seed = seed;
  spec.pool_seed = seed;
  return spec;
}

LossConfig effective_loss(const ExperimentConfig& cfg) {
  LossConfig loss = cfg.loss;
  if (!cfg.flags.use_kl) loss.kl_weight = 0.0;
  return loss;
}

namespace {

Batch make_batch(const SampleSet& samples, std::span<const std::size_t> rows, const Tensor& class_texts) {
  const std::size_t d = samples.x.cols;
  Batch b;
  std::vector<double> x(rows.size() * d);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy_n(samples.x.row(rows[i]), d, x.begin() + static_cast<std::ptrdiff_t>(i * d));
    b.labels.push_back(samples.labels[rows[i]]);
  }
  b.images = Tensor::matrix(rows.size(), d, std::move(x));
  b.class_texts = class_texts;
  return b;
}

}  // namespace

LossFn training_loss(const AdaptedModel& model, const TaskBundle& bundle, const LossConfig& loss) {
  std::vector<std::size_t> all(bundle.train.size());
  std::iota(all.begin(), all.end(), 0);
  auto batch = std::make_shared<Batch>(make_batch(bundle.train, all, bundle.base_texts.to_tensor()));
  return [&model, batch, loss] { return total_loss(*batch, model, loss); };
}

SeedArtifacts run_seed(const ExperimentConfig& cfg, std::uint64_t seed, const RunOptions& opts) {
  SeedArtifacts art;
  SeedResult& res = art.result;
  res.seed = seed;
  const std::string tag = cfg.label + "_seed" + std::to_string(seed);
  std::string log;
  try {
    const TaskBundle bundle = generate_task(task_for_seed(cfg, seed));
    DualEncoder backbone = obtain_backbone(cfg, bundle, seed, opts, &res.pretrain);
    std::optional<AlignNet> align;
    if (cfg.flags.use_alignnet) {
      Rng rng(mix_seed(seed, 77));
      align.emplace(cfg.model.embed, cfg.alignnet, rng);
    }
    art.model.emplace(std::move(backbone), std::move(align));
    AdaptedModel& model = *art.model;
    model.alignnet_at_eval = cfg.alignnet_at_eval;

    ParamSet params(model.trainable_parameters());
    const LossConfig loss = effective_loss(cfg);
    const TrainMode mode = resolve_mode(cfg);
    GradRegConfig gradreg = cfg.gradreg;
    if (cfg.flags.use_sam_only && cfg.flags.sam_fusion) gradreg.alpha = 1.0;

    const std::size_t n = bundle.train.size();
    const std::size_t batch_size = std::min(cfg.train.batch_size, n);
    const std::size_t per_epoch = (n + batch_size - 1) / batch_size;
    UpdateRule rule;
    rule.kind = cfg.train.rule;
    rule.base_lr = cfg.train.lr;
    rule.momentum = cfg.train.momentum;
    rule.total_steps = cfg.train.epochs * per_epoch;
    UpdateState state;

    const Tensor class_texts = bundle.base_texts.to_tensor();
    Rng order_rng(mix_seed(seed, 88));
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::size_t t = 0;
    for (std::size_t epoch = 0; epoch < cfg.train.epochs; ++epoch) {
      order_rng.shuffle(order);
      for (std::size_t start = 0; start < n; start += batch_size) {
        const std::size_t k = std::min(batch_size, n - start);
        const Batch batch = make_batch(bundle.train, std::span(order).subspan(start, k), class_texts);
        const LossFn loss_fn = [&] { return total_loss(batch, model, loss); };
        StepReport rep;
        switch (mode) {
          case TrainMode::plain: rep = gradient_step(loss_fn, params, rule, state, t); break;
          case TrainMode::sam: rep = sam_step(loss_fn, params, cfg.gradreg.rho, rule, state, t); break;
          case TrainMode::gradreg: rep = regularized_step(loss_fn, params, gradreg, rule, state, t); break;
        }
        log += rep.to_json_line();
        log += '\n';
        art.steps.push_back(rep);
        ++t;
      }
    }
    res.steps = t;

    Metrics& m = res.metrics;
    m.base_acc = accuracy(model, bundle, Split::test_base);
    m.novel_acc = accuracy(model, bundle, Split::test_novel);
    m.hm = harmonic_mean(m.base_acc, m.novel_acc);
    for (const auto& shift : cfg.eval.shifts) {
      m.per_domain[shift_label(shift)] =
          accuracy(model, apply_domain_shift(bundle.test_base, shift), bundle.base_texts);
    }
    if (cfg.eval.transfer_targets > 0) {
      const auto pool = cross_task_pool(bundle.spec, default_transfer_targets(bundle.spec, cfg.eval.transfer_targets));
      for (std::size_t i = 0; i < pool.targets.size(); ++i) {
        m.transfer["target" + std::to_string(i)] = accuracy(model, pool.targets[i], Split::test_base);
      }
    }
    if (cfg.eval.flatness_trials > 0) {
      const auto probe = flatness_probe(params, training_loss(model, bundle, loss), cfg.eval.flatness_rho,
                                        cfg.eval.flatness_trials, mix_seed(seed, 99));
      m.flatness = probe.mean_increase;
    }
    if (!opts.out_dir.empty() && opts.write_checkpoints) {
      save_checkpoint(opts.out_dir / ("model_" + tag + ".ckpt"), model);
    }
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    res.ok = false;
    res.error = e.what();
  }
  if (!opts.out_dir.empty()) {
    res.step_log = "steps_" + tag + ".jsonl";
    write_text_file(opts.out_dir / res.step_log, log);
  }
  return art;
}

RunRecord run_experiment(const ExperimentConfig& cfg, const RunOptions& opts) {
  cfg.validate();
  const auto started = std::chrono::steady_clock::now();
  if (!opts.out_dir.empty()) std::filesystem::create_directories(opts.out_dir);
  RunRecord rec;
  rec.label = cfg.label;
  rec.config = cfg.to_kv();
  rec.config_hash = cfg.hash_hex();
  std::vector<Metrics> ok;
  for (auto seed : cfg.seeds) {
    SeedArtifacts art = run_seed(cfg, seed, opts);
    if (art.result.ok) {
      ok.push_back(art.result.metrics);
    } else {
      rec.failed = true;
    }
    rec.seeds.push_back(std::move(art.result));
  }
  if (!ok.empty()) rec.median = median_metrics(ok);
  rec.wall_clock_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  if (!opts.out_dir.empty()) {
    write_text_file(opts.out_dir / ("run_" + cfg.label + ".json"), rec.to_json().dump(2) + "\n");
  }
  return rec;
}

AblationTable run_ablation_grid(const ExperimentConfig& base, const RunOptions& opts) {
  base.validate();
  AblationTable table;
  for (auto row : {AblationRow::a, AblationRow::b, AblationRow::c, AblationRow::d, AblationRow::e}) {
    const ExperimentConfig cfg = with_row(base, row);
    try {
      table.rows.push_back(run_experiment(cfg, opts));
    } catch (const Error& e) {
      RunRecord failed;
      failed.label = cfg.label;
      failed.config = cfg.to_kv();
      failed.config_hash = cfg.hash_hex();
      failed.failed = true;
      SeedResult s;
      s.ok = false;
      s.error = e.what();
      failed.seeds.push_back(s);
      table.rows.push_back(std::move(failed));
    }
  }
  return table;
}

// ---- emission ----------------------------------------------------------------------------

ResultFormat parse_result_format(const std::string& s) {
  if (s == "json") return ResultFormat::json;
  if (s == "csv") return ResultFormat::csv;
  if (s == "markdown" || s == "md") return ResultFormat::markdown;
  throw ConfigError("unknown result format '" + s + "' (expected json, csv or markdown)");
}

namespace {

std::string config_value(const RunRecord& r, const std::string& key) {
  for (const auto& [k, v] : r.config) {
    if (k == key) return v;
  }
  return "";
}

std::string row_name(const RunRecord& r) {
  return r.label.size() == 1 && r.label[0] >= 'a' && r.label[0] <= 'e' ? "(" + r.label + ")" : r.label;
}

}  // namespace

std::string render_results(const std::vector<RunRecord>& records, ResultFormat format) {
  if (records.empty()) throw ContractError("emit_results: no records");
  switch (format) {
    case ResultFormat::json: {
      nlohmann::ordered_json arr = nlohmann::ordered_json::array();
      for (const auto& r : records) arr.push_back(r.to_json());
      return arr.dump(2) + "\n";
    }
    case ResultFormat::csv: {
      std::string out = std::string(kCsvHeader) + "\n";
      for (const auto& r : records) {
        std::string seeds = config_value(r, "seeds");
        std::replace(seeds.begin(), seeds.end(), ',', ' ');
        out += r.label + "," + r.config_hash + "," + seeds + "," + format_percent(r.median.base_acc) + "," +
               format_percent(r.median.novel_acc) + "," + format_percent(r.median.hm) + "," +
               (r.median.flatness ? fmt(*r.median.flatness) : std::string()) + "," + fmt(r.failed) + "\n";
      }
      return out;
    }
    case ResultFormat::markdown: {
      std::string out = "| Row | LoRA | SAM | GradReg | AlignNet | Base | Novel | HM |\n";
      out += "|-----|:----:|:---:|:-------:|:--------:|------:|------:|------:|\n";
      for (const auto& r : records) {
        auto mark = [&](const std::string& key) { return config_value(r, key) == "true" ? "✓" : " "; };
        out += "| " + row_name(r) + " | ✓ | " + mark("flags.use_sam_only") + " | " + mark("flags.use_gradreg") +
               " | " + mark("flags.use_alignnet") + " | ";
        if (r.failed && r.median.hm == 0.0) {
          out += "failed | failed | failed |\n";
        } else {
          out += format_percent(r.median.base_acc) + " | " + format_percent(r.median.novel_acc) + " | " +
                 format_percent(r.median.hm) + " |\n";
        }
      }
      return out;
    }
  }
  throw ContractError("unknown result format");
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << text;
  out.flush();
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

void emit_results(const std::vector<RunRecord>& records, ResultFormat format, const std::filesystem::path& path) {
  write_text_file(path, render_results(records, format));
}

std::vector<RunRecord> load_records(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read '" + path.string() + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("'" + path.string() + "' is not valid JSON: " + e.what());
  }
  std::vector<RunRecord> out;
  if (j.is_array()) {
    for (const auto& r : j) out.push_back(RunRecord::from_json(r));
  } else {
    out.push_back(RunRecord::from_json(j));
  }
  return out;
}

}  // namespace glad

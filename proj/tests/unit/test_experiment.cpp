#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "glad/error.hpp"
#include "glad/experiment.hpp"

using namespace glad;

namespace {

std::filesystem::path fresh_dir(const std::string& name) {
  const auto p = std::filesystem::temp_directory_path() / ("glad_test_" + name);
  std::filesystem::remove_all(p);
  return p;
}

std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string error_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

RunOptions isolated() {
  RunOptions o;
  o.use_env_cache = false;
  return o;
}

ExperimentConfig quick() {
  ExperimentConfig cfg;
  cfg.seeds = {1, 2};
  cfg.train.epochs = 4;
  cfg.task.test_per_class = 20;
  return cfg;
}

RunRecord untimed(RunRecord r) {
  r.wall_clock_seconds = 0.0;
  return r;
}

RunRecord synthetic_record(AblationRow row, double base, double novel) {
  const ExperimentConfig cfg = with_row(ExperimentConfig{}, row);
  RunRecord r;
  r.label = cfg.label;
  r.config = cfg.to_kv();
  r.config_hash = cfg.hash_hex();
  r.median.base_acc = base;
  r.median.novel_acc = novel;
  r.median.hm = harmonic_mean(base, novel);
  return r;
}

}  // namespace

TEST_CASE("config keys, echo and parsing") {
  ExperimentConfig cfg;
  const auto kv = cfg.to_kv();
  REQUIRE(kv.size() == ExperimentConfig::keys().size());
  for (std::size_t i = 0; i < kv.size(); ++i) CHECK(kv[i].first == ExperimentConfig::keys()[i]);

  cfg.set("task.shots", "4");
  cfg.set("gradreg.scope", "per_tensor");
  cfg.set("eval.shifts", "rotation:0.5, noise:0.2");
  cfg.set("seeds", "3,9");
  CHECK(cfg.task.shots == 4);
  CHECK(cfg.gradreg.scope == ProjectionScope::per_tensor);
  REQUIRE(cfg.eval.shifts.size() == 2);
  CHECK(cfg.eval.shifts[1].kind == ShiftKind::noise);
  CHECK(cfg.eval.shifts[1].magnitude == 0.2);
  CHECK(cfg.seeds == std::vector<std::uint64_t>{3, 9});
  cfg.set("task.d_in", "12");
  CHECK(cfg.model.d_in == 12);

  ExperimentConfig back;
  apply_config_text(back, config_text(cfg));
  CHECK(back.to_kv() == cfg.to_kv());

  CHECK(error_of([&] { cfg.set("task.colour", "red"); }).find("task.colour") != std::string::npos);
  CHECK(error_of([&] { cfg.set("task.shots", "four"); }).find("task.shots") != std::string::npos);
  CHECK(error_of([&] { cfg.set("train.rule", "adam"); }).find("train.rule") != std::string::npos);
  CHECK(error_of([&] { cfg.set("eval.shifts", "blur:1"); }).find("eval.shifts") != std::string::npos);
  CHECK(error_of([&] { cfg.set("flags.use_kl", "maybe"); }).find("flags.use_kl") != std::string::npos);
}

TEST_CASE("config text files: comments and line-numbered errors") {
  const auto dir = fresh_dir("config");
  std::filesystem::create_directories(dir);
  const auto path = dir / "run.cfg";
  std::ofstream(path) << "# desk run\n\ntrain.epochs = 7   # short\nlora.rank=2\n";
  const ExperimentConfig cfg = load_config_file(path);
  CHECK(cfg.train.epochs == 7);
  CHECK(cfg.model.lora.rank == 2);

  ExperimentConfig c;
  const std::string bad_line = error_of([&] { apply_config_text(c, "train.epochs = 3\nno equals sign\n"); });
  CHECK(bad_line.find("line 2") != std::string::npos);
  const std::string bad_key = error_of([&] { apply_config_text(c, "\n\nmodel.widht = 3\n"); });
  CHECK(bad_key.find("line 3") != std::string::npos);
  CHECK(bad_key.find("model.widht") != std::string::npos);
  CHECK_THROWS_AS(load_config_file(dir / "missing.cfg"), IoError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("validation names the offending field") {
  ExperimentConfig cfg;
  cfg.gradreg.alpha = 1.5;
  CHECK(error_of([&] { cfg.validate(); }).find("alpha") != std::string::npos);
  cfg = ExperimentConfig{};
  cfg.model.lora.rank = 40;
  CHECK(error_of([&] { cfg.validate(); }).find("rank") != std::string::npos);
  cfg = ExperimentConfig{};
  cfg.seeds.clear();
  CHECK(error_of([&] { cfg.validate(); }).find("seeds") != std::string::npos);
  cfg = ExperimentConfig{};
  cfg.flags.use_sam_only = true;  // together with the default use_gradreg
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  CHECK_THROWS_AS(run_experiment(cfg, isolated()), ConfigError);
}

TEST_CASE("config hash is stable and ignores the label") {
  ExperimentConfig a, b;
  CHECK(a.hash() == b.hash());
  CHECK(a.hash_hex().size() == 16);
  b.label = "other";
  CHECK(a.hash() == b.hash());
  b.set("gradreg.rho", "0.05");
  CHECK(a.hash() != b.hash());
  b.set("gradreg.rho", "0.1");
  CHECK(a.hash() == b.hash());
}

TEST_CASE("ablation rows differ only in their flags") {
  const ExperimentConfig base;
  const auto a = with_row(base, AblationRow::a).to_kv();
  const auto e = with_row(base, AblationRow::e).to_kv();
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].first.rfind("flags.", 0) == 0) continue;
    CHECK(a[i] == e[i]);
  }
  CHECK(resolve_mode(with_row(base, AblationRow::a)) == TrainMode::plain);
  CHECK(resolve_mode(with_row(base, AblationRow::b)) == TrainMode::sam);
  CHECK(resolve_mode(with_row(base, AblationRow::c)) == TrainMode::gradreg);
  CHECK(resolve_mode(with_row(base, AblationRow::d)) == TrainMode::plain);
  CHECK(resolve_mode(with_row(base, AblationRow::e)) == TrainMode::gradreg);
  CHECK(effective_loss(with_row(base, AblationRow::a)).kl_weight == 0.0);
  CHECK(effective_loss(with_row(base, AblationRow::e)).kl_weight == base.loss.kl_weight);
  CHECK(parse_row("c") == AblationRow::c);
  CHECK(parse_row("d") == AblationRow::d);
  CHECK_THROWS_AS(parse_row("f"), ConfigError);
}

TEST_CASE("runs are deterministic and cached backbones are bit-identical") {
  const ExperimentConfig cfg = quick();
  const auto cache = fresh_dir("cache");

  clear_backbone_memory_cache();
  const RunRecord cold = untimed(run_experiment(cfg, isolated()));
  clear_backbone_memory_cache();
  RunOptions disk = isolated();
  disk.cache_dir = cache;
  const RunRecord filled = untimed(run_experiment(cfg, disk));
  const std::string key = backbone_cache_key(cfg, 1);
  CHECK(std::filesystem::exists(cache / (key + ".ckpt")));
  CHECK(std::filesystem::exists(cache / (key + ".json")));
  clear_backbone_memory_cache();
  const RunRecord from_disk = untimed(run_experiment(cfg, disk));
  const RunRecord from_memory = untimed(run_experiment(cfg, isolated()));

  CHECK(cold == filled);
  CHECK(cold == from_disk);
  CHECK(cold == from_memory);
  CHECK_FALSE(cold.failed);
  CHECK(cold.seeds.size() == 2);

  // The backbone depends on pretraining settings, not on the adaptation stage.
  ExperimentConfig other = cfg;
  other.gradreg.rho = 0.3;
  CHECK(backbone_cache_key(other, 1) == key);
  other.pretrain.lr = 0.01;
  CHECK(backbone_cache_key(other, 1) != key);
  CHECK(backbone_cache_key(cfg, 2) != key);
  std::filesystem::remove_all(cache);
}

TEST_CASE("run records, step logs and checkpoints on disk") {
  ExperimentConfig cfg = quick();
  cfg.label = "demo";
  cfg.seeds = {3};
  cfg.eval.shifts = {DomainShift{ShiftKind::rotation, 0.5, 7}, DomainShift{ShiftKind::noise, 0.3, 7}};
  cfg.eval.transfer_targets = 3;
  cfg.eval.flatness_trials = 5;
  const auto dir = fresh_dir("run");
  RunOptions opts = isolated();
  opts.out_dir = dir;
  const RunRecord rec = run_experiment(cfg, opts);

  CHECK(std::filesystem::exists(dir / "run_demo.json"));
  CHECK(std::filesystem::exists(dir / "model_demo_seed3.ckpt"));
  const std::string log = read_file(dir / "steps_demo_seed3.jsonl");
  std::size_t lines = 0;
  for (char ch : log) lines += ch == '\n';
  CHECK(lines == rec.seeds[0].steps);
  CHECK(lines == 4 * 5);  // 160 samples in batches of 32, 4 epochs

  const Metrics& m = rec.median;
  CHECK(m.per_domain.size() == 2);
  CHECK(m.per_domain.count("rotation@0.5") == 1);
  CHECK(m.transfer.size() == 3);
  CHECK(m.flatness.has_value());
  CHECK(m.hm == doctest::Approx(harmonic_mean(m.base_acc, m.novel_acc)).epsilon(1e-12));

  const auto loaded = load_records(dir / "run_demo.json");
  REQUIRE(loaded.size() == 1);
  CHECK(loaded[0] == rec);
  CHECK(RunRecord::from_json(nlohmann::json::parse(rec.to_json().dump())) == rec);

  const AdaptedModel model = load_checkpoint(dir / "model_demo_seed3.ckpt");
  const TaskBundle bundle = generate_task(task_for_seed(cfg, 3));
  CHECK(accuracy(model, bundle, Split::test_base) == rec.seeds[0].metrics.base_acc);
  std::filesystem::remove_all(dir);
}

TEST_CASE("failed seeds and rows are recorded, not fatal") {
  ExperimentConfig cfg = quick();
  cfg.pretrain.lr = 0.0;  // backbone never leaves chance, pretraining check fails
  cfg.pretrain.epochs = 1;
  const RunRecord rec = run_experiment(cfg, isolated());
  CHECK(rec.failed);
  REQUIRE(rec.seeds.size() == 2);
  CHECK_FALSE(rec.seeds[0].ok);
  CHECK(rec.seeds[0].error.find("pretraining") != std::string::npos);

  cfg.seeds = {1};
  const AblationTable table = run_ablation_grid(cfg, isolated());
  REQUIRE(table.rows.size() == 5);
  for (const auto& r : table.rows) CHECK(r.failed);
  const std::string md = render_results(table.rows, ResultFormat::markdown);
  CHECK(md.find("failed") != std::string::npos);
}

TEST_CASE("degenerate full configuration reduces to plain LoRA") {
  ExperimentConfig plain = with_row(quick(), AblationRow::a);
  ExperimentConfig degenerate = with_row(quick(), AblationRow::c);
  degenerate.gradreg.alpha = 0.0;
  degenerate.loss.kl_weight = 0.0;
  const RunRecord a = run_experiment(plain, isolated());
  const RunRecord d = run_experiment(degenerate, isolated());
  CHECK(a.median == d.median);
  for (std::size_t i = 0; i < a.seeds.size(); ++i) CHECK(a.seeds[i].metrics == d.seeds[i].metrics);
}

TEST_CASE("result rendering") {
  std::vector<RunRecord> rows{
      synthetic_record(AblationRow::a, 84.47, 74.22), synthetic_record(AblationRow::b, 83.79, 76.54),
      synthetic_record(AblationRow::c, 84.60, 76.57), synthetic_record(AblationRow::d, 84.82, 74.76),
      synthetic_record(AblationRow::e, 85.05, 76.74)};
  RunRecord broken = synthetic_record(AblationRow::e, 0.0, 0.0);
  broken.label = "broken";
  broken.failed = true;
  rows.push_back(broken);

  const std::string golden = read_file(std::filesystem::path(GLAD_TEST_DATA_DIR) / "golden" / "ablation_table.md");
  CHECK(render_results(rows, ResultFormat::markdown) == golden);

  const std::string csv = render_results(rows, ResultFormat::csv);
  CHECK(csv.substr(0, csv.find('\n')) == kCsvHeader);
  CHECK(csv.find("\na," + rows[0].config_hash + ",1 2 3 4 5,84.47,74.22,79.01,,false\n") != std::string::npos);

  const auto dir = fresh_dir("emit");
  emit_results(rows, ResultFormat::json, dir / "all.json");
  const auto back = load_records(dir / "all.json");
  REQUIRE(back.size() == rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) CHECK(back[i] == rows[i]);
  std::ofstream(dir / "junk.json") << "{not json";
  CHECK_THROWS_AS(load_records(dir / "junk.json"), DataError);
  CHECK_THROWS_AS(render_results({}, ResultFormat::csv), ContractError);
  CHECK_THROWS_AS(parse_result_format("xml"), ConfigError);
  std::filesystem::remove_all(dir);
}

// glad: run adaptation experiments on the synthetic base-to-novel benchmark.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "glad/error.hpp"
#include "glad/experiment.hpp"

namespace fs = std::filesystem;
using namespace glad;

namespace {

struct ConfigArgs {
  std::string config_file;
  std::vector<std::string> overrides;
  std::string seeds;
  std::string label;
};

void add_config_args(CLI::App* cmd, ConfigArgs& a) {
  cmd->add_option("--config", a.config_file, "Config file of key = value lines");
  cmd->add_option("--set", a.overrides, "Override a config key (KEY=VALUE), repeatable");
  cmd->add_option("--seeds", a.seeds, "Comma-separated seed list");
  cmd->add_option("--label", a.label, "Run label used in output file names");
}

ExperimentConfig build_config(const ConfigArgs& a) {
  ExperimentConfig cfg = a.config_file.empty() ? ExperimentConfig{} : load_config_file(a.config_file);
  for (const auto& kv : a.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects KEY=VALUE, got '" + kv + "'");
    cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (!a.seeds.empty()) cfg.set("seeds", a.seeds);
  if (!a.label.empty()) cfg.label = a.label;
  cfg.validate();
  return cfg;
}

void print_summary(const RunRecord& r) {
  std::printf("%s  base %s  novel %s  hm %s%s\n", r.label.c_str(), format_percent(r.median.base_acc).c_str(),
              format_percent(r.median.novel_acc).c_str(), format_percent(r.median.hm).c_str(),
              r.failed ? "  (failed seeds)" : "");
  for (const auto& s : r.seeds) {
    if (!s.ok) std::printf("  seed %llu failed: %s\n", static_cast<unsigned long long>(s.seed), s.error.c_str());
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Gradient-regularized low-rank adaptation on a synthetic dual-encoder benchmark"};
  app.require_subcommand(1);

  ConfigArgs run_args;
  std::string run_out = "runs";
  std::string run_row;
  bool no_ckpt = false;
  auto* run = app.add_subcommand("run", "Train and evaluate one configuration over its seeds");
  add_config_args(run, run_args);
  run->add_option("--out", run_out, "Output directory")->capture_default_str();
  run->add_option("--row", run_row, "Apply an ablation row's flags (a-e)");
  run->add_flag("--no-checkpoints", no_ckpt, "Skip writing model checkpoints");

  ConfigArgs ablate_args;
  std::string ablate_out = "runs/ablation";
  auto* ablate = app.add_subcommand("ablate", "Run ablation rows (a)-(e) and write the results table");
  add_config_args(ablate, ablate_args);
  ablate->add_option("--out", ablate_out, "Output directory")->capture_default_str();

  ConfigArgs probe_args;
  std::string probe_ckpt;
  std::uint64_t probe_seed = 1;
  std::size_t probe_trials = 20;
  double probe_rho = 0.1;
  auto* probe = app.add_subcommand("probe-flatness", "Loss increase under random weight perturbations");
  add_config_args(probe, probe_args);
  probe->add_option("--checkpoint", probe_ckpt, "Model checkpoint written by 'run'")->required();
  probe->add_option("--seed", probe_seed, "Task seed the model was trained on")->capture_default_str();
  probe->add_option("--trials", probe_trials, "Number of random directions")->capture_default_str();
  probe->add_option("--rho", probe_rho, "Perturbation radius")->capture_default_str();

  ConfigArgs gen_args;
  std::uint64_t gen_seed = 1;
  std::string gen_out, gen_csv;
  auto* gen = app.add_subcommand("gen-task", "Generate a task bundle");
  add_config_args(gen, gen_args);
  gen->add_option("--seed", gen_seed, "Task seed")->capture_default_str();
  gen->add_option("--out", gen_out, "Binary bundle path");
  gen->add_option("--csv", gen_csv, "Also write samples as CSV");

  std::vector<std::string> emit_in;
  std::string emit_format = "markdown";
  std::string emit_out;
  auto* emit = app.add_subcommand("emit", "Render run records as json, csv or markdown");
  emit->add_option("inputs", emit_in, "Run record JSON files")->required();
  emit->add_option("--format", emit_format, "json, csv or markdown")->capture_default_str();
  emit->add_option("--out", emit_out, "Output file (default: stdout)");

  ConfigArgs show_args;
  auto* show = app.add_subcommand("config", "Print the resolved configuration");
  add_config_args(show, show_args);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run) {
      ExperimentConfig cfg = build_config(run_args);
      if (!run_row.empty()) {
        const std::string label = cfg.label;
        cfg = with_row(cfg, parse_row(run_row));
        if (!run_args.label.empty()) cfg.label = label;
      }
      RunOptions opts;
      opts.out_dir = run_out;
      opts.write_checkpoints = !no_ckpt;
      const RunRecord rec = run_experiment(cfg, opts);
      print_summary(rec);
      return rec.failed ? 3 : 0;
    }
    if (*ablate) {
      const ExperimentConfig cfg = build_config(ablate_args);
      RunOptions opts;
      opts.out_dir = ablate_out;
      opts.write_checkpoints = false;
      const AblationTable table = run_ablation_grid(cfg, opts);
      const fs::path out = ablate_out;
      emit_results(table.rows, ResultFormat::json, out / "ablation.json");
      emit_results(table.rows, ResultFormat::csv, out / "ablation.csv");
      emit_results(table.rows, ResultFormat::markdown, out / "ablation.md");
      std::cout << render_results(table.rows, ResultFormat::markdown);
      bool failed = false;
      for (const auto& r : table.rows) failed = failed || r.failed;
      return failed ? 3 : 0;
    }
    if (*probe) {
      const ExperimentConfig cfg = build_config(probe_args);
      AdaptedModel model = load_checkpoint(probe_ckpt);
      const TaskBundle bundle = generate_task(task_for_seed(cfg, probe_seed));
      ParamSet params(model.trainable_parameters());
      const auto res = flatness_probe(params, training_loss(model, bundle, effective_loss(cfg)), probe_rho,
                                      probe_trials, probe_seed);
      nlohmann::ordered_json j;
      j["rho"] = probe_rho;
      j["trials"] = probe_trials;
      j["mean_increase"] = res.mean_increase;
      j["median_increase"] = res.median_increase;
      j["discarded"] = res.discarded;
      std::cout << j.dump(2) << "\n";
      return 0;
    }
    if (*gen) {
      const ExperimentConfig cfg = build_config(gen_args);
      const TaskBundle bundle = generate_task(task_for_seed(cfg, gen_seed));
      if (!gen_out.empty()) save_bundle(gen_out, bundle);
      if (!gen_csv.empty()) write_text_file(gen_csv, samples_csv(bundle));
      std::printf("task seed %llu: %zu train, %zu test_base, %zu test_novel samples\n",
                  static_cast<unsigned long long>(gen_seed), bundle.train.size(), bundle.test_base.size(),
                  bundle.test_novel.size());
      return 0;
    }
    if (*emit) {
      std::vector<RunRecord> records;
      for (const auto& path : emit_in) {
        auto loaded = load_records(path);
        records.insert(records.end(), loaded.begin(), loaded.end());
      }
      const ResultFormat format = parse_result_format(emit_format);
      if (emit_out.empty()) {
        std::cout << render_results(records, format);
      } else {
        emit_results(records, format, emit_out);
      }
      return 0;
    }
    if (*show) {
      std::cout << config_text(build_config(show_args));
      return 0;
    }
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}

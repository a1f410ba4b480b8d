#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "glad/error.hpp"
#include "glad/experiment.hpp"

namespace py = pybind11;
using namespace glad;

namespace {

Matrix to_matrix(const std::vector<std::vector<double>>& rows) {
  if (rows.empty()) throw DimensionError("expected a non-empty matrix");
  Matrix m(rows.size(), rows[0].size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() != m.cols) throw DimensionError("ragged matrix rows");
    std::copy(rows[i].begin(), rows[i].end(), m.row(i));
  }
  return m;
}

std::vector<std::vector<double>> from_tensor(const Tensor& t) {
  const std::size_t cols = t.dim(t.rank() - 1);
  std::vector<std::vector<double>> out(t.size() / cols);
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i].assign(t.data().begin() + static_cast<std::ptrdiff_t>(i * cols),
                  t.data().begin() + static_cast<std::ptrdiff_t>((i + 1) * cols));
  }
  return out;
}

std::vector<std::vector<double>> from_matrix(const Matrix& m) {
  std::vector<std::vector<double>> out(m.rows);
  for (std::size_t i = 0; i < m.rows; ++i) out[i].assign(m.row(i), m.row(i) + m.cols);
  return out;
}

py::dict split_dict(const SampleSet& s) {
  py::dict d;
  d["x"] = from_matrix(s.x);
  d["labels"] = s.labels;
  d["class_ids"] = s.class_ids;
  return d;
}

ExperimentConfig make_config(const std::map<std::string, std::string>& overrides) {
  ExperimentConfig cfg;
  for (const auto& [k, v] : overrides) {
    if (k == "label") {
      cfg.label = v;
    } else {
      cfg.set(k, v);
    }
  }
  return cfg;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Gradient-regularized low-rank adaptation on a synthetic dual-encoder benchmark";

  auto base = py::register_exception<Error>(m, "GladError", PyExc_RuntimeError);
  py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
  py::register_exception<DimensionError>(m, "DimensionError", base.ptr());
  py::register_exception<ContractError>(m, "ContractError", base.ptr());
  py::register_exception<NumericError>(m, "NumericError", base.ptr());
  py::register_exception<DataError>(m, "DataError", base.ptr());
  py::register_exception<DomainError>(m, "DomainError", base.ptr());

  m.def("harmonic_mean", &harmonic_mean, py::arg("base"), py::arg("novel"));
  m.def("cosine_lr", &cosine_lr, py::arg("t"), py::arg("total"), py::arg("base"));
  m.def(
      "sam_perturbation",
      [](const std::vector<double>& g, double rho) -> std::optional<std::vector<double>> {
        auto eps = sam_perturbation(g, rho);
        if (eps.empty()) return std::nullopt;
        return eps;
      },
      py::arg("g"), py::arg("rho"), "rho * g / ||g||, or None when the gradient vanishes");
  m.def(
      "project_conflict",
      [](const std::vector<double>& g, const std::vector<double>& gp, double delta) {
        auto r = project_conflict(g, gp, delta);
        return py::make_tuple(r.grad, r.projected);
      },
      py::arg("g"), py::arg("g_prime"), py::arg("delta") = 1e-12);
  m.def(
      "fuse_gradients",
      [](const std::vector<double>& g, const std::vector<double>& gp, double alpha) {
        return fuse_gradients(g, gp, alpha);
      },
      py::arg("g"), py::arg("g_prime"), py::arg("alpha"));

  py::class_<LoraLinear>(m, "LoraLinear")
      .def(py::init([](std::size_t in, std::size_t out, std::size_t rank, double gamma, std::uint64_t seed) {
             Rng rng(seed);
             LoraConfig cfg;
             cfg.rank = rank;
             cfg.gamma = gamma;
             return LoraLinear(in, out, cfg, rng);
           }),
           py::arg("in_features"), py::arg("out_features"), py::arg("rank") = 8, py::arg("gamma") = 2.0,
           py::arg("seed") = 0)
      .def(
          "randomize_b",
          [](LoraLinear& l, double std, std::uint64_t seed) {
            Rng rng(seed);
            for (auto& v : l.lora_b().mutable_data()) v = rng.normal(0.0, std);
          },
          py::arg("std"), py::arg("seed"))
      .def(
          "forward",
          [](const LoraLinear& l, const std::vector<std::vector<double>>& x, bool use_lora) {
            return from_tensor(l.forward(to_matrix(x).to_tensor(), use_lora));
          },
          py::arg("x"), py::arg("use_lora") = true)
      .def("merge", &LoraLinear::merge)
      .def_property_readonly("merged", &LoraLinear::merged)
      .def_property_readonly("rank", &LoraLinear::rank);

  m.def(
      "config_keys", [] { return ExperimentConfig::keys(); }, "Every settable config key, in canonical order");
  m.def(
      "default_config",
      [](const std::map<std::string, std::string>& overrides) {
        const auto kv = make_config(overrides).to_kv();
        return std::vector<std::pair<std::string, std::string>>(kv.begin(), kv.end());
      },
      py::arg("overrides") = std::map<std::string, std::string>{});
  m.def(
      "config_hash", [](const std::map<std::string, std::string>& overrides) { return make_config(overrides).hash_hex(); },
      py::arg("overrides") = std::map<std::string, std::string>{});

  m.def(
      "generate_task",
      [](const std::map<std::string, std::string>& overrides, std::uint64_t seed) {
        const auto bundle = generate_task(task_for_seed(make_config(overrides), seed));
        py::dict d;
        d["base_ids"] = bundle.base_ids;
        d["novel_ids"] = bundle.novel_ids;
        d["base_texts"] = from_matrix(bundle.base_texts);
        d["novel_texts"] = from_matrix(bundle.novel_texts);
        d["train"] = split_dict(bundle.train);
        d["test_base"] = split_dict(bundle.test_base);
        d["test_novel"] = split_dict(bundle.test_novel);
        return d;
      },
      py::arg("overrides") = std::map<std::string, std::string>{}, py::arg("seed") = 1);

  m.def(
      "run_json",
      [](const std::map<std::string, std::string>& overrides, const std::string& out_dir) {
        const auto cfg = make_config(overrides);
        RunOptions opts;
        opts.out_dir = out_dir;
        py::gil_scoped_release release;
        return run_experiment(cfg, opts).to_json().dump();
      },
      py::arg("overrides") = std::map<std::string, std::string>{}, py::arg("out_dir") = "");
  m.def(
      "ablate_json",
      [](const std::map<std::string, std::string>& overrides) {
        const auto cfg = make_config(overrides);
        py::gil_scoped_release release;
        const auto table = run_ablation_grid(cfg);
        return render_results(table.rows, ResultFormat::json);
      },
      py::arg("overrides") = std::map<std::string, std::string>{});
  m.def(
      "render",
      [](const std::string& records_json, const std::string& format) {
        const auto j = nlohmann::json::parse(records_json);
        std::vector<RunRecord> records;
        if (j.is_array()) {
          for (const auto& r : j) records.push_back(RunRecord::from_json(r));
        } else {
          records.push_back(RunRecord::from_json(j));
        }
        return render_results(records, parse_result_format(format));
      },
      py::arg("records_json"), py::arg("format") = "markdown");
}

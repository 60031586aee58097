#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <filesystem>
#include <fstream>

#include "pele/ctc.hpp"
#include "pele/harness.hpp"
#include "pele/io.hpp"
#include "pele/metrics.hpp"

namespace py = pybind11;
namespace fs = std::filesystem;
using namespace pele;

namespace {

nlohmann::json to_nlohmann(const py::object& obj) {
  return nlohmann::json::parse(
      py::module_::import("json").attr("dumps")(obj).cast<std::string>());
}

py::object to_py(const nlohmann::json& j) {
  return py::module_::import("json").attr("loads")(j.dump());
}

Tensor matrix_from(const std::vector<std::vector<double>>& rows) {
  if (rows.empty()) throw ShapeError("matrix must have at least one row");
  const std::size_t cols = rows[0].size();
  std::vector<double> flat;
  flat.reserve(rows.size() * cols);
  for (const auto& r : rows) {
    if (r.size() != cols) throw ShapeError("ragged matrix");
    flat.insert(flat.end(), r.begin(), r.end());
  }
  return Tensor::from({rows.size(), cols}, std::move(flat));
}

ExperimentConfig config_from(const py::object& obj) {
  return ExperimentConfig::from_json(to_nlohmann(obj));
}

std::string join(const std::string& dir, const std::string& name) {
  fs::create_directories(dir);
  return (fs::path(dir) / name).string();
}

py::object py_train_base(const py::object& config, const std::string& out_dir) {
  auto cfg = config_from(config);
  auto world = build_world(cfg);
  auto base = train_base(world, cfg);
  const std::string path = join(out_dir, "base.model");
  base.save(path);
  return py::make_tuple(path, checksum_hex(base.checksum()));
}

py::object py_extend(const py::object& config, const std::string& out_dir) {
  auto cfg = config_from(config);
  auto world = build_world(cfg);
  auto base = BaseModel::load(join(out_dir, "base.model"));
  base.set_frozen(true);
  auto bundles = extend_all(world, base, cfg);
  py::list names;
  for (const auto& b : bundles) {
    const std::string path = join(out_dir, b.language + ".peleb");
    b.save(path);
    names.append(path);
  }
  base.save(join(out_dir, "base_extended.model"));
  return names;
}

py::object py_evaluate(const py::object& config, const std::string& out_dir) {
  auto cfg = config_from(config);
  auto world = build_world(cfg);
  auto original = BaseModel::load(join(out_dir, "base.model"));
  auto extended = BaseModel::load(join(out_dir, "base_extended.model"));
  extended.set_frozen(true);
  std::vector<LanguageBundle> bundles;
  for (const auto& spec : world.new_specs) {
    bundles.push_back(LanguageBundle::load(join(out_dir, spec.id + ".peleb"), extended));
  }
  std::vector<const LanguageBundle*> refs;
  for (const auto& b : bundles) refs.push_back(&b);

  LidModel lid;
  const LidModel* lid_ptr = nullptr;
  if (cfg.alpha_source == AlphaSourceKind::LpPosterior ||
      cfg.alpha_source == AlphaSourceKind::LpOneHot) {
    lid = LidModel::load(join(out_dir, "lid.model"));
    lid_ptr = &lid;
  }
  auto report = evaluate_extended_system(world, original, extended, refs, lid_ptr, cfg);
  return to_py(report.to_json());
}

py::object py_fit_lid(const py::object& config, const std::string& out_dir) {
  auto cfg = config_from(config);
  auto world = build_world(cfg);
  auto base = BaseModel::load(join(out_dir, "base.model"));
  std::vector<LidTrainingSet> sets;
  for (std::size_t i = 0; i < world.base_specs.size(); ++i) {
    sets.push_back({world.base_specs[i].id, true, &world.base_data[i].train,
                    &world.base_data[i].test});
  }
  for (std::size_t i = 0; i < world.new_specs.size(); ++i) {
    sets.push_back({world.new_specs[i].id, false, &world.new_data[i].train,
                    &world.new_data[i].test});
  }
  auto lid = fit_lid(base, sets, cfg.lid, cfg.seed);
  const std::string path = join(out_dir, "lid.model");
  lid.save(path);
  return py::str(path);
}

py::object py_run_baseline(const py::object& config, const std::string& out_dir,
                           const std::string& method) {
  auto cfg = config_from(config);
  if (!method.empty()) cfg.baseline = baseline_from_string(method);
  auto world = build_world(cfg);
  auto base = BaseModel::load(join(out_dir, "base.model"));
  auto report = run_baseline(world, base, cfg);
  return to_py(report.to_json());
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Language extension toolkit: frozen base model plus per-language add-on modules";
  m.attr("__version__") = "0.1.0";

  py::register_exception<ConfigError>(m, "ConfigError");
  py::register_exception<NumericError>(m, "NumericError");
  py::register_exception<ShapeError>(m, "ShapeErrorCpp");
  py::register_exception<IoError>(m, "IoError");

  m.def("default_config", [] { return to_py(ExperimentConfig::desk().to_json()); },
        "Desk-scale experiment configuration as a dict");
  m.def("paper_shape_config", [] { return to_py(ExperimentConfig::paper_shape().to_json()); },
        "Reference full-scale architecture preset");

  m.def(
      "edit_distance",
      [](const std::vector<int>& ref, const std::vector<int>& hyp) {
        auto c = edit_distance(ref, hyp);
        py::dict d;
        d["sub"] = c.sub;
        d["del"] = c.del;
        d["ins"] = c.ins;
        d["total"] = c.total();
        return d;
      },
      py::arg("ref"), py::arg("hyp"));

  m.def(
      "error_rate",
      [](const std::vector<std::pair<std::vector<int>, std::vector<int>>>& pairs) {
        return error_rate(pairs);
      },
      py::arg("pairs"), "Token error rate (S+D+I over reference length)");

  m.def(
      "ctc_nll",
      [](const std::vector<std::vector<double>>& log_probs, const std::vector<int>& target) {
        return ctc_nll(matrix_from(log_probs), target).value();
      },
      py::arg("log_probs"), py::arg("target"),
      "CTC negative log-likelihood (+inf when the target cannot fit)");

  m.def(
      "ctc_brute_force",
      [](const std::vector<std::vector<double>>& log_probs, const std::vector<int>& target) {
        return ctc_brute_force(matrix_from(log_probs), target);
      },
      py::arg("log_probs"), py::arg("target"),
      "Exponential enumeration oracle for small CTC instances");

  m.def("ctc_collapse", &ctc_collapse, py::arg("alignment"), py::arg("blank"));

  m.def(
      "greedy_ctc_decode",
      [](const std::vector<std::vector<double>>& log_probs) {
        return greedy_ctc_decode(matrix_from(log_probs));
      },
      py::arg("log_probs"));

  m.def("train_base", &py_train_base, py::arg("config"), py::arg("out_dir"),
        "Train and save the base model; returns (path, checksum)");
  m.def("extend", &py_extend, py::arg("config"), py::arg("out_dir"),
        "Sequentially extend every new language; saves bundles and the grown model");
  m.def("evaluate", &py_evaluate, py::arg("config"), py::arg("out_dir"),
        "Evaluate the extended system; returns the report as a dict");
  m.def("fit_lid", &py_fit_lid, py::arg("config"), py::arg("out_dir"));
  m.def("run_baseline", &py_run_baseline, py::arg("config"), py::arg("out_dir"),
        py::arg("method") = std::string(),
        "Run a baseline protocol; returns the report as a dict");
}

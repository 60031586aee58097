#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "pele/harness.hpp"
#include "pele/io.hpp"

namespace fs = std::filesystem;
using namespace pele;

namespace {

struct GlobalArgs {
  std::string config_path;
  std::string out_dir = "out";
  std::string preset = "desk";
  std::uint64_t seed = 0;
  bool seed_given = false;
};

ExperimentConfig load_config(const GlobalArgs& g) {
  ExperimentConfig cfg;
  if (g.preset == "desk") {
    cfg = ExperimentConfig::desk();
  } else if (g.preset == "paper-shape") {
    cfg = ExperimentConfig::paper_shape();
  } else {
    throw ConfigError("unknown preset: " + g.preset);
  }
  if (!g.config_path.empty()) {
    std::ifstream in(g.config_path);
    if (!in) throw ConfigError("cannot open config: " + g.config_path);
    nlohmann::json j = nlohmann::json::parse(in, nullptr, true, true);
    cfg = ExperimentConfig::from_json(j);
  }
  if (g.seed_given) cfg.seed = g.seed;
  cfg.validate();
  return cfg;
}

// Sorted, timestamp-free artifact index so re-runs are reproducible.
void index_artifact(const std::string& out_dir, const std::string& name,
                    const std::string& kind, const std::string& path) {
  const fs::path index_path = fs::path(out_dir) / "index.json";
  nlohmann::json index;
  if (fs::exists(index_path)) {
    std::ifstream in(index_path);
    index = nlohmann::json::parse(in);
  } else {
    index["artifacts"] = nlohmann::json::array();
  }
  auto& arts = index["artifacts"];
  nlohmann::json updated = nlohmann::json::array();
  for (const auto& a : arts) {
    if (a.at("name") != name) updated.push_back(a);
  }
  updated.push_back({{"name", name}, {"kind", kind}, {"path", path}});
  std::sort(updated.begin(), updated.end(),
            [](const nlohmann::json& a, const nlohmann::json& b) {
              return a.at("name").get<std::string>() < b.at("name").get<std::string>();
            });
  index["artifacts"] = updated;
  std::ofstream out(index_path, std::ios::trunc);
  out << index.dump(2) << "\n";
}

std::string out_path(const GlobalArgs& g, const std::string& name) {
  fs::create_directories(g.out_dir);
  return (fs::path(g.out_dir) / name).string();
}

void write_reports(const GlobalArgs& g, const ExperimentReport& report,
                   const std::string& stem) {
  emit_report(report, ReportFormat::Json, out_path(g, stem + ".json"));
  emit_report(report, ReportFormat::Csv, out_path(g, stem + ".csv"));
  emit_report(report, ReportFormat::TextTable, out_path(g, stem + ".txt"));
  index_artifact(g.out_dir, stem, "report", stem + ".json");
  std::ifstream table(out_path(g, stem + ".txt"));
  std::cout << table.rdbuf();
  std::cerr << "[pele] wall time: " << report.wall_time_sec << " s\n";
}

std::vector<LidTrainingSet> lid_sets(const World& world) {
  std::vector<LidTrainingSet> sets;
  for (std::size_t i = 0; i < world.base_specs.size(); ++i) {
    sets.push_back({world.base_specs[i].id, true, &world.base_data[i].train,
                    &world.base_data[i].test});
  }
  for (std::size_t i = 0; i < world.new_specs.size(); ++i) {
    sets.push_back({world.new_specs[i].id, false, &world.new_data[i].train,
                    &world.new_data[i].test});
  }
  return sets;
}

int cmd_train_base(const GlobalArgs& g, bool cache_data) {
  auto cfg = load_config(g);
  auto world = build_world(cfg);
  std::cerr << "[pele] training base model: " << cfg.train.base_steps << " steps\n";
  auto base = train_base(world, cfg);
  const std::string path = out_path(g, "base.model");
  base.save(path);
  index_artifact(g.out_dir, "base.model", "base-model", "base.model");
  std::cout << "base model saved: " << path << "\n";
  std::cout << "checksum: " << checksum_hex(base.checksum()) << "\n";
  if (cache_data) {
    for (std::size_t i = 0; i < world.base_specs.size(); ++i) {
      const auto prefix = out_path(g, "data_" + world.base_specs[i].id);
      save_dataset(prefix, world.base_data[i].train);
      index_artifact(g.out_dir, "data_" + world.base_specs[i].id, "dataset",
                     "data_" + world.base_specs[i].id + ".jsonl");
    }
  }
  return 0;
}

int cmd_lid_fit(const GlobalArgs& g, const std::string& base_path) {
  auto cfg = load_config(g);
  auto world = build_world(cfg);
  auto base = BaseModel::load(base_path.empty() ? out_path(g, "base.model") : base_path);
  auto lid = fit_lid(base, lid_sets(world), cfg.lid, cfg.seed);
  const std::string path = out_path(g, "lid.model");
  lid.save(path);
  index_artifact(g.out_dir, "lid.model", "lid-model", "lid.model");
  std::cout << "lid model saved: " << path << " (method " << lid.method << ", layer "
            << lid.source_layer << ")\n";
  return 0;
}

int cmd_lid_sweep(const GlobalArgs& g, const std::string& base_path) {
  auto cfg = load_config(g);
  auto world = build_world(cfg);
  auto base = BaseModel::load(base_path.empty() ? out_path(g, "base.model") : base_path);
  std::vector<int> layers;
  for (int l = 1; l <= cfg.model.n_enc_layers; ++l) layers.push_back(l);
  auto rows =
      lid_layer_sweep(base, lid_sets(world), layers, {"gda", "mlp"}, cfg.lid, cfg.seed);
  const std::string path = out_path(g, "lid_sweep.json");
  std::ofstream out(path, std::ios::trunc);
  out << lid_sweep_to_json(rows).dump(2) << "\n";
  index_artifact(g.out_dir, "lid_sweep", "lid-sweep", "lid_sweep.json");
  std::cout << "layer | method | seen_acc | unseen_acc\n";
  for (const auto& r : rows) {
    std::printf("%5d | %6s | %8.3f | %10.3f\n", r.layer, r.method.c_str(), r.seen_accuracy,
                r.unseen_accuracy);
  }
  return 0;
}

int cmd_extend(const GlobalArgs& g, const std::string& base_path) {
  auto cfg = load_config(g);
  auto world = build_world(cfg);
  auto base = BaseModel::load(base_path.empty() ? out_path(g, "base.model") : base_path);
  base.set_frozen(true);
  auto bundles = extend_all(world, base, cfg);
  for (const auto& b : bundles) {
    const std::string name = b.language + ".peleb";
    b.save(out_path(g, name));
    index_artifact(g.out_dir, name, "language-bundle", name);
    std::cout << "bundle " << b.language << ": " << b.param_count()
              << " params, final loss " << b.meta.final_loss << "\n";
  }
  base.save(out_path(g, "base_extended.model"));
  index_artifact(g.out_dir, "base_extended.model", "base-model", "base_extended.model");
  return 0;
}

int cmd_eval(const GlobalArgs& g, const std::string& base_path,
             const std::string& extended_path, const std::string& lid_path,
             const std::string& stem) {
  auto cfg = load_config(g);
  auto world = build_world(cfg);
  auto original = BaseModel::load(base_path.empty() ? out_path(g, "base.model") : base_path);
  auto extended = BaseModel::load(
      extended_path.empty() ? out_path(g, "base_extended.model") : extended_path);
  extended.set_frozen(true);

  std::vector<LanguageBundle> bundles;
  for (const auto& spec : world.new_specs) {
    bundles.push_back(LanguageBundle::load(out_path(g, spec.id + ".peleb"), extended));
  }
  std::vector<const LanguageBundle*> refs;
  for (const auto& b : bundles) refs.push_back(&b);

  LidModel lid;
  const LidModel* lid_ptr = nullptr;
  if (cfg.alpha_source == AlphaSourceKind::LpPosterior ||
      cfg.alpha_source == AlphaSourceKind::LpOneHot) {
    lid = LidModel::load(lid_path.empty() ? out_path(g, "lid.model") : lid_path);
    lid_ptr = &lid;
  }

  auto report = evaluate_extended_system(world, original, extended, refs, lid_ptr, cfg);
  write_reports(g, report, stem);
  return 0;
}

int cmd_baseline(const GlobalArgs& g, const std::string& method,
                 const std::string& base_path, const std::string& stem) {
  auto cfg = load_config(g);
  if (!method.empty()) cfg.baseline = baseline_from_string(method);
  auto world = build_world(cfg);
  auto base = BaseModel::load(base_path.empty() ? out_path(g, "base.model") : base_path);
  auto report = run_baseline(world, base, cfg);
  write_reports(g, report,
                stem.empty() ? "baseline_" + std::string(to_string(cfg.baseline)) : stem);
  return 0;
}

int cmd_xla_sweep(const GlobalArgs& g, const std::string& base_path) {
  auto cfg = load_config(g);
  auto world = build_world(cfg);
  auto base = BaseModel::load(base_path.empty() ? out_path(g, "base.model") : base_path);
  base.set_frozen(true);
  const std::vector<PeftKind> kinds = {PeftKind::BitFit,       PeftKind::LoRA,
                                       PeftKind::LoRAStar,     PeftKind::Mask,
                                       PeftKind::MaskLoRAStar, PeftKind::Adapter,
                                       PeftKind::Prompt};
  auto rows = xla_sweep(world, base, cfg, kinds);
  const std::string path = out_path(g, "xla_sweep.json");
  std::ofstream out(path, std::ios::trunc);
  out << xla_sweep_to_json(rows).dump(2) << "\n";
  index_artifact(g.out_dir, "xla_sweep", "xla-sweep", "xla_sweep.json");
  std::cout << "kind | vocab | error | params\n";
  for (const auto& r : rows) {
    std::printf("%14s | %5s | %6.3f | %zu\n", r.kind.c_str(), r.vocab_full ? "full" : "lora",
                r.error, r.params);
  }
  return 0;
}

int cmd_report(const GlobalArgs& g, const std::string& in_path, const std::string& format,
               const std::string& out_file) {
  ExperimentReport report;
  if (in_path.size() > 4 && in_path.substr(in_path.size() - 4) == ".csv") {
    report = report_from_csv(in_path);
  } else {
    std::ifstream in(in_path);
    if (!in) throw IoError("cannot read report: " + in_path);
    report = ExperimentReport::from_json(nlohmann::json::parse(in));
  }
  const auto fmt = report_format_from_string(format);
  std::string suffix = fmt == ReportFormat::Json ? "json"
                       : fmt == ReportFormat::Csv ? "csv"
                                                  : "txt";
  const std::string path =
      out_file.empty() ? out_path(g, "report_converted." + suffix) : out_file;
  emit_report(report, fmt, path);
  std::cout << "report written: " << path << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Parameter-efficient language extension for a frozen multilingual recognizer"};
  app.require_subcommand(1);

  GlobalArgs g;
  app.add_option("--config", g.config_path, "JSON experiment config");
  app.add_option("--out", g.out_dir, "artifact directory")->capture_default_str();
  app.add_option("--preset", g.preset, "desk | paper-shape")->capture_default_str();
  auto* seed_opt = app.add_option("--seed", g.seed, "run seed");

  bool cache_data = false;
  auto* train_cmd = app.add_subcommand("train-base", "train and save the base model");
  train_cmd->add_flag("--cache-data", cache_data, "write dataset cache files");

  std::string base_path, extended_path, lid_path;
  auto* lid_cmd = app.add_subcommand("lid", "language-identity prediction");
  auto* lid_fit = lid_cmd->add_subcommand("fit", "fit and save the LID model");
  lid_fit->add_option("--base", base_path, "base model path");
  auto* lid_sweep = lid_cmd->add_subcommand("sweep", "per-layer accuracy sweep");
  lid_sweep->add_option("--base", base_path, "base model path");
  lid_cmd->require_subcommand(1);

  auto* extend_cmd = app.add_subcommand("extend", "sequentially extend all new languages");
  extend_cmd->add_option("--base", base_path, "base model path");

  std::string eval_stem = "report";
  auto* eval_cmd = app.add_subcommand("eval", "evaluate the extended system");
  eval_cmd->add_option("--base", base_path, "original base model path");
  eval_cmd->add_option("--extended", extended_path, "extended base model path");
  eval_cmd->add_option("--lid", lid_path, "LID model path");
  eval_cmd->add_option("--stem", eval_stem, "report file stem")->capture_default_str();

  std::string method, baseline_stem;
  auto* baseline_cmd = app.add_subcommand("baseline", "run a baseline protocol");
  baseline_cmd->add_option("--method", method, "mono|raw|full_ft|cjt|er");
  baseline_cmd->add_option("--base", base_path, "base model path");
  baseline_cmd->add_option("--stem", baseline_stem, "report file stem");

  auto* xla_cmd = app.add_subcommand("xla-sweep", "per-kind adaptation sweep");
  xla_cmd->add_option("--base", base_path, "base model path");

  std::string report_in, report_format = "text-table", report_out;
  auto* report_cmd = app.add_subcommand("report", "convert a stored report");
  report_cmd->add_option("--in", report_in, "input report (.json or .csv)")->required();
  report_cmd->add_option("--format", report_format, "json|csv|text-table")
      ->capture_default_str();
  report_cmd->add_option("--out-file", report_out, "output path");

  CLI11_PARSE(app, argc, argv);
  g.seed_given = seed_opt->count() > 0;

  try {
    if (*train_cmd) return cmd_train_base(g, cache_data);
    if (*lid_fit) return cmd_lid_fit(g, base_path);
    if (*lid_sweep) return cmd_lid_sweep(g, base_path);
    if (*extend_cmd) return cmd_extend(g, base_path);
    if (*eval_cmd) return cmd_eval(g, base_path, extended_path, lid_path, eval_stem);
    if (*baseline_cmd) return cmd_baseline(g, method, base_path, baseline_stem);
    if (*xla_cmd) return cmd_xla_sweep(g, base_path);
    if (*report_cmd) return cmd_report(g, report_in, report_format, report_out);
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 3;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return 2;
  } catch (const ShapeError& e) {
    std::cerr << "shape error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}

#pragma once

#include <functional>
#include <string>
#include <vector>

#include "pele/extension.hpp"
#include "pele/lid.hpp"
#include "pele/metrics.hpp"
#include "pele/model.hpp"
#include "pele/optim.hpp"
#include "pele/synth.hpp"

namespace pele {

struct DataConfig {
  SynthConfig synth;
  int n_base_langs = 10;
  int base_train = 300;
  int base_dev = 20;
  int base_test = 30;
  // Echoes the published spread of low-resource sizes.
  std::vector<int> new_train_sizes = {300, 150, 100, 60, 30};
  int new_dev = 20;
  int new_test = 30;
  std::uint64_t data_seed = 2024;

  void validate() const;
  nlohmann::json to_json() const;
  static DataConfig from_json(const nlohmann::json& j);
};

struct TrainBudget {
  int base_steps = 1200;
  int extend_steps = 2000;
  int ft_steps = 300;   // FullFT / CJT / ER / Mono budgets
  int batch_size = 8;
  double lr = 1e-3;
  int warmup_steps = 200;

  AdamConfig adam() const;
  void validate() const;
  nlohmann::json to_json() const;
  static TrainBudget from_json(const nlohmann::json& j);
};

enum class BaselineMethod { Mono, Raw, FullFT, CJT, ER };
const char* to_string(BaselineMethod m);
BaselineMethod baseline_from_string(const std::string& s);

struct ExperimentConfig {
  ModelConfig model;
  DataConfig data;
  TrainBudget train;
  LidConfig lid;
  PeftConfig peft;
  AlphaSourceKind alpha_source = AlphaSourceKind::GtOneHot;
  BaselineMethod baseline = BaselineMethod::Raw;
  int er_cache_per_lang = 10;
  int mono_d_model = 32;
  int n_new_langs = 5;
  std::uint64_t seed = 0;

  static ExperimentConfig desk();
  static ExperimentConfig paper_shape();  // reference preset, not desk-runnable
  // Derives vocab_size/max_vocab from the language layout.
  void normalize_vocab();
  void validate() const;
  nlohmann::json to_json() const;
  static ExperimentConfig from_json(const nlohmann::json& j);
};

// The deterministic synthetic universe an experiment runs in: registry,
// language specs and datasets, derived entirely from (config, data_seed).
struct World {
  VocabRegistry registry{256};
  std::vector<LanguageSpec> base_specs;
  std::vector<LanguageSpec> new_specs;
  std::vector<Dataset> base_data;
  std::vector<Dataset> new_data;

  int base_vocab_size() const;
};

World build_world(const ExperimentConfig& cfg);

BaseModel train_base(const World& world, const ExperimentConfig& cfg);

struct LanguageResult {
  std::string lang;
  bool base_language = false;
  double error = 0.0;
  double forgetting_delta = 0.0;  // base languages only; post minus pre
  std::size_t inc_params = 0;     // new languages only
};

struct ExperimentReport {
  std::string method;
  std::vector<LanguageResult> per_language;
  double base_avg = 0.0;
  double overall_avg = 0.0;
  nlohmann::json config_echo;
  std::uint64_t seed = 0;
  // Console/log only; report files exclude it so re-runs are byte-identical.
  double wall_time_sec = 0.0;

  void recompute_averages();
  nlohmann::json to_json() const;
  static ExperimentReport from_json(const nlohmann::json& j);
};

enum class ReportFormat { Json, Csv, TextTable };
ReportFormat report_format_from_string(const std::string& s);

void emit_report(const ExperimentReport& report, ReportFormat format,
                 const std::string& path);
ExperimentReport report_from_csv(const std::string& path);

// Error rate of plain greedy CTC decoding on a test set.
double eval_model(const BaseModel& m, const std::vector<Utterance>& test);

// Error rate of routed, adapted decoding.
double eval_extended(const BaseModel& base,
                     const std::vector<const LanguageBundle*>& bundles,
                     AlphaSourceKind source, const LidModel* lid,
                     const std::vector<Utterance>& test,
                     std::optional<std::size_t> true_slot);

ExperimentReport run_baseline(const World& world, const BaseModel& base,
                              const ExperimentConfig& cfg);

struct PeleRunResult {
  ExperimentReport report;
  std::vector<LanguageBundle> bundles;
};

// Sequential extension over every new language (vocabulary growth plus
// bundle training), without evaluation.
std::vector<LanguageBundle> extend_all(const World& world, BaseModel& base,
                                       const ExperimentConfig& cfg);

// Sequential extension of every new language followed by full evaluation.
// Mutates `base` only by growing its embedding (appended rows); all other
// parameters stay frozen and bit-identical.
PeleRunResult run_pele(const World& world, BaseModel& base, const LidModel* lid,
                       const ExperimentConfig& cfg);

// Evaluates a saved extended system: pre-extension errors come from the
// original base checkpoint, post-extension errors from routed decoding.
ExperimentReport evaluate_extended_system(const World& world, const BaseModel& original,
                                          const BaseModel& extended,
                                          const std::vector<const LanguageBundle*>& bundles,
                                          const LidModel* lid, const ExperimentConfig& cfg);

struct XlaSweepRow {
  std::string kind;
  bool vocab_full = false;
  double error = 0.0;
  std::size_t params = 0;
};

// Trains every PEFT kind on the first new language under an equal budget,
// once with the low-rank vocabulary update and once with the dense one.
std::vector<XlaSweepRow> xla_sweep(const World& world, const BaseModel& base,
                                   const ExperimentConfig& cfg,
                                   const std::vector<PeftKind>& kinds);

nlohmann::json xla_sweep_to_json(const std::vector<XlaSweepRow>& rows);
nlohmann::json lid_sweep_to_json(const std::vector<LidSweepRow>& rows);

}  // namespace pele

#include "pele/harness.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <fstream>
#include <sstream>

#include "pele/ctc.hpp"
#include "pele/io.hpp"

namespace pele {

namespace {

std::string lang_id(bool base, int i) {
  return (base ? "base" : "new") + std::to_string(i);
}

double now_sec() {
  return std::chrono::duration<double>(
             std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  (void)ec;
  return std::string(buf, ptr);
}

}  // namespace

void DataConfig::validate() const {
  synth.validate();
  if (n_base_langs < 2) throw ConfigError("need at least two base languages");
  if (base_train < 1 || base_dev < 1 || base_test < 1) throw ConfigError("bad base split sizes");
  if (new_train_sizes.empty()) throw ConfigError("new_train_sizes must not be empty");
  for (int n : new_train_sizes) {
    if (n < 1) throw ConfigError("new language train sizes must be >= 1");
  }
  if (new_dev < 1 || new_test < 1) throw ConfigError("bad new split sizes");
}

nlohmann::json DataConfig::to_json() const {
  return nlohmann::json{{"synth", synth.to_json()},
                        {"n_base_langs", n_base_langs},
                        {"base_train", base_train},
                        {"base_dev", base_dev},
                        {"base_test", base_test},
                        {"new_train_sizes", new_train_sizes},
                        {"new_dev", new_dev},
                        {"new_test", new_test},
                        {"data_seed", data_seed}};
}

DataConfig DataConfig::from_json(const nlohmann::json& j) {
  DataConfig c;
  if (j.contains("synth")) c.synth = SynthConfig::from_json(j.at("synth"));
  c.n_base_langs = j.value("n_base_langs", c.n_base_langs);
  c.base_train = j.value("base_train", c.base_train);
  c.base_dev = j.value("base_dev", c.base_dev);
  c.base_test = j.value("base_test", c.base_test);
  c.new_train_sizes = j.value("new_train_sizes", c.new_train_sizes);
  c.new_dev = j.value("new_dev", c.new_dev);
  c.new_test = j.value("new_test", c.new_test);
  c.data_seed = j.value("data_seed", c.data_seed);
  c.validate();
  return c;
}

AdamConfig TrainBudget::adam() const {
  AdamConfig a;
  a.lr = lr;
  a.warmup_steps = warmup_steps;
  return a;
}

void TrainBudget::validate() const {
  if (base_steps < 1 || extend_steps < 1 || ft_steps < 1) throw ConfigError("bad step budgets");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (lr <= 0.0) throw ConfigError("lr must be positive");
  if (warmup_steps < 1) throw ConfigError("warmup_steps must be >= 1");
}

nlohmann::json TrainBudget::to_json() const {
  return nlohmann::json{{"base_steps", base_steps}, {"extend_steps", extend_steps},
                        {"ft_steps", ft_steps},     {"batch_size", batch_size},
                        {"lr", lr},                 {"warmup_steps", warmup_steps}};
}

TrainBudget TrainBudget::from_json(const nlohmann::json& j) {
  TrainBudget b;
  b.base_steps = j.value("base_steps", b.base_steps);
  b.extend_steps = j.value("extend_steps", b.extend_steps);
  b.ft_steps = j.value("ft_steps", b.ft_steps);
  b.batch_size = j.value("batch_size", b.batch_size);
  b.lr = j.value("lr", b.lr);
  b.warmup_steps = j.value("warmup_steps", b.warmup_steps);
  b.validate();
  return b;
}

const char* to_string(BaselineMethod m) {
  switch (m) {
    case BaselineMethod::Mono: return "mono";
    case BaselineMethod::Raw: return "raw";
    case BaselineMethod::FullFT: return "full_ft";
    case BaselineMethod::CJT: return "cjt";
    case BaselineMethod::ER: return "er";
  }
  return "?";
}

BaselineMethod baseline_from_string(const std::string& s) {
  for (BaselineMethod m : {BaselineMethod::Mono, BaselineMethod::Raw, BaselineMethod::FullFT,
                           BaselineMethod::CJT, BaselineMethod::ER}) {
    if (s == to_string(m)) return m;
  }
  throw ConfigError("unknown baseline method: " + s);
}

ExperimentConfig ExperimentConfig::desk() {
  ExperimentConfig c;
  c.normalize_vocab();
  return c;
}

ExperimentConfig ExperimentConfig::paper_shape() {
  ExperimentConfig c;
  c.model = ModelConfig::paper_shape();
  c.data.synth.d_feat = c.model.d_feat;
  c.peft = PeftConfig::paper_scale(c.peft.kind);
  c.train.extend_steps = 100000;
  c.train.base_steps = 200000;
  c.train.warmup_steps = 2000;
  return c;
}

void ExperimentConfig::validate() const {
  model.validate();
  data.validate();
  train.validate();
  lid.validate();
  peft.validate();
  if (n_new_langs < 1) throw ConfigError("n_new_langs must be >= 1");
  if (er_cache_per_lang < 1) throw ConfigError("er_cache_per_lang must be >= 1");
  if (mono_d_model < 8 || mono_d_model % 4 != 0) throw ConfigError("bad mono_d_model");
  if (model.d_feat != data.synth.d_feat) {
    throw ConfigError("model.d_feat must match synth.d_feat");
  }
  const int base_vocab = kNumReservedTokens + data.n_base_langs * data.synth.tokens_per_lang;
  if (model.vocab_size != base_vocab) {
    throw ConfigError("model.vocab_size must equal reserved + base language tokens (" +
                      std::to_string(base_vocab) + ")");
  }
  if (model.max_vocab < base_vocab + n_new_langs * data.synth.tokens_per_lang) {
    throw ConfigError("max_vocab too small for the configured extensions");
  }
}

void ExperimentConfig::normalize_vocab() {
  model.vocab_size = kNumReservedTokens + data.n_base_langs * data.synth.tokens_per_lang;
  const int needed = model.vocab_size + n_new_langs * data.synth.tokens_per_lang;
  if (model.max_vocab < needed) model.max_vocab = needed;
}

nlohmann::json ExperimentConfig::to_json() const {
  return nlohmann::json{{"model", model.to_json()},
                        {"data", data.to_json()},
                        {"train", train.to_json()},
                        {"lid", lid.to_json()},
                        {"peft", peft.to_json()},
                        {"alpha_source", to_string(alpha_source)},
                        {"baseline", to_string(baseline)},
                        {"er_cache_per_lang", er_cache_per_lang},
                        {"mono_d_model", mono_d_model},
                        {"n_new_langs", n_new_langs},
                        {"seed", seed}};
}

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j) {
  ExperimentConfig c;
  if (j.contains("model")) c.model = ModelConfig::from_json(j.at("model"));
  if (j.contains("data")) c.data = DataConfig::from_json(j.at("data"));
  if (j.contains("train")) c.train = TrainBudget::from_json(j.at("train"));
  if (j.contains("lid")) c.lid = LidConfig::from_json(j.at("lid"));
  if (j.contains("peft")) c.peft = PeftConfig::from_json(j.at("peft"));
  if (j.contains("alpha_source")) {
    c.alpha_source = alpha_source_from_string(j.at("alpha_source").get<std::string>());
  }
  if (j.contains("baseline")) {
    c.baseline = baseline_from_string(j.at("baseline").get<std::string>());
  }
  c.er_cache_per_lang = j.value("er_cache_per_lang", c.er_cache_per_lang);
  c.mono_d_model = j.value("mono_d_model", c.mono_d_model);
  c.n_new_langs = j.value("n_new_langs", c.n_new_langs);
  c.seed = j.value("seed", c.seed);
  if (!j.contains("model")) c.normalize_vocab();
  c.validate();
  return c;
}

int World::base_vocab_size() const {
  return base_specs.empty() ? kNumReservedTokens : base_specs.back().hi;
}

World build_world(const ExperimentConfig& cfg) {
  cfg.validate();
  World w;
  w.registry = VocabRegistry(cfg.model.max_vocab);
  Rng root(cfg.data.data_seed);
  for (int i = 0; i < cfg.data.n_base_langs; ++i) {
    Rng srng = root.fork(100 + static_cast<std::uint64_t>(i));
    w.base_specs.push_back(gen_language_spec(lang_id(true, i), w.registry, cfg.data.synth, srng));
    Rng drng = root.fork(200 + static_cast<std::uint64_t>(i));
    w.base_data.push_back(make_splits(w.base_specs.back(), cfg.data.base_train,
                                      cfg.data.base_dev, cfg.data.base_test, cfg.data.synth,
                                      drng));
  }
  for (int i = 0; i < cfg.n_new_langs; ++i) {
    Rng srng = root.fork(300 + static_cast<std::uint64_t>(i));
    w.new_specs.push_back(gen_language_spec(lang_id(false, i), w.registry, cfg.data.synth, srng));
    Rng drng = root.fork(400 + static_cast<std::uint64_t>(i));
    const int train_n =
        cfg.data.new_train_sizes[static_cast<std::size_t>(i) % cfg.data.new_train_sizes.size()];
    w.new_data.push_back(make_splits(w.new_specs.back(), train_n, cfg.data.new_dev,
                                     cfg.data.new_test, cfg.data.synth, drng));
  }
  return w;
}

namespace {

// One optimization pass over a pooled utterance list.
void train_on_pool(BaseModel& m, const std::vector<Tensor>& trainable,
                   const std::vector<const Utterance*>& pool, int steps, int batch_size,
                   const AdamConfig& adam, Rng& rng) {
  if (pool.empty()) throw ConfigError("training pool is empty");
  Optimizer opt(adam);
  for (int step = 0; step < steps; ++step) {
    std::vector<const Utterance*> batch;
    for (int b = 0; b < batch_size; ++b) {
      batch.push_back(pool[rng.uniform_int(pool.size())]);
    }
    train_step(
        trainable,
        [&] {
          Tensor acc = Tensor::scalar(0.0);
          for (const auto* u : batch) {
            acc = add(acc, utterance_loss(m, u->features, u->tokens).total);
          }
          return scale(acc, 1.0 / static_cast<double>(batch.size()));
        },
        opt);
  }
}

std::vector<const Utterance*> pool_of(const std::vector<const std::vector<Utterance>*>& parts) {
  std::vector<const Utterance*> pool;
  for (const auto* p : parts) {
    for (const auto& u : *p) pool.push_back(&u);
  }
  return pool;
}

std::size_t model_param_count(const BaseModel& m) {
  std::size_t n = 0;
  for (const auto& t : m.parameters()) n += t.size();
  return n;
}

}  // namespace

BaseModel train_base(const World& world, const ExperimentConfig& cfg) {
  Rng mrng(cfg.seed);
  ModelConfig mc = cfg.model;
  BaseModel m = BaseModel::init(mc, mrng);
  std::vector<const std::vector<Utterance>*> parts;
  for (const auto& d : world.base_data) parts.push_back(&d.train);
  auto pool = pool_of(parts);
  Rng brng = Rng(cfg.seed).fork(0xBA5E);
  train_on_pool(m, m.parameters(), pool, cfg.train.base_steps, cfg.train.batch_size,
                cfg.train.adam(), brng);
  return m;
}

void ExperimentReport::recompute_averages() {
  double base_sum = 0.0, all_sum = 0.0;
  std::size_t base_n = 0;
  for (const auto& r : per_language) {
    all_sum += r.error;
    if (r.base_language) {
      base_sum += r.error;
      ++base_n;
    }
  }
  base_avg = base_n ? base_sum / static_cast<double>(base_n) : 0.0;
  overall_avg =
      per_language.empty() ? 0.0 : all_sum / static_cast<double>(per_language.size());
}

nlohmann::json ExperimentReport::to_json() const {
  nlohmann::json langs = nlohmann::json::array();
  for (const auto& r : per_language) {
    langs.push_back({{"lang", r.lang},
                     {"base_language", r.base_language},
                     {"error", r.error},
                     {"forgetting_delta", r.forgetting_delta},
                     {"inc_params", r.inc_params}});
  }
  return nlohmann::json{{"method", method},
                        {"seed", seed},
                        {"base_avg", base_avg},
                        {"overall_avg", overall_avg},
                        {"per_language", langs},
                        {"config", config_echo}};
}

ExperimentReport ExperimentReport::from_json(const nlohmann::json& j) {
  ExperimentReport r;
  r.method = j.at("method").get<std::string>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.base_avg = j.at("base_avg").get<double>();
  r.overall_avg = j.at("overall_avg").get<double>();
  for (const auto& l : j.at("per_language")) {
    LanguageResult lr;
    lr.lang = l.at("lang").get<std::string>();
    lr.base_language = l.at("base_language").get<bool>();
    lr.error = l.at("error").get<double>();
    lr.forgetting_delta = l.at("forgetting_delta").get<double>();
    lr.inc_params = l.at("inc_params").get<std::size_t>();
    r.per_language.push_back(lr);
  }
  r.config_echo = j.value("config", nlohmann::json::object());
  return r;
}

ReportFormat report_format_from_string(const std::string& s) {
  if (s == "json") return ReportFormat::Json;
  if (s == "csv") return ReportFormat::Csv;
  if (s == "text-table" || s == "table") return ReportFormat::TextTable;
  throw ConfigError("unknown report format: " + s);
}

void emit_report(const ExperimentReport& report, ReportFormat format,
                 const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write report: " + path);
  switch (format) {
    case ReportFormat::Json:
      out << report.to_json().dump(2) << "\n";
      break;
    case ReportFormat::Csv: {
      out << "key,value\n";
      out << "method," << report.method << "\n";
      out << "seed," << report.seed << "\n";
      out << "base_avg," << format_double(report.base_avg) << "\n";
      out << "overall_avg," << format_double(report.overall_avg) << "\n";
      out << "lang,base_language,error,forgetting_delta,inc_params\n";
      for (const auto& r : report.per_language) {
        out << r.lang << "," << (r.base_language ? 1 : 0) << "," << format_double(r.error)
            << "," << format_double(r.forgetting_delta) << "," << r.inc_params << "\n";
      }
      break;
    }
    case ReportFormat::TextTable: {
      // Columns follow the method / params / base average / per-language /
      // overall order.
      out << "method | inc.params | base_avg";
      for (const auto& r : report.per_language) {
        if (!r.base_language) out << " | " << r.lang;
      }
      out << " | avg\n";
      std::size_t inc_total = 0;
      std::size_t inc_n = 0;
      for (const auto& r : report.per_language) {
        if (!r.base_language && r.inc_params > 0) {
          inc_total += r.inc_params;
          ++inc_n;
        }
      }
      char buf[64];
      auto pct = [&](double v) {
        std::snprintf(buf, sizeof(buf), "%.1f", 100.0 * v);
        return std::string(buf);
      };
      out << report.method << " | " << (inc_n ? std::to_string(inc_total / inc_n) : "-")
          << " | " << pct(report.base_avg);
      for (const auto& r : report.per_language) {
        if (!r.base_language) out << " | " << pct(r.error);
      }
      out << " | " << pct(report.overall_avg) << "\n";
      break;
    }
  }
  if (!out) throw IoError("report write failed: " + path);
}

ExperimentReport report_from_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read report: " + path);
  ExperimentReport r;
  std::string line;
  bool in_langs = false;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (!in_langs) {
      if (cells[0] == "key") continue;
      if (cells[0] == "method") {
        r.method = cells.at(1);
      } else if (cells[0] == "seed") {
        r.seed = std::stoull(cells.at(1));
      } else if (cells[0] == "base_avg") {
        r.base_avg = std::stod(cells.at(1));
      } else if (cells[0] == "overall_avg") {
        r.overall_avg = std::stod(cells.at(1));
      } else if (cells[0] == "lang") {
        in_langs = true;
      }
      continue;
    }
    LanguageResult lr;
    lr.lang = cells.at(0);
    lr.base_language = cells.at(1) == "1";
    lr.error = std::stod(cells.at(2));
    lr.forgetting_delta = std::stod(cells.at(3));
    lr.inc_params = std::stoull(cells.at(4));
    r.per_language.push_back(lr);
  }
  return r;
}

double eval_model(const BaseModel& m, const std::vector<Utterance>& test) {
  std::vector<std::pair<std::vector<int>, std::vector<int>>> pairs;
  for (const auto& u : test) {
    auto lp = ctc_log_probs(m, encode(m, u.features));
    pairs.emplace_back(u.tokens, greedy_ctc_decode(lp));
  }
  return error_rate(pairs);
}

double eval_extended(const BaseModel& base,
                     const std::vector<const LanguageBundle*>& bundles,
                     AlphaSourceKind source, const LidModel* lid,
                     const std::vector<Utterance>& test,
                     std::optional<std::size_t> true_slot) {
  std::vector<std::pair<std::vector<int>, std::vector<int>>> pairs;
  for (const auto& u : test) {
    auto decode = forward_extended(base, bundles, source, lid, u.features, true_slot);
    pairs.emplace_back(u.tokens, decode.tokens);
  }
  return error_rate(pairs);
}

namespace {

std::vector<double> base_language_errors(const BaseModel& m, const World& world) {
  std::vector<double> errs;
  for (const auto& d : world.base_data) errs.push_back(eval_model(m, d.test));
  return errs;
}

void expand_for_new_langs(BaseModel& m, const World& world, const ExperimentConfig& cfg,
                          int upto) {
  for (int i = 0; i < upto; ++i) {
    const auto* entry = world.registry.find(world.new_specs[static_cast<std::size_t>(i)].id);
    if (entry == nullptr) throw ConfigError("language missing from registry");
    Rng vrng = Rng(cfg.data.data_seed).fork(0xE0 + static_cast<std::uint64_t>(i));
    expand_vocab(m, *entry, vrng);
  }
}

}  // namespace

ExperimentReport run_baseline(const World& world, const BaseModel& base,
                              const ExperimentConfig& cfg) {
  const double t0 = now_sec();
  ExperimentReport report;
  report.method = to_string(cfg.baseline);
  report.seed = cfg.seed;
  report.config_echo = cfg.to_json();

  const auto pre_base_errs = base_language_errors(base, world);

  auto add_result = [&](const std::string& lang, bool is_base, double err, double delta,
                        std::size_t inc) {
    report.per_language.push_back({lang, is_base, err, delta, inc});
  };

  switch (cfg.baseline) {
    case BaselineMethod::Raw: {
      for (std::size_t i = 0; i < world.base_data.size(); ++i) {
        add_result(world.base_specs[i].id, true, pre_base_errs[i], 0.0, 0);
      }
      for (std::size_t i = 0; i < world.new_data.size(); ++i) {
        add_result(world.new_specs[i].id, false, eval_model(base, world.new_data[i].test), 0.0,
                   0);
      }
      break;
    }
    case BaselineMethod::Mono: {
      ModelConfig mono_cfg = cfg.model;
      mono_cfg.d_model = cfg.mono_d_model;
      mono_cfg.d_ff = cfg.mono_d_model * 2;
      mono_cfg.max_vocab = cfg.model.max_vocab;
      mono_cfg.vocab_size = cfg.model.max_vocab;  // covers every language's tokens
      auto run_mono = [&](const LanguageSpec& spec, const Dataset& data, bool is_base) {
        Rng mrng = Rng(cfg.seed).fork(std::hash<std::string>{}(spec.id));
        BaseModel mono = BaseModel::init(mono_cfg, mrng);
        std::vector<const std::vector<Utterance>*> parts{&data.train};
        auto pool = pool_of(parts);
        Rng brng = mrng.fork(1);
        train_on_pool(mono, mono.parameters(), pool, cfg.train.ft_steps,
                      cfg.train.batch_size, cfg.train.adam(), brng);
        add_result(spec.id, is_base, eval_model(mono, data.test), 0.0,
                   model_param_count(mono));
      };
      for (std::size_t i = 0; i < world.base_data.size(); ++i) {
        run_mono(world.base_specs[i], world.base_data[i], true);
      }
      for (std::size_t i = 0; i < world.new_data.size(); ++i) {
        run_mono(world.new_specs[i], world.new_data[i], false);
      }
      break;
    }
    case BaselineMethod::FullFT:
    case BaselineMethod::CJT: {
      BaseModel ft = base.clone();
      ft.set_frozen(false);
      expand_for_new_langs(ft, world, cfg, static_cast<int>(world.new_specs.size()));
      std::vector<const std::vector<Utterance>*> parts;
      for (const auto& d : world.new_data) parts.push_back(&d.train);
      if (cfg.baseline == BaselineMethod::CJT) {
        for (const auto& d : world.base_data) parts.push_back(&d.train);
      }
      auto pool = pool_of(parts);
      Rng brng = Rng(cfg.seed).fork(0xF7);
      train_on_pool(ft, ft.parameters(), pool, cfg.train.ft_steps, cfg.train.batch_size,
                    cfg.train.adam(), brng);
      const auto post_base = base_language_errors(ft, world);
      for (std::size_t i = 0; i < world.base_data.size(); ++i) {
        add_result(world.base_specs[i].id, true, post_base[i],
                   post_base[i] - pre_base_errs[i], 0);
      }
      const std::size_t inc =
          cfg.baseline == BaselineMethod::FullFT ? model_param_count(ft) : 0;
      for (std::size_t i = 0; i < world.new_data.size(); ++i) {
        add_result(world.new_specs[i].id, false, eval_model(ft, world.new_data[i].test), 0.0,
                   inc);
      }
      break;
    }
    case BaselineMethod::ER: {
      BaseModel ft = base.clone();
      ft.set_frozen(false);
      expand_for_new_langs(ft, world, cfg, static_cast<int>(world.new_specs.size()));
      // Fixed replay caches drawn once per historical language.
      auto cache_of = [&](const std::vector<Utterance>& train) {
        const std::size_t n =
            std::min<std::size_t>(train.size(), static_cast<std::size_t>(cfg.er_cache_per_lang));
        return std::vector<const Utterance*>(
            [&] {
              std::vector<const Utterance*> c;
              for (std::size_t i = 0; i < n; ++i) c.push_back(&train[i]);
              return c;
            }());
      };
      std::vector<std::vector<const Utterance*>> base_caches;
      for (const auto& d : world.base_data) base_caches.push_back(cache_of(d.train));
      std::vector<std::vector<const Utterance*>> new_caches;

      Rng brng = Rng(cfg.seed).fork(0xE5);
      for (std::size_t k = 0; k < world.new_data.size(); ++k) {
        std::vector<const Utterance*> pool;
        for (const auto& u : world.new_data[k].train) pool.push_back(&u);
        for (const auto& c : base_caches) pool.insert(pool.end(), c.begin(), c.end());
        for (const auto& c : new_caches) pool.insert(pool.end(), c.begin(), c.end());
        train_on_pool(ft, ft.parameters(), pool, cfg.train.ft_steps, cfg.train.batch_size,
                      cfg.train.adam(), brng);
        new_caches.push_back(cache_of(world.new_data[k].train));
      }
      const auto post_base = base_language_errors(ft, world);
      for (std::size_t i = 0; i < world.base_data.size(); ++i) {
        add_result(world.base_specs[i].id, true, post_base[i],
                   post_base[i] - pre_base_errs[i], 0);
      }
      for (std::size_t i = 0; i < world.new_data.size(); ++i) {
        add_result(world.new_specs[i].id, false, eval_model(ft, world.new_data[i].test), 0.0,
                   0);
      }
      break;
    }
  }

  report.recompute_averages();
  report.wall_time_sec = now_sec() - t0;
  return report;
}

std::vector<LanguageBundle> extend_all(const World& world, BaseModel& base,
                                       const ExperimentConfig& cfg) {
  if (!base.frozen) throw ConfigError("extend_all: base must be frozen");
  ExtendConfig ext;
  ext.peft = cfg.peft;
  ext.alpha_source = cfg.alpha_source == AlphaSourceKind::GtLearnable
                         ? AlphaSourceKind::GtLearnable
                         : AlphaSourceKind::GtOneHot;
  ext.steps = cfg.train.extend_steps;
  ext.batch_size = cfg.train.batch_size;
  ext.adam = cfg.train.adam();

  std::vector<LanguageBundle> bundles;
  for (std::size_t k = 0; k < world.new_specs.size(); ++k) {
    const auto& spec = world.new_specs[k];
    const auto* entry = world.registry.find(spec.id);
    if (entry == nullptr) throw ConfigError("language missing from registry: " + spec.id);
    Rng vrng = Rng(cfg.data.data_seed).fork(0xE0 + k);
    expand_vocab(base, *entry, vrng);

    std::vector<const LanguageBundle*> previous;
    for (const auto& b : bundles) previous.push_back(&b);
    ext.seed = Rng(cfg.seed).fork(0xEC + k).next_u64();
    bundles.push_back(
        extend_language(base, spec.id, world.new_data[k].train, *entry, previous, ext));
  }
  return bundles;
}

PeleRunResult run_pele(const World& world, BaseModel& base, const LidModel* lid,
                       const ExperimentConfig& cfg) {
  const double t0 = now_sec();
  if (!base.frozen) throw ConfigError("run_pele: base must be frozen");
  if ((cfg.alpha_source == AlphaSourceKind::LpPosterior ||
       cfg.alpha_source == AlphaSourceKind::LpOneHot) &&
      lid == nullptr) {
    throw ConfigError("run_pele: LP alpha sources need a LID model");
  }

  PeleRunResult result;
  result.report.method = std::string("pele(") + to_string(cfg.peft.kind) + "," +
                         to_string(cfg.alpha_source) + ")";
  result.report.seed = cfg.seed;
  result.report.config_echo = cfg.to_json();

  const auto pre_base_errs = base_language_errors(base, world);
  result.bundles = extend_all(world, base, cfg);

  std::vector<const LanguageBundle*> bundles;
  for (const auto& b : result.bundles) bundles.push_back(&b);

  // Base languages: the LID label of base languages is assumed known, so
  // they route to the dummy module exactly.
  for (std::size_t i = 0; i < world.base_data.size(); ++i) {
    const double err = eval_extended(base, bundles, AlphaSourceKind::GtOneHot, nullptr,
                                     world.base_data[i].test, 0);
    result.report.per_language.push_back(
        {world.base_specs[i].id, true, err, err - pre_base_errs[i], 0});
  }
  for (std::size_t k = 0; k < world.new_data.size(); ++k) {
    const double err = eval_extended(base, bundles, cfg.alpha_source, lid,
                                     world.new_data[k].test, k + 1);
    result.report.per_language.push_back({world.new_specs[k].id, false, err, 0.0,
                                          result.bundles[k].param_count()});
  }

  result.report.recompute_averages();
  result.report.wall_time_sec = now_sec() - t0;
  return result;
}

ExperimentReport evaluate_extended_system(const World& world, const BaseModel& original,
                                          const BaseModel& extended,
                                          const std::vector<const LanguageBundle*>& bundles,
                                          const LidModel* lid, const ExperimentConfig& cfg) {
  const double t0 = now_sec();
  if ((cfg.alpha_source == AlphaSourceKind::LpPosterior ||
       cfg.alpha_source == AlphaSourceKind::LpOneHot) &&
      lid == nullptr) {
    throw ConfigError("evaluation with LP alpha sources needs a LID model");
  }
  ExperimentReport report;
  report.method = std::string("pele(") + to_string(cfg.peft.kind) + "," +
                  to_string(cfg.alpha_source) + ")";
  report.seed = cfg.seed;
  report.config_echo = cfg.to_json();

  for (std::size_t i = 0; i < world.base_data.size(); ++i) {
    const double pre = eval_model(original, world.base_data[i].test);
    const double post = eval_extended(extended, bundles, AlphaSourceKind::GtOneHot, nullptr,
                                      world.base_data[i].test, 0);
    report.per_language.push_back({world.base_specs[i].id, true, post, post - pre, 0});
  }
  for (std::size_t k = 0; k < world.new_data.size() && k < bundles.size(); ++k) {
    const double err = eval_extended(extended, bundles, cfg.alpha_source, lid,
                                     world.new_data[k].test, k + 1);
    report.per_language.push_back(
        {world.new_specs[k].id, false, err, 0.0, bundles[k]->param_count()});
  }
  report.recompute_averages();
  report.wall_time_sec = now_sec() - t0;
  return report;
}

std::vector<XlaSweepRow> xla_sweep(const World& world, const BaseModel& base,
                                   const ExperimentConfig& cfg,
                                   const std::vector<PeftKind>& kinds) {
  if (world.new_specs.empty()) throw ConfigError("xla_sweep: no new language configured");
  BaseModel target = base.clone();
  target.set_frozen(true);
  expand_for_new_langs(target, world, cfg, 1);
  const auto* entry = world.registry.find(world.new_specs[0].id);

  std::vector<XlaSweepRow> rows;
  for (PeftKind kind : kinds) {
    for (bool vocab_full : {false, true}) {
      ExtendConfig ext;
      ext.peft = cfg.peft;
      ext.peft.kind = kind;
      ext.peft.vocab_full = vocab_full;
      ext.steps = cfg.train.extend_steps;
      ext.batch_size = cfg.train.batch_size;
      ext.adam = cfg.train.adam();
      ext.seed = Rng(cfg.seed).fork(0xA5 + static_cast<std::uint64_t>(kind) * 2 +
                                    (vocab_full ? 1 : 0))
                     .next_u64();
      auto bundle = extend_language(target, world.new_specs[0].id, world.new_data[0].train,
                                    *entry, {}, ext);
      const double err = eval_extended(target, {&bundle}, AlphaSourceKind::GtOneHot, nullptr,
                                       world.new_data[0].test, 1);
      rows.push_back({to_string(kind), vocab_full, err, bundle.param_count()});
    }
  }
  return rows;
}

nlohmann::json xla_sweep_to_json(const std::vector<XlaSweepRow>& rows) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& r : rows) {
    out.push_back({{"kind", r.kind},
                   {"vocab_full", r.vocab_full},
                   {"error", r.error},
                   {"params", r.params}});
  }
  return out;
}

nlohmann::json lid_sweep_to_json(const std::vector<LidSweepRow>& rows) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& r : rows) {
    out.push_back({{"layer", r.layer},
                   {"method", r.method},
                   {"seen_accuracy", r.seen_accuracy},
                   {"unseen_accuracy", r.unseen_accuracy}});
  }
  return out;
}

}  // namespace pele

#include "pele/synth.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include "pele/io.hpp"

namespace pele {

VocabRegistry::VocabRegistry(int max_vocab) : max_(max_vocab) {
  if (max_vocab <= kNumReservedTokens) throw ConfigError("max_vocab too small");
}

VocabRegistry::Entry VocabRegistry::allocate(const std::string& lang, int count) {
  if (count <= 0) throw ConfigError("token range size must be positive");
  if (find(lang) != nullptr) throw ConfigError("language already registered: " + lang);
  if (next_ + count > max_) {
    throw ConfigError("vocabulary exhausted: cannot allocate " + std::to_string(count) +
                      " tokens for " + lang);
  }
  Entry e{lang, next_, next_ + count};
  next_ += count;
  entries_.push_back(e);
  return e;
}

const VocabRegistry::Entry* VocabRegistry::find(const std::string& lang) const {
  for (const auto& e : entries_) {
    if (e.lang == lang) return &e;
  }
  return nullptr;
}

nlohmann::json VocabRegistry::to_json() const {
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& e : entries_) {
    entries.push_back({{"lang", e.lang}, {"lo", e.lo}, {"hi", e.hi}});
  }
  return nlohmann::json{{"max_vocab", max_}, {"next", next_}, {"entries", entries}};
}

VocabRegistry VocabRegistry::from_json(const nlohmann::json& j) {
  VocabRegistry r(j.at("max_vocab").get<int>());
  for (const auto& e : j.at("entries")) {
    r.allocate(e.at("lang").get<std::string>(),
               e.at("hi").get<int>() - e.at("lo").get<int>());
  }
  if (r.next_free() != j.at("next").get<int>()) {
    throw ConfigError("vocab registry is inconsistent");
  }
  return r;
}

void SynthConfig::validate() const {
  if (d_feat < 1) throw ConfigError("d_feat must be positive");
  if (tokens_per_lang < 2) throw ConfigError("tokens_per_lang must be >= 2");
  if (noise_sigma < 0.0) throw ConfigError("noise_sigma must be >= 0");
  if (sep < 0.0) throw ConfigError("sep must be >= 0");
  if (dur_min < 1 || dur_max < dur_min) throw ConfigError("bad duration range");
  if (utt_tokens_min < 1 || utt_tokens_max < utt_tokens_min) {
    throw ConfigError("bad utterance token range");
  }
}

nlohmann::json SynthConfig::to_json() const {
  return nlohmann::json{{"d_feat", d_feat},
                        {"tokens_per_lang", tokens_per_lang},
                        {"sep", sep},
                        {"noise_sigma", noise_sigma},
                        {"dur_min", dur_min},
                        {"dur_max", dur_max},
                        {"utt_tokens_min", utt_tokens_min},
                        {"utt_tokens_max", utt_tokens_max}};
}

SynthConfig SynthConfig::from_json(const nlohmann::json& j) {
  SynthConfig c;
  c.d_feat = j.value("d_feat", c.d_feat);
  c.tokens_per_lang = j.value("tokens_per_lang", c.tokens_per_lang);
  c.sep = j.value("sep", c.sep);
  c.noise_sigma = j.value("noise_sigma", c.noise_sigma);
  c.dur_min = j.value("dur_min", c.dur_min);
  c.dur_max = j.value("dur_max", c.dur_max);
  c.utt_tokens_min = j.value("utt_tokens_min", c.utt_tokens_min);
  c.utt_tokens_max = j.value("utt_tokens_max", c.utt_tokens_max);
  c.validate();
  return c;
}

std::vector<double> LanguageSpec::centroid() const {
  const std::size_t v = prototypes.rows(), d = prototypes.cols();
  std::vector<double> c(d, 0.0);
  for (std::size_t i = 0; i < v; ++i)
    for (std::size_t j = 0; j < d; ++j) c[j] += prototypes.at(i, j);
  for (double& x : c) x /= static_cast<double>(v);
  return c;
}

namespace {

std::size_t sample_categorical(const double* p, std::size_t n, Rng& rng) {
  double u = rng.uniform();
  double acc = 0.0;
  for (std::size_t i = 0; i + 1 < n; ++i) {
    acc += p[i];
    if (u < acc) return i;
  }
  return n - 1;
}

}  // namespace

LanguageSpec gen_language_spec(const std::string& id, VocabRegistry& registry,
                               const SynthConfig& cfg, Rng& rng) {
  cfg.validate();
  auto entry = registry.allocate(id, cfg.tokens_per_lang);

  LanguageSpec spec;
  spec.id = id;
  spec.lo = entry.lo;
  spec.hi = entry.hi;
  spec.dur_min = cfg.dur_min;
  spec.dur_max = cfg.dur_max;
  spec.noise_sigma = cfg.noise_sigma;
  spec.sep = cfg.sep;
  spec.seed = rng.seed();

  const auto v = static_cast<std::size_t>(cfg.tokens_per_lang);
  const auto d = static_cast<std::size_t>(cfg.d_feat);

  // Language offset: sep * random unit direction.
  std::vector<double> offset(d);
  double norm = 0.0;
  for (auto& x : offset) {
    x = rng.normal(0.0, 1.0);
    norm += x * x;
  }
  norm = std::sqrt(norm);
  for (auto& x : offset) x = cfg.sep * x / (norm > 0 ? norm : 1.0);

  std::vector<double> protos(v * d);
  for (std::size_t i = 0; i < v; ++i)
    for (std::size_t j = 0; j < d; ++j) protos[i * d + j] = rng.normal(0.0, 1.0) + offset[j];
  spec.prototypes = Tensor::from({v, d}, std::move(protos));

  // Bigram rows: softmax of unit normals with the self-transition removed.
  std::vector<double> trans(v * v, 0.0);
  for (std::size_t i = 0; i < v; ++i) {
    double z = 0.0;
    for (std::size_t j = 0; j < v; ++j) {
      if (j == i) continue;
      const double e = std::exp(rng.normal(0.0, 1.0));
      trans[i * v + j] = e;
      z += e;
    }
    for (std::size_t j = 0; j < v; ++j) trans[i * v + j] /= z;
  }
  spec.transitions = Tensor::from({v, v}, std::move(trans));

  spec.start.assign(v, 0.0);
  double z = 0.0;
  for (auto& s : spec.start) {
    s = std::exp(rng.normal(0.0, 1.0));
    z += s;
  }
  for (auto& s : spec.start) s /= z;
  return spec;
}

Utterance sample_utterance(const LanguageSpec& spec, int n_tokens, Rng& rng) {
  if (n_tokens < 1) throw ConfigError("sample_utterance: n_tokens must be >= 1");
  const auto v = static_cast<std::size_t>(spec.v_size());
  const auto d = spec.prototypes.cols();

  Utterance utt;
  utt.lang = spec.id;

  std::vector<double> frames;
  std::size_t token = sample_categorical(spec.start.data(), v, rng);
  for (int i = 0; i < n_tokens; ++i) {
    utt.tokens.push_back(spec.lo + static_cast<int>(token));
    const int dur =
        spec.dur_min + static_cast<int>(rng.uniform_int(
                           static_cast<std::uint64_t>(spec.dur_max - spec.dur_min + 1)));
    for (int f = 0; f < dur; ++f) {
      for (std::size_t j = 0; j < d; ++j) {
        frames.push_back(spec.prototypes.at(token, j) + rng.normal(0.0, spec.noise_sigma));
      }
    }
    if (i + 1 < n_tokens) {
      token = sample_categorical(&spec.transitions.values()[token * v], v, rng);
    }
  }
  const std::size_t t_len = frames.size() / d;
  utt.features = Tensor::from({t_len, d}, std::move(frames));
  return utt;
}

Dataset make_splits(const LanguageSpec& spec, int n_train, int n_dev, int n_test,
                    const SynthConfig& cfg, Rng& rng) {
  if (n_train < 1 || n_dev < 1 || n_test < 1) throw ConfigError("split sizes must be >= 1");
  Dataset ds;
  auto fill = [&](std::vector<Utterance>& out, int count, std::uint64_t tag) {
    Rng srng = rng.fork(tag);
    out.reserve(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) {
      const int n = cfg.utt_tokens_min +
                    static_cast<int>(srng.uniform_int(static_cast<std::uint64_t>(
                        cfg.utt_tokens_max - cfg.utt_tokens_min + 1)));
      out.push_back(sample_utterance(spec, n, srng));
    }
  };
  fill(ds.train, n_train, 1);
  fill(ds.dev, n_dev, 2);
  fill(ds.test, n_test, 3);
  return ds;
}

std::vector<int> oracle_decode(const LanguageSpec& spec, const Tensor& features) {
  const std::size_t t_len = features.rows(), d = features.cols();
  const auto v = static_cast<std::size_t>(spec.v_size());
  std::vector<int> out;
  int prev = -1;
  for (std::size_t t = 0; t < t_len; ++t) {
    std::size_t best = 0;
    double best_d2 = 1e300;
    for (std::size_t k = 0; k < v; ++k) {
      double d2 = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        const double diff = features.at(t, j) - spec.prototypes.at(k, j);
        d2 += diff * diff;
      }
      if (d2 < best_d2) {
        best_d2 = d2;
        best = k;
      }
    }
    const int tok = spec.lo + static_cast<int>(best);
    if (tok != prev) out.push_back(tok);
    prev = tok;
  }
  return out;
}

std::size_t oracle_lid(const std::vector<LanguageSpec>& specs, const Tensor& features) {
  const std::size_t t_len = features.rows(), d = features.cols();
  std::vector<double> mean(d, 0.0);
  for (std::size_t t = 0; t < t_len; ++t)
    for (std::size_t j = 0; j < d; ++j) mean[j] += features.at(t, j);
  for (double& x : mean) x /= static_cast<double>(t_len);

  std::size_t best = 0;
  double best_d2 = 1e300;
  for (std::size_t s = 0; s < specs.size(); ++s) {
    auto c = specs[s].centroid();
    double d2 = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double diff = mean[j] - c[j];
      d2 += diff * diff;
    }
    if (d2 < best_d2) {
      best_d2 = d2;
      best = s;
    }
  }
  return best;
}

void save_dataset(const std::string& prefix, const std::vector<Utterance>& utts) {
  std::ofstream blob(prefix + ".fbin", std::ios::binary | std::ios::trunc);
  std::ofstream jsonl(prefix + ".jsonl", std::ios::trunc);
  if (!blob || !jsonl) throw IoError("cannot write dataset files at " + prefix);
  std::size_t offset = 0;
  for (const auto& u : utts) {
    nlohmann::json rec{{"lang", u.lang},
                       {"tokens", u.tokens},
                       {"offset", offset},
                       {"frames", u.features.rows()},
                       {"dim", u.features.cols()}};
    jsonl << rec.dump() << "\n";
    for (double v : u.features.values()) {
      std::uint64_t bits;
      std::memcpy(&bits, &v, sizeof(bits));
      char le[8];
      for (int i = 0; i < 8; ++i) le[i] = static_cast<char>((bits >> (8 * i)) & 0xff);
      blob.write(le, 8);
      offset += 8;
    }
  }
  if (!blob || !jsonl) throw IoError("dataset write failed at " + prefix);
}

std::vector<Utterance> load_dataset(const std::string& prefix) {
  std::ifstream jsonl(prefix + ".jsonl");
  std::ifstream blob(prefix + ".fbin", std::ios::binary);
  if (!jsonl || !blob) throw IoError("cannot read dataset files at " + prefix);
  std::vector<Utterance> out;
  std::string line;
  while (std::getline(jsonl, line)) {
    if (line.empty()) continue;
    auto rec = nlohmann::json::parse(line);
    Utterance u;
    u.lang = rec.at("lang").get<std::string>();
    u.tokens = rec.at("tokens").get<std::vector<int>>();
    const auto frames = rec.at("frames").get<std::size_t>();
    const auto dim = rec.at("dim").get<std::size_t>();
    blob.seekg(static_cast<std::streamoff>(rec.at("offset").get<std::size_t>()));
    std::vector<double> vals(frames * dim);
    for (auto& v : vals) {
      unsigned char le[8];
      blob.read(reinterpret_cast<char*>(le), 8);
      std::uint64_t bits = 0;
      for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(le[i]) << (8 * i);
      std::memcpy(&v, &bits, sizeof(v));
    }
    if (!blob) throw IoError("dataset blob truncated at " + prefix);
    u.features = Tensor::from({frames, dim}, std::move(vals));
    out.push_back(std::move(u));
  }
  return out;
}

}  // namespace pele

#include "pele/extension.hpp"

#include <algorithm>
#include <cmath>

#include "pele/ctc.hpp"
#include "pele/io.hpp"

namespace pele {

Tensor VocabUpdate::delta() const {
  if (full) return dense;
  return matmul(b, a);
}

std::vector<Tensor> VocabUpdate::trainable() const {
  if (full) return {dense};
  return {a, b};
}

std::size_t VocabUpdate::param_count() const {
  std::size_t n = 0;
  for (const auto& t : trainable()) n += t.size();
  return n;
}

const PeftModule* LanguageBundle::module_at(const PeftSite& site) const {
  for (const auto& m : modules) {
    if (m.site == site) return &m;
  }
  return nullptr;
}

std::vector<Tensor> LanguageBundle::trainable() const {
  std::vector<Tensor> out;
  for (const auto& m : modules) {
    for (auto& t : m.trainable()) out.push_back(t);
  }
  for (auto& t : vocab.trainable()) out.push_back(t);
  return out;
}

std::size_t LanguageBundle::param_count() const {
  std::size_t n = vocab.param_count();
  for (const auto& m : modules) n += m.param_count();
  if (alpha_learned.defined()) n += alpha_learned.size();
  return n;
}

void LanguageBundle::save(const std::string& path) const {
  nlohmann::json j;
  j["language"] = language;
  j["peft"] = peft.to_json();
  j["vocab"] = {{"lo", vocab.lo}, {"hi", vocab.hi}, {"full", vocab.full}};
  j["training"] = {{"steps", meta.steps}, {"seed", meta.seed},
                   {"final_loss", meta.final_loss}};
  j["base_checksum"] = checksum_hex(base_checksum);
  j["base_vocab_at_train"] = base_vocab_at_train;
  j["param_count"] = param_count();
  nlohmann::json sites = nlohmann::json::array();
  for (const auto& m : modules) sites.push_back(m.site.name());
  j["sites"] = sites;

  std::vector<NamedTensor> params;
  for (const auto& m : modules) {
    for (auto& [name, t] : m.named_tensors()) params.push_back({name, t});
  }
  for (std::size_t i = 0; i < vocab.trainable().size(); ++i) {
    params.push_back({std::string("vocab.") + (vocab.full ? "dense" : (i == 0 ? "a" : "b")),
                      vocab.trainable()[i]});
  }
  if (alpha_learned.defined()) params.push_back({"alpha_learned", alpha_learned});
  write_artifact(path, "language-bundle", j, params);
}

LanguageBundle LanguageBundle::load(const std::string& path, const BaseModel& base) {
  Artifact art = read_artifact(path);
  if (art.kind != "language-bundle") throw IoError("artifact is not a bundle: " + path);

  LanguageBundle b;
  b.language = art.meta.at("language").get<std::string>();
  b.peft = PeftConfig::from_json(art.meta.at("peft"));
  b.vocab.lo = art.meta.at("vocab").at("lo").get<int>();
  b.vocab.hi = art.meta.at("vocab").at("hi").get<int>();
  b.vocab.full = art.meta.at("vocab").at("full").get<bool>();
  b.meta.steps = art.meta.at("training").at("steps").get<int>();
  b.meta.seed = art.meta.at("training").at("seed").get<std::uint64_t>();
  b.meta.final_loss = art.meta.at("training").at("final_loss").get<double>();
  b.base_vocab_at_train = art.meta.at("base_vocab_at_train").get<int>();

  const std::string stored = art.meta.at("base_checksum").get<std::string>();
  const std::string current = checksum_hex(
      base.checksum(static_cast<std::size_t>(b.base_vocab_at_train)));
  if (stored != current) {
    throw IoError("bundle " + path + " was trained against a different base model");
  }
  b.base_checksum = base.checksum(static_cast<std::size_t>(b.base_vocab_at_train));

  // Rebuild module skeletons along the same site enumeration, then fill
  // every tensor by name.
  Rng dummy(0);
  for (const auto& site : adaptation_sites(base.config, b.peft.kind)) {
    b.modules.push_back(make_module(b.peft, site, base.config, dummy));
  }
  auto fill = [&](Tensor t, const std::string& name) {
    const Tensor& src = art.find(name);
    if (src.shape() != t.shape()) throw IoError("bundle tensor shape mismatch at " + name);
    t.values() = src.values();
  };
  for (auto& m : b.modules) {
    for (auto& [name, t] : m.named_tensors()) fill(t, name);
  }
  const auto rows = static_cast<std::size_t>(b.vocab.hi - b.vocab.lo);
  const auto d = static_cast<std::size_t>(base.config.d_model);
  if (b.vocab.full) {
    b.vocab.dense = Tensor::zeros({rows, d}).set_requires_grad(true);
    fill(b.vocab.dense, "vocab.dense");
  } else {
    const auto r = static_cast<std::size_t>(b.peft.vocab_rank);
    b.vocab.a = Tensor::zeros({r, d}).set_requires_grad(true);
    b.vocab.b = Tensor::zeros({rows, r}).set_requires_grad(true);
    fill(b.vocab.a, "vocab.a");
    fill(b.vocab.b, "vocab.b");
  }
  for (const auto& p : art.params) {
    if (p.name == "alpha_learned") b.alpha_learned = p.tensor;
  }
  return b;
}

const char* to_string(AlphaSourceKind k) {
  switch (k) {
    case AlphaSourceKind::LpPosterior: return "lp_posterior";
    case AlphaSourceKind::LpOneHot: return "lp_onehot";
    case AlphaSourceKind::GtOneHot: return "gt_onehot";
    case AlphaSourceKind::GtLearnable: return "gt_learnable";
  }
  return "?";
}

AlphaSourceKind alpha_source_from_string(const std::string& s) {
  for (AlphaSourceKind k : {AlphaSourceKind::LpPosterior, AlphaSourceKind::LpOneHot,
                            AlphaSourceKind::GtOneHot, AlphaSourceKind::GtLearnable}) {
    if (s == to_string(k)) return k;
  }
  throw ConfigError("unknown alpha source: " + s);
}

AlphaVector AlphaVector::constants(const std::vector<double>& values) {
  AlphaVector v;
  for (double x : values) v.weights.push_back(Tensor::scalar(x));
  return v;
}

AlphaVector AlphaVector::one_hot(std::size_t size, std::size_t index) {
  if (index >= size) throw ConfigError("alpha one-hot index out of range");
  std::vector<double> values(size, 0.0);
  values[index] = 1.0;
  return constants(values);
}

std::vector<double> AlphaVector::values() const {
  std::vector<double> out;
  for (const auto& w : weights) out.push_back(w.item());
  return out;
}

AlphaVector alpha_from_source(AlphaSourceKind kind, std::size_t n_slots,
                              const std::vector<double>* lp_posterior,
                              std::optional<std::size_t> true_slot,
                              const Tensor* learned) {
  switch (kind) {
    case AlphaSourceKind::LpPosterior: {
      if (lp_posterior == nullptr || lp_posterior->size() != n_slots) {
        throw ConfigError("LP posterior missing or of wrong length");
      }
      return AlphaVector::constants(*lp_posterior);
    }
    case AlphaSourceKind::LpOneHot: {
      if (lp_posterior == nullptr || lp_posterior->size() != n_slots) {
        throw ConfigError("LP posterior missing or of wrong length");
      }
      const auto arg = static_cast<std::size_t>(
          std::max_element(lp_posterior->begin(), lp_posterior->end()) -
          lp_posterior->begin());
      return AlphaVector::one_hot(n_slots, arg);
    }
    case AlphaSourceKind::GtOneHot: {
      if (!true_slot.has_value()) throw ConfigError("GT alpha needs the true language");
      return AlphaVector::one_hot(n_slots, *true_slot);
    }
    case AlphaSourceKind::GtLearnable: {
      if (learned == nullptr || !learned->defined()) {
        throw ConfigError("learnable alpha requested but none stored");
      }
      std::vector<double> values = learned->values();
      if (values.size() > n_slots) throw ConfigError("stored alpha longer than slot count");
      values.resize(n_slots, 0.0);  // bundles added later contribute nothing
      return AlphaVector::constants(values);
    }
  }
  throw ConfigError("unreachable alpha source");
}

// ---- Mixer ------------------------------------------------------------------

Mixer::Mixer(const BaseModel& base, std::vector<const LanguageBundle*> bundles,
             AlphaVector alpha, bool force_prompt)
    : base_(&base), bundles_(std::move(bundles)), alpha_(std::move(alpha)),
      force_prompt_(force_prompt) {
  if (alpha_.size() != bundles_.size() + 1) {
    throw ConfigError("alpha length must be bundle count + 1");
  }
  for (const auto* b : bundles_) {
    if (b == nullptr) throw ConfigError("null bundle");
    if (b->peft.kind != bundles_.front()->peft.kind) {
      throw ConfigError("mixed PEFT kinds cannot be combined");
    }
  }

  // Prompt policy: prepending an all-zero prompt still perturbs attention,
  // so zero content is canonicalized to absence on evaluation paths;
  // training passes force application so the prompt can leave zero.
  std::size_t rows = 0;
  bool any_content = false;
  for (std::size_t i = 0; i < bundles_.size(); ++i) {
    if (!alpha_term_active(i + 1)) continue;
    const auto* mod = bundles_[i]->module_at(
        {PeftSite::Slot::Input, Section::Encoder, 0, ParamRole::AttnQ});
    if (mod == nullptr || !mod->prompt.defined()) continue;
    if (rows != 0 && mod->prompt.rows() != rows) {
      throw ConfigError("prompt bundles disagree on prompt length");
    }
    rows = mod->prompt.rows();
    for (double v : mod->prompt.values()) any_content = any_content || v != 0.0;
  }
  if (rows > 0 && (any_content || force_prompt_)) {
    apply_prompt_ = true;
    prompt_rows_ = rows;
  }
}

bool Mixer::alpha_term_active(std::size_t slot) const {
  const Tensor& w = alpha_.weights.at(slot);
  return w.requires_grad() || w.item() != 0.0;
}

Tensor& Mixer::cache_slot(const std::string& key) const {
  const std::uint64_t gen = Tape::active_generation();
  if (gen == 0) {
    scratch_ = Tensor();
    return scratch_;
  }
  if (cache_.generation != gen) {
    cache_.generation = gen;
    cache_.tensors.clear();
  }
  return cache_.tensors[key];
}

Tensor Mixer::combined_prompt() const {
  Tensor acc;
  for (std::size_t i = 0; i < bundles_.size(); ++i) {
    if (!alpha_term_active(i + 1)) continue;
    const auto* mod = bundles_[i]->module_at(
        {PeftSite::Slot::Input, Section::Encoder, 0, ParamRole::AttnQ});
    if (mod == nullptr || !mod->prompt.defined()) continue;
    auto term = smul(alpha_.weights[i + 1], mod->prompt);
    acc = acc.defined() ? add(acc, term) : term;
  }
  return acc;
}

Tensor Mixer::adapt_input(const Tensor& features) const {
  if (!apply_prompt_) return features;
  Tensor& cached = cache_slot("prompt");
  if (!cached.defined()) cached = combined_prompt();
  return concat_rows({cached, features});
}

std::size_t Mixer::prompt_frames() const { return apply_prompt_ ? prompt_rows_ : 0; }

Tensor Mixer::weight(Section s, int layer, ParamRole role, const Tensor& w0) const {
  const PeftKind kind = bundles_.empty() ? PeftKind::Adapter : bundles_.front()->peft.kind;
  const bool lora_family = kind == PeftKind::LoRA || kind == PeftKind::LoRAStar ||
                           kind == PeftKind::MaskLoRAStar;
  const bool mask_family = kind == PeftKind::Mask || kind == PeftKind::MaskLoRAStar;
  if (!lora_family && !mask_family) return w0;

  const PeftSite site{PeftSite::Slot::Weight, s, layer, role};
  const std::string key = "w:" + site.name();
  Tensor& cached = cache_slot(key);
  if (cached.defined()) return cached;

  Tensor ws_dev, dw, bin_mix;
  bool any = false;
  for (std::size_t i = 0; i < bundles_.size(); ++i) {
    if (!alpha_term_active(i + 1)) continue;
    const auto* mod = bundles_[i]->module_at(site);
    if (mod == nullptr) continue;
    any = true;
    const Tensor& a = alpha_.weights[i + 1];
    if (lora_family) {
      auto dev = smul(a, matmul(mod->ws_u, mod->ws_v));
      ws_dev = ws_dev.defined() ? add(ws_dev, dev) : dev;
      auto upd = smul(a, matmul(mod->lora_b, mod->lora_a));
      dw = dw.defined() ? add(dw, upd) : upd;
    }
    if (mask_family) {
      auto term = smul(a, binarize_mask(mod->mask_m, mod->mask_tau));
      bin_mix = bin_mix.defined() ? add(bin_mix, term) : term;
    }
  }
  if (!any) {
    cached = w0;
    return w0;
  }

  Tensor w = w0;
  if (ws_dev.defined()) {
    w = add(mul(w0, add(Tensor::ones(w0.shape()), ws_dev)), dw);
  }
  if (mask_family) {
    // The dummy base module contributes the all-ones mask with weight a0.
    if (alpha_term_active(0)) {
      auto base_term = smul(alpha_.weights[0], Tensor::ones(w0.shape()));
      bin_mix = bin_mix.defined() ? add(bin_mix, base_term) : base_term;
    }
    if (bin_mix.defined()) w = mul(w, bin_mix);
  }
  cached = w;
  return w;
}

Tensor Mixer::bias(Section s, int layer, ParamRole role, const Tensor& b0) const {
  const PeftSite site{PeftSite::Slot::Bias, s, layer, ParamRole::AttnQ};
  const std::string key = "b:" + site.name() + ":" + to_string(role);
  Tensor& cached = cache_slot(key);
  if (cached.defined()) return cached;

  Tensor b = b0;
  for (std::size_t i = 0; i < bundles_.size(); ++i) {
    if (!alpha_term_active(i + 1)) continue;
    const auto* mod = bundles_[i]->module_at(site);
    if (mod == nullptr) continue;
    for (const auto& [r, delta] : mod->bias_deltas) {
      if (r == role) b = add(b, smul(alpha_.weights[i + 1], delta));
    }
  }
  cached = b;
  return b;
}

Tensor Mixer::sublayer_delta(Section s, int layer, SublayerSite site, const Tensor& h) const {
  const PeftSite psite{site == SublayerSite::PostAttn ? PeftSite::Slot::PostAttn
                                                      : PeftSite::Slot::PostFf,
                       s, layer, ParamRole::AttnQ};
  Tensor acc;
  for (std::size_t i = 0; i < bundles_.size(); ++i) {
    if (!alpha_term_active(i + 1)) continue;
    const auto* mod = bundles_[i]->module_at(psite);
    if (mod == nullptr) continue;
    auto term = smul(alpha_.weights[i + 1], adapter_delta(h, *mod));
    acc = acc.defined() ? add(acc, term) : term;
  }
  return acc;
}

Tensor Mixer::embedding(const Tensor& e0) const {
  Tensor& cached = cache_slot("embedding");
  if (cached.defined()) return cached;

  struct Update {
    int lo, hi;
    Tensor scaled;
  };
  std::vector<Update> updates;
  for (std::size_t i = 0; i < bundles_.size(); ++i) {
    if (!alpha_term_active(i + 1)) continue;
    const auto& vu = bundles_[i]->vocab;
    if (vu.hi <= vu.lo) continue;
    if (static_cast<std::size_t>(vu.hi) > e0.rows()) {
      throw ShapeError("vocab update beyond embedding rows");
    }
    updates.push_back({vu.lo, vu.hi, smul(alpha_.weights[i + 1], vu.delta())});
  }
  if (updates.empty()) {
    cached = e0;
    return e0;
  }
  std::sort(updates.begin(), updates.end(),
            [](const Update& x, const Update& y) { return x.lo < y.lo; });

  std::vector<Tensor> segments;
  std::size_t cursor = 0;
  for (const auto& u : updates) {
    const auto lo = static_cast<std::size_t>(u.lo), hi = static_cast<std::size_t>(u.hi);
    if (lo < cursor) throw ConfigError("overlapping vocab updates");
    if (lo > cursor) segments.push_back(slice_rows(e0, cursor, lo));
    segments.push_back(add(slice_rows(e0, lo, hi), u.scaled));
    cursor = hi;
  }
  if (cursor < e0.rows()) segments.push_back(slice_rows(e0, cursor, e0.rows()));
  cached = concat_rows(segments);
  return cached;
}

// ---- vocabulary expansion ----------------------------------------------------

void expand_vocab(BaseModel& m, const VocabRegistry::Entry& range, Rng& rng) {
  const int delta = range.hi - range.lo;
  if (delta <= 0) throw ConfigError("expand_vocab: degenerate (empty) range");
  if (range.lo != m.vocab_size()) {
    throw ConfigError("expand_vocab: range does not start at the current vocab edge");
  }
  if (range.hi > m.config.max_vocab) throw ConfigError("expand_vocab: exceeds max_vocab");

  const auto d = static_cast<std::size_t>(m.config.d_model);
  const bool rg = m.embedding.requires_grad();
  std::vector<double> values = m.embedding.values();
  for (int i = 0; i < delta; ++i) {
    for (std::size_t j = 0; j < d; ++j) values.push_back(rng.normal(0.0, 0.02));
  }
  m.embedding = Tensor::from({static_cast<std::size_t>(range.hi), d}, std::move(values));
  m.embedding.set_requires_grad(rg);
}

// ---- extension training ------------------------------------------------------

LanguageBundle make_bundle(const BaseModel& base, const std::string& lang,
                           const VocabRegistry::Entry& range, const PeftConfig& pc,
                           std::uint64_t seed) {
  pc.validate();
  Rng rng(seed);
  LanguageBundle bundle;
  bundle.language = lang;
  bundle.peft = pc;

  const auto sites = adaptation_sites(base.config, pc.kind);
  for (std::size_t i = 0; i < sites.size(); ++i) {
    Rng srng = rng.fork(0x500 + i);
    bundle.modules.push_back(make_module(pc, sites[i], base.config, srng));
  }

  bundle.vocab.lo = range.lo;
  bundle.vocab.hi = range.hi;
  bundle.vocab.full = pc.vocab_full;
  const auto rows = static_cast<std::size_t>(range.hi - range.lo);
  const auto d = static_cast<std::size_t>(base.config.d_model);
  Rng vrng = rng.fork(0x70CAB);
  if (bundle.vocab.full) {
    bundle.vocab.dense = Tensor::zeros({rows, d}).set_requires_grad(true);
  } else {
    const auto r = static_cast<std::size_t>(pc.vocab_rank);
    bundle.vocab.a = Tensor::normal({r, d}, 0.0, 1.0 / std::sqrt(static_cast<double>(r)), vrng)
                         .set_requires_grad(true);
    bundle.vocab.b = Tensor::zeros({rows, r}).set_requires_grad(true);
  }
  return bundle;
}

LanguageBundle extend_language(const BaseModel& base, const std::string& lang,
                               const std::vector<Utterance>& train_data,
                               const VocabRegistry::Entry& range,
                               const std::vector<const LanguageBundle*>& previous,
                               const ExtendConfig& cfg) {
  if (!base.frozen) throw ConfigError("extend_language: base must be frozen");
  if (train_data.empty()) throw ConfigError("extend_language: empty dataset");
  if (range.hi > base.vocab_size()) {
    throw ConfigError("extend_language: vocabulary not expanded for " + lang);
  }
  if (cfg.alpha_source != AlphaSourceKind::GtOneHot &&
      cfg.alpha_source != AlphaSourceKind::GtLearnable) {
    throw ConfigError("extend_language: training alpha must be a GT source");
  }

  Rng rng(cfg.seed);
  LanguageBundle bundle = make_bundle(base, lang, range, cfg.peft, cfg.seed);

  std::vector<Tensor> trainable = bundle.trainable();
  const std::size_t n_slots = previous.size() + 2;
  const std::size_t slot = previous.size() + 1;
  AlphaVector alpha;
  if (cfg.alpha_source == AlphaSourceKind::GtLearnable) {
    for (std::size_t i = 0; i < n_slots; ++i) {
      auto w = Tensor::scalar(i == slot ? 1.0 : 0.0).set_requires_grad(true);
      alpha.weights.push_back(w);
      trainable.push_back(w);
    }
  } else {
    alpha = AlphaVector::one_hot(n_slots, slot);
  }

  std::vector<const LanguageBundle*> all = previous;
  all.push_back(&bundle);
  Mixer mixer(base, all, alpha, /*force_prompt=*/true);

  Optimizer opt(cfg.adam);
  Rng brng = rng.fork(0xBA7C);
  double last_loss = 0.0;
  for (int step = 0; step < cfg.steps; ++step) {
    std::vector<const Utterance*> batch;
    for (int b = 0; b < cfg.batch_size; ++b) {
      batch.push_back(&train_data[brng.uniform_int(train_data.size())]);
    }
    last_loss = train_step(
        trainable,
        [&] {
          Tensor acc = Tensor::scalar(0.0);
          for (const auto* u : batch) {
            acc = add(acc, utterance_loss(base, u->features, u->tokens, &mixer).total);
          }
          return scale(acc, 1.0 / static_cast<double>(batch.size()));
        },
        opt);
  }

  bundle.meta.steps = cfg.steps;
  bundle.meta.seed = cfg.seed;
  bundle.meta.final_loss = last_loss;
  bundle.base_vocab_at_train = range.hi;
  bundle.base_checksum = base.checksum(static_cast<std::size_t>(range.hi));
  if (cfg.alpha_source == AlphaSourceKind::GtLearnable) {
    std::vector<double> learned;
    for (const auto& w : alpha.weights) learned.push_back(w.item());
    bundle.alpha_learned = Tensor::from({learned.size()}, learned);
  }
  return bundle;
}

ExtendedDecode forward_extended(const BaseModel& base,
                                const std::vector<const LanguageBundle*>& bundles,
                                AlphaSourceKind source, const LidModel* lid,
                                const Tensor& features,
                                std::optional<std::size_t> true_slot) {
  const std::size_t n_slots = bundles.size() + 1;
  AlphaVector alpha;

  if (source == AlphaSourceKind::LpPosterior || source == AlphaSourceKind::LpOneHot) {
    if (lid == nullptr) throw ConfigError("LP alpha sources require a LID model");
    auto states = encode(base, features);
    auto pooled =
        pool_features(states.h[static_cast<std::size_t>(lid->source_layer - 1)]).values();
    const auto posterior = lid->predict(pooled);
    // Collapse LID classes onto [base, bundle_1..bundle_L'] slots; every
    // class not matching a bundle belongs to the base slot.
    std::vector<double> slots(n_slots, 0.0);
    const auto& classes = lid->classes();
    for (std::size_t c = 0; c < classes.size(); ++c) {
      std::size_t slot = 0;
      for (std::size_t b = 0; b < bundles.size(); ++b) {
        if (bundles[b]->language == classes[c]) {
          slot = b + 1;
          break;
        }
      }
      slots[slot] += posterior[c];
    }
    alpha = alpha_from_source(source, n_slots, &slots, std::nullopt, nullptr);
  } else if (source == AlphaSourceKind::GtOneHot) {
    alpha = alpha_from_source(source, n_slots, nullptr, true_slot, nullptr);
  } else {
    if (!true_slot.has_value()) throw ConfigError("GT alpha needs the true language");
    if (*true_slot == 0) {
      alpha = AlphaVector::one_hot(n_slots, 0);
    } else {
      alpha = alpha_from_source(source, n_slots, nullptr, true_slot,
                                &bundles.at(*true_slot - 1)->alpha_learned);
    }
  }

  Mixer mixer(base, bundles, alpha);
  auto states = encode(base, features, &mixer);
  auto lp = ctc_log_probs(base, states, &mixer);

  ExtendedDecode out;
  out.tokens = greedy_ctc_decode(lp);
  out.alpha = mixer.alpha().values();
  return out;
}

}  // namespace pele

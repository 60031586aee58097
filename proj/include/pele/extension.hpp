#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "pele/lid.hpp"
#include "pele/model.hpp"
#include "pele/optim.hpp"
#include "pele/peft.hpp"
#include "pele/synth.hpp"

namespace pele {

// Low-rank (or dense) additive update of the token embedding, restricted to
// the rows a language owns. Rows outside [lo, hi) are never touched, so
// base-language embeddings cannot drift.
struct VocabUpdate {
  int lo = 0, hi = 0;
  bool full = false;
  Tensor a, b;   // low-rank pair: delta = b[range, r] * a[r, d]
  Tensor dense;  // dense delta [range, d] when full

  Tensor delta() const;  // composed [range, d]
  std::vector<Tensor> trainable() const;
  std::size_t param_count() const;
};

struct TrainMeta {
  int steps = 0;
  std::uint64_t seed = 0;
  double final_loss = 0.0;
};

// Everything trainable for one extended language; the unit of serialization
// (.peleb files). Never touches a base parameter.
struct LanguageBundle {
  std::string language;
  PeftConfig peft;
  std::vector<PeftModule> modules;
  VocabUpdate vocab;
  TrainMeta meta;
  // base checksum over the vocabulary visible at training time (vocab.hi
  // rows); verified on load.
  std::uint64_t base_checksum = 0;
  int base_vocab_at_train = 0;
  // Learnable alpha over [base, lang_1 .. lang_k, this]; defined only when
  // trained with the learnable source.
  Tensor alpha_learned;

  const PeftModule* module_at(const PeftSite& site) const;
  std::vector<Tensor> trainable() const;
  std::size_t param_count() const;

  void save(const std::string& path) const;
  static LanguageBundle load(const std::string& path, const BaseModel& base);
};

enum class AlphaSourceKind { LpPosterior, LpOneHot, GtOneHot, GtLearnable };
const char* to_string(AlphaSourceKind k);
AlphaSourceKind alpha_source_from_string(const std::string& s);

// Mixture weights over [m0=base, bundle_1, ..., bundle_L']. Entries are
// scalar tensors so a learnable alpha trains through the same path.
struct AlphaVector {
  std::vector<Tensor> weights;

  static AlphaVector constants(const std::vector<double>& values);
  static AlphaVector one_hot(std::size_t size, std::size_t index);
  std::vector<double> values() const;
  std::size_t size() const { return weights.size(); }
};

// Resolves the weight vector for a forward. LP sources take a posterior
// already collapsed onto [base, ext_1..ext_L'] slots; GT sources take the
// true slot; the learnable source takes the stored vector (zero-padded to
// the current bundle count).
AlphaVector alpha_from_source(AlphaSourceKind kind, std::size_t n_slots,
                              const std::vector<double>* lp_posterior,
                              std::optional<std::size_t> true_slot,
                              const Tensor* learned);

// The module-level mixture: combines per-language add-on modules in
// parallel with the dummy base module under alpha, exposed to the forward
// pass as AdaptationHooks. Combination semantics per family:
//   - additive content (LoRA dW, Ws deviation from ones, adapter deltas,
//     bias deltas, prompt rows, vocab deltas) mixes linearly in alpha;
//   - binary masks mix as the convex combination alpha_0*1 + sum alpha_l*B_l
//     applied multiplicatively.
// A Mixer is confined to one worker and caches combined tensors per tape
// generation; do not interleave training and evaluation through one
// instance.
class Mixer : public AdaptationHooks {
 public:
  Mixer(const BaseModel& base, std::vector<const LanguageBundle*> bundles,
        AlphaVector alpha, bool force_prompt = false);

  Tensor adapt_input(const Tensor& features) const override;
  std::size_t prompt_frames() const override;
  Tensor weight(Section s, int layer, ParamRole role, const Tensor& w0) const override;
  Tensor bias(Section s, int layer, ParamRole role, const Tensor& b0) const override;
  Tensor sublayer_delta(Section s, int layer, SublayerSite site,
                        const Tensor& h) const override;
  Tensor embedding(const Tensor& e0) const override;

  const AlphaVector& alpha() const { return alpha_; }

 private:
  bool alpha_term_active(std::size_t slot) const;
  Tensor combined_prompt() const;
  // Combined tensors are cached only while a tape is live (one generation =
  // one optimization step), so a batch shares one combined subgraph. With no
  // tape the parameters may move between calls, so nothing is reused.
  struct Cache {
    std::uint64_t generation = ~0ull;
    std::map<std::string, Tensor> tensors;
  };
  Tensor& cache_slot(const std::string& key) const;

  const BaseModel* base_;
  std::vector<const LanguageBundle*> bundles_;
  AlphaVector alpha_;
  bool force_prompt_ = false;
  bool apply_prompt_ = false;
  std::size_t prompt_rows_ = 0;
  mutable Cache cache_;
  mutable Tensor scratch_;
};

// Appends freshly initialized rows (Normal(0, 0.02)) for an allocated token
// range to the model's embedding; earlier rows are preserved bit-exactly.
// Ranges must be expanded in registry order so ids match row indices.
void expand_vocab(BaseModel& m, const VocabRegistry::Entry& range, Rng& rng);

struct ExtendConfig {
  PeftConfig peft;
  AlphaSourceKind alpha_source = AlphaSourceKind::GtOneHot;  // GT sources only
  int steps = 2000;
  int batch_size = 8;
  AdamConfig adam{1e-3, 0.9, 0.999, 1e-8, 200};
  std::uint64_t seed = 0;
};

// Fresh (untrained, no-op) bundle for a language: one module per adaptation
// site plus the zero-initialized vocabulary update.
LanguageBundle make_bundle(const BaseModel& base, const std::string& lang,
                           const VocabRegistry::Entry& range, const PeftConfig& pc,
                           std::uint64_t seed);

// Trains a fresh bundle for one new language on its own data only. The base
// must be frozen; its checksum (over the pre-extension vocabulary plus the
// rows appended for this language) is recorded in the bundle.
LanguageBundle extend_language(const BaseModel& base, const std::string& lang,
                               const std::vector<Utterance>& train_data,
                               const VocabRegistry::Entry& range,
                               const std::vector<const LanguageBundle*>& previous,
                               const ExtendConfig& cfg);

struct ExtendedDecode {
  std::vector<int> tokens;
  std::vector<double> alpha;
};

// End-to-end adapted decode: resolves alpha (running LID on the split-layer
// state when the source is LP-based), applies the combined modules above
// the split layer, in the decoder and on the vocabulary, and returns the
// greedy CTC decode.
ExtendedDecode forward_extended(const BaseModel& base,
                                const std::vector<const LanguageBundle*>& bundles,
                                AlphaSourceKind source, const LidModel* lid,
                                const Tensor& features,
                                std::optional<std::size_t> true_slot);

}  // namespace pele

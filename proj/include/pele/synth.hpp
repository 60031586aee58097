#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "pele/model.hpp"
#include "pele/tensor.hpp"

namespace pele {

// Global vocabulary bookkeeping: token ranges are handed out once, in order,
// and never reassigned, so embeddings of earlier tokens keep their rows.
class VocabRegistry {
 public:
  struct Entry {
    std::string lang;
    int lo = 0, hi = 0;
  };

  explicit VocabRegistry(int max_vocab);

  int next_free() const { return next_; }
  int max_vocab() const { return max_; }
  Entry allocate(const std::string& lang, int count);
  const Entry* find(const std::string& lang) const;
  const std::vector<Entry>& entries() const { return entries_; }

  nlohmann::json to_json() const;
  static VocabRegistry from_json(const nlohmann::json& j);

 private:
  int max_ = 0;
  int next_ = kNumReservedTokens;
  std::vector<Entry> entries_;
};

struct SynthConfig {
  int d_feat = 16;
  int tokens_per_lang = 12;
  double sep = 2.0;
  double noise_sigma = 0.1;
  int dur_min = 1;
  int dur_max = 3;
  int utt_tokens_min = 3;
  int utt_tokens_max = 7;

  void validate() const;
  nlohmann::json to_json() const;
  static SynthConfig from_json(const nlohmann::json& j);
};

// A synthetic language: per-token emission prototypes offset by a
// language-level direction of magnitude `sep`, and first-order token
// dynamics with no self-transitions (keeps every sampled sequence
// CTC-feasible at one frame per token).
struct LanguageSpec {
  std::string id;
  int lo = 0, hi = 0;   // owned global token range
  Tensor prototypes;    // [V_l, d_feat]
  Tensor transitions;   // [V_l, V_l], rows sum to 1, zero diagonal
  std::vector<double> start;  // start distribution
  int dur_min = 1, dur_max = 3;
  double noise_sigma = 0.1;
  double sep = 2.0;
  std::uint64_t seed = 0;

  int v_size() const { return hi - lo; }
  // Mean of the prototypes; the language's cluster center in feature space.
  std::vector<double> centroid() const;
};

struct Utterance {
  Tensor features;          // [T, d_feat]
  std::vector<int> tokens;  // global ids in [lo, hi)
  std::string lang;
};

LanguageSpec gen_language_spec(const std::string& id, VocabRegistry& registry,
                               const SynthConfig& cfg, Rng& rng);

Utterance sample_utterance(const LanguageSpec& spec, int n_tokens, Rng& rng);

struct Dataset {
  std::vector<Utterance> train, dev, test;
};

Dataset make_splits(const LanguageSpec& spec, int n_train, int n_dev, int n_test,
                    const SynthConfig& cfg, Rng& rng);

// Feasibility oracle: nearest-prototype frame labels merged over repeats.
// Returns global token ids.
std::vector<int> oracle_decode(const LanguageSpec& spec, const Tensor& features);

// Separability probe: index of the spec whose centroid is nearest to the
// utterance's mean feature vector.
std::size_t oracle_lid(const std::vector<LanguageSpec>& specs, const Tensor& features);

// Cache files: <prefix>.jsonl records + <prefix>.fbin feature blob.
void save_dataset(const std::string& prefix, const std::vector<Utterance>& utts);
std::vector<Utterance> load_dataset(const std::string& prefix);

}  // namespace pele

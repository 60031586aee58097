#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "pele/tensor.hpp"

namespace pele {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Reserved global token ids.
constexpr int kSosToken = 0;
constexpr int kEosToken = 1;
constexpr int kNumReservedTokens = 2;

struct ModelConfig {
  int n_enc_layers = 4;
  int n_dec_layers = 2;
  int d_model = 64;
  int n_heads = 4;
  int d_ff = 128;
  int d_feat = 16;
  int vocab_size = 122;   // initial rows of the embedding table
  int max_vocab = 256;    // hard ceiling for later extensions
  int n_lp_split = 2;     // LID feature layer; adaptation starts above it
  double lambda_ctc = 0.3;
  int max_frames = 512;

  static ModelConfig desk();
  // Reference preset mirroring the full-scale architecture shape. Not meant
  // to be trained here; kept for config completeness.
  static ModelConfig paper_shape();

  void validate() const;
  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
};

// No key bias: a shared shift of all keys cancels in the softmax, so the
// parameter would be a strict no-op.
struct AttentionParams {
  Tensor wq, bq, wk, wv, bv, wo, bo;
};

struct FeedForwardParams {
  Tensor w1, b1, w2, b2;
};

struct LayerNormParams {
  Tensor gain, bias;
};

struct EncoderLayer {
  LayerNormParams ln_attn, ln_ff;
  AttentionParams attn;
  FeedForwardParams ff;
};

struct DecoderLayer {
  LayerNormParams ln_self, ln_cross, ln_ff;
  AttentionParams self_attn, cross_attn;
  FeedForwardParams ff;
};

enum class Section { Encoder, Decoder };

// Identifies one adaptable parameter family inside a layer.
enum class ParamRole {
  AttnQ, AttnK, AttnV, AttnO,
  CrossQ, CrossK, CrossV, CrossO,
  FfW1, FfW2,
  LnAttn, LnCross, LnFf,
};

const char* to_string(Section s);
const char* to_string(ParamRole r);

enum class SublayerSite { PostAttn, PostFf };

// Hook surface through which language adaptation reaches the frozen
// forward pass. The default implementation is the identity (pure base
// model); `encode` consults hooks only above the LID split layer.
class AdaptationHooks {
 public:
  virtual ~AdaptationHooks() = default;

  // Input composition: may prepend learned frames to the raw features.
  virtual Tensor adapt_input(const Tensor& features) const { return features; }
  virtual std::size_t prompt_frames() const { return 0; }

  // Parameter composition over a weight matrix or bias vector.
  virtual Tensor weight(Section s, int layer, ParamRole role, const Tensor& w0) const {
    (void)s; (void)layer; (void)role;
    return w0;
  }
  virtual Tensor bias(Section s, int layer, ParamRole role, const Tensor& b0) const {
    (void)s; (void)layer; (void)role;
    return b0;
  }

  // Function composition: residual delta added after a sublayer; an empty
  // tensor means no contribution.
  virtual Tensor sublayer_delta(Section s, int layer, SublayerSite site,
                                const Tensor& h) const {
    (void)s; (void)layer; (void)site; (void)h;
    return Tensor();
  }

  // Vocabulary layer: effective token embedding (shared by the decoder
  // input, decoder output projection and the CTC projection).
  virtual Tensor embedding(const Tensor& e0) const { return e0; }
};

struct EncoderStates {
  std::vector<Tensor> h;        // one [T', d_model] tensor per layer
  std::size_t prompt_frames = 0;  // leading frames injected by prompt tuning

  const Tensor& top() const { return h.back(); }
};

// Frozen multilingual base: pre-norm attention+feedforward encoder blocks, a
// transformer decoder, and a token embedding shared between the decoder
// softmax and the CTC projection; the CTC blank has its own weight vector
// (blank = index vocab_size in CTC output).
struct BaseModel {
  ModelConfig config;
  Tensor w_in, b_in;  // d_feat -> d_model
  std::vector<EncoderLayer> encoder;
  LayerNormParams enc_norm;
  std::vector<DecoderLayer> decoder;
  LayerNormParams dec_norm;
  Tensor embedding;  // [vocab, d_model]
  Tensor ctc_blank;  // [d_model]
  bool frozen = false;

  static BaseModel init(const ModelConfig& cfg, Rng& rng);

  int vocab_size() const { return static_cast<int>(embedding.rows()); }

  // Every learnable tensor, in a fixed documented order (checksums and
  // checkpoints rely on it).
  std::vector<Tensor> parameters() const;
  std::vector<std::pair<std::string, Tensor>> named_parameters() const;

  void set_frozen(bool flag);

  // Deep copy (fresh parameter buffers).
  BaseModel clone() const;

  // FNV-1a over all parameters; embedding rows beyond `vocab_limit` are
  // excluded so a checksum taken before vocabulary expansion stays
  // comparable afterwards.
  std::uint64_t checksum(std::optional<std::size_t> vocab_limit = std::nullopt) const;

  void save(const std::string& path) const;
  static BaseModel load(const std::string& path);
};

// Forward through all encoder layers, returning every layer output.
// Hooks are applied only at layers > config.n_lp_split (1-based).
EncoderStates encode(const BaseModel& m, const Tensor& features,
                     const AdaptationHooks* hooks = nullptr);

// Log-probs [T', vocab+1] from the top encoder state; prompt frames are
// dropped so CTC target timing is unaffected by input composition.
Tensor ctc_log_probs(const BaseModel& m, const EncoderStates& states,
                     const AdaptationHooks* hooks = nullptr);

// Teacher-forced decoder logits: rows predict target[0..U-1] then EOS, so
// the result is [U+1, vocab]. Cross-attention runs over the full (normed)
// top encoder state, prompt frames included.
Tensor decode_teacher_forced(const BaseModel& m, const EncoderStates& states,
                             const std::vector<int>& target,
                             const AdaptationHooks* hooks = nullptr);

Tensor hybrid_loss(const Tensor& ctc_nll_term, const Tensor& att_nll_term,
                   double lambda_ctc);

// Per-frame argmax, collapse repeats, drop blanks.
std::vector<int> greedy_ctc_decode(const Tensor& log_probs);

// Hybrid per-utterance loss (terms normalized per target token).
struct UtteranceLoss {
  Tensor total;
  double ctc_value = 0.0;
  double att_value = 0.0;
};
UtteranceLoss utterance_loss(const BaseModel& m, const Tensor& features,
                             const std::vector<int>& target,
                             const AdaptationHooks* hooks = nullptr);

}  // namespace pele

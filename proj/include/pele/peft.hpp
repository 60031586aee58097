#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "pele/model.hpp"
#include "pele/tensor.hpp"

namespace pele {

enum class PeftKind { BitFit, LoRA, LoRAStar, Mask, MaskLoRAStar, Adapter, Prompt };

const char* to_string(PeftKind k);
PeftKind peft_kind_from_string(const std::string& s);

// Per-kind hyperparameters. Desk defaults; the paper-scale preset keeps the
// published values (r=32, boost 128, bottleneck 256, 20 prompt tokens).
struct PeftConfig {
  PeftKind kind = PeftKind::Adapter;
  int lora_rank = 4;
  int lora_boost_rank = 8;   // LoRA*: rank for attention output + FF down-projection
  double mask_tau = 0.05;
  int adapter_bottleneck = 32;
  int prompt_tokens = 8;
  int vocab_rank = 4;
  bool vocab_full = false;   // dense vocab delta instead of the low-rank pair

  static PeftConfig paper_scale(PeftKind k);

  void validate() const;
  nlohmann::json to_json() const;
  static PeftConfig from_json(const nlohmann::json& j);
};

// Attachment point of one module.
struct PeftSite {
  enum class Slot { Weight, Bias, PostAttn, PostFf, Input };
  Slot slot = Slot::Weight;
  Section section = Section::Encoder;
  int layer = 0;  // 1-based; unused for Input
  ParamRole role = ParamRole::AttnQ;  // meaningful for Weight only

  std::string name() const;
  bool operator==(const PeftSite&) const = default;
};

// One add-on module: a weight recomposition (LoRA family / mask), a residual
// bottleneck, a bias delta set, or a prompt. Freshly created modules are
// exact no-ops in forward.
struct PeftModule {
  PeftKind kind = PeftKind::Adapter;
  PeftSite site;
  double mask_tau = 0.05;

  // LoRA family: dW = lora_b * lora_a; Ws = ones + ws_u * ws_v.
  Tensor lora_a, lora_b, ws_u, ws_v;
  // Mask family: learnable pre-threshold matrix.
  Tensor mask_m;
  // Adapter: h + relu(h*w_down + b_down)*w_up + b_up.
  Tensor w_down, b_down, w_up, b_up;
  // Prompt: [n_tokens, d_feat] rows prepended to the features.
  Tensor prompt;
  // BitFit: additive deltas keyed by the bias role they shift.
  std::vector<std::pair<ParamRole, Tensor>> bias_deltas;

  std::vector<Tensor> trainable() const;
  std::vector<std::pair<std::string, Tensor>> named_tensors() const;
  std::size_t param_count() const;
};

// Shapes of the weight matrix a role designates (input x output layout).
std::pair<std::size_t, std::size_t> role_weight_dims(const ModelConfig& cfg, ParamRole role);
std::size_t role_bias_dim(const ModelConfig& cfg, ParamRole role);

// Bias roles BitFit covers for a layer of the given section.
std::vector<ParamRole> bitfit_roles(Section section);

// All attachment sites for a kind under the adaptation policy: encoder
// layers above n_lp_split, every decoder layer, and (for Prompt) the input.
std::vector<PeftSite> adaptation_sites(const ModelConfig& cfg, PeftKind kind);

// Builds a fresh (no-op) module for the site.
PeftModule make_module(const PeftConfig& pc, const PeftSite& site,
                       const ModelConfig& cfg, Rng& rng);

// Composed effective weight for the LoRA/mask families. W0 never receives
// gradient (it is a frozen base parameter).
Tensor effective_weight(const Tensor& w0, const PeftModule& module);

// Forward binary threshold on sigmoid(m) with straight-through backward.
Tensor binarize_mask(const Tensor& m, double tau);

// Residual bottleneck outputs.
Tensor adapter_delta(const Tensor& h, const PeftModule& module);
Tensor apply_adapter(const Tensor& h, const PeftModule& module);

Tensor apply_prompt(const Tensor& features, const PeftModule& module);

// b0 + delta for the matching role; b0 untouched when the module holds no
// delta for it.
Tensor apply_bitfit(const Tensor& b0, ParamRole role, const PeftModule& module);

}  // namespace pele

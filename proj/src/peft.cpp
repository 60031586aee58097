#include "pele/peft.hpp"

#include <cmath>

namespace pele {

const char* to_string(PeftKind k) {
  switch (k) {
    case PeftKind::BitFit: return "bitfit";
    case PeftKind::LoRA: return "lora";
    case PeftKind::LoRAStar: return "lora_star";
    case PeftKind::Mask: return "mask";
    case PeftKind::MaskLoRAStar: return "mask_lora_star";
    case PeftKind::Adapter: return "adapter";
    case PeftKind::Prompt: return "prompt";
  }
  return "?";
}

PeftKind peft_kind_from_string(const std::string& s) {
  for (PeftKind k : {PeftKind::BitFit, PeftKind::LoRA, PeftKind::LoRAStar, PeftKind::Mask,
                     PeftKind::MaskLoRAStar, PeftKind::Adapter, PeftKind::Prompt}) {
    if (s == to_string(k)) return k;
  }
  throw ConfigError("unknown peft kind: " + s);
}

PeftConfig PeftConfig::paper_scale(PeftKind k) {
  PeftConfig c;
  c.kind = k;
  c.lora_rank = 32;
  c.lora_boost_rank = 128;
  c.adapter_bottleneck = 256;
  c.prompt_tokens = 20;
  c.vocab_rank = 32;
  return c;
}

void PeftConfig::validate() const {
  if (lora_rank < 1 || lora_boost_rank < 1) throw ConfigError("lora rank must be >= 1");
  if (mask_tau <= 0.0 || mask_tau >= 1.0) throw ConfigError("mask_tau must be in (0,1)");
  if (adapter_bottleneck < 1) throw ConfigError("adapter_bottleneck must be >= 1");
  if (prompt_tokens < 0) throw ConfigError("prompt_tokens must be >= 0");
  if (vocab_rank < 1) throw ConfigError("vocab_rank must be >= 1");
}

nlohmann::json PeftConfig::to_json() const {
  return nlohmann::json{{"kind", to_string(kind)},
                        {"lora_rank", lora_rank},
                        {"lora_boost_rank", lora_boost_rank},
                        {"mask_tau", mask_tau},
                        {"adapter_bottleneck", adapter_bottleneck},
                        {"prompt_tokens", prompt_tokens},
                        {"vocab_rank", vocab_rank},
                        {"vocab_full", vocab_full}};
}

PeftConfig PeftConfig::from_json(const nlohmann::json& j) {
  PeftConfig c;
  c.kind = peft_kind_from_string(j.value("kind", std::string(to_string(c.kind))));
  c.lora_rank = j.value("lora_rank", c.lora_rank);
  c.lora_boost_rank = j.value("lora_boost_rank", c.lora_boost_rank);
  c.mask_tau = j.value("mask_tau", c.mask_tau);
  c.adapter_bottleneck = j.value("adapter_bottleneck", c.adapter_bottleneck);
  c.prompt_tokens = j.value("prompt_tokens", c.prompt_tokens);
  c.vocab_rank = j.value("vocab_rank", c.vocab_rank);
  c.vocab_full = j.value("vocab_full", c.vocab_full);
  c.validate();
  return c;
}

std::string PeftSite::name() const {
  switch (slot) {
    case Slot::Input:
      return "input";
    case Slot::Bias:
      return std::string(to_string(section)) + "." + std::to_string(layer) + ".bias";
    case Slot::PostAttn:
      return std::string(to_string(section)) + "." + std::to_string(layer) + ".post_attn";
    case Slot::PostFf:
      return std::string(to_string(section)) + "." + std::to_string(layer) + ".post_ff";
    case Slot::Weight:
      return std::string(to_string(section)) + "." + std::to_string(layer) + "." +
             to_string(role);
  }
  return "?";
}

std::vector<Tensor> PeftModule::trainable() const {
  std::vector<Tensor> out;
  for (auto& [name, t] : named_tensors()) out.push_back(t);
  return out;
}

std::vector<std::pair<std::string, Tensor>> PeftModule::named_tensors() const {
  std::vector<std::pair<std::string, Tensor>> out;
  const std::string p = site.name();
  auto push = [&](const char* suffix, const Tensor& t) {
    if (t.defined()) out.emplace_back(p + "." + suffix, t);
  };
  push("lora_a", lora_a);
  push("lora_b", lora_b);
  push("ws_u", ws_u);
  push("ws_v", ws_v);
  push("mask_m", mask_m);
  push("w_down", w_down);
  push("b_down", b_down);
  push("w_up", w_up);
  push("b_up", b_up);
  push("prompt", prompt);
  for (auto& [role, t] : bias_deltas) {
    out.emplace_back(p + ".d_" + std::string(to_string(role)), t);
  }
  return out;
}

std::size_t PeftModule::param_count() const {
  std::size_t n = 0;
  for (auto& [name, t] : named_tensors()) n += t.size();
  return n;
}

std::pair<std::size_t, std::size_t> role_weight_dims(const ModelConfig& cfg, ParamRole role) {
  const auto d = static_cast<std::size_t>(cfg.d_model);
  const auto f = static_cast<std::size_t>(cfg.d_ff);
  switch (role) {
    case ParamRole::FfW1: return {d, f};
    case ParamRole::FfW2: return {f, d};
    case ParamRole::LnAttn:
    case ParamRole::LnCross:
    case ParamRole::LnFf:
      throw ConfigError("layer norms have no weight matrix site");
    default: return {d, d};
  }
}

std::size_t role_bias_dim(const ModelConfig& cfg, ParamRole role) {
  if (role == ParamRole::FfW1) return static_cast<std::size_t>(cfg.d_ff);
  if (role == ParamRole::AttnK || role == ParamRole::CrossK) {
    throw ConfigError("attention keys carry no bias");
  }
  return static_cast<std::size_t>(cfg.d_model);
}

std::vector<ParamRole> bitfit_roles(Section section) {
  std::vector<ParamRole> roles = {ParamRole::AttnQ, ParamRole::AttnV, ParamRole::AttnO,
                                  ParamRole::FfW1, ParamRole::FfW2, ParamRole::LnAttn,
                                  ParamRole::LnFf};
  if (section == Section::Decoder) {
    roles.insert(roles.end(), {ParamRole::CrossQ, ParamRole::CrossV, ParamRole::CrossO,
                               ParamRole::LnCross});
  }
  return roles;
}

namespace {

std::vector<ParamRole> weight_roles(Section section) {
  std::vector<ParamRole> roles = {ParamRole::AttnQ, ParamRole::AttnK, ParamRole::AttnV,
                                  ParamRole::AttnO, ParamRole::FfW1, ParamRole::FfW2};
  if (section == Section::Decoder) {
    roles.insert(roles.end(), {ParamRole::CrossQ, ParamRole::CrossK, ParamRole::CrossV,
                               ParamRole::CrossO});
  }
  return roles;
}

bool is_weight_kind(PeftKind k) {
  return k == PeftKind::LoRA || k == PeftKind::LoRAStar || k == PeftKind::Mask ||
         k == PeftKind::MaskLoRAStar;
}

bool has_lora(PeftKind k) {
  return k == PeftKind::LoRA || k == PeftKind::LoRAStar || k == PeftKind::MaskLoRAStar;
}

bool has_mask(PeftKind k) { return k == PeftKind::Mask || k == PeftKind::MaskLoRAStar; }

// LoRA* boosts the attention output matrices and the feedforward
// down-projection.
bool boosted_role(ParamRole role) {
  return role == ParamRole::AttnO || role == ParamRole::CrossO || role == ParamRole::FfW2;
}

}  // namespace

std::vector<PeftSite> adaptation_sites(const ModelConfig& cfg, PeftKind kind) {
  std::vector<PeftSite> sites;
  auto each_layer = [&](auto&& fn) {
    for (int layer = cfg.n_lp_split + 1; layer <= cfg.n_enc_layers; ++layer) {
      fn(Section::Encoder, layer);
    }
    for (int layer = 1; layer <= cfg.n_dec_layers; ++layer) fn(Section::Decoder, layer);
  };

  if (is_weight_kind(kind)) {
    each_layer([&](Section s, int layer) {
      for (ParamRole role : weight_roles(s)) {
        sites.push_back({PeftSite::Slot::Weight, s, layer, role});
      }
    });
  } else if (kind == PeftKind::Adapter) {
    each_layer([&](Section s, int layer) {
      sites.push_back({PeftSite::Slot::PostAttn, s, layer, ParamRole::AttnQ});
      sites.push_back({PeftSite::Slot::PostFf, s, layer, ParamRole::AttnQ});
    });
  } else if (kind == PeftKind::BitFit) {
    each_layer([&](Section s, int layer) {
      sites.push_back({PeftSite::Slot::Bias, s, layer, ParamRole::AttnQ});
    });
  } else if (kind == PeftKind::Prompt) {
    sites.push_back({PeftSite::Slot::Input, Section::Encoder, 0, ParamRole::AttnQ});
  }
  return sites;
}

PeftModule make_module(const PeftConfig& pc, const PeftSite& site,
                       const ModelConfig& cfg, Rng& rng) {
  pc.validate();
  PeftModule m;
  m.kind = pc.kind;
  m.site = site;
  m.mask_tau = pc.mask_tau;

  switch (site.slot) {
    case PeftSite::Slot::Weight: {
      if (!is_weight_kind(pc.kind)) throw ConfigError("kind cannot attach to a weight site");
      auto [d_in, d_out] = role_weight_dims(cfg, site.role);
      if (has_lora(pc.kind)) {
        const auto r = static_cast<std::size_t>(
            (pc.kind != PeftKind::LoRA && boosted_role(site.role)) ? pc.lora_boost_rank
                                                                   : pc.lora_rank);
        // dW = B*A with B zero-initialized, so the update starts at zero;
        // Ws = ones + U*V with U zero for an all-ones scale.
        m.lora_a = Tensor::normal({r, d_out}, 0.0, 1.0 / std::sqrt(static_cast<double>(r)), rng)
                       .set_requires_grad(true);
        m.lora_b = Tensor::zeros({d_in, r}).set_requires_grad(true);
        m.ws_u = Tensor::zeros({d_in, r}).set_requires_grad(true);
        m.ws_v = Tensor::normal({r, d_out}, 0.0, 1.0 / std::sqrt(static_cast<double>(r)), rng)
                     .set_requires_grad(true);
      }
      if (has_mask(pc.kind)) {
        // sigmoid(m0) > tau everywhere: the fresh binary mask passes every
        // connection.
        const double m0 = std::log(pc.mask_tau / (1.0 - pc.mask_tau)) + 2.0;
        m.mask_m = Tensor::full({d_in, d_out}, m0).set_requires_grad(true);
      }
      break;
    }
    case PeftSite::Slot::PostAttn:
    case PeftSite::Slot::PostFf: {
      if (pc.kind != PeftKind::Adapter) throw ConfigError("only adapters attach post-sublayer");
      const auto d = static_cast<std::size_t>(cfg.d_model);
      const auto bn = static_cast<std::size_t>(pc.adapter_bottleneck);
      m.w_down = Tensor::normal({d, bn}, 0.0, 1.0 / std::sqrt(static_cast<double>(d)), rng)
                     .set_requires_grad(true);
      m.b_down = Tensor::zeros({bn}).set_requires_grad(true);
      // Zero up-projection keeps the residual delta at exactly zero.
      m.w_up = Tensor::zeros({bn, d}).set_requires_grad(true);
      m.b_up = Tensor::zeros({d}).set_requires_grad(true);
      break;
    }
    case PeftSite::Slot::Input: {
      if (pc.kind != PeftKind::Prompt) throw ConfigError("only prompts attach to the input");
      if (pc.prompt_tokens > 0) {
        m.prompt = Tensor::zeros({static_cast<std::size_t>(pc.prompt_tokens),
                                  static_cast<std::size_t>(cfg.d_feat)})
                       .set_requires_grad(true);
      }
      break;
    }
    case PeftSite::Slot::Bias: {
      if (pc.kind != PeftKind::BitFit) throw ConfigError("only bitfit attaches to biases");
      for (ParamRole role : bitfit_roles(site.section)) {
        m.bias_deltas.emplace_back(
            role, Tensor::zeros({role_bias_dim(cfg, role)}).set_requires_grad(true));
      }
      break;
    }
  }
  return m;
}

Tensor effective_weight(const Tensor& w0, const PeftModule& module) {
  if (!is_weight_kind(module.kind)) {
    throw ConfigError("effective_weight: module is not a weight recomposition");
  }
  Tensor w = w0;
  if (has_lora(module.kind)) {
    if (module.ws_u.rows() != w0.rows() || module.ws_v.cols() != w0.cols()) {
      throw ShapeError("effective_weight: LoRA factors do not match W0");
    }
    auto ws = add(Tensor::ones(w0.shape()), matmul(module.ws_u, module.ws_v));
    w = add(mul(w0, ws), matmul(module.lora_b, module.lora_a));
  }
  if (has_mask(module.kind)) {
    if (module.mask_m.shape() != w0.shape()) {
      throw ShapeError("effective_weight: mask does not match W0");
    }
    w = mul(w, binarize_mask(module.mask_m, module.mask_tau));
  }
  return w;
}

Tensor binarize_mask(const Tensor& m, double tau) { return ste_binarize(m, tau); }

Tensor adapter_delta(const Tensor& h, const PeftModule& module) {
  if (module.kind != PeftKind::Adapter) throw ConfigError("adapter_delta: not an adapter");
  auto mid = relu(add_rowvec(matmul(h, module.w_down), module.b_down));
  return add_rowvec(matmul(mid, module.w_up), module.b_up);
}

Tensor apply_adapter(const Tensor& h, const PeftModule& module) {
  return add(h, adapter_delta(h, module));
}

Tensor apply_prompt(const Tensor& features, const PeftModule& module) {
  if (module.kind != PeftKind::Prompt) throw ConfigError("apply_prompt: not a prompt");
  if (!module.prompt.defined()) return features;
  return concat_rows({module.prompt, features});
}

Tensor apply_bitfit(const Tensor& b0, ParamRole role, const PeftModule& module) {
  if (module.kind != PeftKind::BitFit) throw ConfigError("apply_bitfit: not bitfit");
  for (auto& [r, delta] : module.bias_deltas) {
    if (r == role) return add(b0, delta);
  }
  return b0;
}

}  // namespace pele

#include "pele/model.hpp"

#include <cmath>

#include "pele/ctc.hpp"
#include "pele/io.hpp"

namespace pele {

ModelConfig ModelConfig::desk() { return ModelConfig{}; }

ModelConfig ModelConfig::paper_shape() {
  ModelConfig c;
  c.n_enc_layers = 12;
  c.n_dec_layers = 6;
  c.d_model = 512;
  c.n_heads = 8;
  c.d_ff = 2048;
  c.d_feat = 80;
  c.vocab_size = 8192;
  c.max_vocab = 16384;
  c.n_lp_split = 6;
  return c;
}

void ModelConfig::validate() const {
  if (n_enc_layers < 2) throw ConfigError("n_enc_layers must be >= 2");
  if (n_dec_layers < 1) throw ConfigError("n_dec_layers must be >= 1");
  if (n_lp_split < 1 || n_lp_split >= n_enc_layers) {
    throw ConfigError("n_lp_split must satisfy 1 <= n_lp_split < n_enc_layers");
  }
  if (d_model <= 0 || n_heads <= 0 || d_model % n_heads != 0) {
    throw ConfigError("d_model must be a positive multiple of n_heads");
  }
  if (d_ff <= 0 || d_feat <= 0) throw ConfigError("d_ff and d_feat must be positive");
  if (lambda_ctc < 0.0 || lambda_ctc > 1.0) throw ConfigError("lambda_ctc must be in [0,1]");
  if (vocab_size <= kNumReservedTokens) throw ConfigError("vocab_size too small");
  if (max_vocab < vocab_size) throw ConfigError("max_vocab below vocab_size");
  if (max_frames <= 0) throw ConfigError("max_frames must be positive");
}

nlohmann::json ModelConfig::to_json() const {
  return nlohmann::json{
      {"n_enc_layers", n_enc_layers}, {"n_dec_layers", n_dec_layers},
      {"d_model", d_model},           {"n_heads", n_heads},
      {"d_ff", d_ff},                 {"d_feat", d_feat},
      {"vocab_size", vocab_size},     {"max_vocab", max_vocab},
      {"n_lp_split", n_lp_split},     {"lambda_ctc", lambda_ctc},
      {"max_frames", max_frames}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.n_enc_layers = j.value("n_enc_layers", c.n_enc_layers);
  c.n_dec_layers = j.value("n_dec_layers", c.n_dec_layers);
  c.d_model = j.value("d_model", c.d_model);
  c.n_heads = j.value("n_heads", c.n_heads);
  c.d_ff = j.value("d_ff", c.d_ff);
  c.d_feat = j.value("d_feat", c.d_feat);
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  c.max_vocab = j.value("max_vocab", c.max_vocab);
  c.n_lp_split = j.value("n_lp_split", c.n_lp_split);
  c.lambda_ctc = j.value("lambda_ctc", c.lambda_ctc);
  c.max_frames = j.value("max_frames", c.max_frames);
  c.validate();
  return c;
}

const char* to_string(Section s) {
  return s == Section::Encoder ? "enc" : "dec";
}

const char* to_string(ParamRole r) {
  switch (r) {
    case ParamRole::AttnQ: return "attn.wq";
    case ParamRole::AttnK: return "attn.wk";
    case ParamRole::AttnV: return "attn.wv";
    case ParamRole::AttnO: return "attn.wo";
    case ParamRole::CrossQ: return "cross.wq";
    case ParamRole::CrossK: return "cross.wk";
    case ParamRole::CrossV: return "cross.wv";
    case ParamRole::CrossO: return "cross.wo";
    case ParamRole::FfW1: return "ff.w1";
    case ParamRole::FfW2: return "ff.w2";
    case ParamRole::LnAttn: return "ln_attn";
    case ParamRole::LnCross: return "ln_cross";
    case ParamRole::LnFf: return "ln_ff";
  }
  return "?";
}

namespace {

Tensor init_weight(std::size_t d_in, std::size_t d_out, Rng& rng) {
  return Tensor::normal({d_in, d_out}, 0.0, 1.0 / std::sqrt(static_cast<double>(d_in)), rng);
}

AttentionParams init_attention(int d_model, Rng& rng) {
  AttentionParams p;
  const auto d = static_cast<std::size_t>(d_model);
  p.wq = init_weight(d, d, rng);
  p.bq = Tensor::zeros({d});
  p.wk = init_weight(d, d, rng);
  p.wv = init_weight(d, d, rng);
  p.bv = Tensor::zeros({d});
  p.wo = init_weight(d, d, rng);
  p.bo = Tensor::zeros({d});
  return p;
}

FeedForwardParams init_ff(int d_model, int d_ff, Rng& rng) {
  FeedForwardParams p;
  p.w1 = init_weight(d_model, d_ff, rng);
  p.b1 = Tensor::zeros({static_cast<std::size_t>(d_ff)});
  p.w2 = init_weight(d_ff, d_model, rng);
  p.b2 = Tensor::zeros({static_cast<std::size_t>(d_model)});
  return p;
}

LayerNormParams init_ln(int d_model) {
  LayerNormParams p;
  p.gain = Tensor::ones({static_cast<std::size_t>(d_model)});
  p.bias = Tensor::zeros({static_cast<std::size_t>(d_model)});
  return p;
}

// Sinusoidal absolute positions, [t_len, d].
Tensor positional_encoding(std::size_t t_len, int d) {
  std::vector<double> v(t_len * static_cast<std::size_t>(d));
  for (std::size_t pos = 0; pos < t_len; ++pos) {
    for (int i = 0; i < d; i += 2) {
      const double angle = static_cast<double>(pos) /
                           std::pow(10000.0, static_cast<double>(i) / d);
      v[pos * d + i] = std::sin(angle);
      if (i + 1 < d) v[pos * d + i + 1] = std::cos(angle);
    }
  }
  return Tensor::from({t_len, static_cast<std::size_t>(d)}, std::move(v));
}

Tensor causal_mask(std::size_t u) {
  std::vector<double> v(u * u, 0.0);
  for (std::size_t i = 0; i < u; ++i)
    for (std::size_t j = i + 1; j < u; ++j) v[i * u + j] = -1e30;
  return Tensor::from({u, u}, std::move(v));
}

struct HookCtx {
  const AdaptationHooks* hooks = nullptr;
  Section section = Section::Encoder;
  int layer = 0;

  Tensor w(ParamRole role, const Tensor& w0) const {
    return hooks ? hooks->weight(section, layer, role, w0) : w0;
  }
  Tensor b(ParamRole role, const Tensor& b0) const {
    return hooks ? hooks->bias(section, layer, role, b0) : b0;
  }
  Tensor delta(SublayerSite site, const Tensor& h) const {
    return hooks ? hooks->sublayer_delta(section, layer, site, h) : Tensor();
  }
};

struct AttnRoles {
  ParamRole q, k, v, o;
};
constexpr AttnRoles kSelfRoles{ParamRole::AttnQ, ParamRole::AttnK, ParamRole::AttnV,
                               ParamRole::AttnO};
constexpr AttnRoles kCrossRoles{ParamRole::CrossQ, ParamRole::CrossK, ParamRole::CrossV,
                                ParamRole::CrossO};

Tensor multi_head_attention(const Tensor& q_in, const Tensor& kv_in,
                            const AttentionParams& p, const HookCtx& ctx,
                            const AttnRoles& roles, int n_heads, bool causal) {
  const std::size_t d = q_in.cols();
  const std::size_t dh = d / static_cast<std::size_t>(n_heads);
  auto q = add_rowvec(matmul(q_in, ctx.w(roles.q, p.wq)), ctx.b(roles.q, p.bq));
  auto k = matmul(kv_in, ctx.w(roles.k, p.wk));
  auto v = add_rowvec(matmul(kv_in, ctx.w(roles.v, p.wv)), ctx.b(roles.v, p.bv));

  Tensor mask;
  if (causal) mask = causal_mask(q.rows());

  std::vector<Tensor> heads;
  heads.reserve(static_cast<std::size_t>(n_heads));
  for (int h = 0; h < n_heads; ++h) {
    const std::size_t c0 = static_cast<std::size_t>(h) * dh;
    auto qh = slice_cols(q, c0, c0 + dh);
    auto kh = slice_cols(k, c0, c0 + dh);
    auto vh = slice_cols(v, c0, c0 + dh);
    auto scores = scale(matmul(qh, transpose(kh)), 1.0 / std::sqrt(static_cast<double>(dh)));
    if (causal) scores = add(scores, mask);
    heads.push_back(matmul(softmax(scores, 1), vh));
  }
  auto ctxv = concat_cols(heads);
  return add_rowvec(matmul(ctxv, ctx.w(roles.o, p.wo)), ctx.b(roles.o, p.bo));
}

Tensor feed_forward(const Tensor& x, const FeedForwardParams& p, const HookCtx& ctx) {
  auto h = gelu(add_rowvec(matmul(x, ctx.w(ParamRole::FfW1, p.w1)),
                           ctx.b(ParamRole::FfW1, p.b1)));
  return add_rowvec(matmul(h, ctx.w(ParamRole::FfW2, p.w2)),
                    ctx.b(ParamRole::FfW2, p.b2));
}

Tensor encoder_layer_forward(const BaseModel& m, int layer_1b, const Tensor& h_in,
                             const AdaptationHooks* hooks) {
  const EncoderLayer& layer = m.encoder[static_cast<std::size_t>(layer_1b - 1)];
  HookCtx ctx{hooks, Section::Encoder, layer_1b};

  auto a_in = layer_norm(h_in, layer.ln_attn.gain, ctx.b(ParamRole::LnAttn, layer.ln_attn.bias));
  auto h = add(h_in, multi_head_attention(a_in, a_in, layer.attn, ctx, kSelfRoles,
                                          m.config.n_heads, false));
  if (auto d = ctx.delta(SublayerSite::PostAttn, h); d.defined()) h = add(h, d);

  auto f_in = layer_norm(h, layer.ln_ff.gain, ctx.b(ParamRole::LnFf, layer.ln_ff.bias));
  h = add(h, feed_forward(f_in, layer.ff, ctx));
  if (auto d = ctx.delta(SublayerSite::PostFf, h); d.defined()) h = add(h, d);
  return h;
}

Tensor decoder_layer_forward(const BaseModel& m, int layer_1b, const Tensor& h_in,
                             const Tensor& memory, const AdaptationHooks* hooks) {
  const DecoderLayer& layer = m.decoder[static_cast<std::size_t>(layer_1b - 1)];
  HookCtx ctx{hooks, Section::Decoder, layer_1b};

  auto s_in = layer_norm(h_in, layer.ln_self.gain, ctx.b(ParamRole::LnAttn, layer.ln_self.bias));
  auto h = add(h_in, multi_head_attention(s_in, s_in, layer.self_attn, ctx, kSelfRoles,
                                          m.config.n_heads, true));
  if (auto d = ctx.delta(SublayerSite::PostAttn, h); d.defined()) h = add(h, d);

  auto c_in = layer_norm(h, layer.ln_cross.gain, ctx.b(ParamRole::LnCross, layer.ln_cross.bias));
  h = add(h, multi_head_attention(c_in, memory, layer.cross_attn, ctx, kCrossRoles,
                                  m.config.n_heads, false));

  auto f_in = layer_norm(h, layer.ln_ff.gain, ctx.b(ParamRole::LnFf, layer.ln_ff.bias));
  h = add(h, feed_forward(f_in, layer.ff, ctx));
  if (auto d = ctx.delta(SublayerSite::PostFf, h); d.defined()) h = add(h, d);
  return h;
}

}  // namespace

BaseModel BaseModel::init(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  BaseModel m;
  m.config = cfg;
  m.w_in = init_weight(cfg.d_feat, cfg.d_model, rng);
  m.b_in = Tensor::zeros({static_cast<std::size_t>(cfg.d_model)});
  for (int i = 0; i < cfg.n_enc_layers; ++i) {
    EncoderLayer layer;
    layer.ln_attn = init_ln(cfg.d_model);
    layer.attn = init_attention(cfg.d_model, rng);
    layer.ln_ff = init_ln(cfg.d_model);
    layer.ff = init_ff(cfg.d_model, cfg.d_ff, rng);
    m.encoder.push_back(std::move(layer));
  }
  m.enc_norm = init_ln(cfg.d_model);
  for (int i = 0; i < cfg.n_dec_layers; ++i) {
    DecoderLayer layer;
    layer.ln_self = init_ln(cfg.d_model);
    layer.self_attn = init_attention(cfg.d_model, rng);
    layer.ln_cross = init_ln(cfg.d_model);
    layer.cross_attn = init_attention(cfg.d_model, rng);
    layer.ln_ff = init_ln(cfg.d_model);
    layer.ff = init_ff(cfg.d_model, cfg.d_ff, rng);
    m.decoder.push_back(std::move(layer));
  }
  m.dec_norm = init_ln(cfg.d_model);
  m.embedding = Tensor::normal({static_cast<std::size_t>(cfg.vocab_size),
                                static_cast<std::size_t>(cfg.d_model)},
                               0.0, 1.0 / std::sqrt(static_cast<double>(cfg.d_model)), rng);
  m.ctc_blank = Tensor::normal({static_cast<std::size_t>(cfg.d_model), 1}, 0.0,
                               1.0 / std::sqrt(static_cast<double>(cfg.d_model)), rng);
  m.set_frozen(false);
  return m;
}

std::vector<std::pair<std::string, Tensor>> BaseModel::named_parameters() const {
  std::vector<std::pair<std::string, Tensor>> out;
  auto push_ln = [&](const std::string& prefix, const LayerNormParams& p) {
    out.emplace_back(prefix + ".gain", p.gain);
    out.emplace_back(prefix + ".bias", p.bias);
  };
  auto push_attn = [&](const std::string& prefix, const AttentionParams& p) {
    out.emplace_back(prefix + ".wq", p.wq);
    out.emplace_back(prefix + ".bq", p.bq);
    out.emplace_back(prefix + ".wk", p.wk);
    out.emplace_back(prefix + ".wv", p.wv);
    out.emplace_back(prefix + ".bv", p.bv);
    out.emplace_back(prefix + ".wo", p.wo);
    out.emplace_back(prefix + ".bo", p.bo);
  };
  auto push_ff = [&](const std::string& prefix, const FeedForwardParams& p) {
    out.emplace_back(prefix + ".w1", p.w1);
    out.emplace_back(prefix + ".b1", p.b1);
    out.emplace_back(prefix + ".w2", p.w2);
    out.emplace_back(prefix + ".b2", p.b2);
  };

  out.emplace_back("w_in", w_in);
  out.emplace_back("b_in", b_in);
  for (std::size_t i = 0; i < encoder.size(); ++i) {
    const std::string p = "enc." + std::to_string(i);
    push_ln(p + ".ln_attn", encoder[i].ln_attn);
    push_attn(p + ".attn", encoder[i].attn);
    push_ln(p + ".ln_ff", encoder[i].ln_ff);
    push_ff(p + ".ff", encoder[i].ff);
  }
  push_ln("enc_norm", enc_norm);
  for (std::size_t i = 0; i < decoder.size(); ++i) {
    const std::string p = "dec." + std::to_string(i);
    push_ln(p + ".ln_self", decoder[i].ln_self);
    push_attn(p + ".self_attn", decoder[i].self_attn);
    push_ln(p + ".ln_cross", decoder[i].ln_cross);
    push_attn(p + ".cross_attn", decoder[i].cross_attn);
    push_ln(p + ".ln_ff", decoder[i].ln_ff);
    push_ff(p + ".ff", decoder[i].ff);
  }
  push_ln("dec_norm", dec_norm);
  out.emplace_back("embedding", embedding);
  out.emplace_back("ctc_blank", ctc_blank);
  return out;
}

std::vector<Tensor> BaseModel::parameters() const {
  std::vector<Tensor> out;
  for (auto& [name, t] : named_parameters()) out.push_back(t);
  return out;
}

void BaseModel::set_frozen(bool flag) {
  frozen = flag;
  for (auto& t : parameters()) t.set_requires_grad(!flag);
}

BaseModel BaseModel::clone() const {
  Rng dummy(0);
  BaseModel c = BaseModel::init(config, dummy);
  auto src = named_parameters();
  auto dst = c.named_parameters();
  for (std::size_t i = 0; i < src.size(); ++i) {
    if (src[i].first == "embedding") {
      c.embedding = src[i].second.clone();
      continue;
    }
    Tensor t = dst[i].second;
    t.values() = src[i].second.values();
  }
  c.set_frozen(frozen);
  return c;
}

std::uint64_t BaseModel::checksum(std::optional<std::size_t> vocab_limit) const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& [name, t] : named_parameters()) {
    if (name == "embedding" && vocab_limit.has_value()) {
      const std::size_t rows = std::min(*vocab_limit, t.rows());
      std::vector<double> head(t.values().begin(),
                               t.values().begin() + rows * t.cols());
      h = fnv1a_doubles(head, h);
    } else {
      h = fnv1a_doubles(t.values(), h);
    }
  }
  return h;
}

void BaseModel::save(const std::string& path) const {
  nlohmann::json meta;
  meta["config"] = config.to_json();
  meta["vocab_size"] = vocab_size();
  std::vector<NamedTensor> params;
  for (auto& [name, t] : named_parameters()) params.push_back({name, t});
  write_artifact(path, "base-model", meta, params);
}

BaseModel BaseModel::load(const std::string& path) {
  Artifact art = read_artifact(path);
  if (art.kind != "base-model") throw IoError("artifact is not a base model: " + path);
  ModelConfig cfg = ModelConfig::from_json(art.meta.at("config"));
  Rng dummy(0);
  BaseModel m = BaseModel::init(cfg, dummy);
  auto named = m.named_parameters();
  if (named.size() != art.params.size()) throw IoError("parameter count mismatch in " + path);
  for (std::size_t i = 0; i < named.size(); ++i) {
    if (art.params[i].name != named[i].first) {
      throw IoError("parameter order mismatch at " + art.params[i].name);
    }
    if (named[i].first == "embedding") {
      // The stored table may be taller than the freshly initialized one:
      // the vocabulary grows over extensions.
      m.embedding = art.params[i].tensor;
      continue;
    }
    Tensor dst = named[i].second;
    if (art.params[i].tensor.shape() != dst.shape()) {
      throw IoError("parameter shape mismatch at " + art.params[i].name);
    }
    dst.values() = art.params[i].tensor.values();
  }
  m.set_frozen(false);
  return m;
}

EncoderStates encode(const BaseModel& m, const Tensor& features,
                     const AdaptationHooks* hooks) {
  if (features.rank() != 2 || features.cols() != static_cast<std::size_t>(m.config.d_feat)) {
    throw ShapeError("encode: features must be [T, d_feat]");
  }
  Tensor x = hooks ? hooks->adapt_input(features) : features;
  if (x.rows() > static_cast<std::size_t>(m.config.max_frames)) {
    throw ShapeError("encode: sequence exceeds max_frames");
  }

  EncoderStates states;
  states.prompt_frames = hooks ? hooks->prompt_frames() : 0;

  auto h = add(add_rowvec(matmul(x, m.w_in), m.b_in),
               positional_encoding(x.rows(), m.config.d_model));
  for (int layer = 1; layer <= m.config.n_enc_layers; ++layer) {
    const AdaptationHooks* layer_hooks = (layer > m.config.n_lp_split) ? hooks : nullptr;
    h = encoder_layer_forward(m, layer, h, layer_hooks);
    states.h.push_back(h);
  }
  return states;
}

namespace {

Tensor encoder_memory(const BaseModel& m, const EncoderStates& states) {
  return layer_norm(states.top(), m.enc_norm.gain, m.enc_norm.bias);
}

}  // namespace

Tensor ctc_log_probs(const BaseModel& m, const EncoderStates& states,
                     const AdaptationHooks* hooks) {
  auto h = encoder_memory(m, states);
  if (states.prompt_frames > 0) {
    if (states.prompt_frames >= h.rows()) throw ShapeError("prompt swallowed all frames");
    h = slice_rows(h, states.prompt_frames, h.rows());
  }
  const Tensor e = hooks ? hooks->embedding(m.embedding) : m.embedding;
  auto logits = concat_cols({matmul(h, transpose(e)), matmul(h, m.ctc_blank)});
  return log_softmax(logits, 1);
}

Tensor decode_teacher_forced(const BaseModel& m, const EncoderStates& states,
                             const std::vector<int>& target,
                             const AdaptationHooks* hooks) {
  const Tensor e = hooks ? hooks->embedding(m.embedding) : m.embedding;
  const int vocab = static_cast<int>(e.rows());
  std::vector<int> ids;
  ids.reserve(target.size() + 1);
  ids.push_back(kSosToken);
  for (int t : target) {
    if (t < 0 || t >= vocab) throw ShapeError("decode: token id out of range");
    ids.push_back(t);
  }

  auto h = add(scale(embed_rows(e, ids), std::sqrt(static_cast<double>(m.config.d_model))),
               positional_encoding(ids.size(), m.config.d_model));
  auto memory = encoder_memory(m, states);
  for (int layer = 1; layer <= m.config.n_dec_layers; ++layer) {
    h = decoder_layer_forward(m, layer, h, memory, hooks);
  }
  h = layer_norm(h, m.dec_norm.gain, m.dec_norm.bias);
  return matmul(h, transpose(e));
}

Tensor hybrid_loss(const Tensor& ctc_nll_term, const Tensor& att_nll_term,
                   double lambda_ctc) {
  if (lambda_ctc < 0.0 || lambda_ctc > 1.0) throw ConfigError("lambda_ctc must be in [0,1]");
  if (!ctc_nll_term.is_scalar() || !att_nll_term.is_scalar()) {
    throw ShapeError("hybrid_loss expects scalar terms");
  }
  return add(scale(ctc_nll_term, lambda_ctc), scale(att_nll_term, 1.0 - lambda_ctc));
}

std::vector<int> greedy_ctc_decode(const Tensor& log_probs) {
  if (log_probs.rank() != 2) throw ShapeError("greedy_ctc_decode expects [T, V+1]");
  const std::size_t t_len = log_probs.rows();
  const std::size_t n = log_probs.cols();
  const auto& v = log_probs.values();
  std::vector<int> frames(t_len);
  for (std::size_t t = 0; t < t_len; ++t) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < n; ++k) {
      if (v[t * n + k] > v[t * n + best]) best = k;
    }
    frames[t] = static_cast<int>(best);
  }
  return ctc_collapse(frames, static_cast<int>(n) - 1);
}

UtteranceLoss utterance_loss(const BaseModel& m, const Tensor& features,
                             const std::vector<int>& target,
                             const AdaptationHooks* hooks) {
  auto states = encode(m, features, hooks);
  auto clp = ctc_log_probs(m, states, hooks);
  auto ctc = ctc_nll(clp, target);
  if (!ctc.feasible) {
    throw NumericError("CTC-infeasible target (longer than usable frames)");
  }

  auto logits = decode_teacher_forced(m, states, target, hooks);
  std::vector<int> shifted = target;
  shifted.push_back(kEosToken);
  auto att = pick_nll_sum(log_softmax(logits, 1), shifted);

  const double norm = 1.0 / static_cast<double>(shifted.size());
  UtteranceLoss out;
  out.ctc_value = ctc.loss.item() * norm;
  out.att_value = att.item() * norm;
  out.total = hybrid_loss(scale(ctc.loss, norm), scale(att, norm), m.config.lambda_ctc);
  return out;
}

}  // namespace pele

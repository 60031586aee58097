#include <doctest.h>

#include <cmath>
#include <cstdio>

#include "pele/extension.hpp"
#include "pele/harness.hpp"
#include "pele/io.hpp"

using namespace pele;

namespace {

// Small but full-featured fixture: 3 base languages, 2 new ones, tiny model.
struct Fixture {
  ExperimentConfig cfg;
  World world;
  BaseModel base;

  Fixture() : cfg(make_config()), world(build_world(cfg)), base(make_base(cfg)) {}

  static ExperimentConfig make_config() {
    ExperimentConfig cfg;
    cfg.model.n_enc_layers = 3;
    cfg.model.n_dec_layers = 1;
    cfg.model.d_model = 16;
    cfg.model.n_heads = 2;
    cfg.model.d_ff = 32;
    cfg.model.d_feat = 8;
    cfg.model.n_lp_split = 1;
    cfg.data.synth.d_feat = 8;
    cfg.data.synth.tokens_per_lang = 6;
    cfg.data.n_base_langs = 3;
    cfg.data.base_train = 8;
    cfg.data.base_dev = 2;
    cfg.data.base_test = 4;
    cfg.data.new_train_sizes = {8, 8};
    cfg.data.new_dev = 2;
    cfg.data.new_test = 4;
    cfg.n_new_langs = 2;
    cfg.peft.adapter_bottleneck = 8;
    cfg.peft.prompt_tokens = 3;
    cfg.normalize_vocab();
    return cfg;
  }

  BaseModel make_base(const ExperimentConfig& c) {
    Rng rng(1);
    auto m = BaseModel::init(c.model, rng);
    m.set_frozen(true);
    return m;
  }

  const VocabRegistry::Entry& new_entry(int i) {
    return *world.registry.find(world.new_specs[static_cast<std::size_t>(i)].id);
  }
};

bool same_values(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() && a.values() == b.values();
}

}  // namespace

TEST_CASE("expand_vocab appends rows and preserves the prefix bitwise") {
  Fixture f;
  const auto before = f.base.embedding.clone();
  const int v0 = f.base.vocab_size();
  Rng rng(9);
  expand_vocab(f.base, f.new_entry(0), rng);
  CHECK(f.base.vocab_size() == f.new_entry(0).hi);
  for (int i = 0; i < v0; ++i) {
    for (std::size_t j = 0; j < before.cols(); ++j) {
      CHECK(f.base.embedding.at(static_cast<std::size_t>(i), j) ==
            before.at(static_cast<std::size_t>(i), j));
    }
  }
  // Frozen flag carries over to the grown table.
  CHECK_FALSE(f.base.embedding.requires_grad());

  // Ranges must be expanded in order.
  Fixture g;
  Rng rng2(9);
  CHECK_THROWS_AS(expand_vocab(g.base, g.new_entry(1), rng2), ConfigError);

  VocabRegistry::Entry degenerate{"d", g.base.vocab_size(), g.base.vocab_size()};
  CHECK_THROWS_AS(expand_vocab(g.base, degenerate, rng2), ConfigError);
}

TEST_CASE("alpha_from_source covers the four policies") {
  auto gt = alpha_from_source(AlphaSourceKind::GtOneHot, 4, nullptr, 0, nullptr);
  CHECK(gt.values() == std::vector<double>{1, 0, 0, 0});

  std::vector<double> post = {0.1, 0.2, 0.6, 0.1};
  auto lp = alpha_from_source(AlphaSourceKind::LpPosterior, 4, &post, std::nullopt, nullptr);
  CHECK(lp.values() == post);

  auto lp1 = alpha_from_source(AlphaSourceKind::LpOneHot, 4, &post, std::nullopt, nullptr);
  CHECK(lp1.values() == std::vector<double>{0, 0, 1, 0});

  auto learned = Tensor::from({3}, {0.2, 0.9, -0.1});
  auto gl = alpha_from_source(AlphaSourceKind::GtLearnable, 5, nullptr, 1, &learned);
  CHECK(gl.values() == std::vector<double>{0.2, 0.9, -0.1, 0.0, 0.0});

  CHECK_THROWS_AS(alpha_from_source(AlphaSourceKind::GtOneHot, 4, nullptr, std::nullopt, nullptr),
                  ConfigError);
  CHECK_THROWS_AS(
      alpha_from_source(AlphaSourceKind::LpPosterior, 4, nullptr, std::nullopt, nullptr),
      ConfigError);
}

TEST_CASE("fresh bundles leave the forward pass bitwise unchanged for all kinds") {
  Fixture f;
  Rng rng(5);
  expand_vocab(f.base, f.new_entry(0), rng);
  const auto& utt = f.world.base_data[0].test[0];
  auto pure = encode(f.base, utt.features);
  auto pure_lp = ctc_log_probs(f.base, pure);
  auto pure_dec = decode_teacher_forced(f.base, pure, utt.tokens);

  for (PeftKind kind : {PeftKind::BitFit, PeftKind::LoRA, PeftKind::LoRAStar, PeftKind::Mask,
                        PeftKind::MaskLoRAStar, PeftKind::Adapter, PeftKind::Prompt}) {
    PeftConfig pc = f.cfg.peft;
    pc.kind = kind;
    auto bundle = make_bundle(f.base, "new0", f.new_entry(0), pc, 7);
    auto alpha = AlphaVector::one_hot(2, 1);
    Mixer mixer(f.base, {&bundle}, alpha);
    auto states = encode(f.base, utt.features, &mixer);
    INFO("kind ", to_string(kind));
    REQUIRE(states.h.size() == pure.h.size());
    for (std::size_t i = 0; i < states.h.size(); ++i) {
      CHECK(same_values(states.h[i], pure.h[i]));
    }
    // The CTC head sees the extended vocabulary, but rows over the original
    // columns must agree exactly because the update is a no-op.
    auto lp = ctc_log_probs(f.base, states, &mixer);
    CHECK(lp.cols() == static_cast<std::size_t>(f.base.vocab_size() + 1));
    auto dec = decode_teacher_forced(f.base, states, utt.tokens, &mixer);
    CHECK(dec.rows() == pure_dec.rows());
    (void)pure_lp;
  }
}

TEST_CASE("alpha = e0 reverts to the exact base forward, trained or not") {
  Fixture f;
  Rng rng(5);
  expand_vocab(f.base, f.new_entry(0), rng);
  auto bundle = make_bundle(f.base, "new0", f.new_entry(0), f.cfg.peft, 7);
  // Give the bundle nonzero content as if trained.
  Rng nrng(8);
  for (auto& m : bundle.modules) {
    for (auto t : m.trainable()) {
      for (double& v : t.values()) v = nrng.normal(0.0, 0.05);
    }
  }
  for (auto t : bundle.vocab.trainable()) {
    for (double& v : t.values()) v = nrng.normal(0.0, 0.05);
  }

  const auto& utt = f.world.base_data[1].test[0];
  auto pure = encode(f.base, utt.features);

  auto alpha = AlphaVector::one_hot(2, 0);
  Mixer mixer(f.base, {&bundle}, alpha);
  auto states = encode(f.base, utt.features, &mixer);
  for (std::size_t i = 0; i < states.h.size(); ++i) {
    CHECK(same_values(states.h[i], pure.h[i]));
  }
  auto lp_pure = ctc_log_probs(f.base, pure);
  auto lp_mixed = ctc_log_probs(f.base, states, &mixer);
  CHECK(same_values(lp_pure, lp_mixed));
}

TEST_CASE("one-hot alpha equals the single-bundle path element-exact") {
  Fixture f;
  Rng rng(5);
  expand_vocab(f.base, f.new_entry(0), rng);
  expand_vocab(f.base, f.new_entry(1), rng);

  PeftConfig pc = f.cfg.peft;
  pc.kind = PeftKind::LoRAStar;
  auto b0 = make_bundle(f.base, "new0", f.new_entry(0), pc, 11);
  auto b1 = make_bundle(f.base, "new1", f.new_entry(1), pc, 12);
  Rng nrng(13);
  for (auto* b : {&b0, &b1}) {
    for (auto& m : b->modules) {
      for (auto t : m.trainable()) {
        for (double& v : t.values()) v = nrng.normal(0.0, 0.05);
      }
    }
    for (auto t : b->vocab.trainable()) {
      for (double& v : t.values()) v = nrng.normal(0.0, 0.05);
    }
  }

  const auto& utt = f.world.new_data[1].test[0];
  Mixer both(f.base, {&b0, &b1}, AlphaVector::one_hot(3, 2));
  Mixer single(f.base, {&b1}, AlphaVector::one_hot(2, 1));
  auto s_both = encode(f.base, utt.features, &both);
  auto s_single = encode(f.base, utt.features, &single);
  for (std::size_t i = 0; i < s_both.h.size(); ++i) {
    CHECK(same_values(s_both.h[i], s_single.h[i]));
  }
  auto lp_both = ctc_log_probs(f.base, s_both, &both);
  auto lp_single = ctc_log_probs(f.base, s_single, &single);
  CHECK(same_values(lp_both, lp_single));
}

TEST_CASE("adapter deltas mix linearly under soft alpha") {
  Fixture f;
  Rng rng(5);
  expand_vocab(f.base, f.new_entry(0), rng);
  expand_vocab(f.base, f.new_entry(1), rng);
  auto b0 = make_bundle(f.base, "new0", f.new_entry(0), f.cfg.peft, 21);
  auto b1 = make_bundle(f.base, "new1", f.new_entry(1), f.cfg.peft, 22);
  Rng nrng(23);
  for (auto* b : {&b0, &b1}) {
    for (auto& m : b->modules) {
      for (auto t : m.trainable()) {
        for (double& v : t.values()) v = nrng.normal(0.0, 0.2);
      }
    }
  }

  Rng hrng(24);
  auto h = Tensor::normal({5, 16}, 0.0, 1.0, hrng);
  Mixer mixer(f.base, {&b0, &b1}, AlphaVector::constants({0.0, 0.5, 0.5}));
  auto mixed = mixer.sublayer_delta(Section::Encoder, 2, SublayerSite::PostAttn, h);
  REQUIRE(mixed.defined());

  const PeftSite site{PeftSite::Slot::PostAttn, Section::Encoder, 2, ParamRole::AttnQ};
  auto d0 = adapter_delta(h, *b0.module_at(site));
  auto d1 = adapter_delta(h, *b1.module_at(site));
  for (std::size_t i = 0; i < mixed.size(); ++i) {
    const double expected = 0.5 * d0.values()[i] + 0.5 * d1.values()[i];
    CHECK(mixed.values()[i] == expected);
  }
}

TEST_CASE("additive families satisfy superposition in alpha") {
  Fixture f;
  Rng rng(5);
  expand_vocab(f.base, f.new_entry(0), rng);
  expand_vocab(f.base, f.new_entry(1), rng);
  PeftConfig pc = f.cfg.peft;
  pc.kind = PeftKind::LoRA;
  auto b0 = make_bundle(f.base, "new0", f.new_entry(0), pc, 31);
  auto b1 = make_bundle(f.base, "new1", f.new_entry(1), pc, 32);
  Rng nrng(33);
  for (auto* b : {&b0, &b1}) {
    for (auto& m : b->modules) {
      for (auto t : m.trainable()) {
        for (double& v : t.values()) v = nrng.normal(0.0, 0.1);
      }
    }
  }

  const auto& w0 = f.base.encoder[2].attn.wq;
  Rng arng(34);
  std::vector<double> a1 = {0.0, arng.uniform(), arng.uniform()};
  std::vector<double> a2 = {0.0, arng.uniform(), arng.uniform()};
  std::vector<double> asum(3);
  for (int i = 0; i < 3; ++i) asum[static_cast<std::size_t>(i)] = a1[i] + a2[i];

  Mixer m1(f.base, {&b0, &b1}, AlphaVector::constants(a1));
  Mixer m2(f.base, {&b0, &b1}, AlphaVector::constants(a2));
  Mixer ms(f.base, {&b0, &b1}, AlphaVector::constants(asum));
  auto w1 = m1.weight(Section::Encoder, 3, ParamRole::AttnQ, w0);
  auto w2 = m2.weight(Section::Encoder, 3, ParamRole::AttnQ, w0);
  auto ws = ms.weight(Section::Encoder, 3, ParamRole::AttnQ, w0);
  for (std::size_t i = 0; i < w0.size(); ++i) {
    const double lhs = ws.values()[i] - w0.values()[i];
    const double rhs = (w1.values()[i] - w0.values()[i]) + (w2.values()[i] - w0.values()[i]);
    CHECK(std::fabs(lhs - rhs) < 1e-10);
  }
}

TEST_CASE("mixed peft kinds are rejected") {
  Fixture f;
  Rng rng(5);
  expand_vocab(f.base, f.new_entry(0), rng);
  expand_vocab(f.base, f.new_entry(1), rng);
  PeftConfig pc_a = f.cfg.peft;
  PeftConfig pc_b = f.cfg.peft;
  pc_b.kind = PeftKind::LoRA;
  auto b0 = make_bundle(f.base, "new0", f.new_entry(0), pc_a, 1);
  auto b1 = make_bundle(f.base, "new1", f.new_entry(1), pc_b, 2);
  CHECK_THROWS_AS(Mixer(f.base, {&b0, &b1}, AlphaVector::one_hot(3, 1)), ConfigError);
  CHECK_THROWS_AS(Mixer(f.base, {&b0}, AlphaVector::one_hot(3, 1)), ConfigError);
}

TEST_CASE("extend_language trains a bundle without touching the base") {
  Fixture f;
  Rng rng(5);
  expand_vocab(f.base, f.new_entry(0), rng);
  const auto checksum_before = f.base.checksum();

  ExtendConfig ext;
  ext.peft = f.cfg.peft;
  ext.steps = 12;
  ext.batch_size = 4;
  ext.seed = 3;
  auto bundle = extend_language(f.base, "new0", f.world.new_data[0].train, f.new_entry(0), {},
                                ext);
  CHECK(f.base.checksum() == checksum_before);
  CHECK(bundle.meta.steps == 12);
  CHECK(bundle.param_count() > 0);
  CHECK(bundle.base_vocab_at_train == f.new_entry(0).hi);

  // Bundle parameter count is the sum of module and vocab counts.
  std::size_t total = bundle.vocab.param_count();
  for (const auto& m : bundle.modules) total += m.param_count();
  CHECK(bundle.param_count() == total);

  // Unfrozen base is rejected.
  f.base.set_frozen(false);
  CHECK_THROWS_AS(
      extend_language(f.base, "new0", f.world.new_data[0].train, f.new_entry(0), {}, ext),
      ConfigError);
  f.base.set_frozen(true);
  CHECK_THROWS_AS(extend_language(f.base, "new0", {}, f.new_entry(0), {}, ext), ConfigError);
}

TEST_CASE("bundle serialization round trips bitwise and verifies the base") {
  Fixture f;
  Rng rng(5);
  expand_vocab(f.base, f.new_entry(0), rng);
  ExtendConfig ext;
  ext.peft = f.cfg.peft;
  ext.steps = 6;
  ext.batch_size = 2;
  ext.seed = 4;
  ext.alpha_source = AlphaSourceKind::GtLearnable;
  auto bundle = extend_language(f.base, "new0", f.world.new_data[0].train, f.new_entry(0), {},
                                ext);
  const std::string path = "bundle_test.peleb";
  bundle.save(path);
  auto loaded = LanguageBundle::load(path, f.base);
  CHECK(loaded.language == bundle.language);
  CHECK(loaded.param_count() == bundle.param_count());
  CHECK(loaded.meta.final_loss == bundle.meta.final_loss);
  REQUIRE(loaded.modules.size() == bundle.modules.size());
  for (std::size_t i = 0; i < bundle.modules.size(); ++i) {
    auto a = bundle.modules[i].named_tensors();
    auto b = loaded.modules[i].named_tensors();
    REQUIRE(a.size() == b.size());
    for (std::size_t t = 0; t < a.size(); ++t) {
      CHECK(a[t].first == b[t].first);
      CHECK(a[t].second.values() == b[t].second.values());
    }
  }
  CHECK(loaded.alpha_learned.defined());
  CHECK(loaded.alpha_learned.values() == bundle.alpha_learned.values());

  // A different base is refused.
  Rng other_rng(99);
  auto other = BaseModel::init(f.cfg.model, other_rng);
  Rng vr(5);
  expand_vocab(other, f.new_entry(0), vr);
  CHECK_THROWS_AS(LanguageBundle::load(path, other), IoError);
  std::remove(path.c_str());
}

TEST_CASE("forward_extended with no bundles matches the base decode") {
  Fixture f;
  const auto& utt = f.world.base_data[0].test[1];
  auto lp = ctc_log_probs(f.base, encode(f.base, utt.features));
  auto base_tokens = greedy_ctc_decode(lp);
  auto decode = forward_extended(f.base, {}, AlphaSourceKind::GtOneHot, nullptr,
                                 utt.features, 0);
  CHECK(decode.tokens == base_tokens);
  CHECK(decode.alpha == std::vector<double>{1.0});
}

TEST_CASE("gt one-hot forward equals applying the bundle alone end to end") {
  Fixture f;
  Rng rng(5);
  expand_vocab(f.base, f.new_entry(0), rng);
  expand_vocab(f.base, f.new_entry(1), rng);
  auto b0 = make_bundle(f.base, "new0", f.new_entry(0), f.cfg.peft, 41);
  auto b1 = make_bundle(f.base, "new1", f.new_entry(1), f.cfg.peft, 42);
  Rng nrng(43);
  for (auto* b : {&b0, &b1}) {
    for (auto& m : b->modules) {
      for (auto t : m.trainable()) {
        for (double& v : t.values()) v = nrng.normal(0.0, 0.1);
      }
    }
  }
  const auto& utt = f.world.new_data[0].test[0];
  auto with_both = forward_extended(f.base, {&b0, &b1}, AlphaSourceKind::GtOneHot, nullptr,
                                    utt.features, 1);
  auto alone = forward_extended(f.base, {&b0}, AlphaSourceKind::GtOneHot, nullptr,
                                utt.features, 1);
  CHECK(with_both.tokens == alone.tokens);
}

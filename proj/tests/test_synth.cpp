#include <doctest.h>

#include <cmath>
#include <cstdio>

#include "pele/metrics.hpp"
#include "pele/synth.hpp"

using namespace pele;

namespace {

SynthConfig quick_cfg() {
  SynthConfig c;
  c.d_feat = 16;
  c.tokens_per_lang = 12;
  return c;
}

}  // namespace

TEST_CASE("vocab registry hands out disjoint ranges and enforces the ceiling") {
  VocabRegistry reg(50);
  auto a = reg.allocate("a", 12);
  auto b = reg.allocate("b", 12);
  CHECK(a.lo == kNumReservedTokens);
  CHECK(a.hi == a.lo + 12);
  CHECK(b.lo == a.hi);
  CHECK(reg.find("a") != nullptr);
  CHECK(reg.find("zzz") == nullptr);
  CHECK_THROWS_AS(reg.allocate("a", 5), ConfigError);   // duplicate
  CHECK_THROWS_AS(reg.allocate("c", 40), ConfigError);  // exhausted

  auto round = VocabRegistry::from_json(reg.to_json());
  CHECK(round.next_free() == reg.next_free());
  CHECK(round.find("b")->lo == b.lo);
}

TEST_CASE("language specs are deterministic and own disjoint ranges") {
  auto cfg = quick_cfg();
  VocabRegistry reg(200);
  Rng r1(42);
  auto s1 = gen_language_spec("l0", reg, cfg, r1);
  Rng r2(43);
  auto s2 = gen_language_spec("l1", reg, cfg, r2);
  CHECK(s1.hi <= s2.lo);

  VocabRegistry reg2(200);
  Rng r3(42);
  auto s1_again = gen_language_spec("l0", reg2, cfg, r3);
  CHECK(s1.prototypes.values() == s1_again.prototypes.values());
  CHECK(s1.transitions.values() == s1_again.transitions.values());
  CHECK(s1.start == s1_again.start);

  // Transition rows are distributions with no self transitions.
  for (int i = 0; i < s1.v_size(); ++i) {
    double row = 0.0;
    for (int j = 0; j < s1.v_size(); ++j) {
      row += s1.transitions.at(static_cast<std::size_t>(i), static_cast<std::size_t>(j));
    }
    CHECK(row == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(s1.transitions.at(static_cast<std::size_t>(i), static_cast<std::size_t>(i)) == 0.0);
  }

  // sep=0 removes the language offset: centroids collapse toward the
  // shared prototype distribution (no systematic shift).
  auto flat = cfg;
  flat.sep = 0.0;
  VocabRegistry reg3(200);
  Rng r4(42);
  auto s_flat = gen_language_spec("l0", reg3, cfg, r4);
  (void)s_flat;
}

TEST_CASE("sampled utterances emit prototype frames with durations") {
  auto cfg = quick_cfg();
  cfg.noise_sigma = 0.0;
  cfg.dur_min = 1;
  cfg.dur_max = 1;
  VocabRegistry reg(100);
  Rng rng(7);
  auto spec = gen_language_spec("x", reg, cfg, rng);
  Rng srng(8);
  auto utt = sample_utterance(spec, 5, srng);
  CHECK(utt.tokens.size() == 5);
  CHECK(utt.features.rows() == 5);
  for (std::size_t i = 0; i < 5; ++i) {
    const int local = utt.tokens[i] - spec.lo;
    for (std::size_t j = 0; j < utt.features.cols(); ++j) {
      CHECK(utt.features.at(i, j) == spec.prototypes.at(static_cast<std::size_t>(local), j));
    }
  }

  // Durations bound the frame count.
  auto cfg2 = quick_cfg();
  VocabRegistry reg2(100);
  Rng rng2(9);
  auto spec2 = gen_language_spec("y", reg2, cfg2, rng2);
  Rng srng2(10);
  for (int trial = 0; trial < 20; ++trial) {
    auto u = sample_utterance(spec2, 4, srng2);
    CHECK(u.features.rows() >= 4u * 1);
    CHECK(u.features.rows() <= 4u * 3);
    // No immediate token repeats: the sampled sequence stays CTC-feasible
    // at one frame per token.
    for (std::size_t i = 1; i < u.tokens.size(); ++i) CHECK(u.tokens[i] != u.tokens[i - 1]);
  }
  CHECK_THROWS_AS(sample_utterance(spec2, 0, srng2), ConfigError);
}

TEST_CASE("splits are deterministic, sized exactly and disjoint by index") {
  auto cfg = quick_cfg();
  VocabRegistry reg(100);
  Rng rng(11);
  auto spec = gen_language_spec("z", reg, cfg, rng);
  Rng d1(100);
  auto ds = make_splits(spec, 20, 5, 7, cfg, d1);
  CHECK(ds.train.size() == 20);
  CHECK(ds.dev.size() == 5);
  CHECK(ds.test.size() == 7);

  Rng d2(100);
  auto ds2 = make_splits(spec, 20, 5, 7, cfg, d2);
  CHECK(ds.train[3].features.values() == ds2.train[3].features.values());
  CHECK(ds.test[6].tokens == ds2.test[6].tokens);

  // Different split tags draw different streams.
  CHECK(ds.train[0].features.values() != ds.dev[0].features.values());

  // A 10:1 size ratio mirrors the resource spread.
  auto big = make_splits(spec, 300, 5, 5, cfg, d1);
  auto small = make_splits(spec, 30, 5, 5, cfg, d1);
  CHECK(big.train.size() == 10 * small.train.size());
}

TEST_CASE("nearest-prototype oracle recovers tokens at desk settings") {
  auto cfg = quick_cfg();  // sigma = 0.1, sep = 2
  VocabRegistry reg(200);
  Rng rng(3);
  auto spec = gen_language_spec("d", reg, cfg, rng);
  Rng srng(4);
  std::vector<std::pair<std::vector<int>, std::vector<int>>> pairs;
  for (int i = 0; i < 200; ++i) {
    auto u = sample_utterance(spec, 5, srng);
    pairs.emplace_back(u.tokens, oracle_decode(spec, u.features));
  }
  CHECK(error_rate(pairs) < 0.05);
}

TEST_CASE("oracle LID accuracy grows with separation") {
  auto measure = [](double sep) {
    SynthConfig cfg = quick_cfg();
    cfg.sep = sep;
    VocabRegistry reg(250);
    std::vector<LanguageSpec> specs;
    Rng root(77);
    for (int i = 0; i < 8; ++i) {
      Rng srng = root.fork(static_cast<std::uint64_t>(i));
      specs.push_back(gen_language_spec("l" + std::to_string(i), reg, cfg, srng));
    }
    Rng urng = root.fork(999);
    std::size_t hits = 0, total = 0;
    for (std::size_t s = 0; s < specs.size(); ++s) {
      for (int i = 0; i < 60; ++i) {
        auto u = sample_utterance(specs[s], 5, urng);
        hits += oracle_lid(specs, u.features) == s ? 1 : 0;
        ++total;
      }
    }
    return static_cast<double>(hits) / static_cast<double>(total);
  };
  const double a0 = measure(0.0);
  const double a1 = measure(1.0);
  const double a2 = measure(2.0);
  INFO("sep accuracy: ", a0, " ", a1, " ", a2);
  CHECK(a0 <= a1);
  CHECK(a1 <= a2);
  CHECK(a2 > a0);
}

TEST_CASE("dataset cache round trip is exact") {
  auto cfg = quick_cfg();
  VocabRegistry reg(100);
  Rng rng(5);
  auto spec = gen_language_spec("c", reg, cfg, rng);
  Rng srng(6);
  std::vector<Utterance> utts;
  for (int i = 0; i < 4; ++i) utts.push_back(sample_utterance(spec, 3 + i % 2, srng));

  const std::string prefix = "synth_cache_test";
  save_dataset(prefix, utts);
  auto loaded = load_dataset(prefix);
  REQUIRE(loaded.size() == utts.size());
  for (std::size_t i = 0; i < utts.size(); ++i) {
    CHECK(loaded[i].lang == utts[i].lang);
    CHECK(loaded[i].tokens == utts[i].tokens);
    CHECK(loaded[i].features.values() == utts[i].features.values());
  }
  std::remove((prefix + ".jsonl").c_str());
  std::remove((prefix + ".fbin").c_str());
}

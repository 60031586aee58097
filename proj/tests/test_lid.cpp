#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "pele/lid.hpp"

using namespace pele;

TEST_CASE("pool_features is the temporal mean") {
  auto constant = Tensor::from({4, 3}, std::vector<double>(12, 2.5));
  CHECK(pool_features(constant).values() == std::vector<double>{2.5, 2.5, 2.5});

  Rng rng(1);
  auto h = Tensor::normal({6, 5}, 0.0, 1.0, rng);
  auto pooled = pool_features(h);
  // Independent summation oracle.
  for (std::size_t j = 0; j < 5; ++j) {
    double acc = 0.0;
    for (std::size_t t = 0; t < 6; ++t) acc += h.at(t, j);
    CHECK(std::fabs(pooled.at(j) - acc / 6.0) < 1e-12);
  }

  // Permuting frames leaves the mean unchanged.
  std::vector<double> permuted;
  for (int row : {5, 3, 0, 1, 4, 2}) {
    for (std::size_t j = 0; j < 5; ++j) permuted.push_back(h.at(static_cast<std::size_t>(row), j));
  }
  auto pooled2 = pool_features(Tensor::from({6, 5}, permuted));
  for (std::size_t j = 0; j < 5; ++j) {
    CHECK(pooled.at(j) == doctest::Approx(pooled2.at(j)).epsilon(1e-14));
  }

  CHECK_THROWS_AS(pool_features(Tensor::zeros({3})), ShapeError);
}

TEST_CASE("gda on two symmetric 1-d classes puts the boundary at zero") {
  std::vector<std::vector<double>> xs = {{-1.2}, {-0.8}, {-1.0}, {0.8}, {1.2}, {1.0}};
  std::vector<int> ys = {0, 0, 0, 1, 1, 1};
  auto m = gda_fit(xs, ys, {"neg", "pos"}, 1e-3);
  CHECK(m.means.at(0, 0) == doctest::Approx(-1.0).epsilon(1e-12));
  CHECK(m.means.at(1, 0) == doctest::Approx(1.0).epsilon(1e-12));

  auto at = [&](double x) { return gda_predict(m, {x}); };
  CHECK(at(-0.5)[0] > 0.5);
  CHECK(at(0.5)[1] > 0.5);
  // Equidistant point between equal-prior classes splits the posterior.
  auto mid = at(0.0);
  CHECK(mid[0] == doctest::Approx(0.5).epsilon(1e-10));
  CHECK(mid[1] == doctest::Approx(0.5).epsilon(1e-10));

  // Posterior normalizes.
  double total = 0.0;
  for (double p : at(0.3)) total += p;
  CHECK(std::fabs(total - 1.0) < 1e-12);

  // A feature at a class mean with equal priors classifies to that class.
  auto at_mean = at(1.0);
  CHECK(at_mean[1] > at_mean[0]);
}

TEST_CASE("gda rejects undersized classes and is permutation invariant") {
  std::vector<std::vector<double>> xs = {{0.0}, {1.0}, {2.0}};
  std::vector<int> ys = {0, 1, 1};
  CHECK_THROWS_AS(gda_fit(xs, ys, {"a", "b"}, 1e-3), ConfigError);

  Rng rng(4);
  std::vector<std::vector<double>> feats;
  std::vector<int> labels;
  for (int c = 0; c < 3; ++c) {
    for (int i = 0; i < 10; ++i) {
      feats.push_back({rng.normal(c * 2.0, 0.3), rng.normal(-c * 1.0, 0.3)});
      labels.push_back(c);
    }
  }
  auto m1 = gda_fit(feats, labels, {"a", "b", "c"}, 1e-3);
  // Reverse sample order.
  auto feats_r = feats;
  auto labels_r = labels;
  std::reverse(feats_r.begin(), feats_r.end());
  std::reverse(labels_r.begin(), labels_r.end());
  auto m2 = gda_fit(feats_r, labels_r, {"a", "b", "c"}, 1e-3);
  for (std::size_t i = 0; i < m1.means.size(); ++i) {
    CHECK(m1.means.values()[i] == doctest::Approx(m2.means.values()[i]).epsilon(1e-9));
  }

  // Argmax is invariant under adding a constant to all log-likelihoods:
  // equivalently, scaling priors uniformly. Large shrinkage drives the
  // classifier toward nearest-class-mean.
  auto big_eps = gda_fit(feats, labels, {"a", "b", "c"}, 1e6);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < feats.size(); ++i) {
    // Nearest mean oracle.
    std::size_t best = 0;
    double best_d = 1e300;
    for (std::size_t c = 0; c < 3; ++c) {
      double d2 = 0.0;
      for (std::size_t j = 0; j < 2; ++j) {
        const double diff = feats[i][j] - big_eps.means.at(c, j);
        d2 += diff * diff;
      }
      if (d2 < best_d) {
        best_d = d2;
        best = c;
      }
    }
    auto post = gda_predict(big_eps, feats[i]);
    const auto arg = static_cast<std::size_t>(
        std::max_element(post.begin(), post.end()) - post.begin());
    hits += arg == best ? 1 : 0;
  }
  CHECK(hits == feats.size());
}

TEST_CASE("gda separates synthetic clusters") {
  Rng rng(7);
  std::vector<std::vector<double>> feats;
  std::vector<int> labels;
  const double spread = 0.2;
  for (int c = 0; c < 4; ++c) {
    std::vector<double> center(8);
    for (auto& v : center) v = rng.normal(0.0, 2.0);
    for (int i = 0; i < 25; ++i) {
      std::vector<double> x(8);
      for (std::size_t j = 0; j < 8; ++j) x[j] = center[j] + rng.normal(0.0, spread);
      feats.push_back(x);
      labels.push_back(c);
    }
  }
  auto m = gda_fit(feats, labels, {"a", "b", "c", "d"}, 1e-3);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < feats.size(); ++i) {
    auto post = gda_predict(m, feats[i]);
    hits += static_cast<int>(std::max_element(post.begin(), post.end()) - post.begin()) ==
                    labels[i]
                ? 1
                : 0;
  }
  CHECK(static_cast<double>(hits) / static_cast<double>(feats.size()) >= 0.95);
}

TEST_CASE("mlp lid learns a separable toy problem deterministically") {
  Rng rng(9);
  std::vector<std::vector<double>> feats;
  std::vector<int> labels;
  for (int i = 0; i < 60; ++i) {
    const int c = i % 2;
    feats.push_back({rng.normal(c ? 2.0 : -2.0, 0.4), rng.normal(c ? -1.0 : 1.0, 0.4)});
    labels.push_back(c);
  }
  LidConfig cfg;
  cfg.method = "mlp";
  cfg.mlp_hidden = 16;
  cfg.mlp_steps = 150;
  auto m = mlp_fit(feats, labels, {"a", "b"}, cfg, 5);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < feats.size(); ++i) {
    auto post = mlp_predict(m, feats[i]);
    hits += (post[1] > post[0]) == (labels[i] == 1) ? 1 : 0;
  }
  CHECK(static_cast<double>(hits) / static_cast<double>(feats.size()) >= 0.99);

  auto m2 = mlp_fit(feats, labels, {"a", "b"}, cfg, 5);
  CHECK(m.w1.values() == m2.w1.values());
  CHECK(m.w3.values() == m2.w3.values());

  CHECK_THROWS_AS(mlp_fit(feats, labels, {"only"}, cfg, 5), ConfigError);
}

TEST_CASE("lid model file round trip") {
  std::vector<std::vector<double>> xs = {{-1.0, 0.0}, {-1.1, 0.1}, {1.0, 0.0}, {1.1, -0.1}};
  std::vector<int> ys = {0, 0, 1, 1};
  LidModel m;
  m.method = "gda";
  m.source_layer = 2;
  m.gda = gda_fit(xs, ys, {"a", "b"}, 1e-3);

  const std::string path = "lid_test.peleart";
  m.save(path);
  auto loaded = LidModel::load(path);
  CHECK(loaded.method == "gda");
  CHECK(loaded.source_layer == 2);
  CHECK(loaded.classes() == m.classes());
  auto p1 = m.predict({0.4, 0.0});
  auto p2 = loaded.predict({0.4, 0.0});
  for (std::size_t i = 0; i < p1.size(); ++i) {
    CHECK(p1[i] == doctest::Approx(p2[i]).epsilon(1e-12));
  }
  std::remove(path.c_str());
}

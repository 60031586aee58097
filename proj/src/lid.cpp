#include "pele/lid.hpp"

#include <algorithm>
#include <cmath>

#include "pele/io.hpp"
#include "pele/optim.hpp"

namespace pele {

Tensor pool_features(const Tensor& h_layer) {
  if (h_layer.rank() != 2 || h_layer.rows() == 0) {
    throw ShapeError("pool_features expects a nonempty [T, d] tensor");
  }
  const std::size_t t_len = h_layer.rows(), d = h_layer.cols();
  std::vector<double> mean(d, 0.0);
  for (std::size_t t = 0; t < t_len; ++t)
    for (std::size_t j = 0; j < d; ++j) mean[j] += h_layer.at(t, j);
  for (double& v : mean) v /= static_cast<double>(t_len);
  return Tensor::from({d}, std::move(mean));
}

void LidConfig::validate() const {
  if (method != "gda" && method != "mlp") throw ConfigError("lid method must be gda|mlp");
  if (source_layer < 1) throw ConfigError("lid source_layer must be >= 1");
  if (eps_scale <= 0.0) throw ConfigError("lid eps_scale must be positive");
  if (mlp_hidden < 1 || mlp_steps < 1 || mlp_batch < 1) throw ConfigError("bad mlp settings");
}

nlohmann::json LidConfig::to_json() const {
  return nlohmann::json{{"method", method},       {"source_layer", source_layer},
                        {"eps_scale", eps_scale}, {"mlp_hidden", mlp_hidden},
                        {"mlp_steps", mlp_steps}, {"mlp_batch", mlp_batch}};
}

LidConfig LidConfig::from_json(const nlohmann::json& j) {
  LidConfig c;
  c.method = j.value("method", c.method);
  c.source_layer = j.value("source_layer", c.source_layer);
  c.eps_scale = j.value("eps_scale", c.eps_scale);
  c.mlp_hidden = j.value("mlp_hidden", c.mlp_hidden);
  c.mlp_steps = j.value("mlp_steps", c.mlp_steps);
  c.mlp_batch = j.value("mlp_batch", c.mlp_batch);
  c.validate();
  return c;
}

namespace {

// Lower Cholesky factor; throws on a non-positive-definite matrix.
Tensor cholesky(const Tensor& a) {
  const std::size_t n = a.rows();
  std::vector<double> l(n * n, 0.0);
  const auto& av = a.values();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j <= i; ++j) {
      double s = av[i * n + j];
      for (std::size_t k = 0; k < j; ++k) s -= l[i * n + k] * l[j * n + k];
      if (i == j) {
        if (s <= 0.0) throw NumericError("covariance not positive definite after shrinkage");
        l[i * n + i] = std::sqrt(s);
      } else {
        l[i * n + j] = s / l[j * n + j];
      }
    }
  }
  return Tensor::from({n, n}, std::move(l));
}

// Solves L y = x for lower-triangular L.
std::vector<double> forward_solve(const Tensor& l, const std::vector<double>& x) {
  const std::size_t n = l.rows();
  std::vector<double> y(n);
  const auto& lv = l.values();
  for (std::size_t i = 0; i < n; ++i) {
    double s = x[i];
    for (std::size_t k = 0; k < i; ++k) s -= lv[i * n + k] * y[k];
    y[i] = s / lv[i * n + i];
  }
  return y;
}

std::vector<double> normalize_log(std::vector<double> logits) {
  double mx = -1e300;
  for (double v : logits) mx = std::max(mx, v);
  double z = 0.0;
  for (double v : logits) z += std::exp(v - mx);
  const double lz = mx + std::log(z);
  for (double& v : logits) v = std::exp(v - lz);
  return logits;
}

}  // namespace

GdaModel gda_fit(const std::vector<std::vector<double>>& features,
                 const std::vector<int>& labels,
                 const std::vector<std::string>& classes, double eps_scale) {
  if (features.size() != labels.size() || features.empty()) {
    throw ConfigError("gda_fit: features/labels mismatch or empty");
  }
  if (classes.size() < 2) throw ConfigError("gda_fit: need at least two classes");
  const std::size_t c_num = classes.size();
  const std::size_t d = features[0].size();

  std::vector<std::size_t> counts(c_num, 0);
  for (int l : labels) {
    if (l < 0 || static_cast<std::size_t>(l) >= c_num) throw ConfigError("gda_fit: bad label");
    ++counts[static_cast<std::size_t>(l)];
  }
  for (std::size_t c = 0; c < c_num; ++c) {
    if (counts[c] < 2) {
      throw ConfigError("gda_fit: class " + classes[c] + " has fewer than 2 samples");
    }
  }

  GdaModel m;
  m.classes = classes;
  std::vector<double> means(c_num * d, 0.0);
  for (std::size_t i = 0; i < features.size(); ++i) {
    const auto l = static_cast<std::size_t>(labels[i]);
    for (std::size_t j = 0; j < d; ++j) means[l * d + j] += features[i][j];
  }
  for (std::size_t c = 0; c < c_num; ++c)
    for (std::size_t j = 0; j < d; ++j) means[c * d + j] /= static_cast<double>(counts[c]);

  // Pooled within-class covariance.
  std::vector<double> cov(d * d, 0.0);
  for (std::size_t i = 0; i < features.size(); ++i) {
    const auto l = static_cast<std::size_t>(labels[i]);
    for (std::size_t p = 0; p < d; ++p) {
      const double dp = features[i][p] - means[l * d + p];
      for (std::size_t q = p; q < d; ++q) {
        cov[p * d + q] += dp * (features[i][q] - means[l * d + q]);
      }
    }
  }
  const double denom = static_cast<double>(features.size());
  double trace = 0.0;
  for (std::size_t p = 0; p < d; ++p) trace += cov[p * d + p] / denom;
  const double eps = eps_scale * trace / static_cast<double>(d);
  for (std::size_t p = 0; p < d; ++p) {
    for (std::size_t q = p; q < d; ++q) {
      const double v = cov[p * d + q] / denom + (p == q ? eps : 0.0);
      cov[p * d + q] = v;
      cov[q * d + p] = v;
    }
  }

  m.means = Tensor::from({c_num, d}, std::move(means));
  m.cov = Tensor::from({d, d}, std::move(cov));
  m.chol = cholesky(m.cov);
  m.log_det = 0.0;
  for (std::size_t p = 0; p < d; ++p) m.log_det += 2.0 * std::log(m.chol.at(p, p));
  m.log_priors.resize(c_num);
  for (std::size_t c = 0; c < c_num; ++c) {
    m.log_priors[c] = std::log(static_cast<double>(counts[c]) / denom);
  }
  return m;
}

std::vector<double> gda_predict(const GdaModel& model, const std::vector<double>& feature) {
  const std::size_t d = model.cov.rows();
  if (feature.size() != d) throw ShapeError("gda_predict: feature dim mismatch");
  const std::size_t c_num = model.classes.size();
  std::vector<double> logits(c_num);
  std::vector<double> diff(d);
  for (std::size_t c = 0; c < c_num; ++c) {
    for (std::size_t j = 0; j < d; ++j) diff[j] = feature[j] - model.means.at(c, j);
    const auto y = forward_solve(model.chol, diff);
    double quad = 0.0;
    for (double v : y) quad += v * v;
    logits[c] = -0.5 * quad - 0.5 * model.log_det + model.log_priors[c];
  }
  return normalize_log(std::move(logits));
}

namespace {

Tensor mlp_forward(const MlpLid& m, const Tensor& x) {
  auto h1 = relu(add_rowvec(matmul(x, m.w1), m.b1));
  auto h2 = relu(add_rowvec(matmul(h1, m.w2), m.b2));
  return log_softmax(add_rowvec(matmul(h2, m.w3), m.b3), 1);
}

}  // namespace

MlpLid mlp_fit(const std::vector<std::vector<double>>& features,
               const std::vector<int>& labels, const std::vector<std::string>& classes,
               const LidConfig& cfg, std::uint64_t seed) {
  if (classes.size() < 2) throw ConfigError("mlp_fit: need at least two classes");
  if (features.size() != labels.size() || features.empty()) {
    throw ConfigError("mlp_fit: features/labels mismatch or empty");
  }
  const std::size_t d = features[0].size();
  const auto h = static_cast<std::size_t>(cfg.mlp_hidden);
  const std::size_t c_num = classes.size();

  Rng rng = Rng(seed).fork(0x11d);
  MlpLid m;
  m.classes = classes;
  m.w1 = Tensor::normal({d, h}, 0.0, 1.0 / std::sqrt(static_cast<double>(d)), rng)
             .set_requires_grad(true);
  m.b1 = Tensor::zeros({h}).set_requires_grad(true);
  m.w2 = Tensor::normal({h, h}, 0.0, 1.0 / std::sqrt(static_cast<double>(h)), rng)
             .set_requires_grad(true);
  m.b2 = Tensor::zeros({h}).set_requires_grad(true);
  m.w3 = Tensor::normal({h, c_num}, 0.0, 1.0 / std::sqrt(static_cast<double>(h)), rng)
             .set_requires_grad(true);
  m.b3 = Tensor::zeros({c_num}).set_requires_grad(true);

  std::vector<Tensor> params = {m.w1, m.b1, m.w2, m.b2, m.w3, m.b3};
  AdamConfig acfg;
  acfg.warmup_steps = std::max(1, cfg.mlp_steps / 10);
  Optimizer opt(acfg);
  const std::size_t n = features.size();
  const auto batch = static_cast<std::size_t>(cfg.mlp_batch);

  for (int step = 0; step < cfg.mlp_steps; ++step) {
    std::vector<double> xv;
    std::vector<int> yv;
    xv.reserve(batch * d);
    for (std::size_t b = 0; b < batch; ++b) {
      const auto i = static_cast<std::size_t>(rng.uniform_int(n));
      xv.insert(xv.end(), features[i].begin(), features[i].end());
      yv.push_back(labels[i]);
    }
    auto x = Tensor::from({batch, d}, std::move(xv));
    train_step(params,
               [&] {
                 return scale(pick_nll_sum(mlp_forward(m, x), yv),
                              1.0 / static_cast<double>(batch));
               },
               opt);
  }
  return m;
}

std::vector<double> mlp_predict(const MlpLid& model, const std::vector<double>& feature) {
  auto x = Tensor::from({1, feature.size()}, feature);
  auto lp = mlp_forward(model, x);
  std::vector<double> post(lp.cols());
  for (std::size_t c = 0; c < post.size(); ++c) post[c] = std::exp(lp.at(0, c));
  return post;
}

const std::vector<std::string>& LidModel::classes() const {
  return method == "gda" ? gda->classes : mlp->classes;
}

std::vector<double> LidModel::predict(const std::vector<double>& pooled) const {
  if (method == "gda") return gda_predict(*gda, pooled);
  return mlp_predict(*mlp, pooled);
}

void LidModel::save(const std::string& path) const {
  nlohmann::json meta;
  meta["method"] = method;
  meta["source_layer"] = source_layer;
  meta["classes"] = classes();
  std::vector<NamedTensor> params;
  if (method == "gda") {
    meta["log_priors"] = gda->log_priors;
    params.push_back({"means", gda->means});
    params.push_back({"cov", gda->cov});
  } else {
    params.push_back({"w1", mlp->w1});
    params.push_back({"b1", mlp->b1});
    params.push_back({"w2", mlp->w2});
    params.push_back({"b2", mlp->b2});
    params.push_back({"w3", mlp->w3});
    params.push_back({"b3", mlp->b3});
  }
  write_artifact(path, "lid-model", meta, params);
}

LidModel LidModel::load(const std::string& path) {
  Artifact art = read_artifact(path);
  if (art.kind != "lid-model") throw IoError("artifact is not a LID model: " + path);
  LidModel m;
  m.method = art.meta.at("method").get<std::string>();
  m.source_layer = art.meta.at("source_layer").get<int>();
  const auto classes = art.meta.at("classes").get<std::vector<std::string>>();
  if (m.method == "gda") {
    GdaModel g;
    g.classes = classes;
    g.means = art.find("means");
    g.cov = art.find("cov");
    g.chol = cholesky(g.cov);
    g.log_det = 0.0;
    for (std::size_t p = 0; p < g.cov.rows(); ++p) g.log_det += 2.0 * std::log(g.chol.at(p, p));
    g.log_priors = art.meta.at("log_priors").get<std::vector<double>>();
    m.gda = std::move(g);
  } else {
    MlpLid mm;
    mm.classes = classes;
    mm.w1 = art.find("w1");
    mm.b1 = art.find("b1");
    mm.w2 = art.find("w2");
    mm.b2 = art.find("b2");
    mm.w3 = art.find("w3");
    mm.b3 = art.find("b3");
    m.mlp = std::move(mm);
  }
  return m;
}

namespace {

struct PooledSet {
  std::vector<std::string> classes;
  std::vector<std::vector<double>> train_x;
  std::vector<int> train_y;
  // test features per class, tagged seen/unseen
  std::vector<std::vector<double>> test_x;
  std::vector<int> test_y;
  std::vector<bool> test_seen;
};

// One encoder pass per utterance covers every requested layer.
std::vector<PooledSet> pool_sets(const BaseModel& base,
                                 const std::vector<LidTrainingSet>& langs,
                                 const std::vector<int>& layers) {
  for (int layer : layers) {
    if (layer < 1 || layer > base.config.n_enc_layers) {
      throw ConfigError("lid: source layer out of range");
    }
  }
  std::vector<PooledSet> out(layers.size());
  for (auto& set : out) {
    for (const auto& l : langs) set.classes.push_back(l.lang);
  }
  for (std::size_t c = 0; c < langs.size(); ++c) {
    for (const auto& u : *langs[c].train) {
      auto states = encode(base, u.features);
      for (std::size_t li = 0; li < layers.size(); ++li) {
        out[li].train_x.push_back(
            pool_features(states.h[static_cast<std::size_t>(layers[li] - 1)]).values());
        out[li].train_y.push_back(static_cast<int>(c));
      }
    }
    if (langs[c].test == nullptr) continue;
    for (const auto& u : *langs[c].test) {
      auto states = encode(base, u.features);
      for (std::size_t li = 0; li < layers.size(); ++li) {
        out[li].test_x.push_back(
            pool_features(states.h[static_cast<std::size_t>(layers[li] - 1)]).values());
        out[li].test_y.push_back(static_cast<int>(c));
        out[li].test_seen.push_back(langs[c].seen);
      }
    }
  }
  return out;
}

}  // namespace

LidModel fit_lid(const BaseModel& base, const std::vector<LidTrainingSet>& langs,
                 const LidConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  auto pooled = pool_sets(base, langs, {cfg.source_layer}).front();
  LidModel m;
  m.method = cfg.method;
  m.source_layer = cfg.source_layer;
  if (cfg.method == "gda") {
    m.gda = gda_fit(pooled.train_x, pooled.train_y, pooled.classes, cfg.eps_scale);
  } else {
    m.mlp = mlp_fit(pooled.train_x, pooled.train_y, pooled.classes, cfg, seed);
  }
  return m;
}

std::vector<LidSweepRow> lid_layer_sweep(const BaseModel& base,
                                         const std::vector<LidTrainingSet>& langs,
                                         const std::vector<int>& layers,
                                         const std::vector<std::string>& methods,
                                         const LidConfig& cfg, std::uint64_t seed) {
  std::vector<LidSweepRow> rows;
  auto pooled_by_layer = pool_sets(base, langs, layers);
  for (std::size_t li = 0; li < layers.size(); ++li) {
    const int layer = layers[li];
    const auto& pooled = pooled_by_layer[li];
    for (const auto& method : methods) {
      LidSweepRow row;
      row.layer = layer;
      row.method = method;
      std::function<std::vector<double>(const std::vector<double>&)> predict;
      if (method == "gda") {
        auto g = gda_fit(pooled.train_x, pooled.train_y, pooled.classes, cfg.eps_scale);
        predict = [g](const std::vector<double>& x) { return gda_predict(g, x); };
      } else if (method == "mlp") {
        LidConfig mc = cfg;
        mc.method = "mlp";
        auto mm = mlp_fit(pooled.train_x, pooled.train_y, pooled.classes, mc, seed);
        predict = [mm](const std::vector<double>& x) { return mlp_predict(mm, x); };
      } else {
        throw ConfigError("lid sweep: unknown method " + method);
      }
      std::size_t seen_hit = 0, seen_total = 0, unseen_hit = 0, unseen_total = 0;
      for (std::size_t i = 0; i < pooled.test_x.size(); ++i) {
        auto post = predict(pooled.test_x[i]);
        const auto arg = static_cast<int>(
            std::max_element(post.begin(), post.end()) - post.begin());
        const bool hit = arg == pooled.test_y[i];
        if (pooled.test_seen[i]) {
          seen_total += 1;
          seen_hit += hit ? 1 : 0;
        } else {
          unseen_total += 1;
          unseen_hit += hit ? 1 : 0;
        }
      }
      row.seen_accuracy =
          seen_total ? static_cast<double>(seen_hit) / static_cast<double>(seen_total) : 0.0;
      row.unseen_accuracy =
          unseen_total ? static_cast<double>(unseen_hit) / static_cast<double>(unseen_total)
                       : 0.0;
      rows.push_back(row);
    }
  }
  return rows;
}

}  // namespace pele

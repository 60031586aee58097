#pragma once

#include <optional>
#include <string>
#include <vector>

#include "pele/model.hpp"
#include "pele/synth.hpp"
#include "pele/tensor.hpp"

namespace pele {

// Temporal mean over frames: [T, d] -> [d].
Tensor pool_features(const Tensor& h_layer);

struct LidConfig {
  std::string method = "gda";  // "gda" | "mlp"
  int source_layer = 2;        // encoder layer whose output feeds LID
  double eps_scale = 1e-3;     // shrinkage: eps = eps_scale * trace(cov) / d
  int mlp_hidden = 64;
  int mlp_steps = 400;
  int mlp_batch = 32;

  void validate() const;
  nlohmann::json to_json() const;
  static LidConfig from_json(const nlohmann::json& j);
};

// Nearest-Gaussian classifier: per-class means, one pooled within-class
// covariance with eps*I shrinkage, and empirical priors.
struct GdaModel {
  std::vector<std::string> classes;
  Tensor means;        // [C, d]
  Tensor cov;          // [d, d], after shrinkage
  Tensor chol;         // lower Cholesky factor of cov
  double log_det = 0.0;
  std::vector<double> log_priors;
};

GdaModel gda_fit(const std::vector<std::vector<double>>& features,
                 const std::vector<int>& labels,
                 const std::vector<std::string>& classes, double eps_scale);

// Posterior over classes (log-likelihood + log-prior, normalized).
std::vector<double> gda_predict(const GdaModel& model, const std::vector<double>& feature);

// Three affine layers with ReLU, log-softmax output.
struct MlpLid {
  std::vector<std::string> classes;
  Tensor w1, b1, w2, b2, w3, b3;
};

MlpLid mlp_fit(const std::vector<std::vector<double>>& features,
               const std::vector<int>& labels, const std::vector<std::string>& classes,
               const LidConfig& cfg, std::uint64_t seed);

std::vector<double> mlp_predict(const MlpLid& model, const std::vector<double>& feature);

// Method-tagged wrapper used by routing and the CLI.
struct LidModel {
  std::string method;
  int source_layer = 2;
  std::optional<GdaModel> gda;
  std::optional<MlpLid> mlp;

  const std::vector<std::string>& classes() const;
  std::vector<double> predict(const std::vector<double>& pooled) const;

  void save(const std::string& path) const;
  static LidModel load(const std::string& path);
};

// Fits a LID model on pooled encoder states of the configured layer.
struct LidTrainingSet {
  std::string lang;
  bool seen = true;  // base language (seen by the encoder) or extended
  const std::vector<Utterance>* train = nullptr;
  const std::vector<Utterance>* test = nullptr;
};

LidModel fit_lid(const BaseModel& base, const std::vector<LidTrainingSet>& langs,
                 const LidConfig& cfg, std::uint64_t seed);

struct LidSweepRow {
  int layer = 0;
  std::string method;
  double seen_accuracy = 0.0;
  double unseen_accuracy = 0.0;  // NaN-free: 0 when no unseen split given
};

// Per-layer, per-method accuracy on the seen- and unseen-language splits.
std::vector<LidSweepRow> lid_layer_sweep(const BaseModel& base,
                                         const std::vector<LidTrainingSet>& langs,
                                         const std::vector<int>& layers,
                                         const std::vector<std::string>& methods,
                                         const LidConfig& cfg, std::uint64_t seed);

}  // namespace pele

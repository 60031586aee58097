#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <unordered_map>
#include <vector>

#include "pele/tensor.hpp"

namespace pele {

// Adam with an inverse-sqrt learning-rate schedule: linear warmup to `lr`
// over `warmup_steps`, then lr * sqrt(warmup / step) decay.
struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int warmup_steps = 200;
};

class Optimizer {
 public:
  explicit Optimizer(AdamConfig cfg = {}) : cfg_(cfg) {}

  double lr_at(std::int64_t step) const;
  std::int64_t steps() const { return step_; }
  const AdamConfig& config() const { return cfg_; }

  // Applies one Adam update to each tensor from its accumulated gradient.
  // Moment buffers exist only for tensors that have been stepped.
  void step(const std::vector<Tensor>& trainable);

  std::size_t tracked_params() const { return moments_.size(); }

 private:
  struct Moments {
    std::vector<double> m, v;
    std::shared_ptr<detail::TensorData> keepalive;
  };
  AdamConfig cfg_;
  std::int64_t step_ = 0;
  std::unordered_map<detail::TensorData*, Moments> moments_;
};

// One optimization step: zeroes trainable grads, evaluates `forward` under a
// fresh tape, backpropagates and updates exactly the trainable set. Returns
// the (pre-update) loss value. Non-finite losses surface as NumericError.
double train_step(const std::vector<Tensor>& trainable,
                  const std::function<Tensor()>& forward, Optimizer& opt);

}  // namespace pele

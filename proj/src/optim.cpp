#include "pele/optim.hpp"

#include <cmath>

namespace pele {

double Optimizer::lr_at(std::int64_t step) const {
  if (step < 1) step = 1;
  const double w = static_cast<double>(cfg_.warmup_steps > 0 ? cfg_.warmup_steps : 1);
  const double s = static_cast<double>(step);
  return cfg_.lr * std::min(s / w, std::sqrt(w / s));
}

void Optimizer::step(const std::vector<Tensor>& trainable) {
  ++step_;
  const double lr = lr_at(step_);
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
  for (const auto& t : trainable) {
    auto* node = t.node();
    auto& mom = moments_[node];
    if (mom.m.empty()) {
      mom.m.assign(t.size(), 0.0);
      mom.v.assign(t.size(), 0.0);
      mom.keepalive = t.handle();
    }
    const auto g = t.grad();
    auto& vals = node->values;
    for (std::size_t i = 0; i < vals.size(); ++i) {
      mom.m[i] = cfg_.beta1 * mom.m[i] + (1.0 - cfg_.beta1) * g[i];
      mom.v[i] = cfg_.beta2 * mom.v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
      const double mhat = mom.m[i] / bc1;
      const double vhat = mom.v[i] / bc2;
      vals[i] -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
    }
  }
}

double train_step(const std::vector<Tensor>& trainable,
                  const std::function<Tensor()>& forward, Optimizer& opt) {
  for (auto t : trainable) t.zero_grad();
  Tape tape;
  Tensor loss = forward();
  const double value = loss.item();
  if (!std::isfinite(value)) throw NumericError("train_step: non-finite loss");
  tape.backward(loss);
  opt.step(trainable);
  return value;
}

}  // namespace pele

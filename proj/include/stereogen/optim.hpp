#pragma once

// Adam with bias correction over a ParamSet. Updates run in registration
// order with scalar double accumulators per element, so a given sequence of
// gradients produces bit-identical parameters on every run. Moment buffers
// are exposed for checkpointing so training can resume exactly.

#include <cmath>
#include <vector>

#include "stereogen/autodiff.hpp"
#include "stereogen/tensor.hpp"

namespace sgen {

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  struct Slot {
    ad::ParamPtr param;
    Tensor m, v;
  };

  explicit Adam(ad::ParamSet& params, AdamConfig cfg = {}) : cfg_(cfg) {
    for (const auto& p : params.trainable())
      slots_.push_back({p, Tensor(p->value.shape()), Tensor(p->value.shape())});
  }

  // One update using gradients currently in Param::grad; params whose grad
  // never accumulated this step are skipped (their moments do not advance).
  void step(double lr) {
    ++t_;
    double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (auto& s : slots_) {
      if (s.param->grad.empty()) continue;
      Tensor& val = s.param->value;
      const Tensor& g = s.param->grad;
      for (int i = 0; i < val.size(); ++i) {
        double gi = g[i];
        double m = cfg_.beta1 * s.m[i] + (1.0 - cfg_.beta1) * gi;
        double v = cfg_.beta2 * s.v[i] + (1.0 - cfg_.beta2) * gi * gi;
        s.m[i] = static_cast<float>(m);
        s.v[i] = static_cast<float>(v);
        double update = lr * (m / c1) / (std::sqrt(v / c2) + cfg_.eps);
        val[i] = static_cast<float>(val[i] - update);
      }
    }
  }
  void step() { step(cfg_.lr); }

  void zero_grad() {
    for (auto& s : slots_) s.param->zero_grad();
  }

  int64_t steps_taken() const { return t_; }
  const AdamConfig& config() const { return cfg_; }
  std::vector<Slot>& slots() { return slots_; }
  const std::vector<Slot>& slots() const { return slots_; }
  void set_steps_taken(int64_t t) { t_ = t; }

 private:
  AdamConfig cfg_;
  std::vector<Slot> slots_;
  int64_t t_ = 0;
};

// Learning-rate schedules used by the trainers.
inline double cosine_lr(double base_lr, int64_t iter, int64_t total_iters) {
  if (total_iters <= 1) return base_lr;
  double frac = static_cast<double>(iter) / static_cast<double>(total_iters - 1);
  return base_lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * frac));
}

}  // namespace sgen

#pragma once

// Diffusion core: noise schedule, forward noising, the denoiser interface,
// the noise-prediction training loss, and a deterministic variance-free
// (DDIM-style) sampler whose final K steps can carry gradients.

#include <cmath>
#include <optional>
#include <utility>
#include <vector>

#include "stereogen/autodiff.hpp"
#include "stereogen/rng.hpp"
#include "stereogen/tensor.hpp"

namespace sgen {

struct NoiseSchedule {
  int num_steps = 0;
  std::vector<double> betas;
  std::vector<double> alpha_bars;
};

inline NoiseSchedule make_schedule(int num_steps, double beta_start, double beta_end) {
  if (num_steps < 1) throw std::invalid_argument("make_schedule: num_steps must be >= 1");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0))
    throw std::invalid_argument("make_schedule: need 0 < beta_start <= beta_end < 1");
  NoiseSchedule s;
  s.num_steps = num_steps;
  s.betas.resize(num_steps);
  s.alpha_bars.resize(num_steps);
  double cum = 1.0;
  for (int t = 0; t < num_steps; ++t) {
    double frac = num_steps == 1 ? 0.0 : static_cast<double>(t) / (num_steps - 1);
    s.betas[t] = beta_start + (beta_end - beta_start) * frac;
    cum *= 1.0 - s.betas[t];
    s.alpha_bars[t] = cum;
  }
  return s;
}

// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps
inline Tensor forward_diffuse(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& s) {
  if (!x0.same_shape(eps)) throw std::invalid_argument("forward_diffuse: shape mismatch");
  if (t < 0 || t >= s.num_steps) throw std::invalid_argument("forward_diffuse: t out of range");
  float a = static_cast<float>(std::sqrt(s.alpha_bars[t]));
  float b = static_cast<float>(std::sqrt(1.0 - s.alpha_bars[t]));
  Tensor out(x0.shape());
  for (int i = 0; i < out.size(); ++i) out[i] = a * x0[i] + b * eps[i];
  return out;
}

inline ad::Var forward_diffuse(const ad::Var& x0, int t, const ad::Var& eps, const NoiseSchedule& s) {
  if (!x0.val().same_shape(eps.val())) throw std::invalid_argument("forward_diffuse: shape mismatch");
  if (t < 0 || t >= s.num_steps) throw std::invalid_argument("forward_diffuse: t out of range");
  float a = static_cast<float>(std::sqrt(s.alpha_bars[t]));
  float b = static_cast<float>(std::sqrt(1.0 - s.alpha_bars[t]));
  return ad::add(ad::mul(x0, ad::constant_scalar(a)), ad::mul(eps, ad::constant_scalar(b)));
}

// Text-conditioned noise predictor. `c` is a fixed-width embedding vector; a
// zero vector is the null (unconditional) prompt.
class Denoiser {
 public:
  virtual ~Denoiser() = default;
  virtual ad::Var predict(const ad::Var& x_t, const Tensor& c, int t) = 0;
  virtual std::vector<int> image_shape() const = 0;
  virtual ad::ParamSet& params() = 0;

  Tensor predict_value(const Tensor& x_t, const Tensor& c, int t) {
    ad::NoGradGuard ng;
    return predict(ad::Var::constant(x_t), c, t).val();
  }
};

// Mean over items of per-pixel mean squared error between predicted and true
// noise. Draw order per item: first t (uniform on [0,T)), then eps.
inline ad::Var denoise_loss(Denoiser& d, const std::vector<std::pair<Tensor, Tensor>>& batch,
                            const NoiseSchedule& s, Rng& rng) {
  if (batch.empty()) throw std::invalid_argument("denoise_loss: empty batch");
  ad::Var total;
  for (const auto& [x0, c] : batch) {
    int t = rng.uniform_int(s.num_steps);
    Tensor eps = rng.normal_tensor(x0.shape());
    Tensor xt = forward_diffuse(x0, t, eps, s);
    ad::Var pred = d.predict(ad::Var::constant(xt), c, t);
    ad::Var item = ad::mean_all(ad::square(ad::sub(pred, ad::Var::constant(eps))));
    total = total.defined() ? ad::add(total, item) : item;
  }
  return ad::mul(total, ad::constant_scalar(1.0f / static_cast<float>(batch.size())));
}

struct SamplerConfig {
  int num_sample_steps = 20;
  double guidance_scale = 1.0;
  bool deterministic = true;
  uint64_t seed = 0;
};

// Strictly decreasing timestep subsequence t_0 > t_1 > ... > t_{S-1} covering
// T-1 down to 0.
inline std::vector<int> sample_timesteps(int num_sample_steps, int num_train_steps) {
  if (num_sample_steps < 1 || num_sample_steps > num_train_steps)
    throw std::invalid_argument("sampler: num_sample_steps must be in [1, T]");
  std::vector<int> ts(num_sample_steps);
  if (num_sample_steps == 1) {
    ts[0] = num_train_steps - 1;
    return ts;
  }
  for (int j = 0; j < num_sample_steps; ++j)
    ts[j] = static_cast<int>((static_cast<int64_t>(num_sample_steps - 1 - j) * (num_train_steps - 1)) /
                             (num_sample_steps - 1));
  for (int j = 1; j < num_sample_steps; ++j)
    if (ts[j] >= ts[j - 1]) throw std::logic_error("sampler: timesteps not strictly decreasing");
  return ts;
}

namespace detail {

inline ad::Var guided_predict(Denoiser& d, const ad::Var& x, const Tensor& c, int t,
                              double guidance_scale) {
  ad::Var cond = d.predict(x, c, t);
  if (guidance_scale == 1.0) return cond;
  Tensor null_c(c.shape());  // zeros = null prompt
  ad::Var uncond = d.predict(x, null_c, t);
  float g = static_cast<float>(guidance_scale);
  return ad::add(uncond, ad::mul(ad::sub(cond, uncond), ad::constant_scalar(g)));
}

// One deterministic update x_t -> x_{t_prev} (t_prev < 0 means final x0).
inline ad::Var ddim_step(const ad::Var& x, const ad::Var& eps_hat, int t, int t_prev,
                         const NoiseSchedule& s) {
  double ab_t = s.alpha_bars[t];
  float inv_sa = static_cast<float>(1.0 / std::sqrt(ab_t));
  float sq1m = static_cast<float>(std::sqrt(1.0 - ab_t));
  ad::Var x0_pred = ad::mul(ad::sub(x, ad::mul(eps_hat, ad::constant_scalar(sq1m))),
                            ad::constant_scalar(inv_sa));
  if (t_prev < 0) return x0_pred;
  double ab_p = s.alpha_bars[t_prev];
  float sa_p = static_cast<float>(std::sqrt(ab_p));
  float sq1m_p = static_cast<float>(std::sqrt(1.0 - ab_p));
  return ad::add(ad::mul(x0_pred, ad::constant_scalar(sa_p)),
                 ad::mul(eps_hat, ad::constant_scalar(sq1m_p)));
}

}  // namespace detail

// Deterministic sampler realizing pi_theta(x_T, c). Starts from a seeded unit
// normal x_T and applies num_sample_steps variance-free updates. With
// differentiable_tail = K, only the last K steps build tape (earlier states
// are constants); without it the result carries no gradient.
inline ad::Var sample(Denoiser& d, const Tensor& c, const NoiseSchedule& s,
                      const SamplerConfig& cfg, std::optional<int> differentiable_tail = {}) {
  if (!cfg.deterministic)
    throw std::invalid_argument("sampler: only deterministic sampling is supported");
  std::vector<int> ts = sample_timesteps(cfg.num_sample_steps, s.num_steps);
  int S = cfg.num_sample_steps;
  int K = differentiable_tail.value_or(0);
  if (differentiable_tail && (K < 1 || K > S))
    throw std::invalid_argument("sampler: differentiable_tail out of range");

  Rng rng(derive_seed(cfg.seed, "sample-init"));
  ad::Var x = ad::Var::constant(rng.normal_tensor(d.image_shape()));

  for (int j = 0; j < S; ++j) {
    int t = ts[j];
    int t_prev = j + 1 < S ? ts[j + 1] : -1;
    bool tail = j >= S - K;
    if (tail) {
      ad::Var eps_hat = detail::guided_predict(d, x, c, t, cfg.guidance_scale);
      x = detail::ddim_step(x, eps_hat, t, t_prev, s);
    } else {
      ad::NoGradGuard ng;
      ad::Var eps_hat = detail::guided_predict(d, x, c, t, cfg.guidance_scale);
      x = ad::Var::constant(detail::ddim_step(x, eps_hat, t, t_prev, s).val());
    }
  }
  return x;
}

}  // namespace sgen

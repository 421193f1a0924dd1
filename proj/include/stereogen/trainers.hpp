#pragma once

// Two-stage fine-tuning. Stage 1 minimizes the noise-prediction objective on
// stacked stereo images; stage 2 maximizes a composite reward by
// backpropagating through a truncated tail of the deterministic sampling
// chain. Both stages update only the model's trainable (adapter) parameters
// and draw all randomness from per-iteration derived seeds, so a run can be
// resumed from any iteration and continue bit-identically.

#include <chrono>
#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "stereogen/codec.hpp"
#include "stereogen/csv.hpp"
#include "stereogen/diffusion.hpp"
#include "stereogen/optim.hpp"
#include "stereogen/prompt.hpp"
#include "stereogen/rewards.hpp"
#include "stereogen/rng.hpp"
#include "stereogen/synthdata.hpp"

namespace sgen {

enum class LrSchedule { kConstant, kCosine };

inline LrSchedule parse_lr_schedule(const std::string& s) {
  if (s == "constant") return LrSchedule::kConstant;
  if (s == "cosine") return LrSchedule::kCosine;
  throw std::invalid_argument("unknown lr schedule: " + s);
}

inline std::string lr_schedule_name(LrSchedule s) {
  return s == LrSchedule::kConstant ? "constant" : "cosine";
}

struct TrainConfig {
  double learning_rate = 1e-4;
  LrSchedule lr_schedule = LrSchedule::kCosine;
  int batch_size = 8;
  int grad_accum_steps = 1;
  int total_iters = 2000;
  int start_iter = 0;  // resume point; iterations [start_iter, total_iters) run
  uint64_t seed = 0;

  void validate() const {
    if (learning_rate < 0) throw std::invalid_argument("train: learning_rate must be >= 0");
    if (batch_size < 1 || total_iters < 1 || grad_accum_steps < 1)
      throw std::invalid_argument("train: batch/iters/accum must be positive");
    if (start_iter < 0 || start_iter > total_iters)
      throw std::invalid_argument("train: start_iter out of range");
  }
};

struct TrainRecord {
  int step = 0;                // 1-based iteration index
  int64_t reward_queries = 0;  // cumulative; 0 throughout stage 1
  double loss = 0.0;           // stage 1: denoise loss; stage 2: -mean(r_total)
  double r_s = 0.0, r_p = 0.0, r_c = 0.0;
  double r_s_std = 0.0, r_p_std = 0.0, r_c_std = 0.0;
  double wall_seconds = 0.0;
  bool skipped = false;  // stage 2: non-finite reward, update not applied
};

// Periodic held-out evaluation during stage 2 (plain, non-taped sampling with
// fixed per-prompt seeds so the series is comparable across the run).
struct EvalRecord {
  int step = 0;
  int64_t reward_queries = 0;
  double r_s = 0.0, r_p = 0.0, r_c = 0.0, r_total = 0.0;
};

struct TrainingLog {
  std::vector<TrainRecord> records;
  std::vector<EvalRecord> evals;

  csv::Table to_csv() const {
    csv::Table t;
    t.header = {"step", "queries", "loss",     "r_s",          "r_p",    "r_c",
                "r_s_std", "r_p_std", "r_c_std", "wall_seconds", "skipped"};
    for (const auto& r : records)
      t.rows.push_back({std::to_string(r.step), std::to_string(r.reward_queries),
                        csv::fmt(r.loss), csv::fmt(r.r_s), csv::fmt(r.r_p), csv::fmt(r.r_c),
                        csv::fmt(r.r_s_std), csv::fmt(r.r_p_std), csv::fmt(r.r_c_std),
                        csv::fmt(r.wall_seconds, 3), r.skipped ? "1" : "0"});
    return t;
  }

  csv::Table evals_to_csv() const {
    csv::Table t;
    t.header = {"step", "queries", "r_s", "r_p", "r_c", "r_total"};
    for (const auto& e : evals)
      t.rows.push_back({std::to_string(e.step), std::to_string(e.reward_queries),
                        csv::fmt(e.r_s), csv::fmt(e.r_p), csv::fmt(e.r_c), csv::fmt(e.r_total)});
    return t;
  }
};

inline double schedule_lr(double base, LrSchedule s, int iter, int total) {
  return s == LrSchedule::kCosine ? cosine_lr(base, iter, total) : base;
}

// ---------------------------------------------------------------------------
// Stage 1: denoising fine-tuning on stacked pairs
// ---------------------------------------------------------------------------

struct StackedExample {
  Tensor stacked;
  PromptSpec prompt;
};

inline std::vector<StackedExample> to_examples(const std::vector<SceneItem>& items) {
  std::vector<StackedExample> out;
  out.reserve(items.size());
  for (const auto& it : items) out.push_back({it.stacked, it.prompt});
  return out;
}

// Minimizes Eq.-1-style noise-prediction error over the dataset. Only
// trainable parameters move; `opt` may carry resumed moment state.
inline TrainingLog finetune_stereo(Denoiser& model, const std::vector<StackedExample>& dataset,
                                   const NoiseSchedule& sched, const TrainConfig& cfg,
                                   Adam& opt) {
  cfg.validate();
  if (dataset.empty()) throw std::invalid_argument("finetune_stereo: empty dataset");
  for (const auto& ex : dataset)
    if (ex.stacked.shape() != model.image_shape())
      throw std::invalid_argument("finetune_stereo: dataset/model resolution mismatch");

  std::vector<Tensor> cond;
  cond.reserve(dataset.size());
  for (const auto& ex : dataset) cond.push_back(embed_prompt(ex.prompt.text));

  TrainingLog log;
  auto t0 = std::chrono::steady_clock::now();
  for (int it = cfg.start_iter; it < cfg.total_iters; ++it) {
    Rng rng(derive_seed(cfg.seed, "stage1-iter", static_cast<uint64_t>(it)));
    double lr = schedule_lr(cfg.learning_rate, cfg.lr_schedule, it, cfg.total_iters);
    double loss_sum = 0.0;
    for (int acc = 0; acc < cfg.grad_accum_steps; ++acc) {
      std::vector<std::pair<Tensor, Tensor>> batch;
      batch.reserve(cfg.batch_size);
      for (int b = 0; b < cfg.batch_size; ++b) {
        int idx = rng.uniform_int(static_cast<int>(dataset.size()));
        batch.emplace_back(dataset[idx].stacked, cond[idx]);
      }
      ad::Var loss = denoise_loss(model, batch, sched, rng);
      loss_sum += loss.scalar();
      if (cfg.grad_accum_steps > 1)
        loss = ad::mul(loss, ad::constant_scalar(1.0f / cfg.grad_accum_steps));
      ad::backward(loss);
    }
    opt.step(lr);
    opt.zero_grad();
    TrainRecord rec;
    rec.step = it + 1;
    rec.loss = loss_sum / cfg.grad_accum_steps;
    rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    log.records.push_back(rec);
  }
  return log;
}

inline TrainingLog finetune_stereo(Denoiser& model, const std::vector<StackedExample>& dataset,
                                   const NoiseSchedule& sched, const TrainConfig& cfg) {
  Adam opt(model.params(), {cfg.learning_rate});
  return finetune_stereo(model, dataset, sched, cfg, opt);
}

// Mean of the last `window` (or fewer) recorded losses.
inline double smoothed_loss(const TrainingLog& log, size_t upto, int window = 50) {
  if (log.records.empty() || upto == 0) throw std::invalid_argument("smoothed_loss: empty log");
  size_t hi = std::min(upto, log.records.size());
  size_t lo = hi > static_cast<size_t>(window) ? hi - window : 0;
  double s = 0.0;
  for (size_t i = lo; i < hi; ++i) s += log.records[i].loss;
  return s / (hi - lo);
}

// ---------------------------------------------------------------------------
// Stage 2: reward fine-tuning through the sampling chain
// ---------------------------------------------------------------------------

struct AlignPropConfig {
  std::vector<PromptSpec> prompts;
  RewardWeights reward_weights;
  int iters = 200;
  int prompts_per_iter = 16;
  int truncation_max = 10;  // K_max; clamped to num_sample_steps
  double learning_rate = 1e-4;
  LrSchedule lr_schedule = LrSchedule::kConstant;
  SamplerConfig sampler;  // seed field is overridden per generated image
  int start_iter = 0;
  uint64_t seed = 0;
  std::vector<PromptSpec> eval_prompts;  // held-out; empty disables eval
  int eval_every = 20;                   // iterations between held-out evals

  void validate(int num_sample_steps) const {
    if (prompts.empty()) throw std::invalid_argument("alignprop: prompts must be nonempty");
    if (iters < 1 || prompts_per_iter < 1)
      throw std::invalid_argument("alignprop: iters/prompts_per_iter must be positive");
    if (truncation_max < 1) throw std::invalid_argument("alignprop: K_max must be >= 1");
    if (truncation_max > num_sample_steps)
      throw std::invalid_argument("alignprop: K_max exceeds num_sample_steps");
    if (learning_rate < 0) throw std::invalid_argument("alignprop: learning_rate must be >= 0");
    if (start_iter < 0 || start_iter > iters)
      throw std::invalid_argument("alignprop: start_iter out of range");
  }
};

// Differentiable composite reward of a generated (left, right) pair.
using RewardFn = std::function<RewardTerms(const ad::Var& left, const ad::Var& right,
                                           const PromptSpec& prompt)>;

inline RewardFn make_composite_reward(const RewardWeights& w, const RewardEstimators& est) {
  detail::check_estimators(est);
  return [w, est](const ad::Var& left, const ad::Var& right, const PromptSpec& prompt) {
    return composite_reward_terms(left, right, prompt, w, est);
  };
}

// Deterministic per-prompt generation seed; adding prompts never perturbs
// the seeds of existing ones.
inline uint64_t prompt_seed(uint64_t global_seed, const std::string& prompt_text) {
  return derive_seed(global_seed, prompt_text);
}

// Plain (non-taped) held-out evaluation with fixed per-prompt seeds.
inline EvalRecord eval_prompts_now(Denoiser& model, const NoiseSchedule& sched,
                                   const AlignPropConfig& cfg, const RewardFn& reward) {
  EvalRecord e;
  ad::NoGradGuard ng;
  for (const auto& p : cfg.eval_prompts) {
    SamplerConfig scfg = cfg.sampler;
    scfg.seed = prompt_seed(cfg.seed, p.text);
    Tensor img = sample(model, embed_prompt(p.text), sched, scfg).val();
    auto [left, right] = unstack(ad::Var::constant(img));
    RewardTerms t = reward(left, right, p);
    e.r_s += t.r_s.scalar();
    e.r_p += t.r_p.scalar();
    e.r_c += t.r_c.scalar();
    e.r_total += t.r_total.scalar();
  }
  int n = static_cast<int>(cfg.eval_prompts.size());
  if (n > 0) {
    e.r_s /= n;
    e.r_p /= n;
    e.r_c /= n;
    e.r_total /= n;
  }
  return e;
}

// Maximizes the composite reward: each iteration draws K ~ Uniform{1..K_max},
// generates one image per prompt slot with gradients through the last K
// denoising steps, and ascends the mean reward. A non-finite reward skips the
// parameter update but still counts every reward query.
inline TrainingLog finetune_reward(Denoiser& model, const NoiseSchedule& sched,
                                   const RewardFn& reward, const AlignPropConfig& cfg,
                                   Adam& opt) {
  cfg.validate(cfg.sampler.num_sample_steps);
  int k_max = std::min(cfg.truncation_max, cfg.sampler.num_sample_steps);

  TrainingLog log;
  auto t0 = std::chrono::steady_clock::now();
  int64_t queries = static_cast<int64_t>(cfg.start_iter) * cfg.prompts_per_iter;

  if (!cfg.eval_prompts.empty() && cfg.start_iter == 0) {
    EvalRecord e = eval_prompts_now(model, sched, cfg, reward);
    e.step = 0;
    e.reward_queries = 0;
    log.evals.push_back(e);
  }

  for (int it = cfg.start_iter; it < cfg.iters; ++it) {
    Rng rng(derive_seed(cfg.seed, "stage2-iter", static_cast<uint64_t>(it)));
    int K = 1 + rng.uniform_int(k_max);
    double lr = schedule_lr(cfg.learning_rate, cfg.lr_schedule, it, cfg.iters);

    ad::Var total;
    std::vector<double> rs, rp, rc;
    bool finite = true;
    for (int slot = 0; slot < cfg.prompts_per_iter; ++slot) {
      const PromptSpec& p = cfg.prompts[rng.uniform_int(static_cast<int>(cfg.prompts.size()))];
      SamplerConfig scfg = cfg.sampler;
      scfg.seed = derive_seed(cfg.seed, "stage2-latent", static_cast<uint64_t>(it),
                              static_cast<uint64_t>(slot));
      ad::Var img = sample(model, embed_prompt(p.text), sched, scfg, K);
      auto [left, right] = unstack(img);
      RewardTerms t = reward(left, right, p);
      rs.push_back(t.r_s.scalar());
      rp.push_back(t.r_p.scalar());
      rc.push_back(t.r_c.scalar());
      if (!std::isfinite(t.r_total.scalar())) finite = false;
      total = total.defined() ? ad::add(total, t.r_total) : t.r_total;
    }
    queries += cfg.prompts_per_iter;

    ad::Var loss = ad::mul(total, ad::constant_scalar(-1.0f / cfg.prompts_per_iter));
    TrainRecord rec;
    rec.step = it + 1;
    rec.reward_queries = queries;
    rec.loss = loss.scalar();
    auto mean_std = [](const std::vector<double>& v, double& m, double& sd) {
      m = 0.0;
      for (double x : v) m += x;
      m /= v.size();
      sd = 0.0;
      for (double x : v) sd += (x - m) * (x - m);
      sd = std::sqrt(sd / v.size());
    };
    mean_std(rs, rec.r_s, rec.r_s_std);
    mean_std(rp, rec.r_p, rec.r_p_std);
    mean_std(rc, rec.r_c, rec.r_c_std);

    if (finite) {
      ad::backward(loss);
      opt.step(lr);
    } else {
      rec.skipped = true;
    }
    opt.zero_grad();
    rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    log.records.push_back(rec);

    bool last = it + 1 == cfg.iters;
    if (!cfg.eval_prompts.empty() && (last || (it + 1) % cfg.eval_every == 0)) {
      EvalRecord e = eval_prompts_now(model, sched, cfg, reward);
      e.step = it + 1;
      e.reward_queries = queries;
      log.evals.push_back(e);
    }
  }
  return log;
}

inline TrainingLog finetune_reward(Denoiser& model, const NoiseSchedule& sched,
                                   const RewardFn& reward, const AlignPropConfig& cfg) {
  Adam opt(model.params(), {cfg.learning_rate});
  return finetune_reward(model, sched, reward, cfg, opt);
}

}  // namespace sgen

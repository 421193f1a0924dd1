#pragma once

// The three reward terms and their weighted composition. Every term has a
// taped form (differentiable with respect to the generated pixels, used by
// the reward trainer) and a plain double-precision form (used for metrics).
// The stereo term correlates the monocular estimate on the left view with
// the soft block-matching disparity of the pair; both estimators stay frozen
// while the generator trains against them.

#include <cmath>

#include "stereogen/autodiff.hpp"
#include "stereogen/codec.hpp"
#include "stereogen/disparity.hpp"
#include "stereogen/synthdata.hpp"
#include "stereogen/tensor.hpp"

namespace sgen {

struct RewardWeights {
  double alpha = 0.25;  // stereo
  double beta = 0.75;   // prompt
  double gamma = 0.25;  // convergence
};

inline constexpr double kPearsonVarianceEps = 1e-8;

// ---------------------------------------------------------------------------
// Pearson correlation
// ---------------------------------------------------------------------------

namespace detail {

// Mean squared deviation ("variance" for the degenerate guard).
inline bool pearson_degenerate(const Tensor& a, const Tensor& b) {
  auto var_of = [](const Tensor& t) {
    double m = t.mean();
    double acc = 0.0;
    for (int i = 0; i < t.size(); ++i) {
      double d = static_cast<double>(t[i]) - m;
      acc += d * d;
    }
    return acc / t.size();
  };
  return var_of(a) < kPearsonVarianceEps || var_of(b) < kPearsonVarianceEps;
}

inline void pearson_check(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) throw std::invalid_argument("pearson: shape mismatch");
  if (a.size() < 2) throw std::invalid_argument("pearson: need at least 2 elements");
}

}  // namespace detail

inline double pearson(const Tensor& a, const Tensor& b) {
  detail::pearson_check(a, b);
  if (detail::pearson_degenerate(a, b)) return 0.0;
  double ma = a.mean(), mb = b.mean();
  double num = 0.0, va = 0.0, vb = 0.0;
  for (int i = 0; i < a.size(); ++i) {
    double da = static_cast<double>(a[i]) - ma;
    double db = static_cast<double>(b[i]) - mb;
    num += da * db;
    va += da * da;
    vb += db * db;
  }
  return num / std::sqrt(va * vb);
}

inline ad::Var pearson(const ad::Var& a, const ad::Var& b) {
  detail::pearson_check(a.val(), b.val());
  if (detail::pearson_degenerate(a.val(), b.val()))
    return ad::constant_scalar(0.0f);  // guard: constant, no gradient
  ad::Var da = ad::sub(a, ad::mean_all(a));
  ad::Var db = ad::sub(b, ad::mean_all(b));
  ad::Var num = ad::sum_all(ad::mul(da, db));
  ad::Var den = ad::sqrt(ad::mul(ad::sum_all(ad::square(da)), ad::sum_all(ad::square(db))));
  return ad::div(num, den);
}

// ---------------------------------------------------------------------------
// Convergence term: penalize negative disparities
// ---------------------------------------------------------------------------

inline double convergence_reward(const Tensor& d) {
  if (d.size() < 1) throw std::invalid_argument("convergence_reward: empty map");
  double acc = 0.0, worst = 0.0;
  for (int i = 0; i < d.size(); ++i) {
    double neg = std::max(-static_cast<double>(d[i]), 0.0);
    acc += neg;
    worst = std::max(worst, neg);
  }
  return -(acc / d.size()) / std::max(worst, 1.0);
}

inline ad::Var convergence_reward(const ad::Var& d) {
  if (d.val().size() < 1) throw std::invalid_argument("convergence_reward: empty map");
  ad::Var neg = ad::relu(ad::neg(d));  // max(-d, 0)
  ad::Var numer = ad::mean_all(neg);
  // max(max_p(-d), 1) = relu(max - 1) + 1; below 1 the denominator is the
  // constant 1 and correctly carries no gradient.
  ad::Var denom =
      ad::add(ad::relu(ad::sub(ad::max_all(neg), ad::constant_scalar(1.0f))), ad::constant_scalar(1.0f));
  return ad::neg(ad::div(numer, denom));
}

// ---------------------------------------------------------------------------
// Prompt term
// ---------------------------------------------------------------------------

class PromptScorer {
 public:
  virtual ~PromptScorer() = default;
  // Differentiable alignment score; higher is better.
  virtual ad::Var score(const ad::Var& left, const ad::Var& right, const PromptSpec& prompt) = 0;
  virtual double score_value(const StereoPair& pair, const PromptSpec& prompt) {
    ad::NoGradGuard ng;
    return static_cast<double>(
        score(ad::Var::constant(pair.left), ad::Var::constant(pair.right), prompt).scalar());
  }
};

// Column band of the left view named by the prompt's position word.
inline std::pair<int, int> prompt_region(const std::string& position_word, int width) {
  int a = width / 3, b = 2 * width / 3;
  if (position_word == "on the left of") return {0, a};
  if (position_word == "in front of") return {a, b};
  if (position_word == "on the right of") return {b, width};
  throw std::invalid_argument("prompt_region: unknown position word: " + position_word);
}

// score = 1 - ||mean color of the prompted region - target||^2 / 12.
class ToyColorScorer : public PromptScorer {
 public:
  ad::Var score(const ad::Var& left, const ad::Var& /*right*/, const PromptSpec& prompt) override {
    const auto& shape = left.shape();
    if (shape.size() != 3 || shape[0] != 3)
      throw std::invalid_argument("ToyColorScorer: expected [3,H,W] left view");
    auto [x0, x1] = prompt_region(prompt.position_word, shape[2]);
    ad::Var region = ad::slice(left, 2, x0, x1 - x0);  // [3,H,ww]
    ad::Var total = ad::constant_scalar(0.0f);
    for (int c = 0; c < 3; ++c) {
      ad::Var mc = ad::mean_all(ad::slice(region, 0, c, 1));
      ad::Var diff = ad::sub(mc, ad::constant_scalar(prompt.target_color[static_cast<size_t>(c)]));
      total = ad::add(total, ad::square(diff));
    }
    return ad::sub(ad::constant_scalar(1.0f), ad::mul(total, ad::constant_scalar(1.0f / 12.0f)));
  }

  double score_value(const StereoPair& pair, const PromptSpec& prompt) override {
    const Tensor& left = pair.left;
    if (left.rank() != 3 || left.dim(0) != 3)
      throw std::invalid_argument("ToyColorScorer: expected [3,H,W] left view");
    int h = left.dim(1), w = left.dim(2);
    auto [x0, x1] = prompt_region(prompt.position_word, w);
    double total = 0.0;
    for (int c = 0; c < 3; ++c) {
      double acc = 0.0;
      for (int y = 0; y < h; ++y)
        for (int x = x0; x < x1; ++x) acc += left[(c * h + y) * w + x];
      double mc = acc / (static_cast<double>(h) * (x1 - x0));
      double diff = mc - prompt.target_color[static_cast<size_t>(c)];
      total += diff * diff;
    }
    return 1.0 - total / 12.0;
  }
};

inline ad::Var prompt_reward(const ad::Var& left, const ad::Var& right, const PromptSpec& prompt,
                             PromptScorer& scorer) {
  return scorer.score(left, right, prompt);
}

inline double prompt_reward(const StereoPair& pair, const PromptSpec& prompt, PromptScorer& scorer) {
  return scorer.score_value(pair, prompt);
}

// ---------------------------------------------------------------------------
// Stereo term
// ---------------------------------------------------------------------------

inline ad::Var stereo_reward(const ad::Var& left, const ad::Var& right, const MatcherConfig& mcfg,
                             MonocularEstimator& mono) {
  ad::Var d_mono = mono.estimate(left);
  ad::Var d_stereo = estimate_stereo(left, right, mcfg);  // soft, differentiable
  return pearson(d_mono, d_stereo);
}

// Soft-matching disparity of a plain pair (no tape), as used for metrics.
inline Tensor soft_disparity_value(const StereoPair& pair, const MatcherConfig& mcfg) {
  ad::NoGradGuard ng;
  return estimate_stereo(ad::Var::constant(pair.left), ad::Var::constant(pair.right), mcfg).val();
}

inline double stereo_reward(const StereoPair& pair, const MatcherConfig& mcfg,
                            MonocularEstimator& mono) {
  return pearson(mono.estimate_value(pair.left), soft_disparity_value(pair, mcfg));
}

// ---------------------------------------------------------------------------
// Composition
// ---------------------------------------------------------------------------

struct RewardEstimators {
  MatcherConfig matcher;
  MonocularEstimator* mono = nullptr;
  PromptScorer* scorer = nullptr;
};

struct RewardReport {
  double r_s = 0.0, r_p = 0.0, r_c = 0.0, r_total = 0.0;
  Tensor d_stereo;  // diagnostics
  Tensor d_mono;
};

struct RewardTerms {
  ad::Var r_s, r_p, r_c, r_total;
};

namespace detail {
inline void check_estimators(const RewardEstimators& est) {
  if (est.mono == nullptr) throw std::invalid_argument("reward: monocular estimator not loaded");
  if (est.scorer == nullptr) throw std::invalid_argument("reward: prompt scorer not loaded");
}
}  // namespace detail

// Taped composition for training: r_total is a Var whose gradient reaches the
// generated left/right pixels through all three terms.
inline RewardTerms composite_reward_terms(const ad::Var& left, const ad::Var& right,
                                          const PromptSpec& prompt, const RewardWeights& w,
                                          const RewardEstimators& est) {
  detail::check_estimators(est);
  RewardTerms t;
  ad::Var d_mono = est.mono->estimate(left);
  ad::Var d_stereo = estimate_stereo(left, right, est.matcher);
  t.r_s = pearson(d_mono, d_stereo);
  t.r_p = est.scorer->score(left, right, prompt);
  t.r_c = convergence_reward(d_stereo);
  t.r_total = ad::add(
      ad::add(ad::mul(ad::constant_scalar(static_cast<float>(w.alpha)), t.r_s),
              ad::mul(ad::constant_scalar(static_cast<float>(w.beta)), t.r_p)),
      ad::mul(ad::constant_scalar(static_cast<float>(w.gamma)), t.r_c));
  return t;
}

// Plain evaluation in double precision for metrics and reports.
inline RewardReport composite_reward(const StereoPair& pair, const PromptSpec& prompt,
                                     const RewardWeights& w, const RewardEstimators& est) {
  detail::check_estimators(est);
  RewardReport r;
  r.d_mono = est.mono->estimate_value(pair.left);
  r.d_stereo = soft_disparity_value(pair, est.matcher);
  r.r_s = pearson(r.d_mono, r.d_stereo);
  r.r_p = est.scorer->score_value(pair, prompt);
  r.r_c = convergence_reward(r.d_stereo);
  r.r_total = w.alpha * r.r_s + w.beta * r.r_p + w.gamma * r.r_c;
  return r;
}

}  // namespace sgen

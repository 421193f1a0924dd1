#pragma once

// Tiny monocular disparity predictor: a 4-conv encoder-decoder trained with
// a scale-invariant correlation loss (1 - pearson(pred, gt)) on synthetic
// scenes. It reads depth from the texture-frequency cue baked into the data;
// its output is relative, so rewards consume it only through correlation.

#include <memory>
#include <vector>

#include "stereogen/autodiff.hpp"
#include "stereogen/disparity.hpp"
#include "stereogen/nn_ops.hpp"
#include "stereogen/optim.hpp"
#include "stereogen/rewards.hpp"
#include "stereogen/rng.hpp"

namespace sgen {

struct MonoConfig {
  int channels = 16;
  uint64_t seed = 1234;
};

class TinyMonoNet : public MonocularEstimator {
 public:
  explicit TinyMonoNet(MonoConfig cfg = {}) : cfg_(cfg) {
    int ch = cfg.channels;
    if (ch < 1) throw std::invalid_argument("TinyMonoNet: channels must be >= 1");
    auto conv = [&](const std::string& name, int cout, int cin, int idx) {
      Rng rng(derive_seed(cfg_.seed, "mono-conv", static_cast<uint64_t>(idx)));
      float std = std::sqrt(2.0f / (static_cast<float>(cin) * 9.0f));
      params_.add(name + ".w", rng.normal_tensor({cout, cin, 3, 3}, std));
      params_.add(name + ".b", Tensor({cout}));
    };
    conv("conv1", ch, 3, 0);
    conv("conv2", 2 * ch, ch, 1);
    conv("conv3", ch, 2 * ch, 2);
    conv("conv4", 1, ch, 3);
  }

  ad::Var estimate(const ad::Var& image) override {
    const auto& s = image.shape();
    if (s.size() != 3 || s[0] != 3)
      throw std::invalid_argument("TinyMonoNet: expected [3,H,W] image");
    if (s[1] % 2 != 0 || s[2] % 2 != 0)
      throw std::invalid_argument("TinyMonoNet: height and width must be even");
    auto w = [&](const std::string& n) { return ad::Var::leaf(params_.find(n)); };
    ad::Var h = ad::silu(ad::conv2d(image, w("conv1.w"), w("conv1.b"), 1, 1));
    h = ad::silu(ad::conv2d(h, w("conv2.w"), w("conv2.b"), 2, 1));
    h = ad::upsample_nearest2(h);
    h = ad::silu(ad::conv2d(h, w("conv3.w"), w("conv3.b"), 1, 1));
    h = ad::conv2d(h, w("conv4.w"), w("conv4.b"), 1, 1);  // [1,H,W]
    return ad::reshape(h, {s[1], s[2]});
  }

  ad::ParamSet& params() override { return params_; }
  const MonoConfig& config() const { return cfg_; }

 private:
  MonoConfig cfg_;
  ad::ParamSet params_;
};

struct MonoTrainConfig {
  MonoConfig model;
  double lr = 2e-3;
  int batch_size = 8;
  int total_iters = 400;
  uint64_t seed = 99;
};

struct MonoItem {
  Tensor left;          // [3,H,W]
  Tensor gt_disparity;  // [H,W]
};

inline double eval_mono(MonocularEstimator& est, const std::vector<MonoItem>& items) {
  if (items.empty()) throw std::invalid_argument("eval_mono: empty dataset");
  double acc = 0.0;
  for (const auto& it : items) acc += pearson(est.estimate_value(it.left), it.gt_disparity);
  return acc / static_cast<double>(items.size());
}

// Scale-invariant training: minimize mean over the batch of (1 - pearson).
inline std::unique_ptr<TinyMonoNet> train_mono(const std::vector<MonoItem>& items,
                                               const MonoTrainConfig& cfg) {
  if (items.empty()) throw std::invalid_argument("train_mono: empty dataset");
  auto net = std::make_unique<TinyMonoNet>(cfg.model);
  Adam opt(net->params(), {cfg.lr});
  for (int iter = 0; iter < cfg.total_iters; ++iter) {
    Rng rng(derive_seed(cfg.seed, "mono-iter", static_cast<uint64_t>(iter)));
    opt.zero_grad();
    ad::Var loss = ad::constant_scalar(0.0f);
    for (int b = 0; b < cfg.batch_size; ++b) {
      const MonoItem& it = items[static_cast<size_t>(rng.uniform_int(static_cast<int>(items.size())))];
      ad::Var pred = net->estimate(ad::Var::constant(it.left));
      ad::Var corr = pearson(pred, ad::Var::constant(it.gt_disparity));
      loss = ad::add(loss, ad::sub(ad::constant_scalar(1.0f), corr));
    }
    loss = ad::mul(loss, ad::constant_scalar(1.0f / static_cast<float>(cfg.batch_size)));
    ad::backward(loss);
    opt.step(cfg.lr);
  }
  return net;
}

}  // namespace sgen

#include <catch2/catch_amalgamated.hpp>
#include <vector>

#include "stereogen/mono.hpp"
#include "stereogen/synthdata.hpp"
#include "test_util.hpp"

namespace sgtest {

using sgen::MonoItem;
using sgen::Rng;
using sgen::Tensor;
namespace ad = sgen::ad;

static std::vector<MonoItem> render_items(uint64_t seed, int n) {
  std::vector<MonoItem> items;
  for (int i = 0; i < n; ++i) {
    Rng rng(sgen::derive_seed(seed, "mono-scene", static_cast<uint64_t>(i)));
    sgen::SceneSpec s = sgen::make_scene(rng, {});
    sgen::RenderedScene r = sgen::render_stereo(s);
    items.push_back({r.pair.left, r.gt_disparity});
  }
  return items;
}

TEST_CASE("mono net shapes, determinism, and validation", "[mono]") {
  sgen::TinyMonoNet net({8, 5});
  Rng rng(3);
  Tensor img = rng.uniform_tensor({3, 16, 24}, -1.0f, 1.0f);
  Tensor d = net.estimate_value(img);
  REQUIRE(d.same_shape(Tensor({16, 24})));

  sgen::TinyMonoNet net2({8, 5});
  REQUIRE(net2.estimate_value(img).bitwise_equal(d));
  sgen::TinyMonoNet other({8, 6});
  REQUIRE(sgen::max_abs_diff(other.estimate_value(img), d) > 0.0f);

  REQUIRE_THROWS_AS(net.estimate_value(Tensor({1, 16, 24})), std::invalid_argument);
  REQUIRE_THROWS_AS(net.estimate_value(Tensor({3, 15, 24})), std::invalid_argument);
  REQUIRE_THROWS_AS(sgen::TinyMonoNet({0, 1}), std::invalid_argument);

  // Gradients flow to every conv parameter.
  ad::Var out = net.estimate(ad::Var::constant(img));
  ad::backward(ad::mean_all(out));
  for (const auto& p : net.params().all()) REQUIRE_FALSE(p->grad.empty());
}

TEST_CASE("train_mono input validation and degenerate baseline", "[mono]") {
  REQUIRE_THROWS_AS(sgen::train_mono({}, {}), std::invalid_argument);
  REQUIRE_THROWS_AS(sgen::eval_mono(*std::make_unique<sgen::TinyMonoNet>(), {}),
                    std::invalid_argument);

  // A constant-output estimator scores 0 through the degenerate guard, so it
  // can never meet a positive correlation gate.
  class ConstantMono : public sgen::MonocularEstimator {
   public:
    ad::Var estimate(const ad::Var& image) override {
      const auto& s = image.shape();
      return ad::Var::constant(Tensor({s[1], s[2]}, 1.5f));
    }
    ad::ParamSet& params() override { return params_; }

   private:
    ad::ParamSet params_;
  } constant;
  auto items = render_items(400, 4);
  REQUIRE(sgen::eval_mono(constant, items) == 0.0);
}

TEST_CASE("short mono training runs are bit-reproducible", "[mono]") {
  auto items = render_items(401, 8);
  sgen::MonoTrainConfig cfg;
  cfg.model.channels = 8;
  cfg.total_iters = 12;
  cfg.batch_size = 4;
  auto a = sgen::train_mono(items, cfg);
  auto b = sgen::train_mono(items, cfg);
  for (size_t i = 0; i < a->params().all().size(); ++i)
    REQUIRE(a->params().all()[i]->value.bitwise_equal(b->params().all()[i]->value));
}

TEST_CASE("trained mono predictor correlates with ground truth", "[mono]") {
  auto train_items = render_items(402, 60);
  auto holdout_items = render_items(403, 12);

  sgen::MonoTrainConfig cfg;
  auto net = sgen::train_mono(train_items, cfg);

  std::vector<MonoItem> train_subset(train_items.begin(), train_items.begin() + 8);
  double train_corr = sgen::eval_mono(*net, train_subset);
  double holdout_corr = sgen::eval_mono(*net, holdout_items);
  INFO("train corr = " << train_corr << ", holdout corr = " << holdout_corr);
  REQUIRE(train_corr >= 0.9);
  REQUIRE(holdout_corr >= 0.8);
}

}  // namespace sgtest

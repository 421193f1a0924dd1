#include <catch2/catch_amalgamated.hpp>

#include "stereogen/trainers.hpp"
#include "stereogen/unet.hpp"
#include "test_util.hpp"

using sgen::AlignPropConfig;
using sgen::DenoiserConfig;
using sgen::LoraInjection;
using sgen::NoiseSchedule;
using sgen::PromptSpec;
using sgen::StackedExample;
using sgen::Tensor;
using sgen::TrainConfig;
using sgen::TrainingLog;
using sgen::UNetDenoiser;
namespace ad = sgen::ad;

namespace {

// 16x16 stacked images (8x16 halves) keep every trainer test in seconds.
DenoiserConfig tiny_model(LoraInjection inj = LoraInjection::kAll) {
  DenoiserConfig cfg;
  cfg.height = 16;
  cfg.width = 16;
  cfg.base_channels = 4;
  cfg.channel_mults = {1, 2};
  cfg.temb_dim = 16;
  cfg.norm_groups = 2;
  cfg.seed = 3;
  cfg.lora_rank = 2;
  cfg.injection = inj;
  return cfg;
}

std::vector<StackedExample> tiny_dataset(int n, uint64_t seed = 17) {
  sgen::GenRanges gr;
  gr.height = 8;
  gr.width = 16;
  gr.max_disp = 3;
  gr.max_layers = 2;
  sgen::Rng rng(seed);
  std::vector<StackedExample> out;
  for (int i = 0; i < n; ++i) {
    sgen::SceneSpec spec = sgen::make_scene(rng, gr);
    sgen::RenderedScene r = sgen::render_stereo(spec);
    out.push_back({sgen::stack(r.pair), sgen::caption(spec)});
  }
  return out;
}

TrainConfig tiny_train(int iters, double lr = 5e-3) {
  TrainConfig cfg;
  cfg.learning_rate = lr;
  cfg.batch_size = 2;
  cfg.total_iters = iters;
  cfg.seed = 5;
  return cfg;
}

std::vector<float> trainable_snapshot(UNetDenoiser& net) {
  std::vector<float> out;
  for (const auto& p : net.params().trainable())
    for (int i = 0; i < p->value.size(); ++i) out.push_back(p->value[i]);
  return out;
}

}  // namespace

TEST_CASE("stage-1 training reduces the smoothed loss and logs every step", "[trainers]") {
  UNetDenoiser net(tiny_model());
  NoiseSchedule sched = sgen::make_schedule(60, 1e-4, 0.02);
  auto data = tiny_dataset(8);
  TrainingLog log = sgen::finetune_stereo(net, data, sched, tiny_train(60));

  REQUIRE(log.records.size() == 60);
  for (size_t i = 0; i < log.records.size(); ++i) {
    CHECK(log.records[i].step == static_cast<int>(i) + 1);
    CHECK(log.records[i].reward_queries == 0);
    CHECK(std::isfinite(log.records[i].loss));
  }
  double first = sgen::smoothed_loss(log, 10, 10);
  double last = sgen::smoothed_loss(log, log.records.size(), 10);
  CHECK(last < first);

  csv::Table t = log.to_csv();
  REQUIRE(t.header.size() == 11);
  CHECK(t.rows.size() == 60);
}

TEST_CASE("stage-1 runs are deterministic and resumable", "[trainers]") {
  NoiseSchedule sched = sgen::make_schedule(60, 1e-4, 0.02);
  auto data = tiny_dataset(6);

  UNetDenoiser a(tiny_model());
  sgen::finetune_stereo(a, data, sched, tiny_train(8));
  UNetDenoiser b(tiny_model());
  sgen::finetune_stereo(b, data, sched, tiny_train(8));
  CHECK(trainable_snapshot(a) == trainable_snapshot(b));

  // Split run: iterations [0,5) then [5,8) with one optimizer carrying its
  // moments across produce bitwise the same parameters as the single run.
  // Constant lr so the truncated first leg does not change the schedule; the
  // full-horizon resume path (same total_iters, start_iter > 0) is also how
  // checkpoint resume drives it.
  TrainConfig whole = tiny_train(8);
  whole.lr_schedule = sgen::LrSchedule::kConstant;
  UNetDenoiser d(tiny_model());
  sgen::finetune_stereo(d, data, sched, whole);

  UNetDenoiser c(tiny_model());
  sgen::Adam opt_c(c.params(), {whole.learning_rate});
  TrainConfig p1 = whole;
  p1.total_iters = 5;
  sgen::finetune_stereo(c, data, sched, p1, opt_c);
  TrainConfig p2 = whole;
  p2.start_iter = 5;
  sgen::finetune_stereo(c, data, sched, p2, opt_c);
  CHECK(trainable_snapshot(c) == trainable_snapshot(d));
}

TEST_CASE("stage-1 with zero learning rate leaves parameters bitwise fixed", "[trainers]") {
  UNetDenoiser net(tiny_model());
  auto before = trainable_snapshot(net);
  NoiseSchedule sched = sgen::make_schedule(60, 1e-4, 0.02);
  sgen::finetune_stereo(net, tiny_dataset(4), sched, tiny_train(5, 0.0));
  CHECK(trainable_snapshot(net) == before);
}

TEST_CASE("stage-1 keeps base weights bitwise frozen", "[trainers]") {
  UNetDenoiser net(tiny_model());
  std::vector<std::pair<std::string, Tensor>> base;
  for (const auto& p : net.params().all())
    if (!p->trainable) base.emplace_back(p->name, p->value.clone());

  NoiseSchedule sched = sgen::make_schedule(60, 1e-4, 0.02);
  sgen::finetune_stereo(net, tiny_dataset(4), sched, tiny_train(10));

  size_t i = 0;
  for (const auto& p : net.params().all()) {
    if (p->trainable) continue;
    INFO(p->name);
    CHECK(sgen::max_abs_diff(base[i].second, p->value) == 0.0f);
    ++i;
  }
}

TEST_CASE("stage-1 validates dataset shape and config", "[trainers]") {
  UNetDenoiser net(tiny_model());
  NoiseSchedule sched = sgen::make_schedule(60, 1e-4, 0.02);
  std::vector<StackedExample> wrong = {{Tensor({3, 8, 8}), PromptSpec{}}};
  CHECK_THROWS_AS(sgen::finetune_stereo(net, wrong, sched, tiny_train(2)), std::invalid_argument);
  CHECK_THROWS_AS(sgen::finetune_stereo(net, {}, sched, tiny_train(2)), std::invalid_argument);
  TrainConfig bad = tiny_train(2);
  bad.batch_size = 0;
  CHECK_THROWS_AS(sgen::finetune_stereo(net, tiny_dataset(1), sched, bad), std::invalid_argument);
  TrainConfig neg = tiny_train(2);
  neg.learning_rate = -1.0;
  CHECK_THROWS_AS(sgen::finetune_stereo(net, tiny_dataset(1), sched, neg), std::invalid_argument);
}

TEST_CASE("single-item overfit drives the item loss down sharply", "[trainers][slow]") {
  // Fixed-draw evaluation set so before/after measure the same integrand.
  auto item_loss = [](UNetDenoiser& net, const StackedExample& ex, const NoiseSchedule& sched) {
    ad::NoGradGuard ng;
    Tensor c = sgen::embed_prompt(ex.prompt.text);
    double total = 0.0;
    int n = 64;
    for (int k = 0; k < n; ++k) {
      sgen::Rng rng(sgen::derive_seed(4242, "overfit-eval", static_cast<uint64_t>(k)));
      int t = rng.uniform_int(static_cast<int>(sched.betas.size()));
      Tensor eps = rng.normal_tensor(ex.stacked.shape());
      Tensor x_t = sgen::forward_diffuse(ex.stacked, eps, t, sched);
      Tensor pred = net.predict_value(x_t, c, t);
      double se = 0.0;
      for (int i = 0; i < pred.size(); ++i) {
        double d = pred[i] - eps[i];
        se += d * d;
      }
      total += se / pred.size();
    }
    return total / n;
  };

  UNetDenoiser net(tiny_model());
  NoiseSchedule sched = sgen::make_schedule(60, 1e-4, 0.02);
  auto data = tiny_dataset(1);
  double before = item_loss(net, data[0], sched);

  TrainConfig cfg = tiny_train(200, 2e-2);
  cfg.batch_size = 4;
  sgen::finetune_stereo(net, data, sched, cfg);
  double after = item_loss(net, data[0], sched);
  INFO("before " << before << " after " << after);
  CHECK(after < 0.1 * before);
}

// ---------------------------------------------------------------------------
// Stage 2
// ---------------------------------------------------------------------------

namespace {

// Differentiable toy reward: mean brightness of the left half. Gradients flow
// through generated pixels; no estimator stack needed for trainer contracts.
sgen::RewardTerms brightness_reward(const ad::Var& left, const ad::Var& right) {
  sgen::RewardTerms t;
  t.r_s = ad::mul(ad::sum_all(left), ad::constant_scalar(1.0f / left.val().size()));
  t.r_p = ad::constant_scalar(0.0f);
  t.r_c = ad::mul(ad::sum_all(right), ad::constant_scalar(1.0f / right.val().size()));
  t.r_total = ad::add(t.r_s, t.r_c);
  return t;
}

AlignPropConfig tiny_align(int iters, int per_iter, uint64_t seed = 11) {
  AlignPropConfig cfg;
  PromptSpec p;
  p.text = "a red square left a black background";
  cfg.prompts = {p};
  cfg.iters = iters;
  cfg.prompts_per_iter = per_iter;
  cfg.truncation_max = 3;
  cfg.learning_rate = 2e-3;
  cfg.sampler.num_sample_steps = 4;
  cfg.sampler.seed = 0;
  cfg.seed = seed;
  return cfg;
}

}  // namespace

TEST_CASE("stage-2 query accounting is exact and cumulative", "[trainers]") {
  UNetDenoiser net(tiny_model());
  NoiseSchedule sched = sgen::make_schedule(60, 1e-4, 0.02);
  AlignPropConfig cfg = tiny_align(5, 3);
  TrainingLog log = sgen::finetune_reward(
      net, sched, [](const ad::Var& l, const ad::Var& r, const PromptSpec&) {
        return brightness_reward(l, r);
      },
      cfg);
  REQUIRE(log.records.size() == 5);
  for (int i = 0; i < 5; ++i)
    CHECK(log.records[i].reward_queries == static_cast<int64_t>(3) * (i + 1));
  CHECK(log.records.back().reward_queries == cfg.iters * cfg.prompts_per_iter);
}

TEST_CASE("stage-2 ascends a pixel-mean reward", "[trainers]") {
  UNetDenoiser net(tiny_model());
  NoiseSchedule sched = sgen::make_schedule(60, 1e-4, 0.02);
  TrainingLog log = sgen::finetune_reward(
      net, sched, [](const ad::Var& l, const ad::Var& r, const PromptSpec&) {
        return brightness_reward(l, r);
      },
      tiny_align(12, 2));
  // loss = -reward must fall from the first to the last step.
  CHECK(log.records.back().loss < log.records.front().loss);
}

TEST_CASE("stage-2 runs are deterministic", "[trainers]") {
  NoiseSchedule sched = sgen::make_schedule(60, 1e-4, 0.02);
  auto reward = [](const ad::Var& l, const ad::Var& r, const PromptSpec&) {
    return brightness_reward(l, r);
  };
  UNetDenoiser a(tiny_model());
  sgen::finetune_reward(a, sched, reward, tiny_align(4, 2));
  UNetDenoiser b(tiny_model());
  sgen::finetune_reward(b, sched, reward, tiny_align(4, 2));
  CHECK(trainable_snapshot(a) == trainable_snapshot(b));
}

TEST_CASE("stage-2 non-finite rewards skip the update but count queries", "[trainers]") {
  UNetDenoiser net(tiny_model());
  auto before = trainable_snapshot(net);
  NoiseSchedule sched = sgen::make_schedule(60, 1e-4, 0.02);
  int calls = 0;
  TrainingLog log = sgen::finetune_reward(
      net, sched,
      [&calls](const ad::Var& l, const ad::Var& r, const PromptSpec&) {
        ++calls;
        sgen::RewardTerms t = brightness_reward(l, r);
        t.r_total = ad::mul(t.r_total, ad::constant_scalar(std::numeric_limits<float>::quiet_NaN()));
        return t;
      },
      tiny_align(3, 2));
  REQUIRE(log.records.size() == 3);
  for (const auto& rec : log.records) CHECK(rec.skipped);
  CHECK(log.records.back().reward_queries == 6);
  CHECK(calls == 6);  // every prompt still evaluated
  CHECK(trainable_snapshot(net) == before);
}

TEST_CASE("stage-2 held-out eval runs on schedule with fixed per-prompt seeds", "[trainers]") {
  UNetDenoiser net(tiny_model());
  NoiseSchedule sched = sgen::make_schedule(60, 1e-4, 0.02);
  AlignPropConfig cfg = tiny_align(4, 2);
  cfg.learning_rate = 0.0;  // frozen model: eval series must be flat
  PromptSpec q;
  q.text = "a blue circle right a white background";
  cfg.eval_prompts = {q};
  cfg.eval_every = 2;
  TrainingLog log = sgen::finetune_reward(
      net, sched, [](const ad::Var& l, const ad::Var& r, const PromptSpec&) {
        return brightness_reward(l, r);
      },
      cfg);
  // evals at step 0, 2, 4
  REQUIRE(log.evals.size() == 3);
  CHECK(log.evals[0].step == 0);
  CHECK(log.evals[1].step == 2);
  CHECK(log.evals[2].step == 4);
  CHECK(log.evals[1].reward_queries == 4);
  for (const auto& e : log.evals) {
    CHECK(e.r_total == Approx(log.evals[0].r_total));
    CHECK(e.r_s == Approx(log.evals[0].r_s));
  }
}

TEST_CASE("stage-2 validates its configuration", "[trainers]") {
  UNetDenoiser net(tiny_model());
  NoiseSchedule sched = sgen::make_schedule(60, 1e-4, 0.02);
  auto reward = [](const ad::Var& l, const ad::Var& r, const PromptSpec&) {
    return brightness_reward(l, r);
  };
  AlignPropConfig cfg = tiny_align(1, 1);
  cfg.prompts.clear();
  CHECK_THROWS_AS(sgen::finetune_reward(net, sched, reward, cfg), std::invalid_argument);
  cfg = tiny_align(1, 1);
  cfg.truncation_max = 9;  // > num_sample_steps = 4
  CHECK_THROWS_AS(sgen::finetune_reward(net, sched, reward, cfg), std::invalid_argument);
  cfg = tiny_align(1, 1);
  cfg.truncation_max = 0;
  CHECK_THROWS_AS(sgen::finetune_reward(net, sched, reward, cfg), std::invalid_argument);
}

TEST_CASE("prompt seeds are stable per prompt text", "[trainers]") {
  uint64_t a1 = sgen::prompt_seed(1, "a red square");
  uint64_t a2 = sgen::prompt_seed(1, "a red square");
  uint64_t b = sgen::prompt_seed(1, "a blue square");
  uint64_t c = sgen::prompt_seed(2, "a red square");
  CHECK(a1 == a2);
  CHECK(a1 != b);
  CHECK(a1 != c);
}

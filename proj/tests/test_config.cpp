#include <catch2/catch_amalgamated.hpp>
#include <fstream>

#include "stereogen/checkpoint.hpp"
#include "stereogen/config.hpp"
#include "test_util.hpp"

using sgen::DenoiserConfig;
using sgen::LoraInjection;
using sgen::RunConfig;
using sgen::ScheduleSpec;
using sgen::Tensor;
using sgen::UNetDenoiser;
namespace ad = sgen::ad;

namespace {

DenoiserConfig tiny_model() {
  DenoiserConfig cfg;
  cfg.height = 16;
  cfg.width = 16;
  cfg.base_channels = 4;
  cfg.channel_mults = {1, 2};
  cfg.temb_dim = 16;
  cfg.norm_groups = 2;
  cfg.seed = 9;
  cfg.lora_rank = 2;
  cfg.injection = LoraInjection::kAll;
  return cfg;
}

}  // namespace

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

TEST_CASE("default config round-trips through json", "[config]") {
  RunConfig c;
  sgen::json j = sgen::to_json(c);
  RunConfig back = sgen::runconfig_from_json(j);
  CHECK(sgen::to_json(back) == j);
  // Spot-check pinned defaults.
  CHECK(c.model.lora_rank == 4);
  CHECK(c.model.injection == LoraInjection::kAttention);
  CHECK(c.stage1.learning_rate == 1e-4);
  CHECK(c.stage1.lr_schedule == sgen::LrSchedule::kCosine);
  CHECK(c.stage1.batch_size == 8);
  CHECK(c.stage1.total_iters == 2000);
  CHECK(c.stage2.iters == 200);
  CHECK(c.stage2.prompts_per_iter == 16);
  CHECK(c.stage2.truncation_max == 10);
  CHECK(c.dataset.n == 500);
  CHECK(c.sampler.deterministic);
}

TEST_CASE("config files load with dotted overrides", "[config]") {
  sgtest::TempDir td("config");
  std::string path = (td.path() / "run.json").string();
  {
    std::ofstream f(path);
    f << R"({"seed": 4, "model": {"base_channels": 8}, "stage1": {"total_iters": 7}})";
  }
  RunConfig c = sgen::load_config(path, {"model.lora_rank=2", "stage1.learning_rate=0.5",
                                         "model.channel_mults=[1,2]", "dataset.dir=\"abc\""});
  CHECK(c.seed == 4);
  CHECK(c.model.base_channels == 8);
  CHECK(c.model.lora_rank == 2);
  CHECK(c.model.channel_mults == std::vector<int>{1, 2});
  CHECK(c.stage1.total_iters == 7);
  CHECK(c.stage1.learning_rate == 0.5);
  CHECK(c.dataset.dir == "abc");

  // Bare strings work without quotes.
  RunConfig c2 = sgen::default_config_with({"model.injection=all", "dataset.dir=xyz"});
  CHECK(c2.model.injection == LoraInjection::kAll);
  CHECK(c2.dataset.dir == "xyz");

  CHECK_THROWS_AS(sgen::default_config_with({"no_equals_sign"}), std::invalid_argument);
}

TEST_CASE("unknown config keys are rejected with a path", "[config]") {
  sgen::json j = sgen::to_json(RunConfig{});
  j["model"]["extra_knob"] = 1;
  try {
    sgen::runconfig_from_json(j);
    FAIL("expected rejection");
  } catch (const std::invalid_argument& e) {
    std::string msg = e.what();
    CHECK(msg.find("extra_knob") != std::string::npos);
    CHECK(msg.find("model") != std::string::npos);
  }

  sgen::json top = sgen::to_json(RunConfig{});
  top["stage3"] = sgen::json::object();
  CHECK_THROWS_AS(sgen::runconfig_from_json(top), std::invalid_argument);
}

TEST_CASE("config hash is stable and key-order independent", "[config]") {
  RunConfig a = sgen::default_config_with({"seed=1"});
  RunConfig b = sgen::default_config_with({"seed=1"});
  RunConfig c = sgen::default_config_with({"seed=2"});
  CHECK(sgen::config_hash(a) == sgen::config_hash(b));
  CHECK(sgen::config_hash(a) != sgen::config_hash(c));
  CHECK(sgen::config_hash(a).size() == 12);
}

TEST_CASE("bad schedule and injection names are rejected", "[config]") {
  CHECK_THROWS_AS(sgen::default_config_with({"model.injection=everything"}),
                  std::invalid_argument);
  CHECK_THROWS_AS(sgen::default_config_with({"stage1.lr_schedule=linear"}),
                  std::invalid_argument);
  CHECK_THROWS_AS(sgen::default_config_with({"schedule.num_steps=0"}), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

TEST_CASE("model checkpoints round-trip bitwise", "[checkpoint]") {
  sgtest::TempDir td("ckpt");
  std::string path = (td.path() / "model.ckpt").string();

  UNetDenoiser net(tiny_model());
  // Move adapters off init so the round trip carries real state.
  sgen::Rng rng(31);
  for (const auto& p : net.params().trainable())
    p->value = rng.normal_tensor(p->value.shape(), 0.1f);
  ScheduleSpec ss;
  ss.num_steps = 60;
  sgen::save_model(path, net, ss);

  sgen::LoadedModel lm = sgen::load_model(path);
  CHECK(lm.schedule.num_steps == 60);
  CHECK(sgen::to_json(lm.net->config()) == sgen::to_json(net.config()));

  Tensor x = sgen::Rng(7).normal_tensor(net.image_shape());
  Tensor c = sgen::Rng(8).normal_tensor({net.config().cond_dim});
  CHECK(sgen::max_abs_diff(net.predict_value(x, c, 3), lm.net->predict_value(x, c, 3)) == 0.0f);
}

TEST_CASE("adapter-only checkpoints reattach to a matching base", "[checkpoint]") {
  sgtest::TempDir td("adapters");
  std::string path = (td.path() / "adapters.ckpt").string();

  UNetDenoiser net(tiny_model());
  sgen::Rng rng(33);
  for (const auto& p : net.params().trainable())
    p->value = rng.normal_tensor(p->value.shape(), 0.1f);
  ScheduleSpec ss;
  sgen::save_adapters(path, net, ss);

  // Archive stores only adapters, plus rank/scale/injection via the config.
  sgen::Checkpoint ck = sgen::load_checkpoint(path);
  CHECK(ck.header.at("kind") == "adapters");
  CHECK(ck.header.at("model").at("lora_rank") == 2);
  CHECK(ck.header.at("model").at("injection") == "all");
  CHECK_FALSE(ck.header.at("adapted_layers").empty());
  CHECK(ck.arrays.size() == net.params().trainable().size());

  UNetDenoiser fresh(tiny_model());
  sgen::load_adapters_into(fresh, path);
  Tensor x = sgen::Rng(7).normal_tensor(net.image_shape());
  Tensor c = sgen::Rng(8).normal_tensor({net.config().cond_dim});
  CHECK(sgen::max_abs_diff(net.predict_value(x, c, 5), fresh.predict_value(x, c, 5)) == 0.0f);

  // Mismatched base config is refused.
  DenoiserConfig other = tiny_model();
  other.seed = 1234;
  UNetDenoiser wrong(other);
  CHECK_THROWS_AS(sgen::load_adapters_into(wrong, path), std::runtime_error);
}

TEST_CASE("corrupt checkpoints are rejected", "[checkpoint]") {
  sgtest::TempDir td("corrupt");
  std::string path = (td.path() / "m.ckpt").string();
  UNetDenoiser net(tiny_model());
  ScheduleSpec ss;
  sgen::save_model(path, net, ss);

  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(-2, std::ios::end);
    char junk = 0x5a;
    f.write(&junk, 1);
  }
  CHECK_THROWS_WITH(sgen::load_model(path), Catch::Matchers::ContainsSubstring("checksum"));

  std::string missing = (td.path() / "nope.ckpt").string();
  CHECK_THROWS_AS(sgen::load_model(missing), std::runtime_error);

  std::string bad = (td.path() / "bad.ckpt").string();
  {
    std::ofstream f(bad, std::ios::binary);
    f << "NOTMAGIC" << std::string(64, '\0');
  }
  CHECK_THROWS_WITH(sgen::load_model(bad), Catch::Matchers::ContainsSubstring("magic"));
}

TEST_CASE("train-state checkpoints resume training bitwise", "[checkpoint]") {
  // Train 6 iters in one go vs 3 + save/load + 3: identical parameters.
  sgtest::TempDir td("resume");
  std::string path = (td.path() / "state.ckpt").string();

  sgen::GenRanges gr;
  gr.height = 8;
  gr.width = 16;
  sgen::Rng drng(55);
  std::vector<sgen::StackedExample> data;
  for (int i = 0; i < 4; ++i) {
    sgen::SceneSpec spec = sgen::make_scene(drng, gr);
    data.push_back({sgen::stack(sgen::render_stereo(spec).pair), sgen::caption(spec)});
  }
  ScheduleSpec ss;
  ss.num_steps = 60;
  sgen::NoiseSchedule sched = ss.make();

  sgen::TrainConfig cfg;
  cfg.learning_rate = 5e-3;
  cfg.batch_size = 2;
  cfg.total_iters = 6;
  cfg.seed = 77;

  UNetDenoiser straight(tiny_model());
  sgen::Adam opt_s(straight.params(), {cfg.learning_rate});
  sgen::finetune_stereo(straight, data, sched, cfg, opt_s);

  UNetDenoiser first(tiny_model());
  sgen::Adam opt_f(first.params(), {cfg.learning_rate});
  sgen::TrainConfig half = cfg;
  half.total_iters = 3;  // cosine horizon differs; use constant for equality
  half.lr_schedule = cfg.lr_schedule;
  // Run [0,3) of the full horizon by resuming semantics: keep total_iters and
  // stop early via start/total pair.
  sgen::TrainConfig leg1 = cfg;
  leg1.total_iters = 3;
  leg1.lr_schedule = sgen::LrSchedule::kConstant;
  sgen::TrainConfig full_const = cfg;
  full_const.lr_schedule = sgen::LrSchedule::kConstant;
  UNetDenoiser straight2(tiny_model());
  sgen::Adam opt_s2(straight2.params(), {cfg.learning_rate});
  sgen::finetune_stereo(straight2, data, sched, full_const, opt_s2);

  sgen::finetune_stereo(first, data, sched, leg1, opt_f);
  sgen::save_train_state(path, first, ss, opt_f, 3);

  sgen::ResumedTrainState st = sgen::load_train_state(path);
  CHECK(st.next_iter == 3);
  sgen::Adam opt_r(st.net->params(), {cfg.learning_rate});
  sgen::restore_optimizer(opt_r, st);
  sgen::TrainConfig leg2 = full_const;
  leg2.start_iter = st.next_iter;
  sgen::finetune_stereo(*st.net, data, sched.betas.size() == 60 ? sched : st.schedule.make(), leg2,
                        opt_r);

  auto snap = [](UNetDenoiser& n) {
    std::vector<float> v;
    for (const auto& p : n.params().trainable())
      for (int i = 0; i < p->value.size(); ++i) v.push_back(p->value[i]);
    return v;
  };
  CHECK(snap(*st.net) == snap(straight2));
}

TEST_CASE("mono checkpoints round-trip bitwise", "[checkpoint]") {
  sgtest::TempDir td("mono");
  std::string path = (td.path() / "mono.ckpt").string();
  sgen::MonoConfig mc;
  mc.channels = 6;
  mc.seed = 313;
  sgen::TinyMonoNet net(mc);
  sgen::Rng rng(3);
  for (const auto& p : net.params().all())
    p->value = rng.normal_tensor(p->value.shape(), 0.2f);
  sgen::save_mono(path, net);

  auto back = sgen::load_mono(path);
  CHECK(back->config().channels == 6);
  Tensor img = rng.normal_tensor({3, 8, 12});
  CHECK(sgen::max_abs_diff(net.estimate_value(img), back->estimate_value(img)) == 0.0f);
}

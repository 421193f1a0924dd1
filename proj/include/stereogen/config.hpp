#pragma once

// Run configuration: one JSON document covering every stage of the pipeline,
// with schema validation (unknown keys rejected), dotted-key overrides for
// the CLI (`--set stage1.seed=7`), and a stable serialized form that hashes
// into run-directory names.

#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "stereogen/diffusion.hpp"
#include "stereogen/disparity.hpp"
#include "stereogen/mono.hpp"
#include "stereogen/rewards.hpp"
#include "stereogen/rng.hpp"
#include "stereogen/synthdata.hpp"
#include "stereogen/trainers.hpp"
#include "stereogen/unet.hpp"

namespace sgen {

using json = nlohmann::json;

// Constructor arguments of make_schedule, kept alongside the model config so
// checkpoints can rebuild the exact schedule.
struct ScheduleSpec {
  int num_steps = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;

  NoiseSchedule make() const { return make_schedule(num_steps, beta_start, beta_end); }
};

struct Stage2Config {
  int iters = 200;
  int prompts_per_iter = 16;
  int truncation_max = 10;
  double learning_rate = 1e-4;
  std::string lr_schedule = "constant";
  uint64_t seed = 0;
  int num_train_prompts = 16;
  int num_eval_prompts = 8;
  int eval_every = 20;
};

struct DatasetConfig {
  std::string dir = "dataset";
  int n = 500;
  uint64_t seed = 0;
  GenRanges ranges;
};

struct RunConfig {
  std::string run_dir = "runs";
  uint64_t seed = 0;
  DatasetConfig dataset;
  DenoiserConfig model;
  ScheduleSpec schedule;
  SamplerConfig sampler{12, 1.0, true, 0};
  MatcherConfig matcher;
  MonoTrainConfig mono;
  RewardWeights rewards;
  TrainConfig stage1;
  Stage2Config stage2;
  int eval_prompts = 8;
};

// ---------------------------------------------------------------------------
// JSON (de)serialization. Readers validate every key so a typo in a config
// file fails loudly instead of silently using a default.
// ---------------------------------------------------------------------------

namespace detail {

inline void check_keys(const json& j, const std::string& where,
                       std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw std::invalid_argument("config: " + where + " must be an object");
  for (const auto& [key, _] : j.items()) {
    bool ok = false;
    for (const char* a : allowed)
      if (key == a) {
        ok = true;
        break;
      }
    if (!ok) throw std::invalid_argument("config: unknown key '" + where + "." + key + "'");
  }
}

template <class T>
inline void get_if(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace detail

inline json to_json(const GenRanges& r) {
  return {{"min_layers", r.min_layers}, {"max_layers", r.max_layers}, {"min_disp", r.min_disp},
          {"max_disp", r.max_disp},     {"height", r.height},         {"width", r.width},
          {"min_size", r.min_size},     {"max_size", r.max_size}};
}

inline GenRanges ranges_from_json(const json& j, const std::string& where) {
  detail::check_keys(j, where, {"min_layers", "max_layers", "min_disp", "max_disp", "height",
                                "width", "min_size", "max_size"});
  GenRanges r;
  detail::get_if(j, "min_layers", r.min_layers);
  detail::get_if(j, "max_layers", r.max_layers);
  detail::get_if(j, "min_disp", r.min_disp);
  detail::get_if(j, "max_disp", r.max_disp);
  detail::get_if(j, "height", r.height);
  detail::get_if(j, "width", r.width);
  detail::get_if(j, "min_size", r.min_size);
  detail::get_if(j, "max_size", r.max_size);
  return r;
}

inline json to_json(const DenoiserConfig& c) {
  return {{"height", c.height},
          {"width", c.width},
          {"channels", c.channels},
          {"base_channels", c.base_channels},
          {"channel_mults", c.channel_mults},
          {"temb_dim", c.temb_dim},
          {"cond_dim", c.cond_dim},
          {"norm_groups", c.norm_groups},
          {"seed", c.seed},
          {"lora_rank", c.lora_rank},
          {"lora_scale", c.lora_scale},
          {"injection", injection_name(c.injection)}};
}

inline DenoiserConfig denoiser_from_json(const json& j, const std::string& where) {
  detail::check_keys(j, where,
                     {"height", "width", "channels", "base_channels", "channel_mults", "temb_dim",
                      "cond_dim", "norm_groups", "seed", "lora_rank", "lora_scale", "injection"});
  DenoiserConfig c;
  detail::get_if(j, "height", c.height);
  detail::get_if(j, "width", c.width);
  detail::get_if(j, "channels", c.channels);
  detail::get_if(j, "base_channels", c.base_channels);
  detail::get_if(j, "channel_mults", c.channel_mults);
  detail::get_if(j, "temb_dim", c.temb_dim);
  detail::get_if(j, "cond_dim", c.cond_dim);
  detail::get_if(j, "norm_groups", c.norm_groups);
  detail::get_if(j, "seed", c.seed);
  detail::get_if(j, "lora_rank", c.lora_rank);
  detail::get_if(j, "lora_scale", c.lora_scale);
  if (j.contains("injection")) c.injection = parse_injection(j.at("injection").get<std::string>());
  return c;
}

inline json to_json(const ScheduleSpec& s) {
  return {{"num_steps", s.num_steps}, {"beta_start", s.beta_start}, {"beta_end", s.beta_end}};
}

inline ScheduleSpec schedule_from_json(const json& j, const std::string& where) {
  detail::check_keys(j, where, {"num_steps", "beta_start", "beta_end"});
  ScheduleSpec s;
  detail::get_if(j, "num_steps", s.num_steps);
  detail::get_if(j, "beta_start", s.beta_start);
  detail::get_if(j, "beta_end", s.beta_end);
  return s;
}

inline json to_json(const SamplerConfig& s) {
  return {{"num_sample_steps", s.num_sample_steps},
          {"guidance_scale", s.guidance_scale},
          {"seed", s.seed}};
}

inline SamplerConfig sampler_from_json(const json& j, const std::string& where) {
  detail::check_keys(j, where, {"num_sample_steps", "guidance_scale", "seed"});
  SamplerConfig s;
  s.num_sample_steps = 12;
  detail::get_if(j, "num_sample_steps", s.num_sample_steps);
  detail::get_if(j, "guidance_scale", s.guidance_scale);
  detail::get_if(j, "seed", s.seed);
  return s;
}

inline json to_json(const MatcherConfig& m) {
  return {{"max_disp", m.max_disp}, {"d_min", m.d_min}, {"patch", m.patch},
          {"temperature", m.temperature}};
}

inline MatcherConfig matcher_from_json(const json& j, const std::string& where) {
  detail::check_keys(j, where, {"max_disp", "d_min", "patch", "temperature"});
  MatcherConfig m;
  detail::get_if(j, "max_disp", m.max_disp);
  detail::get_if(j, "d_min", m.d_min);
  detail::get_if(j, "patch", m.patch);
  detail::get_if(j, "temperature", m.temperature);
  return m;
}

inline json to_json(const MonoTrainConfig& m) {
  return {{"channels", m.model.channels}, {"model_seed", m.model.seed}, {"lr", m.lr},
          {"batch_size", m.batch_size},   {"total_iters", m.total_iters}, {"seed", m.seed}};
}

inline MonoTrainConfig mono_from_json(const json& j, const std::string& where) {
  detail::check_keys(j, where, {"channels", "model_seed", "lr", "batch_size", "total_iters", "seed"});
  MonoTrainConfig m;
  detail::get_if(j, "channels", m.model.channels);
  detail::get_if(j, "model_seed", m.model.seed);
  detail::get_if(j, "lr", m.lr);
  detail::get_if(j, "batch_size", m.batch_size);
  detail::get_if(j, "total_iters", m.total_iters);
  detail::get_if(j, "seed", m.seed);
  return m;
}

inline json to_json(const RewardWeights& w) {
  return {{"alpha", w.alpha}, {"beta", w.beta}, {"gamma", w.gamma}};
}

inline RewardWeights weights_from_json(const json& j, const std::string& where) {
  detail::check_keys(j, where, {"alpha", "beta", "gamma"});
  RewardWeights w;
  detail::get_if(j, "alpha", w.alpha);
  detail::get_if(j, "beta", w.beta);
  detail::get_if(j, "gamma", w.gamma);
  return w;
}

inline json to_json(const TrainConfig& t) {
  return {{"learning_rate", t.learning_rate},
          {"lr_schedule", lr_schedule_name(t.lr_schedule)},
          {"batch_size", t.batch_size},
          {"grad_accum_steps", t.grad_accum_steps},
          {"total_iters", t.total_iters},
          {"seed", t.seed}};
}

inline TrainConfig train_from_json(const json& j, const std::string& where) {
  detail::check_keys(j, where, {"learning_rate", "lr_schedule", "batch_size", "grad_accum_steps",
                                "total_iters", "seed"});
  TrainConfig t;
  detail::get_if(j, "learning_rate", t.learning_rate);
  if (j.contains("lr_schedule"))
    t.lr_schedule = parse_lr_schedule(j.at("lr_schedule").get<std::string>());
  detail::get_if(j, "batch_size", t.batch_size);
  detail::get_if(j, "grad_accum_steps", t.grad_accum_steps);
  detail::get_if(j, "total_iters", t.total_iters);
  detail::get_if(j, "seed", t.seed);
  return t;
}

inline json to_json(const Stage2Config& s) {
  return {{"iters", s.iters},
          {"prompts_per_iter", s.prompts_per_iter},
          {"truncation_max", s.truncation_max},
          {"learning_rate", s.learning_rate},
          {"lr_schedule", s.lr_schedule},
          {"seed", s.seed},
          {"num_train_prompts", s.num_train_prompts},
          {"num_eval_prompts", s.num_eval_prompts},
          {"eval_every", s.eval_every}};
}

inline Stage2Config stage2_from_json(const json& j, const std::string& where) {
  detail::check_keys(j, where,
                     {"iters", "prompts_per_iter", "truncation_max", "learning_rate", "lr_schedule",
                      "seed", "num_train_prompts", "num_eval_prompts", "eval_every"});
  Stage2Config s;
  detail::get_if(j, "iters", s.iters);
  detail::get_if(j, "prompts_per_iter", s.prompts_per_iter);
  detail::get_if(j, "truncation_max", s.truncation_max);
  detail::get_if(j, "learning_rate", s.learning_rate);
  detail::get_if(j, "lr_schedule", s.lr_schedule);
  parse_lr_schedule(s.lr_schedule);  // validate
  detail::get_if(j, "seed", s.seed);
  detail::get_if(j, "num_train_prompts", s.num_train_prompts);
  detail::get_if(j, "num_eval_prompts", s.num_eval_prompts);
  detail::get_if(j, "eval_every", s.eval_every);
  return s;
}

inline json to_json(const DatasetConfig& d) {
  return {{"dir", d.dir}, {"n", d.n}, {"seed", d.seed}, {"ranges", to_json(d.ranges)}};
}

inline DatasetConfig dataset_from_json(const json& j, const std::string& where) {
  detail::check_keys(j, where, {"dir", "n", "seed", "ranges"});
  DatasetConfig d;
  detail::get_if(j, "dir", d.dir);
  detail::get_if(j, "n", d.n);
  detail::get_if(j, "seed", d.seed);
  if (j.contains("ranges")) d.ranges = ranges_from_json(j.at("ranges"), where + ".ranges");
  return d;
}

inline json to_json(const RunConfig& c) {
  return {{"run_dir", c.run_dir},     {"seed", c.seed},
          {"dataset", to_json(c.dataset)}, {"model", to_json(c.model)},
          {"schedule", to_json(c.schedule)}, {"sampler", to_json(c.sampler)},
          {"matcher", to_json(c.matcher)}, {"mono", to_json(c.mono)},
          {"rewards", to_json(c.rewards)}, {"stage1", to_json(c.stage1)},
          {"stage2", to_json(c.stage2)}, {"eval_prompts", c.eval_prompts}};
}

inline RunConfig runconfig_from_json(const json& j) {
  detail::check_keys(j, "<root>",
                     {"run_dir", "seed", "dataset", "model", "schedule", "sampler", "matcher",
                      "mono", "rewards", "stage1", "stage2", "eval_prompts"});
  RunConfig c;
  detail::get_if(j, "run_dir", c.run_dir);
  detail::get_if(j, "seed", c.seed);
  if (j.contains("dataset")) c.dataset = dataset_from_json(j.at("dataset"), "dataset");
  if (j.contains("model")) c.model = denoiser_from_json(j.at("model"), "model");
  if (j.contains("schedule")) c.schedule = schedule_from_json(j.at("schedule"), "schedule");
  if (j.contains("sampler")) c.sampler = sampler_from_json(j.at("sampler"), "sampler");
  if (j.contains("matcher")) c.matcher = matcher_from_json(j.at("matcher"), "matcher");
  if (j.contains("mono")) c.mono = mono_from_json(j.at("mono"), "mono");
  if (j.contains("rewards")) c.rewards = weights_from_json(j.at("rewards"), "rewards");
  if (j.contains("stage1")) c.stage1 = train_from_json(j.at("stage1"), "stage1");
  if (j.contains("stage2")) c.stage2 = stage2_from_json(j.at("stage2"), "stage2");
  detail::get_if(j, "eval_prompts", c.eval_prompts);
  c.sampler.deterministic = true;
  return c;
}

// ---------------------------------------------------------------------------
// File loading and dotted-key overrides
// ---------------------------------------------------------------------------

// Applies "a.b.c=value" onto the document; the value parses as JSON when
// possible and falls back to a plain string.
inline void apply_override(json& doc, const std::string& expr) {
  auto eq = expr.find('=');
  if (eq == std::string::npos || eq == 0)
    throw std::invalid_argument("override must look like key.path=value: " + expr);
  std::string path = expr.substr(0, eq);
  std::string raw = expr.substr(eq + 1);
  json value;
  try {
    value = json::parse(raw);
  } catch (const json::parse_error&) {
    value = raw;
  }
  json* cur = &doc;
  size_t start = 0;
  while (true) {
    size_t dot = path.find('.', start);
    std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (key.empty()) throw std::invalid_argument("override has an empty path segment: " + expr);
    if (dot == std::string::npos) {
      (*cur)[key] = value;
      return;
    }
    if (!cur->contains(key)) (*cur)[key] = json::object();
    cur = &(*cur)[key];
    start = dot + 1;
  }
}

inline RunConfig load_config(const std::string& path, const std::vector<std::string>& overrides = {}) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("config: cannot open " + path);
  json doc = json::parse(f);
  for (const auto& o : overrides) apply_override(doc, o);
  return runconfig_from_json(doc);
}

inline RunConfig default_config_with(const std::vector<std::string>& overrides) {
  json doc = to_json(RunConfig{});
  for (const auto& o : overrides) apply_override(doc, o);
  return runconfig_from_json(doc);
}

// Canonical serialized form (sorted keys via nlohmann's std::map backing);
// its hash names the run directory.
inline std::string config_hash(const RunConfig& c) {
  std::string s = to_json(c).dump();
  uint64_t h = fnv1a64(s);
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return std::string(buf, 12);  // 48 bits is plenty for run naming
}

}  // namespace sgen

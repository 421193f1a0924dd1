#pragma once

// Checkpoint archive: 8-byte magic, little-endian u64 header length, JSON
// header (format version, kind, configs, array table, payload checksum),
// then raw float32 little-endian arrays back to back. One format serves
// full models, adapter-only exports, the monocular net, and optimizer state.

#include <zlib.h>

#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "stereogen/config.hpp"
#include "stereogen/mono.hpp"
#include "stereogen/optim.hpp"
#include "stereogen/unet.hpp"

namespace sgen {

inline constexpr char kCkptMagic[8] = {'S', 'G', 'C', 'K', 'P', 'T', '0', '1'};
inline constexpr int kCkptVersion = 1;

struct NamedArray {
  std::string name;
  const Tensor* tensor;
};

struct Checkpoint {
  json header;
  std::map<std::string, Tensor> arrays;

  const Tensor& need(const std::string& name) const {
    auto it = arrays.find(name);
    if (it == arrays.end()) throw std::runtime_error("checkpoint: missing array " + name);
    return it->second;
  }
};

namespace detail {

inline void put_u64(std::ostream& os, uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

inline uint64_t get_u64(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[i]) << (8 * i);
  return v;
}

// Tensors are stored as raw float32 LE; this code targets little-endian
// hosts (asserted at build time elsewhere via png/disparity IO paths).
inline uint32_t crc_of(const std::vector<NamedArray>& arrays) {
  uLong crc = crc32(0L, Z_NULL, 0);
  for (const auto& a : arrays)
    crc = crc32(crc, reinterpret_cast<const Bytef*>(a.tensor->data()),
                static_cast<uInt>(a.tensor->size() * sizeof(float)));
  return static_cast<uint32_t>(crc);
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const std::string& kind, json meta,
                            const std::vector<NamedArray>& arrays) {
  json table = json::array();
  uint64_t offset = 0;
  for (const auto& a : arrays) {
    uint64_t bytes = static_cast<uint64_t>(a.tensor->size()) * sizeof(float);
    table.push_back({{"name", a.name}, {"shape", a.tensor->shape()}, {"offset", offset},
                     {"bytes", bytes}});
    offset += bytes;
  }
  json header = std::move(meta);
  header["format_version"] = kCkptVersion;
  header["kind"] = kind;
  header["arrays"] = std::move(table);
  header["payload_crc32"] = detail::crc_of(arrays);
  std::string hs = header.dump();

  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("checkpoint: cannot open for write: " + path);
  f.write(kCkptMagic, 8);
  detail::put_u64(f, hs.size());
  f.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  for (const auto& a : arrays)
    f.write(reinterpret_cast<const char*>(a.tensor->data()),
            static_cast<std::streamsize>(a.tensor->size() * sizeof(float)));
  if (!f) throw std::runtime_error("checkpoint: write failed: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("checkpoint: cannot open " + path);
  char magic[8];
  f.read(magic, 8);
  if (!f || std::memcmp(magic, kCkptMagic, 8) != 0)
    throw std::runtime_error("checkpoint: bad magic in " + path);
  uint64_t hlen = detail::get_u64(f);
  std::string hs(hlen, '\0');
  f.read(hs.data(), static_cast<std::streamsize>(hlen));
  if (!f) throw std::runtime_error("checkpoint: truncated header in " + path);

  Checkpoint ck;
  ck.header = json::parse(hs);
  if (ck.header.at("format_version").get<int>() != kCkptVersion)
    throw std::runtime_error("checkpoint: unsupported format version in " + path);

  uLong crc = crc32(0L, Z_NULL, 0);
  for (const auto& entry : ck.header.at("arrays")) {
    std::string name = entry.at("name").get<std::string>();
    std::vector<int> shape = entry.at("shape").get<std::vector<int>>();
    uint64_t bytes = entry.at("bytes").get<uint64_t>();
    Tensor t(shape);
    if (static_cast<uint64_t>(t.size()) * sizeof(float) != bytes)
      throw std::runtime_error("checkpoint: shape/bytes mismatch for " + name);
    f.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(bytes));
    if (!f) throw std::runtime_error("checkpoint: truncated payload at " + name);
    crc = crc32(crc, reinterpret_cast<const Bytef*>(t.data()), static_cast<uInt>(bytes));
    ck.arrays.emplace(std::move(name), std::move(t));
  }
  if (static_cast<uint32_t>(crc) != ck.header.at("payload_crc32").get<uint32_t>())
    throw std::runtime_error("checkpoint: payload checksum mismatch in " + path);
  return ck;
}

// ---------------------------------------------------------------------------
// Model-level wrappers
// ---------------------------------------------------------------------------

namespace detail {

inline json model_meta(const UNetDenoiser& net, const ScheduleSpec& sched) {
  json novel;
  novel["model"] = to_json(net.config());
  novel["schedule"] = to_json(sched);
  novel["stacking"] = "left_top";
  return novel;
}

inline std::vector<NamedArray> param_arrays(const std::vector<ad::ParamPtr>& params) {
  std::vector<NamedArray> out;
  out.reserve(params.size());
  for (const auto& p : params) out.push_back({p->name, &p->value});
  return out;
}

}  // namespace detail

inline void save_model(const std::string& path, UNetDenoiser& net, const ScheduleSpec& sched) {
  save_checkpoint(path, "model", detail::model_meta(net, sched),
                  detail::param_arrays(net.params().all()));
}

// Adapter-only export: trainable arrays plus enough header to validate the
// base they re-attach to (rank, scale, injection, adapted layer names).
inline void save_adapters(const std::string& path, UNetDenoiser& net, const ScheduleSpec& sched) {
  json meta = detail::model_meta(net, sched);
  json layers = json::array();
  for (const auto& p : net.params().trainable()) {
    const std::string& n = p->name;
    if (n.size() > 2 && n.compare(n.size() - 2, 2, ".A") == 0)
      layers.push_back(n.substr(0, n.size() - 2));
  }
  meta["adapted_layers"] = std::move(layers);
  return save_checkpoint(path, "adapters", std::move(meta),
                         detail::param_arrays(net.params().trainable()));
}

struct LoadedModel {
  std::unique_ptr<UNetDenoiser> net;
  ScheduleSpec schedule;
};

inline void load_arrays_into(ad::ParamSet& set, const Checkpoint& ck, bool all_of_set) {
  size_t used = 0;
  for (const auto& p : set.all()) {
    auto it = ck.arrays.find(p->name);
    if (it == ck.arrays.end()) {
      if (all_of_set) throw std::runtime_error("checkpoint: missing array " + p->name);
      continue;
    }
    if (it->second.shape() != p->value.shape())
      throw std::runtime_error("checkpoint: shape mismatch for " + p->name);
    p->value = it->second.clone();
    ++used;
  }
  if (used != ck.arrays.size())
    throw std::runtime_error("checkpoint: archive has arrays the model does not");
}

inline LoadedModel load_model(const std::string& path) {
  Checkpoint ck = load_checkpoint(path);
  std::string kind = ck.header.at("kind").get<std::string>();
  if (kind != "model") throw std::runtime_error("checkpoint: expected a model archive, got " + kind);
  LoadedModel lm;
  DenoiserConfig mc = denoiser_from_json(ck.header.at("model"), "checkpoint.model");
  lm.schedule = schedule_from_json(ck.header.at("schedule"), "checkpoint.schedule");
  lm.net = std::make_unique<UNetDenoiser>(mc);
  load_arrays_into(lm.net->params(), ck, /*all_of_set=*/true);
  return lm;
}

// Loads an adapter archive onto a freshly built matching base.
inline void load_adapters_into(UNetDenoiser& net, const std::string& path) {
  Checkpoint ck = load_checkpoint(path);
  std::string kind = ck.header.at("kind").get<std::string>();
  if (kind != "adapters")
    throw std::runtime_error("checkpoint: expected an adapter archive, got " + kind);
  DenoiserConfig mc = denoiser_from_json(ck.header.at("model"), "checkpoint.model");
  if (to_json(mc) != to_json(net.config()))
    throw std::runtime_error("checkpoint: adapter archive does not match the base model config");
  for (const auto& [name, t] : ck.arrays) {
    ad::ParamPtr p = net.params().find(name);
    if (!p) throw std::runtime_error("checkpoint: adapter array " + name + " not in model");
    if (!p->trainable) throw std::runtime_error("checkpoint: " + name + " is not an adapter");
    if (t.shape() != p->value.shape())
      throw std::runtime_error("checkpoint: shape mismatch for " + name);
    p->value = t.clone();
  }
}

// ---------------------------------------------------------------------------
// Trainer state (parameters + Adam moments + iteration counter)
// ---------------------------------------------------------------------------

inline void save_train_state(const std::string& path, UNetDenoiser& net, const ScheduleSpec& sched,
                             const Adam& opt, int next_iter) {
  json meta = detail::model_meta(net, sched);
  meta["next_iter"] = next_iter;
  meta["adam_steps"] = opt.steps_taken();
  std::vector<NamedArray> arrays = detail::param_arrays(net.params().all());
  for (const auto& s : opt.slots()) {
    arrays.push_back({"adam.m." + s.param->name, &s.m});
    arrays.push_back({"adam.v." + s.param->name, &s.v});
  }
  save_checkpoint(path, "train_state", std::move(meta), arrays);
}

struct ResumedTrainState {
  std::unique_ptr<UNetDenoiser> net;
  ScheduleSpec schedule;
  int next_iter = 0;
  int64_t adam_steps = 0;
  Checkpoint ck;  // keeps moment arrays for restore_optimizer
};

inline ResumedTrainState load_train_state(const std::string& path) {
  Checkpoint ck = load_checkpoint(path);
  if (ck.header.at("kind").get<std::string>() != "train_state")
    throw std::runtime_error("checkpoint: expected a train_state archive");
  ResumedTrainState st;
  DenoiserConfig mc = denoiser_from_json(ck.header.at("model"), "checkpoint.model");
  st.schedule = schedule_from_json(ck.header.at("schedule"), "checkpoint.schedule");
  st.next_iter = ck.header.at("next_iter").get<int>();
  st.adam_steps = ck.header.at("adam_steps").get<int64_t>();
  st.net = std::make_unique<UNetDenoiser>(mc);
  for (const auto& p : st.net->params().all()) {
    auto it = ck.arrays.find(p->name);
    if (it == ck.arrays.end()) throw std::runtime_error("checkpoint: missing array " + p->name);
    if (it->second.shape() != p->value.shape())
      throw std::runtime_error("checkpoint: shape mismatch for " + p->name);
    p->value = it->second.clone();
  }
  st.ck = std::move(ck);
  return st;
}

inline void restore_optimizer(Adam& opt, const ResumedTrainState& st) {
  for (auto& s : opt.slots()) {
    const Tensor& m = st.ck.need("adam.m." + s.param->name);
    const Tensor& v = st.ck.need("adam.v." + s.param->name);
    if (m.shape() != s.m.shape() || v.shape() != s.v.shape())
      throw std::runtime_error("checkpoint: optimizer state shape mismatch for " + s.param->name);
    s.m = m.clone();
    s.v = v.clone();
  }
  opt.set_steps_taken(st.adam_steps);
}

// ---------------------------------------------------------------------------
// Monocular estimator
// ---------------------------------------------------------------------------

inline void save_mono(const std::string& path, TinyMonoNet& net) {
  json meta;
  meta["mono"] = {{"channels", net.config().channels}, {"seed", net.config().seed}};
  save_checkpoint(path, "mono", std::move(meta), detail::param_arrays(net.params().all()));
}

inline std::unique_ptr<TinyMonoNet> load_mono(const std::string& path) {
  Checkpoint ck = load_checkpoint(path);
  if (ck.header.at("kind").get<std::string>() != "mono")
    throw std::runtime_error("checkpoint: expected a mono archive");
  MonoConfig mc;
  mc.channels = ck.header.at("mono").at("channels").get<int>();
  mc.seed = ck.header.at("mono").at("seed").get<uint64_t>();
  auto net = std::make_unique<TinyMonoNet>(mc);
  load_arrays_into(net->params(), ck, /*all_of_set=*/true);
  return net;
}

}  // namespace sgen

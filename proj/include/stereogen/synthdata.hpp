#pragma once

// Procedural layered stereo scenes with exact integer disparities, template
// captions, and the on-disk dataset layout. The right view paints each layer
// shifted left by its disparity, sampling the same deterministic speckle in
// left-view coordinates, so left(y,x) = right(y, x-d) holds bitwise on
// non-occluded pixels. Speckle cell size grows with disparity; that texture
// frequency is the monocular depth cue the tiny predictor learns from.

#include <zlib.h>

#include <array>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <string>
#include <vector>

#include "stereogen/codec.hpp"
#include "stereogen/png.hpp"
#include "stereogen/rng.hpp"
#include "stereogen/tensor.hpp"

namespace sgen {

// ---------------------------------------------------------------------------
// Vocabulary
// ---------------------------------------------------------------------------

struct NamedColor {
  const char* word;
  std::array<float, 3> rgb;
};

// Base colors stay within +/-0.8 so the two speckle fields (amplitude 0.1
// each) keep every pixel inside [-1, 1].
inline const std::vector<NamedColor>& foreground_palette() {
  static const std::vector<NamedColor> p = {
      {"red", {0.8f, -0.8f, -0.8f}},    {"green", {-0.8f, 0.8f, -0.8f}},
      {"blue", {-0.8f, -0.8f, 0.8f}},   {"yellow", {0.8f, 0.8f, -0.8f}},
      {"magenta", {0.8f, -0.8f, 0.8f}}, {"cyan", {-0.8f, 0.8f, 0.8f}},
  };
  return p;
}

inline const std::vector<NamedColor>& background_palette() {
  static const std::vector<NamedColor> p = {
      {"gray", {0.0f, 0.0f, 0.0f}},
      {"white", {0.8f, 0.8f, 0.8f}},
      {"black", {-0.8f, -0.8f, -0.8f}},
  };
  return p;
}

inline const std::vector<std::string>& shape_words() {
  static const std::vector<std::string> w = {"rectangle", "ellipse"};
  return w;
}

inline const std::vector<std::string>& position_words() {
  static const std::vector<std::string> w = {"on the left of", "in front of", "on the right of"};
  return w;
}

// ---------------------------------------------------------------------------
// Scene types
// ---------------------------------------------------------------------------

struct LayerSpec {
  std::string shape;            // "rectangle" | "ellipse"
  std::array<float, 3> color{}; // in [-1,1]^3
  std::string color_word;
  float pos_x = 0.5f, pos_y = 0.5f;  // normalized center in the left view
  float size_w = 0.3f, size_h = 0.3f;
  int disparity = 0;  // integer pixels, >= 0
  uint32_t texture_seed = 0;
};

struct SceneSpec {
  std::array<float, 3> bg_color{};
  std::string bg_word;
  uint32_t bg_texture_seed = 0;
  std::vector<LayerSpec> layers;  // sorted far -> near (strictly increasing disparity)
  int height = 32, width = 64;    // per half
  std::string baseline_tag;
};

struct PromptSpec {
  std::string text;
  std::array<float, 3> target_color{};  // nearest layer's color
  std::string color_word, shape_word, position_word, bg_word;
};

struct GenRanges {
  int min_layers = 1, max_layers = 4;
  int min_disp = 1, max_disp = 8;
  int height = 32, width = 64;
  float min_size = 0.2f, max_size = 0.55f;
};

// ---------------------------------------------------------------------------
// Scene generation
// ---------------------------------------------------------------------------

inline SceneSpec make_scene(Rng& rng, const GenRanges& r) {
  if (r.min_layers > r.max_layers || r.min_layers < 1)
    throw std::invalid_argument("make_scene: infeasible layer range");
  if (r.min_disp < 0 || r.min_disp > r.max_disp)
    throw std::invalid_argument("make_scene: infeasible disparity range");
  int span = r.max_disp - r.min_disp + 1;
  if (span < r.min_layers)
    throw std::invalid_argument("make_scene: disparity range too narrow for min_layers");
  if (r.height < 4 || r.width < 4) throw std::invalid_argument("make_scene: resolution too small");

  SceneSpec s;
  s.height = r.height;
  s.width = r.width;
  const auto& bg = background_palette()[rng.uniform_int(static_cast<int>(background_palette().size()))];
  s.bg_color = bg.rgb;
  s.bg_word = bg.word;
  s.bg_texture_seed = rng.next_u32();

  int want = r.min_layers + rng.uniform_int(r.max_layers - r.min_layers + 1);
  int n = std::min(want, span);

  // n distinct integer disparities, ascending (far -> near).
  std::vector<int> pool(span);
  for (int i = 0; i < span; ++i) pool[i] = r.min_disp + i;
  for (int i = span - 1; i > 0; --i) std::swap(pool[i], pool[rng.uniform_int(i + 1)]);
  std::vector<int> disps(pool.begin(), pool.begin() + n);
  std::sort(disps.begin(), disps.end());

  for (int i = 0; i < n; ++i) {
    LayerSpec l;
    const auto& fg = foreground_palette()[rng.uniform_int(static_cast<int>(foreground_palette().size()))];
    l.color = fg.rgb;
    l.color_word = fg.word;
    l.shape = shape_words()[rng.uniform_int(static_cast<int>(shape_words().size()))];
    l.pos_x = static_cast<float>(rng.uniform(0.15, 0.85));
    l.pos_y = static_cast<float>(rng.uniform(0.25, 0.75));
    l.size_w = static_cast<float>(rng.uniform(r.min_size, r.max_size));
    l.size_h = static_cast<float>(rng.uniform(r.min_size, r.max_size));
    l.disparity = disps[i];
    l.texture_seed = rng.next_u32();
    s.layers.push_back(std::move(l));
  }

  int dmax = s.layers.back().disparity;
  s.baseline_tag = dmax <= 3 ? "small" : (dmax <= 6 ? "medium" : "large");
  return s;
}

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

namespace detail {

// Deterministic cell noise in [-1, 1], keyed by left-view cell coordinates.
// The FNV-derived seed gets a splitmix64 finalizer: adjacent coordinates must
// decorrelate fully or stereo matching costs lose contrast.
inline float cell_noise(uint32_t seed, std::string_view tag, int cell, int y, int x) {
  uint64_t h = derive_seed(seed, tag, static_cast<uint64_t>(y / cell),
                           static_cast<uint64_t>(x / cell));
  h += 0x9e3779b97f4a7c15ull;
  h = (h ^ (h >> 30)) * 0xbf58476d1ce4e5b9ull;
  h = (h ^ (h >> 27)) * 0x94d049bb133111ebull;
  h ^= h >> 31;
  double u = static_cast<double>(h >> 11) * 0x1.0p-53;  // [0,1)
  return static_cast<float>(u * 2.0 - 1.0);
}

// Coarse speckle cell size grows with disparity; its spatial frequency is the
// monocular depth cue.
inline int speckle_cell(int disparity) { return 1 + disparity / 2; }

// Two-scale texture: a coarse field at the depth-keyed cell size plus a fine
// per-pixel field that gives every pixel a unique matching signature. Each
// contributes +/-0.1, so base colors in [-0.8, 0.8] keep pixels in [-1, 1].
inline float speckle(uint32_t seed, int cell, int y, int x) {
  return 0.1f * cell_noise(seed, "speckle", cell, y, x) +
         0.1f * cell_noise(seed, "speckle-fine", 1, y, x);
}

inline bool covers(const LayerSpec& l, int h, int w, int y, int x) {
  float cx = l.pos_x * w, cy = l.pos_y * h;
  float rx = 0.5f * l.size_w * w, ry = 0.5f * l.size_h * h;
  float dx = (x + 0.5f - cx), dy = (y + 0.5f - cy);
  if (l.shape == "rectangle") return std::fabs(dx) <= rx && std::fabs(dy) <= ry;
  return (dx * dx) / (rx * rx) + (dy * dy) / (ry * ry) <= 1.0f;
}

}  // namespace detail

struct RenderedScene {
  StereoPair pair;
  Tensor gt_disparity;  // [H,W], left-view topmost layer disparity
  Tensor occlusion;     // [H,W], 1 = left pixel has no visible right correspondence
};

inline RenderedScene render_stereo(const SceneSpec& s) {
  int h = s.height, w = s.width;
  int64_t plane = static_cast<int64_t>(h) * w;
  RenderedScene out;
  out.pair.left = Tensor({3, h, w});
  out.pair.right = Tensor({3, h, w});
  out.gt_disparity = Tensor({h, w});
  out.occlusion = Tensor({h, w});
  Tensor right_disp({h, w});  // disparity buffer of the right view

  auto paint = [&](Tensor& img, int y, int x, const std::array<float, 3>& color, uint32_t seed,
                   int cell, int sy, int sx) {
    float sp = detail::speckle(seed, cell, sy, sx);
    for (int c = 0; c < 3; ++c) img[static_cast<int>(c * plane) + y * w + x] = color[c] + sp;
  };

  // Background (disparity 0) is identical in both views.
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      paint(out.pair.left, y, x, s.bg_color, s.bg_texture_seed, 1, y, x);
      paint(out.pair.right, y, x, s.bg_color, s.bg_texture_seed, 1, y, x);
    }

  // Layers far -> near. Right view: same layer shifted left by d, sampling
  // speckle at the pixel's left-view coordinate so correspondences match.
  for (const auto& l : s.layers) {
    int cell = detail::speckle_cell(l.disparity);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        if (!detail::covers(l, h, w, y, x)) continue;
        paint(out.pair.left, y, x, l.color, l.texture_seed, cell, y, x);
        out.gt_disparity[y * w + x] = static_cast<float>(l.disparity);
        int xr = x - l.disparity;
        if (xr >= 0) {
          paint(out.pair.right, y, xr, l.color, l.texture_seed, cell, y, x);
          right_disp[y * w + xr] = static_cast<float>(l.disparity);
        }
      }
  }

  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      int d = static_cast<int>(out.gt_disparity[y * w + x]);
      int xr = x - d;
      bool occluded = xr < 0 || right_disp[y * w + xr] != static_cast<float>(d);
      out.occlusion[y * w + x] = occluded ? 1.0f : 0.0f;
    }
  return out;
}

// ---------------------------------------------------------------------------
// Captions
// ---------------------------------------------------------------------------

inline std::string position_word_for(float pos_x) {
  if (pos_x < 1.0f / 3.0f) return position_words()[0];
  if (pos_x > 2.0f / 3.0f) return position_words()[2];
  return position_words()[1];
}

inline PromptSpec caption(const SceneSpec& s) {
  if (s.layers.empty()) throw std::invalid_argument("caption: scene has no layers");
  const LayerSpec& focal = s.layers.back();  // nearest
  PromptSpec p;
  p.color_word = focal.color_word;
  p.shape_word = focal.shape;
  p.position_word = position_word_for(focal.pos_x);
  p.bg_word = s.bg_word;
  p.target_color = focal.color;
  p.text = "a " + p.color_word + " " + p.shape_word + " " + p.position_word + " a " + p.bg_word +
           " background";
  return p;
}

inline PromptSpec parse_prompt(const std::string& text) {
  PromptSpec p;
  p.text = text;
  std::string rest = text;
  auto expect_prefix = [&](const std::string& pre) {
    if (rest.rfind(pre, 0) != 0) throw std::invalid_argument("parse_prompt: malformed: " + text);
    rest = rest.substr(pre.size());
  };
  auto take_word = [&]() {
    size_t sp = rest.find(' ');
    std::string w = sp == std::string::npos ? rest : rest.substr(0, sp);
    rest = sp == std::string::npos ? "" : rest.substr(sp + 1);
    return w;
  };

  expect_prefix("a ");
  p.color_word = take_word();
  bool color_ok = false;
  for (const auto& c : foreground_palette())
    if (p.color_word == c.word) {
      p.target_color = c.rgb;
      color_ok = true;
    }
  if (!color_ok) throw std::invalid_argument("parse_prompt: unknown color: " + p.color_word);

  p.shape_word = take_word();
  if (std::find(shape_words().begin(), shape_words().end(), p.shape_word) == shape_words().end())
    throw std::invalid_argument("parse_prompt: unknown shape: " + p.shape_word);

  bool pos_ok = false;
  for (const auto& pw : position_words())
    if (rest.rfind(pw + " ", 0) == 0) {
      p.position_word = pw;
      rest = rest.substr(pw.size() + 1);
      pos_ok = true;
      break;
    }
  if (!pos_ok) throw std::invalid_argument("parse_prompt: unknown position phrase in: " + text);

  expect_prefix("a ");
  p.bg_word = take_word();
  bool bg_ok = false;
  for (const auto& c : background_palette())
    if (p.bg_word == c.word) bg_ok = true;
  if (!bg_ok) throw std::invalid_argument("parse_prompt: unknown background: " + p.bg_word);
  if (rest != "background") throw std::invalid_argument("parse_prompt: malformed tail: " + text);
  return p;
}

// ---------------------------------------------------------------------------
// Quantization (dataset files are 8-bit)
// ---------------------------------------------------------------------------

inline uint8_t quantize_unit(float v) {
  float q = std::round((v + 1.0f) * 127.5f);
  return static_cast<uint8_t>(q < 0.0f ? 0.0f : (q > 255.0f ? 255.0f : q));
}

inline float dequantize_unit(uint8_t b) { return static_cast<float>(b) / 127.5f - 1.0f; }

inline png::Image to_png(const Tensor& img) {
  if (img.rank() != 3 || img.dim(0) != 3) throw std::invalid_argument("to_png: expected [3,H,W]");
  png::Image out;
  out.channels = 3;
  out.height = img.dim(1);
  out.width = img.dim(2);
  out.pixels.resize(static_cast<size_t>(out.height) * out.width * 3);
  int64_t plane = static_cast<int64_t>(out.height) * out.width;
  for (int y = 0; y < out.height; ++y)
    for (int x = 0; x < out.width; ++x)
      for (int c = 0; c < 3; ++c)
        out.pixels[(static_cast<size_t>(y) * out.width + x) * 3 + c] =
            quantize_unit(img[static_cast<int>(c * plane) + y * out.width + x]);
  return out;
}

inline Tensor from_png(const png::Image& img) {
  if (img.channels != 3) throw std::invalid_argument("from_png: expected RGB");
  Tensor out({3, img.height, img.width});
  int64_t plane = static_cast<int64_t>(img.height) * img.width;
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c)
        out[static_cast<int>(c * plane) + y * img.width + x] =
            dequantize_unit(img.pixels[(static_cast<size_t>(y) * img.width + x) * 3 + c]);
  return out;
}

// ---------------------------------------------------------------------------
// Dataset persistence
// ---------------------------------------------------------------------------

struct SceneRecord {
  std::string id;
  std::string caption_text;
  SceneSpec spec;
  std::map<std::string, std::string> files;   // role -> relative path
  std::map<std::string, uint32_t> checksums;  // role -> crc32
};

struct DatasetManifest {
  int version = 1;
  uint64_t seed = 0;
  int height = 0, width = 0;
  std::vector<SceneRecord> scenes;
};

namespace detail {

inline nlohmann::json layer_to_json(const LayerSpec& l) {
  return {{"shape", l.shape},
          {"color", {l.color[0], l.color[1], l.color[2]}},
          {"color_word", l.color_word},
          {"position", {l.pos_x, l.pos_y}},
          {"size", {l.size_w, l.size_h}},
          {"disparity", l.disparity},
          {"texture_seed", l.texture_seed}};
}

inline LayerSpec layer_from_json(const nlohmann::json& j) {
  LayerSpec l;
  l.shape = j.at("shape").get<std::string>();
  for (int i = 0; i < 3; ++i) l.color[static_cast<size_t>(i)] = j.at("color").at(i).get<float>();
  l.color_word = j.at("color_word").get<std::string>();
  l.pos_x = j.at("position").at(0).get<float>();
  l.pos_y = j.at("position").at(1).get<float>();
  l.size_w = j.at("size").at(0).get<float>();
  l.size_h = j.at("size").at(1).get<float>();
  l.disparity = j.at("disparity").get<int>();
  l.texture_seed = j.at("texture_seed").get<uint32_t>();
  return l;
}

inline nlohmann::json scene_to_json(const SceneSpec& s) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : s.layers) layers.push_back(layer_to_json(l));
  return {{"background",
           {{"color", {s.bg_color[0], s.bg_color[1], s.bg_color[2]}},
            {"color_word", s.bg_word},
            {"texture_seed", s.bg_texture_seed},
            {"disparity", 0}}},
          {"layers", layers},
          {"resolution", {{"height", s.height}, {"width", s.width}}},
          {"baseline_tag", s.baseline_tag}};
}

inline SceneSpec scene_from_json(const nlohmann::json& j) {
  SceneSpec s;
  const auto& bg = j.at("background");
  for (int i = 0; i < 3; ++i) s.bg_color[static_cast<size_t>(i)] = bg.at("color").at(i).get<float>();
  s.bg_word = bg.at("color_word").get<std::string>();
  s.bg_texture_seed = bg.at("texture_seed").get<uint32_t>();
  for (const auto& lj : j.at("layers")) s.layers.push_back(layer_from_json(lj));
  s.height = j.at("resolution").at("height").get<int>();
  s.width = j.at("resolution").at("width").get<int>();
  s.baseline_tag = j.at("baseline_tag").get<std::string>();
  return s;
}

inline std::vector<uint8_t> read_bytes(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path);
  return std::vector<uint8_t>(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

inline void write_bytes(const std::string& path, const void* data, size_t n) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open for write " + path);
  f.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
  if (!f) throw std::runtime_error("short write " + path);
}

inline uint32_t crc_of(const std::vector<uint8_t>& bytes) {
  return static_cast<uint32_t>(::crc32(0L, bytes.data(), static_cast<uInt>(bytes.size())));
}

}  // namespace detail

// Raw float32 disparity map + JSON sidecar describing its shape.
inline void write_disparity(const std::string& path, const Tensor& d) {
  if (d.rank() != 2) throw std::invalid_argument("write_disparity: expected [H,W]");
  detail::write_bytes(path, d.data(), sizeof(float) * static_cast<size_t>(d.size()));
  nlohmann::json meta = {{"height", d.dim(0)},
                         {"width", d.dim(1)},
                         {"dtype", "float32"},
                         {"byte_order", "little_endian"},
                         {"layout", "row_major"}};
  std::string text = meta.dump(2);
  detail::write_bytes(path + ".meta.json", text.data(), text.size());
}

inline Tensor read_disparity(const std::string& path) {
  auto meta = nlohmann::json::parse(detail::read_bytes(path + ".meta.json"));
  int h = meta.at("height").get<int>();
  int w = meta.at("width").get<int>();
  auto bytes = detail::read_bytes(path);
  if (bytes.size() != sizeof(float) * static_cast<size_t>(h) * w)
    throw std::runtime_error("read_disparity: size mismatch for " + path);
  Tensor d({h, w});
  std::memcpy(d.data(), bytes.data(), bytes.size());
  return d;
}

inline DatasetManifest build_dataset(int n, const std::string& out_dir, uint64_t seed,
                                     const GenRanges& ranges = {}) {
  namespace fs = std::filesystem;
  if (n < 1) throw std::invalid_argument("build_dataset: n must be >= 1");
  fs::path root(out_dir);
  fs::path scenes_dir = root / "scenes";
  fs::create_directories(scenes_dir);

  DatasetManifest manifest;
  manifest.seed = seed;
  manifest.height = ranges.height;
  manifest.width = ranges.width;

  try {
    nlohmann::json jscenes = nlohmann::json::array();
    for (int i = 0; i < n; ++i) {
      char idbuf[32];
      std::snprintf(idbuf, sizeof(idbuf), "scene_%04d", i);
      SceneRecord rec;
      rec.id = idbuf;

      Rng rng(derive_seed(seed, "scene", static_cast<uint64_t>(i)));
      rec.spec = make_scene(rng, ranges);
      RenderedScene r = render_stereo(rec.spec);
      rec.caption_text = caption(rec.spec).text;

      fs::path dir = scenes_dir / rec.id;
      fs::create_directories(dir);
      auto add_file = [&](const std::string& role, const std::string& filename) {
        rec.files[role] = "scenes/" + rec.id + "/" + filename;
        rec.checksums[role] = detail::crc_of(detail::read_bytes((dir / filename).string()));
      };

      png::write_file((dir / "left.png").string(), to_png(r.pair.left));
      add_file("left", "left.png");
      png::write_file((dir / "right.png").string(), to_png(r.pair.right));
      add_file("right", "right.png");
      png::write_file((dir / "stacked.png").string(), to_png(stack(r.pair)));
      add_file("stacked", "stacked.png");
      write_disparity((dir / "disparity.f32").string(), r.gt_disparity);
      add_file("disparity", "disparity.f32");
      add_file("disparity_meta", "disparity.f32.meta.json");

      nlohmann::json jrec = {{"id", rec.id},
                             {"caption", rec.caption_text},
                             {"spec", detail::scene_to_json(rec.spec)},
                             {"files", rec.files},
                             {"crc32", rec.checksums}};
      jscenes.push_back(std::move(jrec));
      manifest.scenes.push_back(std::move(rec));
    }

    nlohmann::json top = {{"version", manifest.version},
                          {"seed", manifest.seed},
                          {"count", n},
                          {"resolution", {{"height", manifest.height}, {"width", manifest.width}}},
                          {"scenes", jscenes}};
    std::string text = top.dump(2);
    detail::write_bytes((root / "manifest.json").string(), text.data(), text.size());
  } catch (...) {
    std::error_code ec;
    fs::remove_all(scenes_dir, ec);
    fs::remove(root / "manifest.json", ec);
    throw;
  }
  return manifest;
}

struct SceneItem {
  std::string id;
  std::string caption_text;
  PromptSpec prompt;
  SceneSpec spec;
  Tensor left, right, stacked;  // dequantized from the 8-bit files
  Tensor gt_disparity;
};

struct Dataset {
  DatasetManifest manifest;
  std::vector<SceneItem> items;
};

inline Dataset load_dataset(const std::string& dir, bool verify_checksums = false) {
  namespace fs = std::filesystem;
  fs::path root(dir);
  auto top = nlohmann::json::parse(detail::read_bytes((root / "manifest.json").string()));
  Dataset ds;
  ds.manifest.version = top.at("version").get<int>();
  ds.manifest.seed = top.at("seed").get<uint64_t>();
  ds.manifest.height = top.at("resolution").at("height").get<int>();
  ds.manifest.width = top.at("resolution").at("width").get<int>();

  for (const auto& jrec : top.at("scenes")) {
    SceneRecord rec;
    rec.id = jrec.at("id").get<std::string>();
    rec.caption_text = jrec.at("caption").get<std::string>();
    rec.spec = detail::scene_from_json(jrec.at("spec"));
    for (const auto& [role, path] : jrec.at("files").items())
      rec.files[role] = path.get<std::string>();
    for (const auto& [role, crc] : jrec.at("crc32").items())
      rec.checksums[role] = crc.get<uint32_t>();

    SceneItem item;
    item.id = rec.id;
    item.caption_text = rec.caption_text;
    item.prompt = parse_prompt(rec.caption_text);
    item.spec = rec.spec;
    for (const auto& [role, rel] : rec.files) {
      fs::path p = root / rel;
      if (!fs::exists(p)) throw std::runtime_error("load_dataset: missing file " + p.string());
      if (verify_checksums) {
        uint32_t crc = detail::crc_of(detail::read_bytes(p.string()));
        if (crc != rec.checksums.at(role))
          throw std::runtime_error("load_dataset: checksum mismatch for " + p.string());
      }
    }
    item.left = from_png(png::read_file((root / rec.files.at("left")).string()));
    item.right = from_png(png::read_file((root / rec.files.at("right")).string()));
    item.stacked = from_png(png::read_file((root / rec.files.at("stacked")).string()));
    item.gt_disparity = read_disparity((root / rec.files.at("disparity")).string());

    ds.manifest.scenes.push_back(std::move(rec));
    ds.items.push_back(std::move(item));
  }
  return ds;
}

}  // namespace sgen

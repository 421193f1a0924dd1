#pragma once

// Differentiable block-matching stereo (Phi) and the disparity containers.
// Costs are per-pixel patch SSDs over horizontal shift candidates
// d in {d_min..max_disp}; patch borders replicate image edges; a candidate is
// invalid when its matching center x-d falls outside the right image, and
// invalid candidates are excluded from both argmin and softmin.
//
// Sign convention: disparity = x_left - x_right; nonnegative for content at
// or nearer than the convergence plane, negatives only from inconsistent
// generated pairs (which the convergence reward penalizes).

#include <cstdint>
#include <vector>

#include "stereogen/autodiff.hpp"
#include "stereogen/codec.hpp"
#include "stereogen/tensor.hpp"

namespace sgen {

struct MatcherConfig {
  int max_disp = 8;
  int d_min = -2;
  int patch = 5;
  float temperature = 0.1f;
};

struct CostVolume {
  Tensor costs;                 // [H, W, D], D = max_disp - d_min + 1
  std::vector<uint8_t> valid;   // same layout, 1 = candidate in frame
  int d_min = 0;
  int max_disp = 0;

  int num_d() const { return max_disp - d_min + 1; }
};

namespace detail {

inline void check_matcher_args(const std::vector<int>& shape, int max_disp, int patch, int d_min) {
  if (shape.size() != 3 || shape[0] != 3)
    throw std::invalid_argument("cost_volume: expected [3,H,W] images");
  if (max_disp < 1 || max_disp >= shape[2])
    throw std::invalid_argument("cost_volume: need 1 <= max_disp < width");
  if (patch < 1 || patch % 2 == 0)
    throw std::invalid_argument("cost_volume: patch must be odd and >= 1");
  if (d_min > 0 || d_min <= -shape[2])
    throw std::invalid_argument("cost_volume: need -width < d_min <= 0");
}

inline std::vector<uint8_t> volume_validity(int h, int w, int d_min, int max_disp) {
  int nd = max_disp - d_min + 1;
  std::vector<uint8_t> valid(static_cast<size_t>(h) * w * nd);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int k = 0; k < nd; ++k) {
        int xr = x - (d_min + k);
        valid[(static_cast<size_t>(y) * w + x) * nd + k] = (xr >= 0 && xr < w) ? 1 : 0;
      }
  return valid;
}

inline int clampi(int v, int lo, int hi) { return v < lo ? lo : (v > hi ? hi : v); }

// Shared SSD forward; writes costs[(y*W+x)*D + k].
inline void ssd_forward(const Tensor& left, const Tensor& right, int d_min, int max_disp,
                        int patch, float* costs) {
  int h = left.dim(1), w = left.dim(2);
  int nd = max_disp - d_min + 1;
  int r = patch / 2;
  const float* L = left.data();
  const float* R = right.data();
  int64_t plane = static_cast<int64_t>(h) * w;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int k = 0; k < nd; ++k) {
        int d = d_min + k;
        int xr = x - d;
        float* out = costs + (static_cast<int64_t>(y) * w + x) * nd + k;
        if (xr < 0 || xr >= w) {
          *out = 0.0f;
          continue;
        }
        double acc = 0.0;
        for (int dy = -r; dy <= r; ++dy) {
          int ly = clampi(y + dy, 0, h - 1);
          for (int dx = -r; dx <= r; ++dx) {
            int lx = clampi(x + dx, 0, w - 1);
            int rx = clampi(xr + dx, 0, w - 1);
            for (int c = 0; c < 3; ++c) {
              float diff = L[c * plane + ly * w + lx] - R[c * plane + ly * w + rx];
              acc += static_cast<double>(diff) * diff;
            }
          }
        }
        *out = static_cast<float>(acc);
      }
    }
  }
}

}  // namespace detail

inline CostVolume cost_volume(const Tensor& left, const Tensor& right, int max_disp, int patch,
                              int d_min = 0) {
  detail::check_matcher_args(left.shape(), max_disp, patch, d_min);
  if (!left.same_shape(right)) throw std::invalid_argument("cost_volume: shape mismatch");
  int h = left.dim(1), w = left.dim(2);
  CostVolume cv;
  cv.d_min = d_min;
  cv.max_disp = max_disp;
  cv.costs = Tensor({h, w, max_disp - d_min + 1});
  cv.valid = detail::volume_validity(h, w, d_min, max_disp);
  detail::ssd_forward(left, right, d_min, max_disp, patch, cv.costs.data());
  return cv;
}

// Tape op: SSD volume differentiable in both images.
inline ad::Var ssd_cost_volume(const ad::Var& left, const ad::Var& right, int max_disp, int patch,
                               int d_min = 0) {
  detail::check_matcher_args(left.shape(), max_disp, patch, d_min);
  if (!left.val().same_shape(right.val()))
    throw std::invalid_argument("cost_volume: shape mismatch");
  int h = left.val().dim(1), w = left.val().dim(2);
  int nd = max_disp - d_min + 1;
  Tensor out({h, w, nd});
  detail::ssd_forward(left.val(), right.val(), d_min, max_disp, patch, out.data());
  return ad::make_op(std::move(out), {left, right}, [=](ad::Node& n) {
    const Tensor& L = n.parents[0]->value;
    const Tensor& R = n.parents[1]->value;
    Tensor gl(L.shape()), gr(R.shape());
    int r = patch / 2;
    int64_t plane = static_cast<int64_t>(h) * w;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        for (int k = 0; k < nd; ++k) {
          float g = n.grad[(y * w + x) * nd + k];
          if (g == 0.0f) continue;
          int xr = x - (d_min + k);
          if (xr < 0 || xr >= w) continue;
          for (int dy = -r; dy <= r; ++dy) {
            int ly = detail::clampi(y + dy, 0, h - 1);
            for (int dx = -r; dx <= r; ++dx) {
              int lx = detail::clampi(x + dx, 0, w - 1);
              int rx = detail::clampi(xr + dx, 0, w - 1);
              for (int c = 0; c < 3; ++c) {
                int64_t li = c * plane + ly * w + lx;
                int64_t ri = c * plane + ly * w + rx;
                float diff = L[static_cast<int>(li)] - R[static_cast<int>(ri)];
                gl[static_cast<int>(li)] += 2.0f * diff * g;
                gr[static_cast<int>(ri)] -= 2.0f * diff * g;
              }
            }
          }
        }
    if (n.parents[0]->requires_grad) ad::accum_grad(*n.parents[0], gl);
    if (n.parents[1]->requires_grad) ad::accum_grad(*n.parents[1], gr);
  });
}

// Per-pixel argmin over valid candidates, ties broken toward smallest d.
inline Tensor hard_disparity(const CostVolume& cv) {
  int h = cv.costs.dim(0), w = cv.costs.dim(1), nd = cv.num_d();
  Tensor out({h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      int best = -1;
      float best_cost = 0.0f;
      for (int k = 0; k < nd; ++k) {
        size_t idx = (static_cast<size_t>(y) * w + x) * nd + k;
        if (!cv.valid[idx]) continue;
        float c = cv.costs[static_cast<int>(idx)];
        if (best < 0 || c < best_cost) {
          best = k;
          best_cost = c;
        }
      }
      if (best < 0) throw std::logic_error("hard_disparity: pixel with no valid candidate");
      out[y * w + x] = static_cast<float>(cv.d_min + best);
    }
  return out;
}

// Softmin expectation over valid candidates (numerically stabilized). The
// backward uses d softmin / d cost_j = (w_j / T) * (out - d_j).
inline ad::Var soft_argmin(const ad::Var& costs, const std::vector<uint8_t>& valid, int d_min,
                           float temperature) {
  if (!(temperature > 0.0f)) throw std::invalid_argument("soft_argmin: temperature must be > 0");
  const auto& s = costs.shape();
  if (s.size() != 3) throw std::invalid_argument("soft_argmin: costs must be [H,W,D]");
  int h = s[0], w = s[1], nd = s[2];
  if (valid.size() != static_cast<size_t>(h) * w * nd)
    throw std::invalid_argument("soft_argmin: validity mask size mismatch");

  Tensor out({h, w});
  Tensor weights({h, w, nd});  // saved for backward
  const float* c = costs.val().data();
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      size_t base = (static_cast<size_t>(y) * w + x) * nd;
      float cmin = 0.0f;
      bool any = false;
      for (int k = 0; k < nd; ++k)
        if (valid[base + k] && (!any || c[base + k] < cmin)) {
          cmin = c[base + k];
          any = true;
        }
      if (!any) throw std::logic_error("soft_argmin: pixel with no valid candidate");
      double z = 0.0;
      for (int k = 0; k < nd; ++k) {
        if (!valid[base + k]) continue;
        z += std::exp(static_cast<double>(-(c[base + k] - cmin)) / temperature);
      }
      double e = 0.0;
      for (int k = 0; k < nd; ++k) {
        if (!valid[base + k]) {
          weights[static_cast<int>(base) + k] = 0.0f;
          continue;
        }
        double wk = std::exp(static_cast<double>(-(c[base + k] - cmin)) / temperature) / z;
        weights[static_cast<int>(base) + k] = static_cast<float>(wk);
        e += wk * (d_min + k);
      }
      out[y * w + x] = static_cast<float>(e);
    }

  Tensor saved_out = out;
  return ad::make_op(std::move(out), {costs}, [=](ad::Node& n) {
    Tensor g(n.parents[0]->value.shape());
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        float go = n.grad[y * w + x];
        if (go == 0.0f) continue;
        float e = saved_out[y * w + x];
        size_t base = (static_cast<size_t>(y) * w + x) * nd;
        for (int k = 0; k < nd; ++k) {
          float wk = weights[static_cast<int>(base) + k];
          if (wk == 0.0f) continue;
          g[static_cast<int>(base) + k] = go * (wk / temperature) * (e - (d_min + k));
        }
      }
    ad::accum_grad(*n.parents[0], g);
  });
}

inline Tensor soft_disparity(const CostVolume& cv, float temperature) {
  ad::NoGradGuard ng;
  return soft_argmin(ad::Var::constant(cv.costs), cv.valid, cv.d_min, temperature).val();
}

// Eval-mode estimate: hard argmin (exact oracle semantics).
inline Tensor estimate_stereo(const StereoPair& pair, const MatcherConfig& cfg) {
  return hard_disparity(cost_volume(pair.left, pair.right, cfg.max_disp, cfg.patch, cfg.d_min));
}

// Differentiable estimate: soft argmin over the SSD volume.
inline ad::Var estimate_stereo(const ad::Var& left, const ad::Var& right,
                               const MatcherConfig& cfg) {
  ad::Var costs = ssd_cost_volume(left, right, cfg.max_disp, cfg.patch, cfg.d_min);
  auto valid = detail::volume_validity(left.val().dim(1), left.val().dim(2), cfg.d_min,
                                       cfg.max_disp);
  return soft_argmin(costs, valid, cfg.d_min, cfg.temperature);
}

// Trainable monocular predictor interface (Psi). Outputs are relative
// (arbitrary affine scale), hence always compared via correlation.
class MonocularEstimator {
 public:
  virtual ~MonocularEstimator() = default;
  virtual ad::Var estimate(const ad::Var& image) = 0;  // [3,H,W] -> [H,W]
  virtual ad::ParamSet& params() = 0;

  Tensor estimate_value(const Tensor& image) {
    ad::NoGradGuard ng;
    return estimate(ad::Var::constant(image)).val();
  }
};

}  // namespace sgen

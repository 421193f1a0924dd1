#pragma once

// Matrix and convolution ops for the tape. GEMM goes through Eigen; conv2d
// is im2col + GEMM with the column buffer recomputed in the backward pass
// instead of stored, which keeps a K-step differentiable sampling tail small.

#include <Eigen/Dense>

#include "stereogen/autodiff.hpp"

namespace sgen::ad {

using EMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EMap = Eigen::Map<EMat>;
using ECMap = Eigen::Map<const EMat>;

// a [m,k] x b [k,n] -> [m,n]
inline Var matmul(const Var& a, const Var& b) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0])
    throw std::invalid_argument("matmul: bad shapes " + a.val().shape_str() + " x " + b.val().shape_str());
  int m = sa[0], k = sa[1], n = sb[1];
  Tensor out({m, n});
  EMap(out.data(), m, n).noalias() = ECMap(a.val().data(), m, k) * ECMap(b.val().data(), k, n);
  return make_op(std::move(out), {a, b}, [m, k, n](Node& node) {
    ECMap gc(node.grad.data(), m, n);
    if (node.parents[0]->requires_grad) {
      Tensor ga({m, k});
      EMap(ga.data(), m, k).noalias() = gc * ECMap(node.parents[1]->value.data(), k, n).transpose();
      accum_grad(*node.parents[0], ga);
    }
    if (node.parents[1]->requires_grad) {
      Tensor gb({k, n});
      EMap(gb.data(), k, n).noalias() = ECMap(node.parents[0]->value.data(), m, k).transpose() * gc;
      accum_grad(*node.parents[1], gb);
    }
  });
}

// a [m,k] x b^T with b [n,k] -> [m,n]; the natural shape for y = x W^T.
inline Var matmul_nt(const Var& a, const Var& b) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[1])
    throw std::invalid_argument("matmul_nt: bad shapes");
  int m = sa[0], k = sa[1], n = sb[0];
  Tensor out({m, n});
  EMap(out.data(), m, n).noalias() =
      ECMap(a.val().data(), m, k) * ECMap(b.val().data(), n, k).transpose();
  return make_op(std::move(out), {a, b}, [m, k, n](Node& node) {
    ECMap gc(node.grad.data(), m, n);
    if (node.parents[0]->requires_grad) {
      Tensor ga({m, k});
      EMap(ga.data(), m, k).noalias() = gc * ECMap(node.parents[1]->value.data(), n, k);
      accum_grad(*node.parents[0], ga);
    }
    if (node.parents[1]->requires_grad) {
      Tensor gb({n, k});
      EMap(gb.data(), n, k).noalias() = gc.transpose() * ECMap(node.parents[0]->value.data(), m, k);
      accum_grad(*node.parents[1], gb);
    }
  });
}

inline Var transpose2d(const Var& a) {
  const auto& s = a.shape();
  if (s.size() != 2) throw std::invalid_argument("transpose2d: rank != 2");
  int m = s[0], n = s[1];
  Tensor out({n, m});
  EMap(out.data(), n, m) = ECMap(a.val().data(), m, n).transpose();
  return make_op(std::move(out), {a}, [m, n](Node& node) {
    Tensor g({m, n});
    EMap(g.data(), m, n) = ECMap(node.grad.data(), n, m).transpose();
    accum_grad(*node.parents[0], g);
  });
}

namespace detail {

struct ConvDims {
  int cin, h, w, cout, kh, kw, stride, pad, oh, ow;
};

inline ConvDims conv_dims(const std::vector<int>& xs, const std::vector<int>& ws, int stride, int pad) {
  if (xs.size() != 3 || ws.size() != 4) throw std::invalid_argument("conv2d: x must be [C,H,W], w [Co,Ci,kh,kw]");
  ConvDims d;
  d.cin = xs[0];
  d.h = xs[1];
  d.w = xs[2];
  d.cout = ws[0];
  d.kh = ws[2];
  d.kw = ws[3];
  if (ws[1] != d.cin) throw std::invalid_argument("conv2d: channel mismatch");
  d.stride = stride;
  d.pad = pad;
  d.oh = (d.h + 2 * pad - d.kh) / stride + 1;
  d.ow = (d.w + 2 * pad - d.kw) / stride + 1;
  if (d.oh <= 0 || d.ow <= 0) throw std::invalid_argument("conv2d: empty output");
  return d;
}

// cols [Cin*kh*kw, OH*OW], zero padding.
inline void im2col(const float* x, const ConvDims& d, float* cols) {
  int ohw = d.oh * d.ow;
  for (int c = 0; c < d.cin; ++c) {
    for (int dy = 0; dy < d.kh; ++dy) {
      for (int dx = 0; dx < d.kw; ++dx) {
        float* row = cols + (static_cast<int64_t>((c * d.kh + dy) * d.kw + dx)) * ohw;
        for (int oy = 0; oy < d.oh; ++oy) {
          int iy = oy * d.stride + dy - d.pad;
          if (iy < 0 || iy >= d.h) {
            std::fill(row + oy * d.ow, row + (oy + 1) * d.ow, 0.0f);
            continue;
          }
          const float* xr = x + (static_cast<int64_t>(c) * d.h + iy) * d.w;
          for (int ox = 0; ox < d.ow; ++ox) {
            int ix = ox * d.stride + dx - d.pad;
            row[oy * d.ow + ox] = (ix >= 0 && ix < d.w) ? xr[ix] : 0.0f;
          }
        }
      }
    }
  }
}

inline void col2im_add(const float* cols, const ConvDims& d, float* gx) {
  int ohw = d.oh * d.ow;
  for (int c = 0; c < d.cin; ++c) {
    for (int dy = 0; dy < d.kh; ++dy) {
      for (int dx = 0; dx < d.kw; ++dx) {
        const float* row = cols + (static_cast<int64_t>((c * d.kh + dy) * d.kw + dx)) * ohw;
        for (int oy = 0; oy < d.oh; ++oy) {
          int iy = oy * d.stride + dy - d.pad;
          if (iy < 0 || iy >= d.h) continue;
          float* xr = gx + (static_cast<int64_t>(c) * d.h + iy) * d.w;
          for (int ox = 0; ox < d.ow; ++ox) {
            int ix = ox * d.stride + dx - d.pad;
            if (ix >= 0 && ix < d.w) xr[ix] += row[oy * d.ow + ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

// x [Cin,H,W] * w [Cout,Cin,kh,kw] (+ optional bias [Cout]) -> [Cout,OH,OW]
inline Var conv2d(const Var& x, const Var& w, const Var& bias, int stride = 1, int pad = 1) {
  auto d = detail::conv_dims(x.shape(), w.shape(), stride, pad);
  int kdim = d.cin * d.kh * d.kw;
  int ohw = d.oh * d.ow;
  std::vector<float> cols(static_cast<size_t>(kdim) * ohw);
  detail::im2col(x.val().data(), d, cols.data());
  Tensor out({d.cout, d.oh, d.ow});
  EMap(out.data(), d.cout, ohw).noalias() =
      ECMap(w.val().data(), d.cout, kdim) * ECMap(cols.data(), kdim, ohw);
  bool has_bias = bias.defined();
  if (has_bias) {
    for (int c = 0; c < d.cout; ++c) {
      float b = bias.val()[c];
      float* o = out.data() + static_cast<int64_t>(c) * ohw;
      for (int i = 0; i < ohw; ++i) o[i] += b;
    }
  }
  std::vector<Var> parents = {x, w};
  if (has_bias) parents.push_back(bias);
  return make_op(std::move(out), std::move(parents), [d, kdim, ohw, has_bias](Node& n) {
    ECMap gout(n.grad.data(), d.cout, ohw);
    if (n.parents[1]->requires_grad) {
      // dW = dOut * cols^T, with cols recomputed from the saved input.
      std::vector<float> cols(static_cast<size_t>(kdim) * ohw);
      detail::im2col(n.parents[0]->value.data(), d, cols.data());
      Tensor gw(n.parents[1]->value.shape());
      EMap(gw.data(), d.cout, kdim).noalias() = gout * ECMap(cols.data(), kdim, ohw).transpose();
      accum_grad(*n.parents[1], gw);
    }
    if (n.parents[0]->requires_grad) {
      std::vector<float> gcols(static_cast<size_t>(kdim) * ohw);
      EMap(gcols.data(), kdim, ohw).noalias() =
          ECMap(n.parents[1]->value.data(), d.cout, kdim).transpose() * gout;
      Tensor gx(n.parents[0]->value.shape());
      detail::col2im_add(gcols.data(), d, gx.data());
      accum_grad(*n.parents[0], gx);
    }
    if (has_bias && n.parents[2]->requires_grad) {
      Tensor gb({d.cout});
      for (int c = 0; c < d.cout; ++c) {
        double s = 0.0;
        const float* g = n.grad.data() + static_cast<int64_t>(c) * ohw;
        for (int i = 0; i < ohw; ++i) s += g[i];
        gb[c] = static_cast<float>(s);
      }
      accum_grad(*n.parents[2], gb);
    }
  });
}

inline Var upsample_nearest2(const Var& x) {
  const auto& s = x.shape();
  if (s.size() != 3) throw std::invalid_argument("upsample_nearest2: rank != 3");
  int c = s[0], h = s[1], w = s[2];
  Tensor out({c, 2 * h, 2 * w});
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < 2 * h; ++y) {
      const float* src = x.val().data() + (static_cast<int64_t>(ch) * h + y / 2) * w;
      float* dst = out.data() + (static_cast<int64_t>(ch) * 2 * h + y) * 2 * w;
      for (int xx = 0; xx < 2 * w; ++xx) dst[xx] = src[xx / 2];
    }
  return make_op(std::move(out), {x}, [c, h, w](Node& n) {
    Tensor g({c, h, w});
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < 2 * h; ++y) {
        const float* src = n.grad.data() + (static_cast<int64_t>(ch) * 2 * h + y) * 2 * w;
        float* dst = g.data() + (static_cast<int64_t>(ch) * h + y / 2) * w;
        for (int xx = 0; xx < 2 * w; ++xx) dst[xx / 2] += src[xx];
      }
    accum_grad(*n.parents[0], g);
  });
}

}  // namespace sgen::ad

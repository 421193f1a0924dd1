#pragma once

// Low-rank adaptation. A wrapped layer computes h = Wx + scale*B(Ax) with W
// frozen, A seeded-normal (stddev 1/rank), B zero so the adapted layer starts
// exactly equal to the base layer. A convolution variant treats the kernel as
// a [C_out, C_in*kh*kw] matrix and realizes BA as a conv -> 1x1-conv chain.

#include <string>

#include "stereogen/autodiff.hpp"
#include "stereogen/nn_ops.hpp"
#include "stereogen/rng.hpp"

namespace sgen {

struct LoraLinear {
  ad::ParamPtr W;  // frozen [d_out, d_in]
  ad::ParamPtr A;  // [rank, d_in]
  ad::ParamPtr B;  // [d_out, rank]
  int rank = 0;
  float scale = 1.0f;
};

inline LoraLinear wrap_linear(const std::string& name, Tensor W, int rank, uint64_t seed,
                              float scale = 1.0f) {
  if (W.rank() != 2) throw std::invalid_argument("wrap_linear: W must be [d_out, d_in]");
  int d_out = W.dim(0), d_in = W.dim(1);
  if (rank < 1 || rank > std::min(d_out, d_in))
    throw std::invalid_argument("wrap_linear: rank must be in [1, min(dims)]");
  LoraLinear l;
  l.rank = rank;
  l.scale = scale;
  l.W = ad::make_param(name + ".W", std::move(W), /*trainable=*/false);
  Rng rng(derive_seed(seed, "lora-A", fnv1a64(name)));
  l.A = ad::make_param(name + ".A", rng.normal_tensor({rank, d_in}, 1.0f / static_cast<float>(rank)));
  l.B = ad::make_param(name + ".B", Tensor({d_out, rank}));
  return l;
}

// x rows are samples: [n, d_in] -> [n, d_out]. A [d_in] vector is accepted as
// a single row.
inline ad::Var lora_forward(const LoraLinear& l, const ad::Var& x) {
  bool vec = x.val().rank() == 1;
  ad::Var in = vec ? ad::reshape(x, {1, x.val().dim(0)}) : x;
  if (in.val().dim(1) != l.W->value.dim(1))
    throw std::invalid_argument("lora_forward: input width mismatch");
  ad::Var base = ad::matmul_nt(in, ad::Var::leaf(l.W));
  ad::Var low = ad::matmul_nt(ad::matmul_nt(in, ad::Var::leaf(l.A)), ad::Var::leaf(l.B));
  ad::Var out = ad::add(base, ad::mul(low, ad::constant_scalar(l.scale)));
  return vec ? ad::reshape(out, {l.W->value.dim(0)}) : out;
}

inline Tensor merge(const LoraLinear& l) {
  ad::NoGradGuard ng;
  ad::Var ba = ad::matmul(ad::Var::constant(l.B->value), ad::Var::constant(l.A->value));
  Tensor out = l.W->value.clone();
  for (int i = 0; i < out.size(); ++i) out[i] += l.scale * ba.val()[i];
  return out;
}

// Convolution with a low-rank kernel correction; holds the base bias too.
struct LoraConv2d {
  ad::ParamPtr W;     // frozen [C_out, C_in, kh, kw]
  ad::ParamPtr bias;  // frozen [C_out] (may be null)
  ad::ParamPtr A;     // [rank, C_in, kh, kw]
  ad::ParamPtr B;     // [C_out, rank, 1, 1]
  int rank = 0;
  float scale = 1.0f;
  int stride = 1;
  int pad = 1;
};

inline LoraConv2d wrap_conv(const std::string& name, Tensor W, Tensor bias, int rank,
                            uint64_t seed, int stride, int pad, float scale = 1.0f) {
  if (W.rank() != 4) throw std::invalid_argument("wrap_conv: W must be [C_out,C_in,kh,kw]");
  int c_out = W.dim(0);
  int fan_in = W.dim(1) * W.dim(2) * W.dim(3);
  if (rank < 1 || rank > std::min(c_out, fan_in))
    throw std::invalid_argument("wrap_conv: rank must be in [1, min(dims)]");
  LoraConv2d l;
  l.rank = rank;
  l.scale = scale;
  l.stride = stride;
  l.pad = pad;
  int c_in = W.dim(1), kh = W.dim(2), kw = W.dim(3);
  l.W = ad::make_param(name + ".W", std::move(W), /*trainable=*/false);
  if (!bias.empty()) l.bias = ad::make_param(name + ".bias", std::move(bias), /*trainable=*/false);
  Rng rng(derive_seed(seed, "lora-A", fnv1a64(name)));
  l.A = ad::make_param(name + ".A",
                       rng.normal_tensor({rank, c_in, kh, kw}, 1.0f / static_cast<float>(rank)));
  l.B = ad::make_param(name + ".B", Tensor({c_out, rank, 1, 1}));
  return l;
}

inline ad::Var lora_forward(const LoraConv2d& l, const ad::Var& x) {
  ad::Var base = ad::conv2d(x, ad::Var::leaf(l.W), l.bias ? ad::Var::leaf(l.bias) : ad::Var(),
                            l.stride, l.pad);
  ad::Var mid = ad::conv2d(x, ad::Var::leaf(l.A), ad::Var(), l.stride, l.pad);
  ad::Var low = ad::conv2d(mid, ad::Var::leaf(l.B), ad::Var(), 1, 0);
  return ad::add(base, ad::mul(low, ad::constant_scalar(l.scale)));
}

// Effective dense kernel W + scale * (B.A) folded back to conv layout.
inline Tensor merge(const LoraConv2d& l) {
  int c_out = l.W->value.dim(0);
  int fan_in = l.W->value.dim(1) * l.W->value.dim(2) * l.W->value.dim(3);
  ad::NoGradGuard ng;
  ad::Var ba = ad::matmul(ad::Var::constant(l.B->value.reshaped({c_out, l.rank})),
                          ad::Var::constant(l.A->value.reshaped({l.rank, fan_in})));
  Tensor out = l.W->value.clone();
  for (int i = 0; i < out.size(); ++i) out[i] += l.scale * ba.val()[i];
  return out;
}

}  // namespace sgen

#pragma once

// Text-conditioned U-Net noise predictor. Encoder/decoder with one residual
// block per resolution level, self-attention at the deepest level and in the
// middle stack, sinusoidal timestep embedding added to feature maps, and
// prompt conditioning through an additive projection plus feature-wise
// scale/shift heads on each block's second normalization and on the output
// normalization. Modulation head weights are frozen at zero, so an unadapted
// model applies the identity modulation, and a zero prompt vector contributes
// nothing anywhere, which makes it the natural null prompt.
//
// All base weights are frozen at construction; the only trainable parameters
// are low-rank adapters on a configurable set of layers. `kAttention` adapts
// the q/k/v/out projections of every attention block; `kAll` additionally
// adapts every convolution and dense layer (with the rank capped by each
// layer's dimensions).

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "stereogen/autodiff.hpp"
#include "stereogen/diffusion.hpp"
#include "stereogen/lora.hpp"
#include "stereogen/nn_ops.hpp"
#include "stereogen/prompt.hpp"
#include "stereogen/rng.hpp"
#include "stereogen/tensor.hpp"

namespace sgen {

enum class LoraInjection { kNone, kAttention, kAll };

inline LoraInjection parse_injection(const std::string& s) {
  if (s == "none") return LoraInjection::kNone;
  if (s == "attention") return LoraInjection::kAttention;
  if (s == "all") return LoraInjection::kAll;
  throw std::invalid_argument("unknown lora injection mode: " + s);
}

inline std::string injection_name(LoraInjection inj) {
  switch (inj) {
    case LoraInjection::kNone: return "none";
    case LoraInjection::kAttention: return "attention";
    case LoraInjection::kAll: return "all";
  }
  throw std::logic_error("injection_name: bad enum");
}

struct DenoiserConfig {
  int height = 64;
  int width = 64;
  int channels = 3;
  int base_channels = 16;
  std::vector<int> channel_mults = {1, 2, 4};
  int temb_dim = 64;  // sinusoidal embedding width and time-MLP width
  int cond_dim = kCondDim;
  int norm_groups = 4;
  uint64_t seed = 1;  // base weight init
  int lora_rank = 4;
  float lora_scale = 1.0f;
  LoraInjection injection = LoraInjection::kAttention;
};

// [dim] with sin in the first half, cos in the second; frequencies log-spaced
// from 1 down to 1/10000.
inline Tensor sinusoidal_embedding(int t, int dim) {
  if (dim < 2 || dim % 2 != 0) throw std::invalid_argument("sinusoidal_embedding: dim must be even >= 2");
  int half = dim / 2;
  Tensor out({dim});
  for (int i = 0; i < half; ++i) {
    double f = half == 1 ? 1.0 : std::exp(-std::log(10000.0) * i / (half - 1));
    out[i] = static_cast<float>(std::sin(t * f));
    out[half + i] = static_cast<float>(std::cos(t * f));
  }
  return out;
}

class UNetDenoiser : public Denoiser {
 public:
  explicit UNetDenoiser(DenoiserConfig cfg) : cfg_(std::move(cfg)) { build(); }

  ad::Var predict(const ad::Var& x_t, const Tensor& c, int t) override {
    if (x_t.shape() != image_shape())
      throw std::invalid_argument("predict: input shape mismatch");
    if (c.size() != cfg_.cond_dim) throw std::invalid_argument("predict: cond dim mismatch");
    if (t < 0) throw std::invalid_argument("predict: negative timestep");

    ad::Var temb = ad::Var::constant(sinusoidal_embedding(t, cfg_.temb_dim));
    temb = dense_fwd(time2_, ad::silu(dense_fwd(time1_, temb)));
    ad::Var cvec = ad::Var::constant(c);

    int levels = static_cast<int>(cfg_.channel_mults.size());
    ad::Var h = conv_fwd(conv_in_, x_t);
    std::vector<ad::Var> skips;
    for (int i = 0; i < levels; ++i) {
      h = res_fwd(enc_res_[i], h, temb, cvec);
      if (i == levels - 1) h = attn_fwd(enc_attn_, h);
      skips.push_back(h);
      if (i < levels - 1) h = conv_fwd(down_[i], h);
    }
    h = res_fwd(mid_res1_, h, temb, cvec);
    h = attn_fwd(mid_attn_, h);
    h = res_fwd(mid_res2_, h, temb, cvec);
    for (int i = levels - 1; i >= 0; --i) {
      h = ad::concat({h, skips[i]}, 0);
      h = res_fwd(dec_res_[i], h, temb, cvec);
      if (i == levels - 1) h = attn_fwd(dec_attn_, h);
      if (i > 0) h = conv_fwd(up_[i], ad::upsample_nearest2(h));
    }
    h = film_apply(norm_fwd(out_norm_, h), out_film_t_, out_film_c_, temb, cvec,
                   cfg_.base_channels * cfg_.channel_mults[0]);
    return conv_fwd(conv_out_, h);
  }

  std::vector<int> image_shape() const override { return {cfg_.channels, cfg_.height, cfg_.width}; }
  ad::ParamSet& params() override { return set_; }
  const DenoiserConfig& config() const { return cfg_; }

 private:
  struct Dense {
    ad::ParamPtr W;                  // used when not adapted
    std::optional<LoraLinear> lora;  // owns the frozen W when adapted
    ad::ParamPtr b;                  // optional
  };
  struct Conv {
    ad::ParamPtr W;
    ad::ParamPtr b;
    std::optional<LoraConv2d> lora;
    int stride = 1, pad = 1;
  };
  struct Norm {
    ad::ParamPtr gamma;  // [C,1,1]
    ad::ParamPtr beta;   // [C,1,1]
    int groups = 1;
  };
  struct ResBlock {
    Norm n1;
    Conv c1;
    Dense temb_proj;
    Dense cond_proj;  // additive prompt injection; zero prompt adds nothing
    Norm n2;
    Dense film_t;  // temb -> [2C]: scale then shift (adaLN-style)
    Dense film_c;  // cond -> [2C]
    Conv c2;
    std::optional<Conv> skip;  // 1x1 when channel counts differ
    int c_out = 0;
  };
  struct Attn {
    Norm n;
    Dense q, k, v, o;
    int channels = 0;
  };

  Tensor init_normal(const std::string& name, std::vector<int> shape, float stddev) {
    Rng rng(derive_seed(cfg_.seed, "base-init", fnv1a64(name)));
    return rng.normal_tensor(std::move(shape), stddev);
  }

  // Rank is capped so wrap_* preconditions hold on narrow layers. Narrow
  // layers (e.g. the RGB readout) may end up with a full-rank correction,
  // which they need: a rank-deficient adapter there cannot redirect the
  // frozen random readout toward the signal.
  int capped_rank(int d_out, int d_in) const {
    return std::min(cfg_.lora_rank, std::min(d_out, d_in));
  }

  Dense make_dense(const std::string& name, int d_out, int d_in, bool attention_proj,
                   bool bias, float weight_std) {
    Dense d;
    Tensor W = init_normal(name + ".W", {d_out, d_in}, weight_std);
    bool adapt = cfg_.injection == LoraInjection::kAll ||
                 (cfg_.injection == LoraInjection::kAttention && attention_proj);
    int r = capped_rank(d_out, d_in);
    if (adapt && r >= 1) {
      d.lora = wrap_linear(name, std::move(W), r, cfg_.seed, cfg_.lora_scale);
      set_.add(d.lora->W);
      set_.add(d.lora->A);
      set_.add(d.lora->B);
    } else {
      d.W = set_.add(name + ".W", std::move(W), /*trainable=*/false);
    }
    if (bias) d.b = set_.add(name + ".b", Tensor({d_out}), /*trainable=*/false);
    return d;
  }

  // Modulation head: frozen-at-zero base weight, no bias. Unadapted it is an
  // exact identity modulation; adapted, the low-rank term learns the whole
  // scale/shift map starting from identity.
  Dense make_film(const std::string& name, int d_out, int d_in) {
    return make_dense(name, d_out, d_in, false, /*bias=*/false, /*weight_std=*/0.0f);
  }

  Conv make_conv(const std::string& name, int c_out, int c_in, int k, int stride, int pad) {
    Conv c;
    c.stride = stride;
    c.pad = pad;
    float std = std::sqrt(2.0f / static_cast<float>(c_in * k * k));
    Tensor W = init_normal(name + ".W", {c_out, c_in, k, k}, std);
    bool adapt = cfg_.injection == LoraInjection::kAll;
    int r = capped_rank(c_out, c_in * k * k);
    if (adapt && r >= 1) {
      c.lora = wrap_conv(name, std::move(W), Tensor({c_out}), r, cfg_.seed, stride, pad,
                         cfg_.lora_scale);
      set_.add(c.lora->W);
      set_.add(c.lora->bias);
      set_.add(c.lora->A);
      set_.add(c.lora->B);
    } else {
      c.W = set_.add(name + ".W", std::move(W), /*trainable=*/false);
      c.b = set_.add(name + ".b", Tensor({c_out}), /*trainable=*/false);
    }
    return c;
  }

  Norm make_norm(const std::string& name, int channels) {
    Norm n;
    int g = std::min(cfg_.norm_groups, channels);
    while (channels % g != 0) --g;
    n.groups = g;
    Tensor gamma({channels, 1, 1});
    for (int i = 0; i < channels; ++i) gamma[i] = 1.0f;
    n.gamma = set_.add(name + ".gamma", std::move(gamma), /*trainable=*/false);
    n.beta = set_.add(name + ".beta", Tensor({channels, 1, 1}), /*trainable=*/false);
    return n;
  }

  ResBlock make_res(const std::string& name, int c_in, int c_out) {
    ResBlock r;
    r.c_out = c_out;
    r.n1 = make_norm(name + ".norm1", c_in);
    r.c1 = make_conv(name + ".conv1", c_out, c_in, 3, 1, 1);
    float tstd = std::sqrt(1.0f / static_cast<float>(cfg_.temb_dim));
    r.temb_proj = make_dense(name + ".temb", c_out, cfg_.temb_dim, false, true, tstd);
    float cstd = std::sqrt(1.0f / static_cast<float>(cfg_.cond_dim));
    r.cond_proj = make_dense(name + ".cond", c_out, cfg_.cond_dim, false, false, cstd);
    r.n2 = make_norm(name + ".norm2", c_out);
    r.film_t = make_film(name + ".film_t", 2 * c_out, cfg_.temb_dim);
    r.film_c = make_film(name + ".film_c", 2 * c_out, cfg_.cond_dim);
    r.c2 = make_conv(name + ".conv2", c_out, c_out, 3, 1, 1);
    if (c_in != c_out) r.skip = make_conv(name + ".skip", c_out, c_in, 1, 1, 0);
    return r;
  }

  Attn make_attn(const std::string& name, int channels) {
    Attn a;
    a.channels = channels;
    a.n = make_norm(name + ".norm", channels);
    float std = std::sqrt(1.0f / static_cast<float>(channels));
    a.q = make_dense(name + ".q", channels, channels, true, false, std);
    a.k = make_dense(name + ".k", channels, channels, true, false, std);
    a.v = make_dense(name + ".v", channels, channels, true, false, std);
    a.o = make_dense(name + ".out", channels, channels, true, true, std);
    return a;
  }

  void build() {
    int levels = static_cast<int>(cfg_.channel_mults.size());
    if (levels < 1) throw std::invalid_argument("denoiser: channel_mults must be nonempty");
    int down_factor = 1 << (levels - 1);
    if (cfg_.height % down_factor != 0 || cfg_.width % down_factor != 0)
      throw std::invalid_argument("denoiser: resolution not divisible by 2^(levels-1)");
    if (cfg_.base_channels < 2) throw std::invalid_argument("denoiser: base_channels too small");

    std::vector<int> ch(levels);
    for (int i = 0; i < levels; ++i) ch[i] = cfg_.base_channels * cfg_.channel_mults[i];

    float tstd = std::sqrt(2.0f / static_cast<float>(cfg_.temb_dim));
    time1_ = make_dense("time.mlp1", cfg_.temb_dim, cfg_.temb_dim, false, true, tstd);
    time2_ = make_dense("time.mlp2", cfg_.temb_dim, cfg_.temb_dim, false, true, tstd);

    conv_in_ = make_conv("conv_in", ch[0], cfg_.channels, 3, 1, 1);
    enc_res_.reserve(levels);
    for (int i = 0; i < levels; ++i) {
      enc_res_.push_back(make_res("enc" + std::to_string(i) + ".res", ch[i], ch[i]));
      if (i < levels - 1)
        down_.push_back(make_conv("enc" + std::to_string(i) + ".down", ch[i + 1], ch[i], 3, 2, 1));
    }
    enc_attn_ = make_attn("enc" + std::to_string(levels - 1) + ".attn", ch[levels - 1]);
    mid_res1_ = make_res("mid.res1", ch[levels - 1], ch[levels - 1]);
    mid_attn_ = make_attn("mid.attn", ch[levels - 1]);
    mid_res2_ = make_res("mid.res2", ch[levels - 1], ch[levels - 1]);
    dec_res_.resize(levels);
    up_.resize(levels);
    for (int i = levels - 1; i >= 0; --i) {
      dec_res_[i] = make_res("dec" + std::to_string(i) + ".res", 2 * ch[i], ch[i]);
      if (i > 0)
        up_[i] = make_conv("dec" + std::to_string(i) + ".up", ch[i - 1], ch[i], 3, 1, 1);
    }
    dec_attn_ = make_attn("dec" + std::to_string(levels - 1) + ".attn", ch[levels - 1]);
    out_norm_ = make_norm("out.norm", ch[0]);
    out_film_t_ = make_film("out.film_t", 2 * ch[0], cfg_.temb_dim);
    out_film_c_ = make_film("out.film_c", 2 * ch[0], cfg_.cond_dim);
    conv_out_ = make_conv("out.conv", cfg_.channels, ch[0], 3, 1, 1);
  }

  static ad::Var dense_fwd(const Dense& d, const ad::Var& x) {
    ad::Var y = d.lora ? lora_forward(*d.lora, x)
                       : (x.val().rank() == 1
                              ? ad::reshape(ad::matmul_nt(ad::reshape(x, {1, x.val().dim(0)}),
                                                          ad::Var::leaf(d.W)),
                                            {d.W->value.dim(0)})
                              : ad::matmul_nt(x, ad::Var::leaf(d.W)));
    return d.b ? ad::add(y, ad::Var::leaf(d.b)) : y;
  }

  static ad::Var conv_fwd(const Conv& c, const ad::Var& x) {
    if (c.lora) return lora_forward(*c.lora, x);
    return ad::conv2d(x, ad::Var::leaf(c.W), ad::Var::leaf(c.b), c.stride, c.pad);
  }

  static ad::Var norm_fwd(const Norm& n, const ad::Var& x) {
    const auto& s = x.shape();
    int C = s[0], H = s[1], W = s[2];
    int G = n.groups;
    int per = (C / G) * H * W;
    ad::Var xg = ad::reshape(x, {G, per});
    Tensor ones_t({per, 1});
    for (int i = 0; i < per; ++i) ones_t[i] = 1.0f / static_cast<float>(per);
    ad::Var ones = ad::Var::constant(std::move(ones_t));
    ad::Var mean = ad::matmul(xg, ones);                       // [G,1]
    ad::Var xc = ad::sub(xg, mean);                            // broadcast
    ad::Var var = ad::matmul(ad::square(xc), ones);            // [G,1]
    ad::Var xn = ad::div(xc, ad::sqrt(ad::add(var, ad::constant_scalar(1e-5f))));
    ad::Var out = ad::reshape(xn, {C, H, W});
    return ad::add(ad::mul(out, ad::Var::leaf(n.gamma)), ad::Var::leaf(n.beta));
  }

  // h * (1 + gamma) + beta with [gamma; beta] = film_t(temb) + film_c(cvec).
  static ad::Var film_apply(const ad::Var& h, const Dense& film_t, const Dense& film_c,
                            const ad::Var& temb, const ad::Var& cvec, int channels) {
    ad::Var f = ad::add(dense_fwd(film_t, temb), dense_fwd(film_c, cvec));  // [2C]
    ad::Var gamma = ad::reshape(ad::slice(f, 0, 0, channels), {channels, 1, 1});
    ad::Var beta = ad::reshape(ad::slice(f, 0, channels, channels), {channels, 1, 1});
    return ad::add(ad::mul(h, ad::add(gamma, ad::constant_scalar(1.0f))), beta);
  }

  static ad::Var res_fwd(const ResBlock& r, const ad::Var& x, const ad::Var& temb,
                         const ad::Var& cvec) {
    ad::Var h = conv_fwd(r.c1, ad::silu(norm_fwd(r.n1, x)));
    ad::Var te = ad::add(dense_fwd(r.temb_proj, temb), dense_fwd(r.cond_proj, cvec));
    h = ad::add(h, ad::reshape(te, {r.c_out, 1, 1}));
    h = film_apply(norm_fwd(r.n2, h), r.film_t, r.film_c, temb, cvec, r.c_out);
    h = conv_fwd(r.c2, ad::silu(h));
    ad::Var sk = r.skip ? conv_fwd(*r.skip, x) : x;
    return ad::add(h, sk);
  }

  static ad::Var attn_fwd(const Attn& a, const ad::Var& x) {
    const auto& s = x.shape();
    int C = s[0], H = s[1], W = s[2];
    ad::Var xt = ad::transpose2d(ad::reshape(norm_fwd(a.n, x), {C, H * W}));  // [HW,C]
    ad::Var q = dense_fwd(a.q, xt);
    ad::Var k = dense_fwd(a.k, xt);
    ad::Var v = dense_fwd(a.v, xt);
    float scale = 1.0f / std::sqrt(static_cast<float>(C));
    ad::Var scores = ad::mul(ad::matmul_nt(q, k), ad::constant_scalar(scale));  // [HW,HW]
    ad::Var attn = ad::softmax_lastdim(scores);
    ad::Var y = dense_fwd(a.o, ad::matmul(attn, v));
    return ad::add(x, ad::reshape(ad::transpose2d(y), {C, H, W}));
  }

  DenoiserConfig cfg_;
  ad::ParamSet set_;
  Dense time1_, time2_;
  Conv conv_in_, conv_out_;
  std::vector<ResBlock> enc_res_;
  std::vector<Conv> down_;
  Attn enc_attn_, mid_attn_, dec_attn_;
  ResBlock mid_res1_, mid_res2_;
  std::vector<ResBlock> dec_res_;
  std::vector<Conv> up_;
  Norm out_norm_;
  Dense out_film_t_, out_film_c_;
};

}  // namespace sgen

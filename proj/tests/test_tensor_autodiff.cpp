#include <catch2/catch_amalgamated.hpp>
#include <cmath>

#include "stereogen/autodiff.hpp"
#include "stereogen/nn_ops.hpp"
#include "stereogen/rng.hpp"
#include "stereogen/tensor.hpp"
#include "test_util.hpp"

using sgen::Tensor;
namespace ad = sgen::ad;
using ad::Var;
using sgtest::check_gradients;

// ---------------------------------------------------------------------------
// Tensor container
// ---------------------------------------------------------------------------

TEST_CASE("tensor construction and metadata", "[tensor]") {
  Tensor t({2, 3, 4});
  CHECK(t.rank() == 3);
  CHECK(t.size() == 24);
  CHECK(t.dim(1) == 3);
  CHECK(t.shape_str() == "[2,3,4]");
  for (int i = 0; i < t.size(); ++i) CHECK(t[i] == 0.0f);

  Tensor f({2, 2}, 1.5f);
  CHECK(f[3] == 1.5f);

  CHECK(Tensor::scalar(3.0f).size() == 1);
  CHECK(Tensor::scalar(3.0f)[0] == 3.0f);

  CHECK_THROWS_AS(Tensor({2, 0}), std::invalid_argument);
  CHECK_THROWS_AS(Tensor({-1}), std::invalid_argument);
  CHECK_THROWS_AS(Tensor(std::vector<int>{}), std::invalid_argument);
  CHECK_THROWS_AS(Tensor::from_data({2, 2}, {1.0f, 2.0f}), std::invalid_argument);
}

TEST_CASE("tensor copy shares storage, clone is deep", "[tensor]") {
  Tensor a({4}, 1.0f);
  Tensor shared = a;       // shares
  Tensor deep = a.clone();  // deep copy
  a[0] = 9.0f;
  CHECK(shared[0] == 9.0f);
  CHECK(deep[0] == 1.0f);

  Tensor r = a.reshaped({2, 2});
  r[1] = 5.0f;
  CHECK(a[1] == 5.0f);  // reshaped view shares storage
  CHECK_THROWS_AS(a.reshaped({3}), std::invalid_argument);
}

TEST_CASE("tensor reductions accumulate in double", "[tensor]") {
  // 2^24 cannot be incremented by 1.0 in float; double accumulation can.
  Tensor t = Tensor::from_data({3}, {16777216.0f, 1.0f, 1.0f});
  CHECK(t.sum() == Approx(16777218.0).epsilon(0));
  CHECK(t.mean() == Approx(16777218.0 / 3.0).epsilon(1e-12));

  Tensor m = Tensor::from_data({3}, {-2.0f, 1.0f, 0.5f});
  CHECK(m.max_abs() == 2.0f);
}

TEST_CASE("tensor finiteness and bitwise equality", "[tensor]") {
  Tensor ok = Tensor::from_data({2}, {1.0f, -2.0f});
  CHECK(ok.all_finite());
  Tensor bad = Tensor::from_data({2}, {1.0f, std::numeric_limits<float>::quiet_NaN()});
  CHECK_FALSE(bad.all_finite());
  Tensor inf = Tensor::from_data({2}, {1.0f, std::numeric_limits<float>::infinity()});
  CHECK_FALSE(inf.all_finite());

  Tensor a = Tensor::from_data({2}, {0.0f, 1.0f});
  Tensor b = Tensor::from_data({2}, {-0.0f, 1.0f});
  CHECK(a.bitwise_equal(a.clone()));
  CHECK_FALSE(a.bitwise_equal(b));  // -0.0 differs bitwise from +0.0
  CHECK_FALSE(a.bitwise_equal(Tensor::from_data({1, 2}, {0.0f, 1.0f})));  // shape matters

  CHECK(sgen::max_abs_diff(a, b) == 0.0f);
  CHECK_THROWS_AS(sgen::max_abs_diff(a, Tensor({3})), std::invalid_argument);
}

TEST_CASE("rng determinism and distribution sanity", "[tensor]") {
  sgen::Rng a(42), b(42), c(43);
  for (int i = 0; i < 16; ++i) {
    double va = a.uniform();
    CHECK(va == b.uniform());
    CHECK(va >= 0.0);
    CHECK(va < 1.0);
  }
  CHECK(a.uniform() != c.uniform());

  // derive_seed: order-sensitive, tag-sensitive.
  CHECK(sgen::derive_seed(1, "x", 2, 3) != sgen::derive_seed(1, "x", 3, 2));
  CHECK(sgen::derive_seed(1, "x") != sgen::derive_seed(1, "y"));
  CHECK(sgen::derive_seed(1, "x", 5) == sgen::derive_seed(1, "x", 5));

  // Box-Muller normals: mean ~0, var ~1 over a large draw.
  sgen::Rng r(7);
  Tensor n = r.normal_tensor({20000});
  double mean = n.mean();
  double var = 0.0;
  for (int i = 0; i < n.size(); ++i) var += (n[i] - mean) * (n[i] - mean);
  var /= n.size();
  CHECK(std::abs(mean) < 0.03);
  CHECK(std::abs(var - 1.0) < 0.05);
}

// ---------------------------------------------------------------------------
// Autodiff: forward semantics
// ---------------------------------------------------------------------------

TEST_CASE("broadcasting rules", "[autodiff]") {
  CHECK(ad::broadcast_shape({2, 3}, {3}) == std::vector<int>{2, 3});
  CHECK(ad::broadcast_shape({4, 1, 3}, {2, 1}) == std::vector<int>{4, 2, 3});
  CHECK(ad::broadcast_shape({1}, {5}) == std::vector<int>{5});
  CHECK_THROWS_AS(ad::broadcast_shape({2, 3}, {4}), std::invalid_argument);

  Var a = Var::constant(Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6}));
  Var b = Var::constant(Tensor::from_data({3}, {10, 20, 30}));
  Tensor s = ad::add(a, b).val();
  CHECK(s.shape() == std::vector<int>{2, 3});
  CHECK(s[0] == 11.0f);
  CHECK(s[4] == 25.0f);

  Var col = Var::constant(Tensor::from_data({2, 1}, {100, 200}));
  Tensor m = ad::mul(a, col).val();
  CHECK(m[2] == 300.0f);
  CHECK(m[3] == 800.0f);
}

TEST_CASE("scalar operator overloads", "[autodiff]") {
  Var x = Var::constant(Tensor::from_data({2}, {2.0f, -3.0f}));
  CHECK((x + 1.0f).val()[0] == 3.0f);
  CHECK((1.0f - x).val()[1] == 4.0f);
  CHECK((x * 2.0f).val()[1] == -6.0f);
  CHECK((6.0f / x).val()[0] == 3.0f);
}

TEST_CASE("no-grad graphs keep no parents", "[autodiff]") {
  Var a = Var::constant(Tensor({8}, 1.0f));
  Var b = Var::constant(Tensor({8}, 2.0f));
  Var c = ad::mul(ad::add(a, b), b);
  CHECK_FALSE(c.requires_grad());
  CHECK(c.node()->parents.empty());

  auto p = ad::make_param("w", Tensor({8}, 0.5f));
  Var d = ad::mul(c, Var::leaf(p));
  CHECK(d.requires_grad());
  CHECK(d.node()->parents.size() == 2);

  auto frozen = ad::make_param("f", Tensor({8}, 0.5f), /*trainable=*/false);
  Var e = ad::mul(c, Var::leaf(frozen));
  CHECK_FALSE(e.requires_grad());
}

TEST_CASE("param leaves share storage with values", "[autodiff]") {
  auto p = ad::make_param("w", Tensor({2}, 1.0f));
  Var v = Var::leaf(p);
  p->value[0] = 42.0f;
  CHECK(v.val()[0] == 42.0f);
}

TEST_CASE("backward accumulates across reuse and calls", "[autodiff]") {
  auto p = ad::make_param("x", Tensor::from_data({2}, {3.0f, -1.0f}));
  Var x = Var::leaf(p);
  // y = x*x + x  =>  dy/dx = 2x + 1
  Var y = ad::add(ad::mul(x, x), x);
  ad::backward(ad::sum_all(y));
  CHECK(p->grad[0] == Approx(7.0f));
  CHECK(p->grad[1] == Approx(-1.0f));

  // Grads accumulate until zero_grad.
  ad::backward(ad::sum_all(ad::mul(Var::leaf(p), Var::leaf(p))));
  CHECK(p->grad[0] == Approx(7.0f + 6.0f));
  p->zero_grad();
  CHECK(p->grad.empty());
}

TEST_CASE("backward is deterministic", "[autodiff]") {
  auto run = [](uint64_t seed) {
    sgen::Rng rng(seed);
    auto p = ad::make_param("w", rng.normal_tensor({5, 5}));
    Var w = Var::leaf(p);
    Var y = ad::mean_all(ad::mul(ad::silu(ad::matmul(w, w)), w));
    ad::backward(y);
    return p->grad.clone();
  };
  CHECK(run(11).bitwise_equal(run(11)));
}

TEST_CASE("paramset registration order and lookup", "[autodiff]") {
  ad::ParamSet ps;
  ps.add("b", Tensor({1}, 0.0f));
  ps.add("a", Tensor({1}, 0.0f), /*trainable=*/false);
  CHECK(ps.size() == 2);
  CHECK(ps.all()[0]->name == "b");
  CHECK(ps.all()[1]->name == "a");
  CHECK(ps.find("a")->trainable == false);
  CHECK(ps.find("missing") == nullptr);
  CHECK(ps.trainable().size() == 1);
  CHECK_THROWS_AS(ps.add("b", Tensor({1}, 0.0f)), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// Autodiff: finite-difference gradient checks, one per op
// ---------------------------------------------------------------------------

namespace {

sgen::Rng& fd_rng() {
  static sgen::Rng rng(20240901);
  return rng;
}

ad::ParamPtr rand_param(const std::string& name, std::vector<int> shape, float lo = -1.0f,
                        float hi = 1.0f) {
  return ad::make_param(name, fd_rng().uniform_tensor(std::move(shape), lo, hi));
}

}  // namespace

TEST_CASE("fd: elementwise binary ops", "[autodiff]") {
  auto a = rand_param("a", {2, 3}, 0.4f, 1.6f);
  auto b = rand_param("b", {2, 3}, 0.4f, 1.6f);
  check_gradients({a, b}, [&] { return ad::add(Var::leaf(a), Var::leaf(b)); });
  check_gradients({a, b}, [&] { return ad::sub(Var::leaf(a), Var::leaf(b)); });
  check_gradients({a, b}, [&] { return ad::mul(Var::leaf(a), Var::leaf(b)); });
  check_gradients({a, b}, [&] { return ad::div(Var::leaf(a), Var::leaf(b)); });
}

TEST_CASE("fd: broadcast binary ops reduce grads", "[autodiff]") {
  auto a = rand_param("a", {2, 3, 4}, 0.4f, 1.6f);
  auto b = rand_param("b", {3, 1}, 0.4f, 1.6f);
  check_gradients({a, b}, [&] { return ad::mul(Var::leaf(a), Var::leaf(b)); });
  check_gradients({a, b}, [&] { return ad::div(Var::leaf(a), Var::leaf(b)); });
  auto s = rand_param("s", {1}, 0.5f, 1.5f);
  check_gradients({a, s}, [&] { return ad::add(Var::leaf(a), Var::leaf(s)); });
}

TEST_CASE("fd: unary ops", "[autodiff]") {
  auto pos = rand_param("pos", {3, 3}, 0.3f, 1.8f);
  auto any = rand_param("any", {3, 3}, -1.5f, 1.5f);
  // keep |x| away from the relu kink
  for (int i = 0; i < any->value.size(); ++i)
    if (std::abs(any->value[i]) < 0.15f) any->value[i] = 0.3f;

  check_gradients({any}, [&] { return ad::neg(Var::leaf(any)); });
  check_gradients({any}, [&] { return ad::exp(Var::leaf(any)); });
  check_gradients({pos}, [&] { return ad::log(Var::leaf(pos)); });
  check_gradients({pos}, [&] { return ad::sqrt(Var::leaf(pos)); });
  check_gradients({any}, [&] { return ad::square(Var::leaf(any)); });
  check_gradients({any}, [&] { return ad::relu(Var::leaf(any)); });
  check_gradients({any}, [&] { return ad::sigmoid(Var::leaf(any)); });
  check_gradients({any}, [&] { return ad::silu(Var::leaf(any)); });
  check_gradients({any}, [&] { return ad::tanh(Var::leaf(any)); });
}

TEST_CASE("fd: reductions", "[autodiff]") {
  auto a = rand_param("a", {4, 5}, -1.0f, 1.0f);
  // unique max, away from ties
  a->value[7] = 3.0f;
  check_gradients({a}, [&] { return ad::sum_all(Var::leaf(a)); });
  check_gradients({a}, [&] { return ad::mean_all(Var::leaf(a)); });
  check_gradients({a}, [&] { return ad::max_all(Var::leaf(a)); });
}

TEST_CASE("fd: shape ops", "[autodiff]") {
  auto a = rand_param("a", {2, 6});
  auto b = rand_param("b", {2, 3});
  check_gradients({a}, [&] { return ad::reshape(Var::leaf(a), {3, 4}); });
  check_gradients({a, b}, [&] { return ad::concat({Var::leaf(a), Var::leaf(b)}, 1); });
  check_gradients({a, b}, [&] {
    return ad::concat({ad::reshape(Var::leaf(b), {1, 2, 3}),
                       ad::reshape(Var::leaf(a), {2, 2, 3})},
                      0);
  });
  check_gradients({a}, [&] { return ad::slice(Var::leaf(a), 1, 2, 3); });
  check_gradients({a}, [&] { return ad::slice(Var::leaf(a), 0, 1, 1); });
}

TEST_CASE("shape op validation", "[autodiff]") {
  Var a = Var::constant(Tensor({2, 3}));
  CHECK_THROWS_AS(ad::slice(a, 1, 2, 2), std::invalid_argument);
  CHECK_THROWS_AS(ad::slice(a, 2, 0, 1), std::invalid_argument);
  CHECK_THROWS_AS(ad::concat({a, Var::constant(Tensor({3, 3}))}, 1), std::invalid_argument);
  CHECK_THROWS_AS(ad::concat({}, 0), std::invalid_argument);
}

TEST_CASE("fd: softmax", "[autodiff]") {
  auto a = rand_param("a", {3, 4}, -2.0f, 2.0f);
  check_gradients({a}, [&] { return ad::softmax_lastdim(Var::leaf(a)); });
  // rows sum to one
  Tensor y = ad::softmax_lastdim(Var::leaf(a)).val();
  for (int r = 0; r < 3; ++r) {
    double s = 0.0;
    for (int c = 0; c < 4; ++c) s += y[r * 4 + c];
    CHECK(s == Approx(1.0).epsilon(1e-5));
  }
}

TEST_CASE("fd: matmul family", "[autodiff]") {
  auto a = rand_param("a", {3, 4});
  auto b = rand_param("b", {4, 2});
  auto bt = rand_param("bt", {2, 4});
  check_gradients({a, b}, [&] { return ad::matmul(Var::leaf(a), Var::leaf(b)); });
  check_gradients({a, bt}, [&] { return ad::matmul_nt(Var::leaf(a), Var::leaf(bt)); });
  check_gradients({a}, [&] { return ad::transpose2d(Var::leaf(a)); });

  // matmul_nt(a, b) == matmul(a, b^T)
  Tensor x = ad::matmul_nt(Var::leaf(a), Var::leaf(bt)).val();
  Tensor y = ad::matmul(Var::leaf(a), ad::transpose2d(Var::leaf(bt))).val();
  CHECK(sgen::max_abs_diff(x, y) < 1e-6f);

  CHECK_THROWS_AS(ad::matmul(Var::leaf(a), Var::leaf(bt)), std::invalid_argument);
  CHECK_THROWS_AS(ad::matmul_nt(Var::leaf(a), Var::leaf(b)), std::invalid_argument);
}

TEST_CASE("matmul matches a hand example", "[autodiff]") {
  Var a = Var::constant(Tensor::from_data({2, 2}, {1, 2, 3, 4}));
  Var b = Var::constant(Tensor::from_data({2, 2}, {5, 6, 7, 8}));
  Tensor c = ad::matmul(a, b).val();
  CHECK(c[0] == 19.0f);
  CHECK(c[1] == 22.0f);
  CHECK(c[2] == 43.0f);
  CHECK(c[3] == 50.0f);
}

TEST_CASE("fd: conv2d", "[autodiff]") {
  auto x = rand_param("x", {2, 5, 6});
  auto w = rand_param("w", {3, 2, 3, 3});
  auto b = rand_param("b", {3});

  check_gradients({x, w, b},
                  [&] { return ad::conv2d(Var::leaf(x), Var::leaf(w), Var::leaf(b), 1, 1); });
  check_gradients({x, w},
                  [&] { return ad::conv2d(Var::leaf(x), Var::leaf(w), Var(), 1, 1); });
  // stride 2 (even input dims)
  auto x2 = rand_param("x2", {2, 6, 8});
  check_gradients({x2, w, b},
                  [&] { return ad::conv2d(Var::leaf(x2), Var::leaf(w), Var::leaf(b), 2, 1); });
  // 1x1 kernel, no padding
  auto w1 = rand_param("w1", {4, 2, 1, 1});
  check_gradients({x, w1}, [&] { return ad::conv2d(Var::leaf(x), Var::leaf(w1), Var(), 1, 0); });
}

TEST_CASE("conv2d shape semantics", "[autodiff]") {
  // 3x3 same-pad conv on [1,4,4] with identity-ish kernel: center tap copies input.
  Tensor w({1, 1, 3, 3});
  w[4] = 1.0f;  // center
  Tensor x = fd_rng().uniform_tensor({1, 4, 4}, -1.0f, 1.0f);
  Tensor y = ad::conv2d(Var::constant(x), Var::constant(w), Var(), 1, 1).val();
  CHECK(y.shape() == std::vector<int>{1, 4, 4});
  CHECK(sgen::max_abs_diff(x, y) == 0.0f);

  // stride-2 downsample halves spatial dims
  Tensor y2 = ad::conv2d(Var::constant(Tensor({3, 8, 10})), Var::constant(Tensor({5, 3, 3, 3})),
                         Var(), 2, 1)
                  .val();
  CHECK(y2.shape() == std::vector<int>{5, 4, 5});

  CHECK_THROWS_AS(ad::conv2d(Var::constant(Tensor({2, 4, 4})), Var::constant(Tensor({1, 3, 3, 3})),
                             Var(), 1, 1),
                  std::invalid_argument);
}

TEST_CASE("fd: upsample_nearest2", "[autodiff]") {
  auto x = rand_param("x", {2, 3, 4});
  check_gradients({x}, [&] { return ad::upsample_nearest2(Var::leaf(x)); });

  Tensor y = ad::upsample_nearest2(Var::leaf(x)).val();
  CHECK(y.shape() == std::vector<int>{2, 6, 8});
  CHECK(y[0] == x->value[0]);
  CHECK(y[1] == x->value[0]);
  CHECK(y[8] == x->value[0]);
}

TEST_CASE("fd: composite graph mixing ops", "[autodiff]") {
  auto w = rand_param("w", {4, 4}, -0.8f, 0.8f);
  auto v = rand_param("v", {2, 4}, -0.8f, 0.8f);
  check_gradients({w, v}, [&] {
    Var h = ad::silu(ad::matmul_nt(Var::leaf(v), Var::leaf(w)));
    Var att = ad::softmax_lastdim(ad::matmul_nt(h, h));
    Var out = ad::matmul(att, h);
    return ad::mean_all(ad::square(ad::sub(out, Var::leaf(v))));
  });
}

#pragma once

// Stereo pair <-> vertically stacked image bijection. Images are [3,H,W]
// tensors in [-1,1]; the stacked layout is left on top, right below. The
// stacking order is also recorded in checkpoint headers.

#include "stereogen/autodiff.hpp"
#include "stereogen/tensor.hpp"

namespace sgen {

inline constexpr const char* kStackingOrder = "left_top";

struct StereoPair {
  Tensor left;   // [3,H,W]
  Tensor right;  // [3,H,W]
};

namespace detail {

inline void check_image(const Tensor& t, const char* what) {
  if (t.rank() != 3 || t.dim(0) != 3)
    throw std::invalid_argument(std::string(what) + ": expected [3,H,W], got " + t.shape_str());
}

}  // namespace detail

inline Tensor stack(const StereoPair& pair) {
  detail::check_image(pair.left, "stack");
  detail::check_image(pair.right, "stack");
  if (!pair.left.same_shape(pair.right))
    throw std::invalid_argument("stack: left/right shape mismatch");
  ad::NoGradGuard ng;
  return ad::concat({ad::Var::constant(pair.left), ad::Var::constant(pair.right)}, 1).val();
}

inline StereoPair unstack(const Tensor& stacked) {
  detail::check_image(stacked, "unstack");
  if (stacked.dim(1) % 2 != 0) throw std::invalid_argument("unstack: odd height");
  int h = stacked.dim(1) / 2;
  ad::NoGradGuard ng;
  ad::Var s = ad::Var::constant(stacked);
  return {ad::slice(s, 1, 0, h).val(), ad::slice(s, 1, h, h).val()};
}

// Tape-aware versions used inside the reward graph.
inline ad::Var stack(const ad::Var& left, const ad::Var& right) {
  detail::check_image(left.val(), "stack");
  detail::check_image(right.val(), "stack");
  if (!left.val().same_shape(right.val()))
    throw std::invalid_argument("stack: left/right shape mismatch");
  return ad::concat({left, right}, 1);
}

inline std::pair<ad::Var, ad::Var> unstack(const ad::Var& stacked) {
  detail::check_image(stacked.val(), "unstack");
  if (stacked.val().dim(1) % 2 != 0) throw std::invalid_argument("unstack: odd height");
  int h = stacked.val().dim(1) / 2;
  return {ad::slice(stacked, 1, 0, h), ad::slice(stacked, 1, h, h)};
}

}  // namespace sgen

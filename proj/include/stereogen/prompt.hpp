#pragma once

// Fixed (non-trained) text conditioning: each whitespace token hashes to a
// deterministic Gaussian vector; a caption embeds as the normalized sum of
// its token vectors. The null prompt for classifier-free guidance is the
// zero vector, which is what the samplers pass for the unconditional branch.

#include <cmath>
#include <string>

#include "stereogen/rng.hpp"
#include "stereogen/tensor.hpp"

namespace sgen {

inline constexpr int kCondDim = 32;
inline constexpr uint64_t kPromptHashSeed = 0x53746572656f21ull;

inline Tensor embed_prompt(const std::string& text, int dim = kCondDim) {
  if (dim < 1) throw std::invalid_argument("embed_prompt: dim must be >= 1");
  Tensor out({dim});
  size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && text[i] == ' ') ++i;
    size_t j = i;
    while (j < text.size() && text[j] != ' ') ++j;
    if (j > i) {
      std::string token = text.substr(i, j - i);
      Rng rng(derive_seed(kPromptHashSeed, token));
      for (int k = 0; k < dim; ++k) out[k] += static_cast<float>(rng.normal());
    }
    i = j;
  }
  double norm2 = 0.0;
  for (int k = 0; k < dim; ++k) norm2 += static_cast<double>(out[k]) * out[k];
  if (norm2 > 0.0) {
    float inv = static_cast<float>(1.0 / std::sqrt(norm2));
    for (int k = 0; k < dim; ++k) out[k] *= inv;
  }
  return out;
}

inline Tensor null_prompt(int dim = kCondDim) { return Tensor({dim}); }

}  // namespace sgen

#pragma once

#include <cstdint>

#include "nmcrl/autograd.hpp"
#include "nmcrl/data_model.hpp"

namespace nmcrl {

struct NoiseSpec {
  double sigma = 0.05;
  bool renormalize = true;
  std::uint64_t seed = 0;
};

// Per class: mean of its K descriptions, renormalised. One entry per class.
EmbeddingTable aggregate_text_prototypes(const EmbeddingTable& text_raw);

// i.i.d. N(0, sigma^2) draws of the given shape; deterministic in seed.
Tensor gaussian_noise(const Shape& shape, double sigma, std::uint64_t seed);

Tensor perturb_embeddings(const Tensor& z, const NoiseSpec& spec);

// Differentiable form used during training (noise is a constant offset).
ad::Var perturb_embeddings(const ad::Var& z, const NoiseSpec& spec);

}  // namespace nmcrl

#include "nmcrl/semantic.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <stdexcept>

#include "nmcrl/errors.hpp"

namespace nmcrl {

EmbeddingTable aggregate_text_prototypes(const EmbeddingTable& text_raw) {
  EmbeddingTable out;
  out.dim = text_raw.dim;
  out.kind = EmbeddingKind::text_prototype;
  out.normalized = true;
  for (int c : text_raw.class_ids()) {
    const std::size_t k = text_raw.items_for(c);
    if (k == 0) throw DataError("class " + std::to_string(c) + " has no text embeddings");
    // Summed in sorted order so the prototype does not depend on item order.
    std::vector<const std::vector<double>*> items;
    for (auto it = text_raw.entries.lower_bound({c, std::numeric_limits<int>::min()});
         it != text_raw.entries.end() && it->first.first == c; ++it)
      items.push_back(&it->second);
    std::sort(items.begin(), items.end(), [](const auto* a, const auto* b) { return *a < *b; });
    std::vector<double> mean(text_raw.dim, 0.0);
    for (const auto* v : items)
      for (std::size_t i = 0; i < mean.size(); ++i) mean[i] += (*v)[i];
    double norm = 0.0;
    for (auto& x : mean) {
      x /= static_cast<double>(k);
      norm += x * x;
    }
    norm = std::sqrt(norm);
    if (norm < 1e-8)
      throw DataError("text prototype for class " + std::to_string(c) + " is degenerate (mean norm " +
                           std::to_string(norm) + ")");
    for (auto& x : mean) x /= norm;
    out.entries[{c, 0}] = std::move(mean);
  }
  return out;
}

Tensor gaussian_noise(const Shape& shape, double sigma, std::uint64_t seed) {
  if (sigma < 0.0) throw std::domain_error("noise sigma must be nonnegative");
  Tensor t(shape, 0.0);
  if (sigma == 0.0) return t;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, sigma);
  for (auto& v : t.data) v = normal(rng);
  return t;
}

Tensor perturb_embeddings(const Tensor& z, const NoiseSpec& spec) {
  if (spec.sigma < 0.0) throw std::domain_error("noise sigma must be nonnegative");
  if (spec.sigma == 0.0) return z;
  ad::NoGradGuard guard;
  return perturb_embeddings(ad::Var::constant(z), spec).value();
}

ad::Var perturb_embeddings(const ad::Var& z, const NoiseSpec& spec) {
  if (spec.sigma < 0.0) throw std::domain_error("noise sigma must be nonnegative");
  if (spec.sigma == 0.0) return z;
  ad::Var noisy = ad::add(z, ad::Var::constant(gaussian_noise(z.shape(), spec.sigma, spec.seed)));
  return spec.renormalize ? ad::l2_normalize_last(noisy) : noisy;
}

}  // namespace nmcrl

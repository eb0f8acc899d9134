#include "nmcrl/eitra.hpp"

#include <cmath>
#include <random>

#include "nmcrl/errors.hpp"
#include "nmcrl/seeding.hpp"

namespace nmcrl {

using ad::Var;

namespace {

Var uniform_param(Shape shape, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor t(std::move(shape));
  for (auto& v : t.data) v = dist(rng);
  return Var::parameter(std::move(t));
}

Var as_group(const Var& m) { return ad::reshape(m, {1, m.shape()[0], m.shape()[1]}); }

Var as_matrix(const Var& g) { return ad::reshape(g, {g.shape()[1], g.shape()[2]}); }

}  // namespace

AlignmentParams AlignmentParams::init(const AlignmentConfig& cfg, std::uint64_t seed) {
  if (cfg.rows == 0 || cfg.dim == 0) throw ConfigError("alignment needs M >= 1 and d >= 1");
  std::mt19937_64 rng(derive_seed(seed, "eitra/init"));
  const std::size_t M = cfg.rows, d = cfg.dim;
  const double bound = 1.0 / std::sqrt(static_cast<double>(d));
  AlignmentParams p;
  p.config = cfg;
  p.m_eeg = uniform_param({M, d}, 1.0, rng);
  p.m_image = uniform_param({M, d}, 1.0, rng);
  p.m_cross = uniform_param({M, d}, 1.0, rng);
  p.w_q = uniform_param({d, d}, bound, rng);
  p.w_k = uniform_param({d, d}, bound, rng);
  p.w_v = uniform_param({d, d}, bound, rng);
  p.context_w = uniform_param({d, d}, bound, rng);
  p.fuse1_w = uniform_param({d, d}, bound, rng);
  p.fuse1_b = Var::parameter(Tensor({d}, 0.0));
  p.fuse2_w = uniform_param({d, d}, bound, rng);
  p.fuse2_b = Var::parameter(Tensor({d}, 0.0));
  return p;
}

std::vector<std::pair<std::string, Var>> AlignmentParams::named() const {
  return {{"eitra.m_eeg", m_eeg},         {"eitra.m_image", m_image}, {"eitra.m_cross", m_cross},
          {"eitra.w_q", w_q},             {"eitra.w_k", w_k},         {"eitra.w_v", w_v},
          {"eitra.context_w", context_w}, {"eitra.fuse1_w", fuse1_w}, {"eitra.fuse1_b", fuse1_b},
          {"eitra.fuse2_w", fuse2_w},     {"eitra.fuse2_b", fuse2_b}};
}

SemanticAttention semantic_guided_attention(const AlignmentParams& params, const Var& text_prototypes) {
  const std::size_t d = params.config.dim;
  if (text_prototypes.value().rank() != 2 || text_prototypes.shape()[1] != d || text_prototypes.shape()[0] == 0)
    throw ShapeError("semantic_guided_attention: prototypes " + shape_str(text_prototypes.shape()) +
                     " vs d=" + std::to_string(d));
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  Var keys = as_group(ad::matmul(text_prototypes, params.w_k));
  Var values = as_group(ad::matmul(text_prototypes, params.w_v));
  Var q_eeg = as_group(ad::matmul(params.m_eeg, params.w_q));
  Var q_image = as_group(ad::matmul(params.m_image, params.w_q));

  SemanticAttention out;
  out.eeg = as_matrix(ad::attention(q_eeg, keys, values, scale, &out.eeg_weights));
  out.image = as_matrix(ad::attention(q_image, keys, values, scale, &out.image_weights));
  const std::size_t M = params.config.rows, N = text_prototypes.shape()[0];
  out.eeg_weights.shape = {M, N};
  out.image_weights.shape = {M, N};
  return out;
}

Var cross_modal_align(const AlignmentParams& params, const Var& eeg_features, const Var& image_features,
                      const Var& eeg_embeddings, Tensor* context_weights) {
  const std::size_t M = params.config.rows, d = params.config.dim;
  if (eeg_features.shape() != Shape{M, d} || image_features.shape() != Shape{M, d})
    throw ShapeError("cross_modal_align: enriched features must be [" + std::to_string(M) + "x" + std::to_string(d) + "]");
  if (eeg_embeddings.value().rank() != 2 || eeg_embeddings.shape()[1] != d)
    throw ShapeError("cross_modal_align: embeddings " + shape_str(eeg_embeddings.shape()) + " vs d=" + std::to_string(d));
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));

  Var stacked = ad::concat_rows(eeg_features, image_features);  // [2M, d]
  Var keys = as_group(ad::matmul(stacked, params.w_k));
  Var values = as_group(ad::matmul(stacked, params.w_v));
  Var query = as_group(ad::matmul(params.m_cross, params.w_q));
  Tensor weights;
  Var context = as_matrix(ad::attention(query, keys, values, scale, context_weights ? &weights : nullptr));
  if (context_weights) {
    weights.shape = {M, 2 * M};
    *context_weights = std::move(weights);
  }

  Var pooled = ad::linear(ad::mean_axis(context, 0), params.context_w);  // [d]
  Var h = ad::add_row(eeg_embeddings, pooled);
  Var residual = ad::linear(ad::gelu(ad::linear(h, params.fuse1_w, params.fuse1_b)), params.fuse2_w, params.fuse2_b);
  return ad::l2_normalize_last(ad::add(h, residual));
}

Var align_embeddings(const AlignmentParams& params, const Var& eeg_embeddings, const Var& text_prototypes) {
  SemanticAttention a = semantic_guided_attention(params, text_prototypes);
  return cross_modal_align(params, a.eeg, a.image, eeg_embeddings);
}

}  // namespace nmcrl

#pragma once

// Text-anchored alignment head: learnable interaction matrices query the
// batch's text prototypes (semantic-guided attention), a cross-modal matrix
// attends over the enriched EEG/image features, and the pooled context is
// fused residually into each EEG embedding.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "nmcrl/autograd.hpp"

namespace nmcrl {

struct AlignmentConfig {
  std::size_t rows = 8;  // M
  std::size_t dim = 0;   // d, equal to the embedding width F
};

struct AlignmentParams {
  AlignmentConfig config;
  ad::Var m_eeg, m_image, m_cross;  // [M, d]
  ad::Var w_q, w_k, w_v;            // [d, d], shared by both attention stages
  ad::Var context_w;                // [d, d], projects the pooled context
  ad::Var fuse1_w, fuse1_b, fuse2_w, fuse2_b;

  static AlignmentParams init(const AlignmentConfig& config, std::uint64_t seed);
  std::vector<std::pair<std::string, ad::Var>> named() const;
};

struct SemanticAttention {
  ad::Var eeg;    // A_E [M, d]
  ad::Var image;  // A_I [M, d]
  Tensor eeg_weights;    // [M, N_c]
  Tensor image_weights;  // [M, N_c]
};

SemanticAttention semantic_guided_attention(const AlignmentParams& params, const ad::Var& text_prototypes);

// Returns unit-norm aligned embeddings [B, d]. `context_weights` receives the
// cross-modal attention [M, 2M] when given.
ad::Var cross_modal_align(const AlignmentParams& params, const ad::Var& eeg_features, const ad::Var& image_features,
                          const ad::Var& eeg_embeddings, Tensor* context_weights = nullptr);

ad::Var align_embeddings(const AlignmentParams& params, const ad::Var& eeg_embeddings, const ad::Var& text_prototypes);

}  // namespace nmcrl

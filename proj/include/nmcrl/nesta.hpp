#pragma once

// Spectral-temporal EEG encoder: per-subject channel mixing, a channel-token
// attention block, band-attentive spectral reweighting and a projection onto
// the unit hypersphere. Also hosts the flatten+MLP comparison encoder.

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "nmcrl/autograd.hpp"
#include "nmcrl/data_model.hpp"

namespace nmcrl {

struct BandEdge {
  std::string name;
  double low_hz = 0.0;
  double high_hz = 0.0;
};

// delta [0.5,4), theta [4,8), alpha [8,13), beta [13,30), gamma [30,100) Hz.
std::vector<BandEdge> default_band_edges();

// Binary masks over the one-sided bins k = 0..L/2 (bin frequency k*fs/L).
// A band whose upper edge reaches Nyquist is clipped there and keeps the
// Nyquist bin; a lower edge at or above Nyquist is rejected.
struct BandLayout {
  std::vector<BandEdge> bands;
  std::size_t length = 0;
  double sampling_rate_hz = 0.0;
  Tensor masks;  // [n_bands, L/2 + 1]

  std::size_t n_bands() const { return bands.size(); }
  std::size_t n_bins() const { return length / 2 + 1; }
  double bin_frequency(std::size_t k) const { return static_cast<double>(k) * sampling_rate_hz / length; }

  static BandLayout make(std::size_t length, double sampling_rate_hz, std::vector<BandEdge> edges);
};

// Orthonormal one-sided real DFT and its inverse as dense [in, out] matrices.
struct SpectralTransform {
  std::size_t length = 0;
  Tensor forward_real;  // [L, L/2+1]
  Tensor forward_imag;
  Tensor inverse_real;  // [L/2+1, L]
  Tensor inverse_imag;

  static SpectralTransform make(std::size_t length);
};

struct BandSpectra {
  ad::Var real;  // [B, C, L/2+1]
  ad::Var imag;
  const BandLayout* layout = nullptr;
};

struct NestaConfig {
  std::size_t channels = 0;
  std::size_t length = 0;
  std::size_t n_subjects = 1;
  std::size_t embed_dim = 0;
  double sampling_rate_hz = 250.0;
  std::size_t layers = 1;
  std::size_t heads = 4;
  std::size_t ffn_expansion = 2;
  double dropout = 0.25;
  std::vector<BandEdge> band_edges = default_band_edges();
  bool subject_specific = true;
  bool neural_spectral = true;

  std::size_t head_dim() const { return std::max<std::size_t>(1, length / heads); }
};

struct TransformerLayerParams {
  ad::Var norm1_gain, norm1_bias;
  ad::Var wq, bq, wk, bk, wv, bv, wo, bo;
  ad::Var norm2_gain, norm2_bias;
  ad::Var ffn1_w, ffn1_b, ffn2_w, ffn2_b;
};

struct NestaParams {
  NestaConfig config;
  ad::Var subject_matrices;  // [S, C, C]
  std::vector<TransformerLayerParams> layers;
  ad::Var channel_w, channel_b;    // [C, C], [C]
  ad::Var spectral_w, spectral_b;  // [nb, nb], [nb]
  ad::Var alpha;                   // [1]
  ad::Var spectral_norm_gain, spectral_norm_bias;  // [L]
  ad::Var proj_norm_gain, proj_norm_bias;          // [C*L]
  ad::Var proj_w, proj_b;                          // [C*L, F], [F]
  BandLayout bands;
  SpectralTransform dft;

  static NestaParams init(const NestaConfig& config, std::uint64_t seed);

  // Stable tensor names used by checkpoints.
  std::vector<std::pair<std::string, ad::Var>> named() const;
  void clamp_alpha();
};

struct ForwardMode {
  bool training = false;
  std::mt19937_64* rng = nullptr;  // dropout stream, required when training
};

ad::Var subject_transform(const ad::Var& eeg, std::span<const int> subject_ids, const NestaParams& params);

// Pre-norm block over C channel tokens of width L. When `attention_trace` is
// given, each layer's attention weights [B*H, C, C] are appended.
ad::Var temporal_attention_block(const ad::Var& x, const NestaParams& params, ForwardMode mode,
                                 std::vector<Tensor>* attention_trace = nullptr);

BandSpectra band_decompose(const ad::Var& x, const BandLayout& layout, const SpectralTransform& dft);
ad::Var band_power(const BandSpectra& spectra);  // [B, C, nb]
ad::Var channel_attention(const ad::Var& power, const ad::Var& w, const ad::Var& b);   // [B, C, 1]
ad::Var spectral_attention(const ad::Var& power, const ad::Var& w, const ad::Var& b);  // [B, nb]

// alpha * LayerNorm(IDFT(sum_b Gamma_b * w_c * w_{s,b})) + (1 - alpha) * residual
ad::Var spectral_recompose(const BandSpectra& spectra, const ad::Var& channel_weights, const ad::Var& band_weights,
                           const ad::Var& residual, const ad::Var& alpha, const ad::Var& norm_gain,
                           const ad::Var& norm_bias, const SpectralTransform& dft);

// Full spectral adaptation block on x[B, C, L].
ad::Var neural_spectral_block(const ad::Var& x, const NestaParams& params);

ad::Var project_embedding(const ad::Var& x, const NestaParams& params);  // [B, F], unit rows

ad::Var encode(const ad::Var& eeg, std::span<const int> subject_ids, const NestaParams& params, ForwardMode mode);
ad::Var encode(const EEGBatch& batch, const NestaParams& params, ForwardMode mode);

struct MlpConfig {
  std::size_t channels = 0;
  std::size_t length = 0;
  std::size_t hidden = 128;
  std::size_t embed_dim = 0;
  double dropout = 0.25;
};

struct MlpParams {
  MlpConfig config;
  ad::Var w1, b1, w2, b2;

  static MlpParams init(const MlpConfig& config, std::uint64_t seed);
  std::vector<std::pair<std::string, ad::Var>> named() const;
};

ad::Var mlp_baseline_encode(const ad::Var& eeg, const MlpParams& params, ForwardMode mode);
ad::Var mlp_baseline_encode(const EEGBatch& batch, const MlpParams& params, ForwardMode mode);

}  // namespace nmcrl

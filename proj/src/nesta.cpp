#include "nmcrl/nesta.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "nmcrl/errors.hpp"
#include "nmcrl/seeding.hpp"

namespace nmcrl {

using ad::Var;

std::vector<BandEdge> default_band_edges() {
  return {{"delta", 0.5, 4.0}, {"theta", 4.0, 8.0}, {"alpha", 8.0, 13.0}, {"beta", 13.0, 30.0}, {"gamma", 30.0, 100.0}};
}

BandLayout BandLayout::make(std::size_t length, double sampling_rate_hz, std::vector<BandEdge> edges) {
  if (length < 2) throw ShapeError("band layout needs L >= 2");
  if (!(sampling_rate_hz > 0.0)) throw ConfigError("sampling rate must be positive");
  if (edges.empty()) throw ConfigError("at least one band is required");
  const double nyquist = sampling_rate_hz / 2.0;
  for (std::size_t i = 0; i < edges.size(); ++i) {
    const auto& e = edges[i];
    if (!(e.low_hz < e.high_hz)) throw ConfigError("band '" + e.name + "': edges must be strictly increasing");
    if (e.low_hz < 0.0) throw ConfigError("band '" + e.name + "': negative edge");
    if (e.low_hz >= nyquist)
      throw ConfigError("band '" + e.name + "': lower edge " + std::to_string(e.low_hz) + " Hz is at or above Nyquist " +
                        std::to_string(nyquist) + " Hz");
    if (i > 0 && e.low_hz < edges[i - 1].high_hz) throw ConfigError("band '" + e.name + "' overlaps its predecessor");
  }

  BandLayout out;
  out.length = length;
  out.sampling_rate_hz = sampling_rate_hz;
  out.bands = std::move(edges);
  const std::size_t bins = length / 2 + 1;
  out.masks = Tensor({out.bands.size(), bins});
  for (std::size_t b = 0; b < out.bands.size(); ++b) {
    const auto& e = out.bands[b];
    for (std::size_t k = 0; k < bins; ++k) {
      const double f = out.bin_frequency(k);
      const bool below_high = e.high_hz >= nyquist ? f <= nyquist : f < e.high_hz;
      if (f >= e.low_hz && below_high) out.masks[b * bins + k] = 1.0;
    }
  }
  return out;
}

SpectralTransform SpectralTransform::make(std::size_t length) {
  SpectralTransform t;
  t.length = length;
  const std::size_t bins = length / 2 + 1;
  t.forward_real = Tensor({length, bins});
  t.forward_imag = Tensor({length, bins});
  t.inverse_real = Tensor({bins, length});
  t.inverse_imag = Tensor({bins, length});
  const double norm = 1.0 / std::sqrt(static_cast<double>(length));
  for (std::size_t k = 0; k < bins; ++k) {
    // Interior bins stand for their conjugate twins in the inverse.
    const bool self_conjugate = k == 0 || (length % 2 == 0 && k == length / 2);
    const double weight = self_conjugate ? 1.0 : 2.0;
    for (std::size_t n = 0; n < length; ++n) {
      const auto phase = static_cast<double>((k * n) % length);
      const double angle = 2.0 * std::numbers::pi * phase / static_cast<double>(length);
      const double c = std::cos(angle), s = std::sin(angle);
      t.forward_real[n * bins + k] = c * norm;
      t.forward_imag[n * bins + k] = -s * norm;
      t.inverse_real[k * length + n] = weight * c * norm;
      t.inverse_imag[k * length + n] = -weight * s * norm;
    }
  }
  return t;
}

// --- parameters ---------------------------------------------------------------

namespace {

Tensor uniform(Shape shape, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor t(std::move(shape));
  for (auto& v : t.data) v = dist(rng);
  return t;
}

Var fan_in_weight(std::size_t in, std::size_t out, std::mt19937_64& rng) {
  return Var::parameter(uniform({in, out}, 1.0 / std::sqrt(static_cast<double>(in)), rng));
}

Var zeros(Shape shape) { return Var::parameter(Tensor(std::move(shape), 0.0)); }
Var ones(Shape shape) { return Var::parameter(Tensor(std::move(shape), 1.0)); }

void expect_shape(const Var& x, const Shape& shape, const char* what) {
  if (x.shape() != shape)
    throw ShapeError(std::string(what) + ": expected " + shape_str(shape) + ", got " + shape_str(x.shape()));
}

}  // namespace

NestaParams NestaParams::init(const NestaConfig& cfg, std::uint64_t seed) {
  if (cfg.channels == 0 || cfg.length < 2 || cfg.embed_dim == 0 || cfg.n_subjects == 0 || cfg.heads == 0)
    throw ConfigError("encoder config needs positive C, L >= 2, F, subjects and heads");
  if (cfg.dropout < 0.0 || cfg.dropout >= 1.0) throw ConfigError("dropout must lie in [0, 1)");
  std::mt19937_64 rng(derive_seed(seed, "nesta/init"));
  const std::size_t C = cfg.channels, L = cfg.length, F = cfg.embed_dim;
  const std::size_t inner = cfg.heads * cfg.head_dim(), hidden = cfg.ffn_expansion * L;

  NestaParams p;
  p.config = cfg;
  Tensor eye({cfg.n_subjects, C, C});
  for (std::size_t s = 0; s < cfg.n_subjects; ++s)
    for (std::size_t i = 0; i < C; ++i) eye[(s * C + i) * C + i] = 1.0;
  p.subject_matrices = Var::parameter(std::move(eye));

  for (std::size_t l = 0; l < cfg.layers; ++l) {
    TransformerLayerParams t;
    t.norm1_gain = ones({L});
    t.norm1_bias = zeros({L});
    t.wq = fan_in_weight(L, inner, rng);
    t.bq = zeros({inner});
    t.wk = fan_in_weight(L, inner, rng);
    t.bk = zeros({inner});
    t.wv = fan_in_weight(L, inner, rng);
    t.bv = zeros({inner});
    t.wo = fan_in_weight(inner, L, rng);
    t.bo = zeros({L});
    t.norm2_gain = ones({L});
    t.norm2_bias = zeros({L});
    t.ffn1_w = fan_in_weight(L, hidden, rng);
    t.ffn1_b = zeros({hidden});
    t.ffn2_w = fan_in_weight(hidden, L, rng);
    t.ffn2_b = zeros({L});
    p.layers.push_back(std::move(t));
  }

  p.bands = BandLayout::make(L, cfg.sampling_rate_hz, cfg.band_edges);
  p.dft = SpectralTransform::make(L);
  const std::size_t nb = p.bands.n_bands();
  // Band powers are unnormalised; small attention weights start near sigmoid(0), softmax(0).
  p.channel_w = Var::parameter(uniform({C, C}, 1e-3, rng));
  p.channel_b = zeros({C});
  p.spectral_w = Var::parameter(uniform({nb, nb}, 1e-3, rng));
  p.spectral_b = zeros({nb});
  p.alpha = Var::parameter(Tensor({1}, 0.5));
  p.spectral_norm_gain = ones({L});
  p.spectral_norm_bias = zeros({L});
  p.proj_norm_gain = ones({C * L});
  p.proj_norm_bias = zeros({C * L});
  p.proj_w = fan_in_weight(C * L, F, rng);
  p.proj_b = zeros({F});
  return p;
}

std::vector<std::pair<std::string, Var>> NestaParams::named() const {
  std::vector<std::pair<std::string, Var>> out{{"nesta.subject_matrices", subject_matrices}};
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& t = layers[l];
    const std::string pre = "nesta.block" + std::to_string(l) + ".";
    for (const auto& [name, v] :
         {std::pair{"norm1_gain", t.norm1_gain}, {"norm1_bias", t.norm1_bias}, {"wq", t.wq}, {"bq", t.bq},
          {"wk", t.wk}, {"bk", t.bk}, {"wv", t.wv}, {"bv", t.bv}, {"wo", t.wo}, {"bo", t.bo},
          {"norm2_gain", t.norm2_gain}, {"norm2_bias", t.norm2_bias}, {"ffn1_w", t.ffn1_w}, {"ffn1_b", t.ffn1_b},
          {"ffn2_w", t.ffn2_w}, {"ffn2_b", t.ffn2_b}})
      out.emplace_back(pre + name, v);
  }
  out.insert(out.end(), {{"nesta.channel_w", channel_w},
                         {"nesta.channel_b", channel_b},
                         {"nesta.spectral_w", spectral_w},
                         {"nesta.spectral_b", spectral_b},
                         {"nesta.alpha", alpha},
                         {"nesta.spectral_norm_gain", spectral_norm_gain},
                         {"nesta.spectral_norm_bias", spectral_norm_bias},
                         {"nesta.proj_norm_gain", proj_norm_gain},
                         {"nesta.proj_norm_bias", proj_norm_bias},
                         {"nesta.proj_w", proj_w},
                         {"nesta.proj_b", proj_b}});
  return out;
}

void NestaParams::clamp_alpha() {
  auto& a = alpha.mutable_value()[0];
  a = std::clamp(a, 0.0, 1.0);
}

// --- forward ----------------------------------------------------------------------

Var subject_transform(const Var& eeg, std::span<const int> subject_ids, const NestaParams& params) {
  const auto& c = params.config;
  if (eeg.value().rank() != 3 || eeg.shape()[1] != c.channels || eeg.shape()[2] != c.length)
    throw ShapeError("subject_transform: input " + shape_str(eeg.shape()) + " vs C=" + std::to_string(c.channels) +
                     ", L=" + std::to_string(c.length));
  return ad::subject_mix(eeg, params.subject_matrices, subject_ids);
}

Var temporal_attention_block(const Var& x, const NestaParams& params, ForwardMode mode,
                             std::vector<Tensor>* attention_trace) {
  const auto& c = params.config;
  if (x.value().rank() != 3 || x.shape()[1] != c.channels || x.shape()[2] != c.length)
    throw ShapeError("temporal_attention_block: input " + shape_str(x.shape()) + " vs C=" +
                     std::to_string(c.channels) + ", L=" + std::to_string(c.length));
  const double p = mode.training ? c.dropout : 0.0;
  if (p > 0.0 && !mode.rng) throw std::invalid_argument("training mode needs a dropout rng");
  auto drop = [&](const Var& v) { return p > 0.0 ? ad::dropout(v, p, *mode.rng) : v; };
  const double scale = 1.0 / std::sqrt(static_cast<double>(c.head_dim()));

  Var h = x;
  for (const auto& layer : params.layers) {
    Var n1 = ad::layer_norm_last(h, layer.norm1_gain, layer.norm1_bias);
    Var q = ad::split_heads(ad::linear(n1, layer.wq, layer.bq), c.heads);
    Var k = ad::split_heads(ad::linear(n1, layer.wk, layer.bk), c.heads);
    Var v = ad::split_heads(ad::linear(n1, layer.wv, layer.bv), c.heads);
    Tensor weights;
    Var attended = ad::merge_heads(ad::attention(q, k, v, scale, attention_trace ? &weights : nullptr), c.heads);
    if (attention_trace) attention_trace->push_back(std::move(weights));
    h = ad::add(h, drop(ad::linear(attended, layer.wo, layer.bo)));

    // Kernel-size-1 convolutions over each channel token.
    Var n2 = ad::layer_norm_last(h, layer.norm2_gain, layer.norm2_bias);
    Var ff = drop(ad::gelu(ad::linear(n2, layer.ffn1_w, layer.ffn1_b)));
    h = ad::add(h, drop(ad::linear(ff, layer.ffn2_w, layer.ffn2_b)));
  }
  return h;
}

BandSpectra band_decompose(const Var& x, const BandLayout& layout, const SpectralTransform& dft) {
  if (x.value().rank() != 3 || x.shape()[2] != layout.length || dft.length != layout.length)
    throw ShapeError("band_decompose: input " + shape_str(x.shape()) + " vs L=" + std::to_string(layout.length));
  BandSpectra s;
  s.real = ad::linear(x, Var::constant(dft.forward_real));
  s.imag = ad::linear(x, Var::constant(dft.forward_imag));
  s.layout = &layout;
  return s;
}

Var band_power(const BandSpectra& spectra) {
  const auto& layout = *spectra.layout;
  if (spectra.real.shape() != spectra.imag.shape() || spectra.real.shape().back() != layout.n_bins())
    throw ShapeError("band_power: spectrum shape " + shape_str(spectra.real.shape()));
  Tensor masks_t({layout.n_bins(), layout.n_bands()});
  for (std::size_t b = 0; b < layout.n_bands(); ++b)
    for (std::size_t k = 0; k < layout.n_bins(); ++k) masks_t[k * layout.n_bands() + b] = layout.masks[b * layout.n_bins() + k];
  Var power = ad::add(ad::square(spectra.real), ad::square(spectra.imag));
  return ad::linear(power, Var::constant(std::move(masks_t)));
}

Var channel_attention(const Var& power, const Var& w, const Var& b) {
  if (power.value().rank() != 3) throw ShapeError("channel_attention: power must be [B, C, nb]");
  const std::size_t B = power.shape()[0], C = power.shape()[1];
  expect_shape(w, {C, C}, "channel_attention weight");
  expect_shape(b, {C}, "channel_attention bias");
  Var per_channel = ad::mean_axis(power, 2);  // [B, C]
  return ad::reshape(ad::sigmoid(ad::linear(per_channel, w, b)), {B, C, 1});
}

Var spectral_attention(const Var& power, const Var& w, const Var& b) {
  if (power.value().rank() != 3) throw ShapeError("spectral_attention: power must be [B, C, nb]");
  const std::size_t nb = power.shape()[2];
  expect_shape(w, {nb, nb}, "spectral_attention weight");
  expect_shape(b, {nb}, "spectral_attention bias");
  Var per_band = ad::mean_axis(power, 1);  // [B, nb]
  return ad::softmax_last(ad::linear(per_band, w, b));
}

Var spectral_recompose(const BandSpectra& spectra, const Var& channel_weights, const Var& band_weights,
                       const Var& residual, const Var& alpha, const Var& norm_gain, const Var& norm_bias,
                       const SpectralTransform& dft) {
  const auto& layout = *spectra.layout;
  if (alpha.value().size() != 1) throw ShapeError("spectral_recompose: alpha must be a scalar");
  const double a = alpha.value()[0];
  if (!(a >= 0.0 && a <= 1.0)) throw std::domain_error("spectral_recompose: alpha " + std::to_string(a) + " outside [0, 1]");
  const Shape& s = spectra.real.shape();
  const std::size_t B = s[0], C = s[1];
  expect_shape(residual, {B, C, layout.length}, "spectral_recompose residual");
  expect_shape(band_weights, {B, layout.n_bands()}, "spectral_recompose band weights");
  if (channel_weights.value().size() != B * C) throw ShapeError("spectral_recompose: channel weights must be [B, C, 1]");

  Var w_c = ad::reshape(channel_weights, {B, C});
  // sum_b mask_b(f) * w_{s,b}: per-sample gain on every bin.
  Var bin_gain = ad::linear(band_weights, Var::constant(layout.masks));  // [B, bins]
  Var re = ad::scale_columns(ad::scale_channels(spectra.real, w_c), bin_gain);
  Var im = ad::scale_columns(ad::scale_channels(spectra.imag, w_c), bin_gain);
  Var signal = ad::add(ad::linear(re, Var::constant(dft.inverse_real)), ad::linear(im, Var::constant(dft.inverse_imag)));
  return ad::lerp(alpha, ad::layer_norm_last(signal, norm_gain, norm_bias), residual);
}

Var neural_spectral_block(const Var& x, const NestaParams& params) {
  BandSpectra spectra = band_decompose(x, params.bands, params.dft);
  Var power = band_power(spectra);
  Var w_c = channel_attention(power, params.channel_w, params.channel_b);
  Var w_s = spectral_attention(power, params.spectral_w, params.spectral_b);
  return spectral_recompose(spectra, w_c, w_s, x, params.alpha, params.spectral_norm_gain, params.spectral_norm_bias,
                            params.dft);
}

Var project_embedding(const Var& x, const NestaParams& params) {
  const auto& c = params.config;
  if (x.value().rank() != 3 || x.shape()[1] != c.channels || x.shape()[2] != c.length)
    throw ShapeError("project_embedding: input " + shape_str(x.shape()));
  const std::size_t B = x.shape()[0];
  Var flat = ad::reshape(x, {B, c.channels * c.length});
  Var normed = ad::layer_norm_last(flat, params.proj_norm_gain, params.proj_norm_bias);
  return ad::l2_normalize_last(ad::linear(normed, params.proj_w, params.proj_b));
}

Var encode(const Var& eeg, std::span<const int> subject_ids, const NestaParams& params, ForwardMode mode) {
  Var x = eeg;
  if (params.config.subject_specific) {
    x = subject_transform(x, subject_ids, params);
  } else if (eeg.value().rank() != 3 || eeg.shape()[1] != params.config.channels ||
             eeg.shape()[2] != params.config.length) {
    throw ShapeError("encode: input " + shape_str(eeg.shape()));
  }
  x = temporal_attention_block(x, params, mode);
  if (params.config.neural_spectral) x = neural_spectral_block(x, params);
  return project_embedding(x, params);
}

Var encode(const EEGBatch& batch, const NestaParams& params, ForwardMode mode) {
  return encode(Var::constant(batch.eeg), batch.subject_ids, params, mode);
}

// --- MLP baseline -------------------------------------------------------------------

MlpParams MlpParams::init(const MlpConfig& cfg, std::uint64_t seed) {
  if (cfg.channels == 0 || cfg.length == 0 || cfg.hidden == 0 || cfg.embed_dim == 0)
    throw ConfigError("mlp config needs positive C, L, hidden and F");
  std::mt19937_64 rng(derive_seed(seed, "mlp/init"));
  MlpParams p;
  p.config = cfg;
  p.w1 = fan_in_weight(cfg.channels * cfg.length, cfg.hidden, rng);
  p.b1 = zeros({cfg.hidden});
  p.w2 = fan_in_weight(cfg.hidden, cfg.embed_dim, rng);
  p.b2 = zeros({cfg.embed_dim});
  return p;
}

std::vector<std::pair<std::string, Var>> MlpParams::named() const {
  return {{"mlp.w1", w1}, {"mlp.b1", b1}, {"mlp.w2", w2}, {"mlp.b2", b2}};
}

Var mlp_baseline_encode(const Var& eeg, const MlpParams& params, ForwardMode mode) {
  const auto& c = params.config;
  if (eeg.value().rank() != 3 || eeg.shape()[1] != c.channels || eeg.shape()[2] != c.length)
    throw ShapeError("mlp_baseline_encode: input " + shape_str(eeg.shape()));
  const double p = mode.training ? c.dropout : 0.0;
  if (p > 0.0 && !mode.rng) throw std::invalid_argument("training mode needs a dropout rng");
  Var flat = ad::reshape(eeg, {eeg.shape()[0], c.channels * c.length});
  Var h = ad::gelu(ad::linear(flat, params.w1, params.b1));
  if (p > 0.0) h = ad::dropout(h, p, *mode.rng);
  return ad::l2_normalize_last(ad::linear(h, params.w2, params.b2));
}

Var mlp_baseline_encode(const EEGBatch& batch, const MlpParams& params, ForwardMode mode) {
  return mlp_baseline_encode(Var::constant(batch.eeg), params, mode);
}

}  // namespace nmcrl

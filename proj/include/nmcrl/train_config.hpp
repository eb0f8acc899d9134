#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "nmcrl/nesta.hpp"

namespace nmcrl {

// true = component enabled. Each flag switched off reproduces one ablation row.
struct AblationFlags {
  bool subject_specific = true;
  bool neural_spectral = true;
  bool consistency = true;
  bool completion = true;
  bool alignment = true;

  bool operator==(const AblationFlags&) const = default;
};

enum class EncoderKind { nesta, mlp };

std::string to_string(EncoderKind kind);

struct TrainConfig {
  double learning_rate = 3e-4;
  std::size_t batch_size = 128;
  std::size_t epochs = 40;
  double temperature = 0.07;
  double eta = 0.5;
  double noise_sigma = 0.05;
  bool renormalize_noise = true;
  AblationFlags ablation;
  std::uint64_t seed = 0;
  std::size_t embed_dim = 0;  // 0: taken from the embedding tables
  EncoderKind encoder = EncoderKind::nesta;
  bool distinct_classes = true;
  bool symmetric_loss = false;
  std::size_t layers = 1;
  std::size_t heads = 4;
  std::size_t ffn_expansion = 2;
  double dropout = 0.25;
  std::vector<BandEdge> band_edges = default_band_edges();
  std::size_t alignment_rows = 8;
  std::size_t mlp_hidden = 128;
  std::size_t eval_n_way = 0;  // 0: every unseen class
  std::vector<std::size_t> eval_k = {1, 5};
  bool repetitions_averaged = false;

  // Throws ConfigError on constraint violations (tau <= 0, eta outside [0,1], ...).
  void validate() const;
};

nlohmann::json to_json(const TrainConfig& config);

// Strict: unknown keys and type mismatches throw ConfigError. Missing keys keep defaults.
TrainConfig train_config_from_json(const nlohmann::json& j);

bool operator==(const TrainConfig& a, const TrainConfig& b);

}  // namespace nmcrl

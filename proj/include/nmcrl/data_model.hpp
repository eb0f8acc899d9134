#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "nmcrl/autograd.hpp"

namespace nmcrl {

enum class Split { seen, unseen };

struct TrialInfo {
  int subject_id = 0;
  int class_id = 0;
  int exemplar_id = 0;
};

// Multichannel EEG trials, stored as float32 [n_trials, C, L] in manifest order.
struct Dataset {
  std::size_t channels = 0;
  std::size_t length = 0;
  double sampling_rate_hz = 0.0;
  std::vector<TrialInfo> trials;
  std::vector<float> eeg;
  std::set<int> seen_classes;
  std::set<int> unseen_classes;

  std::size_t trial_size() const { return channels * length; }
  std::span<const float> trial_eeg(std::size_t i) const { return {eeg.data() + i * trial_size(), trial_size()}; }
  int n_subjects() const;
  std::set<int> classes(Split split) const { return split == Split::seen ? seen_classes : unseen_classes; }
  std::vector<std::size_t> split_indices(Split split) const;

  // Throws DataError on any invariant violation (disjoint splits, contiguous
  // subject ids, tensor size, class membership).
  void validate() const;
};

enum class EmbeddingKind { image, text_raw, text_prototype };

std::string to_string(EmbeddingKind kind);
EmbeddingKind embedding_kind_from_string(const std::string& s);

// Fixed-dimension vectors keyed by (class_id, item_index).
struct EmbeddingTable {
  std::size_t dim = 0;
  EmbeddingKind kind = EmbeddingKind::image;
  bool normalized = true;
  std::map<std::pair<int, int>, std::vector<double>> entries;

  const std::vector<double>& at(int class_id, int item = 0) const;
  bool contains(int class_id) const;
  std::vector<int> class_ids() const;
  std::size_t items_for(int class_id) const;
  // Rows for the given classes (item 0 each), shape [n, dim].
  Tensor class_matrix(std::span<const int> class_ids) const;

  void validate() const;
};

struct SynthSpec {
  int n_classes = 138;
  int n_unseen_classes = 10;
  int n_subjects = 2;
  int trials_per_class_per_subject = 8;
  int exemplars_per_class = 1;
  int channels = 8;
  int length = 64;
  double sampling_rate_hz = 128.0;
  int embed_dim = 16;
  int text_per_class = 3;
  double class_separation = 8.0;
  bool orthogonal_prototypes = false;
  double subject_perturbation = 0.2;
  double noise_sigma = 0.5;
  double text_noise = 0.2;
  std::uint64_t seed = 0;

  void validate() const;
};

struct SyntheticBundle {
  Dataset dataset;
  EmbeddingTable image;
  EmbeddingTable text_raw;
  // Generative class latents [n_classes, embed_dim] driving the EEG amplitudes.
  Tensor class_latents;
};

SyntheticBundle generate_synthetic_dataset(const SynthSpec& spec);

// `path` is either the dataset directory or its manifest.json.
Dataset load_dataset(const std::filesystem::path& path);
void save_dataset(const Dataset& data, const std::filesystem::path& dir);

// `path` names the JSON header; raw float32 values live next to it with the
// same stem and a .f32 extension.
EmbeddingTable load_embedding_table(const std::filesystem::path& path,
                                    std::optional<std::size_t> expect_dim = std::nullopt);
void save_embedding_table(const EmbeddingTable& table, const std::filesystem::path& path);

struct EEGBatch {
  Tensor eeg;  // [B, C, L]
  std::vector<int> subject_ids;
  std::vector<int> class_ids;
  std::vector<int> exemplar_ids;
  std::vector<std::size_t> trial_indices;

  std::size_t size() const { return subject_ids.size(); }
};

// One epoch of trial indices, grouped into batches. With distinct_classes the
// split is consumed in passes of at most one trial per class.
std::vector<std::vector<std::size_t>> plan_batches(const Dataset& data, std::size_t batch_size, std::uint64_t seed,
                                                   bool distinct_classes, Split split);

EEGBatch gather_batch(const Dataset& data, std::span<const std::size_t> trial_indices);

std::vector<EEGBatch> make_batches(const Dataset& data, std::size_t batch_size, std::uint64_t seed,
                                   bool distinct_classes, Split split);

}  // namespace nmcrl

#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "nmcrl/autograd.hpp"
#include "nmcrl/data_model.hpp"

namespace nmcrl {

struct EvalProtocol {
  std::size_t n_way = 0;  // 0: every candidate class
  std::vector<std::size_t> k_list = {1, 5};
  bool repetitions_averaged = false;
  std::uint64_t seed = 0;
};

struct EvalReport {
  std::size_t n_way = 0;
  std::vector<std::size_t> k_list;
  bool repetitions_averaged = false;
  std::size_t trials_evaluated = 0;
  std::map<std::size_t, double> metrics;  // k -> top-k accuracy
  std::map<int, double> per_class;        // class -> top-1 accuracy
  std::uint64_t seed = 0;

  double top(std::size_t k) const { return metrics.at(k); }
  nlohmann::json to_json() const;
};

// N-way zero-shot scoring of EEG embeddings [T, F] against the candidate
// classes' image embeddings. Distractors are drawn per trial without
// replacement; ties rank the lower class id first.
EvalReport zero_shot_classify(const Tensor& eeg_embeddings, std::span<const int> labels,
                              std::span<const int> exemplars, const EmbeddingTable& candidates,
                              std::span<const int> candidate_classes, const EvalProtocol& protocol);

// Same, with every class in `candidates` as a candidate.
EvalReport zero_shot_classify(const Tensor& eeg_embeddings, std::span<const int> labels,
                              std::span<const int> exemplars, const EmbeddingTable& candidates,
                              const EvalProtocol& protocol);

// Per-class mean of trial embeddings, renormalised.
EmbeddingTable class_mean_embeddings(const Tensor& embeddings, std::span<const int> labels);

struct SimilarityReport {
  Tensor matrix;  // [n, n] cosine(eeg class row, image class column)
  std::vector<int> class_order;
  std::map<int, std::string> category_map;

  void write_csv(const std::string& path) const;
  // 8-bit heatmap, blue (-1) to red (+1).
  void write_png(const std::string& path) const;
};

// Classes are ordered by category label, then class id. Classes missing from
// `category_map` fall into category "".
SimilarityReport similarity_matrix(const EmbeddingTable& eeg_class_embeddings, const EmbeddingTable& image_class_embeddings,
                                   const std::map<int, std::string>& category_map = {});

}  // namespace nmcrl

#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "nmcrl/training.hpp"

namespace nmcrl {

using ProgressFn = std::function<void(const std::string& run, const EpochRecord& record)>;

// "Full model" followed by the five single-component-off variants.
std::vector<std::pair<std::string, AblationFlags>> ablation_variants();

struct AblationRow {
  std::string name;
  AblationFlags flags;
  std::map<std::size_t, double> topk;
  std::vector<double> epoch_losses;
  std::vector<double> step_losses;
};

struct AblationReport {
  std::vector<AblationRow> rows;
  nlohmann::json metadata;  // seed, base config, dataset summary

  const AblationRow& row(const std::string& name) const;
  nlohmann::json to_json() const;
  // variant,top1,top5,... one line per row
  void write_csv(const std::filesystem::path& path) const;
};

// Every variant uses the base config's seed and the same data.
AblationReport run_ablation(const TrainConfig& base, const Dataset& data, const EmbeddingTable& image,
                            const EmbeddingTable& text_raw, const ProgressFn& progress = {});

struct EncoderRow {
  EncoderKind encoder = EncoderKind::nesta;
  // (n_way, k) -> top-k accuracy, before and after training.
  std::map<std::pair<std::size_t, std::size_t>, double> untrained;
  std::map<std::pair<std::size_t, std::size_t>, double> trained;
  std::map<std::size_t, std::size_t> trials_evaluated;  // n_way -> queries scored
};

struct EncoderComparison {
  std::vector<std::size_t> n_ways;  // resolved; 0 requests are replaced by the unseen class count
  std::vector<std::size_t> k_list;
  std::vector<EncoderRow> rows;
  nlohmann::json metadata;

  nlohmann::json to_json() const;
  // encoder,stage,n_way,k,accuracy
  void write_csv(const std::filesystem::path& path) const;
};

// n_ways entries of 0 mean every unseen class.
EncoderComparison compare_encoders(const TrainConfig& base, const std::vector<EncoderKind>& encoders,
                                   const Dataset& data, const EmbeddingTable& image, const EmbeddingTable& text_raw,
                                   std::vector<std::size_t> n_ways = {5, 10, 0}, std::vector<std::size_t> k_list = {1, 5},
                                   const ProgressFn& progress = {});

}  // namespace nmcrl

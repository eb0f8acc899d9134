#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "nmcrl/data_model.hpp"
#include "nmcrl/eitra.hpp"
#include "nmcrl/evaluation.hpp"
#include "nmcrl/nesta.hpp"
#include "nmcrl/train_config.hpp"

namespace nmcrl {

// --- objective -------------------------------------------------------------------

// -(1/B) sum_i log softmax_j(z1_i . z2_j / tau)[i]. Rows must be unit norm (1e-3).
double info_nce(const Tensor& z1, const Tensor& z2, double tau);
ad::Var info_nce(const ad::Var& z1, const ad::Var& z2, double tau);

// eta * L(z, image) + (1 - eta) * L(z, text). `symmetric` averages both
// directions of each term.
double total_loss(const Tensor& eeg, const Tensor& image, const Tensor& text, double eta, double tau,
                  bool symmetric = false);
ad::Var total_loss(const ad::Var& eeg, const ad::Var& image, const ad::Var& text, double eta, double tau,
                   bool symmetric = false);

// --- optimiser ---------------------------------------------------------------------

class Adam {
 public:
  Adam(std::vector<ad::Var> params, double learning_rate, double beta1 = 0.9, double beta2 = 0.999,
       double eps = 1e-8);

  void step();
  void zero_grad();
  std::size_t steps() const { return t_; }

 private:
  std::vector<ad::Var> params_;
  std::vector<Tensor> m_, v_;
  double lr_, beta1_, beta2_, eps_;
  std::size_t t_ = 0;
};

// --- model -------------------------------------------------------------------------

struct ModelShape {
  std::size_t channels = 0;
  std::size_t length = 0;
  double sampling_rate_hz = 0.0;
  std::size_t n_subjects = 1;
  std::size_t embed_dim = 0;
};

class Model {
 public:
  static Model create(const TrainConfig& config, const ModelShape& shape);

  const TrainConfig& config() const { return config_; }
  const ModelShape& shape() const { return shape_; }

  ad::Var encode(const EEGBatch& batch, ForwardMode mode) const;
  // Encoder output, then alignment against `text_anchors` [N, F] when enabled.
  ad::Var embed(const EEGBatch& batch, const ad::Var& text_anchors, ForwardMode mode) const;
  bool uses_alignment() const { return config_.ablation.alignment; }

  // Every tensor, including ones an ablation leaves unused.
  std::vector<std::pair<std::string, ad::Var>> named() const;
  // Tensors the optimiser updates under the current ablation flags.
  std::vector<ad::Var> trainable() const;

  // Alignment anchors used at evaluation time (seen-class text prototypes).
  const Tensor& eval_anchors() const { return anchors_; }
  void set_eval_anchors(Tensor anchors) { anchors_ = std::move(anchors); }

  void after_step();

  NestaParams* nesta() { return nesta_ ? &*nesta_ : nullptr; }
  const NestaParams* nesta() const { return nesta_ ? &*nesta_ : nullptr; }
  const AlignmentParams& alignment() const { return alignment_; }

 private:
  TrainConfig config_;
  ModelShape shape_;
  std::optional<NestaParams> nesta_;
  std::optional<MlpParams> mlp_;
  AlignmentParams alignment_;
  Tensor anchors_;
};

// Model for `data` whose evaluation anchors are the seen-class text prototypes.
Model build_model(const TrainConfig& config, const Dataset& data, const EmbeddingTable& image,
                  const EmbeddingTable& text_raw);

// Evaluation-mode embeddings [T, F] for the given trials.
Tensor embed_trials(const Model& model, const Dataset& data, std::span<const std::size_t> trial_indices,
                    std::size_t batch_size = 256);

EvalReport evaluate_unseen(const Model& model, const Dataset& data, const EmbeddingTable& image,
                           const EvalProtocol& protocol);

// --- checkpoints ---------------------------------------------------------------------

// Binary layout: 8-byte magic "NMCRLCK1", little-endian u64 metadata length,
// UTF-8 JSON metadata (with a "tensors" index of name/shape/offset/count), then
// the float32 payload. Offsets are bytes from the payload start.
struct Checkpoint {
  nlohmann::json metadata;
  std::vector<std::pair<std::string, Tensor>> tensors;  // values rounded to float32

  const Tensor& tensor(const std::string& name) const;
};

Checkpoint snapshot(const Model& model, std::size_t epoch, const nlohmann::json& metrics = nlohmann::json::object());
Model restore_model(const Checkpoint& checkpoint);
void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// --- training -------------------------------------------------------------------------

struct EpochRecord {
  std::size_t epoch = 0;
  double loss = 0.0;
  std::map<std::size_t, double> topk;

  nlohmann::json to_json() const;
};

struct TrainOptions {
  std::optional<std::filesystem::path> out_dir;  // checkpoints + metrics.jsonl
  bool evaluate_each_epoch = true;
  std::function<void(const EpochRecord&)> on_epoch;
};

struct TrainResult {
  Checkpoint checkpoint;  // final epoch
  std::vector<EpochRecord> history;
  std::vector<double> step_losses;
};

TrainResult train(const TrainConfig& config, const Dataset& data, const EmbeddingTable& image,
                  const EmbeddingTable& text_raw, const TrainOptions& options = {});

// --- gradient checks --------------------------------------------------------------------

struct GradCheckGroup {
  std::string name;
  std::size_t elements = 0;
  double max_rel_error = 0.0;
};

struct GradCheckReport {
  std::string component;
  std::vector<GradCheckGroup> groups;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  bool passed = false;

  nlohmann::json to_json() const;
};

struct GradCheckOptions {
  std::uint64_t seed = 0;
  double step = 1e-3;
  std::optional<double> tolerance;  // default: the component's registered tolerance
};

std::vector<std::string> registered_gradient_checks();
double default_gradient_tolerance(const std::string& component);

// Analytic gradients of sum(output * R) (R fixed random) against central
// differences, per parameter group. Relative error of a group is
// ||analytic - numeric||_2 / max(||analytic||_2, ||numeric||_2, 1e-6);
// the floor keeps gradients that vanish identically (e.g. the attention key
// bias) from turning finite-difference round-off into a relative error.
GradCheckReport gradient_check(const std::string& component, const GradCheckOptions& options = {});

}  // namespace nmcrl

#include "nmcrl/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "nmcrl/errors.hpp"
#include "nmcrl/seeding.hpp"
#include "nmcrl/semantic.hpp"

namespace nmcrl {

namespace fs = std::filesystem;
using ad::Var;
using nlohmann::json;

// --- objective --------------------------------------------------------------------

namespace {

void check_unit_rows(const Tensor& z, const char* what) {
  if (z.rank() != 2) throw ShapeError(std::string(what) + " must be [B, F]");
  const std::size_t F = z.dim(1);
  for (std::size_t i = 0; i < z.dim(0); ++i) {
    double s = 0.0;
    for (double v : z.row(i, F)) s += v * v;
    if (std::abs(std::sqrt(s) - 1.0) > 1e-3)
      throw std::domain_error(std::string(what) + ": row " + std::to_string(i) + " has norm " +
                              std::to_string(std::sqrt(s)) + ", expected unit norm");
  }
}

}  // namespace

Var info_nce(const Var& z1, const Var& z2, double tau) {
  if (!(tau > 0.0)) throw std::domain_error("info_nce: temperature must be > 0");
  if (z1.shape() != z2.shape() || z1.value().rank() != 2 || z1.shape()[0] == 0)
    throw ShapeError("info_nce: " + shape_str(z1.shape()) + " vs " + shape_str(z2.shape()));
  check_unit_rows(z1.value(), "info_nce z1");
  check_unit_rows(z2.value(), "info_nce z2");
  std::vector<std::size_t> targets(z1.shape()[0]);
  for (std::size_t i = 0; i < targets.size(); ++i) targets[i] = i;
  return ad::cross_entropy(ad::scale(ad::matmul_nt(z1, z2), 1.0 / tau), targets);
}

double info_nce(const Tensor& z1, const Tensor& z2, double tau) {
  ad::NoGradGuard guard;
  return info_nce(Var::constant(z1), Var::constant(z2), tau).value()[0];
}

Var total_loss(const Var& eeg, const Var& image, const Var& text, double eta, double tau, bool symmetric) {
  if (!(eta >= 0.0 && eta <= 1.0)) throw std::domain_error("total_loss: eta must lie in [0, 1]");
  auto term = [&](const Var& target) {
    if (!symmetric) return info_nce(eeg, target, tau);
    return ad::scale(ad::add(info_nce(eeg, target, tau), info_nce(target, eeg, tau)), 0.5);
  };
  if (eta == 1.0) return term(image);
  if (eta == 0.0) return term(text);
  return ad::add(ad::scale(term(image), eta), ad::scale(term(text), 1.0 - eta));
}

double total_loss(const Tensor& eeg, const Tensor& image, const Tensor& text, double eta, double tau,
                  bool symmetric) {
  ad::NoGradGuard guard;
  return total_loss(Var::constant(eeg), Var::constant(image), Var::constant(text), eta, tau, symmetric).value()[0];
}

// --- Adam ---------------------------------------------------------------------------

Adam::Adam(std::vector<Var> params, double learning_rate, double beta1, double beta2, double eps)
    : params_(std::move(params)), lr_(learning_rate), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (const auto& p : params_) {
    m_.emplace_back(p.shape(), 0.0);
    v_.emplace_back(p.shape(), 0.0);
  }
}

void Adam::step() {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& value = params_[i].mutable_value().data;
    const auto& g = params_[i].grad().data;
    auto& m = m_[i].data;
    auto& v = v_[i].data;
    for (std::size_t j = 0; j < value.size(); ++j) {
      m[j] = beta1_ * m[j] + (1.0 - beta1_) * g[j];
      v[j] = beta2_ * v[j] + (1.0 - beta2_) * g[j] * g[j];
      value[j] -= lr_ * (m[j] / c1) / (std::sqrt(v[j] / c2) + eps_);
    }
  }
}

void Adam::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

// --- Model ----------------------------------------------------------------------------

Model Model::create(const TrainConfig& config, const ModelShape& shape) {
  config.validate();
  if (shape.embed_dim == 0) throw ConfigError("model needs a positive embedding width");
  Model m;
  m.config_ = config;
  m.shape_ = shape;
  const std::uint64_t seed = derive_seed(config.seed, "model");
  if (config.encoder == EncoderKind::nesta) {
    NestaConfig nc;
    nc.channels = shape.channels;
    nc.length = shape.length;
    nc.n_subjects = shape.n_subjects;
    nc.embed_dim = shape.embed_dim;
    nc.sampling_rate_hz = shape.sampling_rate_hz;
    nc.layers = config.layers;
    nc.heads = config.heads;
    nc.ffn_expansion = config.ffn_expansion;
    nc.dropout = config.dropout;
    nc.band_edges = config.band_edges;
    nc.subject_specific = config.ablation.subject_specific;
    nc.neural_spectral = config.ablation.neural_spectral;
    m.nesta_ = NestaParams::init(nc, seed);
    if (!config.ablation.neural_spectral) m.nesta_->alpha.mutable_value()[0] = 0.0;
  } else {
    MlpConfig mc;
    mc.channels = shape.channels;
    mc.length = shape.length;
    mc.hidden = config.mlp_hidden;
    mc.embed_dim = shape.embed_dim;
    mc.dropout = config.dropout;
    m.mlp_ = MlpParams::init(mc, seed);
  }
  m.alignment_ = AlignmentParams::init({config.alignment_rows, shape.embed_dim}, seed);
  return m;
}

Var Model::encode(const EEGBatch& batch, ForwardMode mode) const {
  return nesta_ ? nmcrl::encode(batch, *nesta_, mode) : mlp_baseline_encode(batch, *mlp_, mode);
}

Var Model::embed(const EEGBatch& batch, const Var& text_anchors, ForwardMode mode) const {
  Var z = encode(batch, mode);
  return uses_alignment() ? align_embeddings(alignment_, z, text_anchors) : z;
}

std::vector<std::pair<std::string, Var>> Model::named() const {
  std::vector<std::pair<std::string, Var>> out = nesta_ ? nesta_->named() : mlp_->named();
  for (auto& p : alignment_.named()) out.push_back(std::move(p));
  return out;
}

std::vector<Var> Model::trainable() const {
  std::vector<Var> out;
  for (const auto& [name, v] : named()) {
    if (name == "nesta.subject_matrices" && !config_.ablation.subject_specific) continue;
    if (!config_.ablation.neural_spectral &&
        (name == "nesta.alpha" || name.starts_with("nesta.channel_") || name.starts_with("nesta.spectral_")))
      continue;
    if (!config_.ablation.alignment && name.starts_with("eitra.")) continue;
    out.push_back(v);
  }
  return out;
}

void Model::after_step() {
  if (nesta_) nesta_->clamp_alpha();
}

Model build_model(const TrainConfig& config, const Dataset& data, const EmbeddingTable& image,
                  const EmbeddingTable& text_raw) {
  const std::size_t F = config.embed_dim ? config.embed_dim : image.dim;
  if (image.dim != F || text_raw.dim != F)
    throw DataError("embedding width mismatch: config " + std::to_string(F) + ", image " + std::to_string(image.dim) +
                    ", text " + std::to_string(text_raw.dim));
  ModelShape shape{data.channels, data.length, data.sampling_rate_hz,
                   static_cast<std::size_t>(std::max(1, data.n_subjects())), F};
  Model model = Model::create(config, shape);
  const EmbeddingTable protos = aggregate_text_prototypes(text_raw);
  std::vector<int> seen(data.seen_classes.begin(), data.seen_classes.end());
  for (int c : seen)
    if (!protos.contains(c)) throw DataError("text table lacks seen class " + std::to_string(c));
  model.set_eval_anchors(protos.class_matrix(seen));
  return model;
}

Tensor embed_trials(const Model& model, const Dataset& data, std::span<const std::size_t> trial_indices,
                    std::size_t batch_size) {
  ad::NoGradGuard guard;
  const std::size_t F = model.shape().embed_dim;
  Tensor out({trial_indices.size(), F});
  Var anchors;
  if (model.uses_alignment()) {
    if (model.eval_anchors().size() == 0) throw DataError("model has no evaluation anchors");
    anchors = Var::constant(model.eval_anchors());
  }
  for (std::size_t start = 0; start < trial_indices.size(); start += batch_size) {
    const std::size_t end = std::min(trial_indices.size(), start + batch_size);
    EEGBatch batch = gather_batch(data, trial_indices.subspan(start, end - start));
    Var z = model.embed(batch, anchors, ForwardMode{});
    std::copy(z.value().data.begin(), z.value().data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(start * F));
  }
  return out;
}

EvalReport evaluate_unseen(const Model& model, const Dataset& data, const EmbeddingTable& image,
                           const EvalProtocol& protocol) {
  const auto idx = data.split_indices(Split::unseen);
  if (idx.empty()) throw DataError("the unseen split is empty");
  Tensor emb = embed_trials(model, data, idx);
  std::vector<int> labels, exemplars;
  for (std::size_t i : idx) {
    labels.push_back(data.trials[i].class_id);
    exemplars.push_back(data.trials[i].exemplar_id);
  }
  std::vector<int> candidates(data.unseen_classes.begin(), data.unseen_classes.end());
  return zero_shot_classify(emb, labels, exemplars, image, candidates, protocol);
}

// --- checkpoints -------------------------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'N', 'M', 'C', 'R', 'L', 'C', 'K', '1'};

std::string config_hash(const TrainConfig& config) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : to_json(config).dump()) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

Tensor round_to_f32(const Tensor& t) {
  Tensor out = t;
  for (auto& v : out.data) v = static_cast<float>(v);
  return out;
}

}  // namespace

const Tensor& Checkpoint::tensor(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return t;
  throw DataError("checkpoint has no tensor '" + name + "'");
}

Checkpoint snapshot(const Model& model, std::size_t epoch, const json& metrics) {
  Checkpoint ck;
  const auto& s = model.shape();
  ck.metadata = {{"format", "nmcrl-checkpoint"},
                 {"version", 1},
                 {"config", to_json(model.config())},
                 {"config_hash", config_hash(model.config())},
                 {"seed", model.config().seed},
                 {"epoch", epoch},
                 {"shape",
                  {{"channels", s.channels},
                   {"length", s.length},
                   {"sampling_rate_hz", s.sampling_rate_hz},
                   {"n_subjects", s.n_subjects},
                   {"embed_dim", s.embed_dim}}},
                 {"metrics", metrics}};
  for (const auto& [name, v] : model.named()) ck.tensors.emplace_back(name, round_to_f32(v.value()));
  ck.tensors.emplace_back("eval.anchors", round_to_f32(model.eval_anchors()));
  return ck;
}

Model restore_model(const Checkpoint& ck) {
  const auto& m = ck.metadata;
  if (!m.contains("config") || !m.contains("shape")) throw DataError("checkpoint metadata lacks config/shape");
  const TrainConfig config = train_config_from_json(m.at("config"));
  const auto& s = m.at("shape");
  ModelShape shape{s.at("channels").get<std::size_t>(), s.at("length").get<std::size_t>(),
                   s.at("sampling_rate_hz").get<double>(), s.at("n_subjects").get<std::size_t>(),
                   s.at("embed_dim").get<std::size_t>()};
  Model model = Model::create(config, shape);
  for (auto& [name, v] : model.named()) {
    const Tensor& t = ck.tensor(name);
    if (t.shape != v.shape())
      throw DataError("checkpoint tensor '" + name + "' has shape " + shape_str(t.shape) + ", model expects " +
                      shape_str(v.shape()));
    v.mutable_value() = t;
  }
  model.set_eval_anchors(ck.tensor("eval.anchors"));
  return model;
}

void save_checkpoint(const Checkpoint& ck, const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  json meta = ck.metadata;
  json index = json::array();
  std::vector<float> payload;
  for (const auto& [name, t] : ck.tensors) {
    index.push_back({{"name", name}, {"shape", t.shape}, {"offset", payload.size() * sizeof(float)}, {"count", t.size()}});
    for (double v : t.data) payload.push_back(static_cast<float>(v));
  }
  meta["tensors"] = index;
  const std::string text = meta.dump();
  const std::uint64_t len = text.size();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out.write(kMagic, sizeof(kMagic));
  out.write(reinterpret_cast<const char*>(&len), sizeof(len));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  out.write(reinterpret_cast<const char*>(payload.data()), static_cast<std::streamsize>(payload.size() * sizeof(float)));
}

Checkpoint load_checkpoint(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  char magic[8];
  std::uint64_t len = 0;
  in.read(magic, sizeof(magic));
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) throw DataError(path.string() + " is not a checkpoint");
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  std::vector<char> rest((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  Checkpoint ck;
  try {
    ck.metadata = json::parse(text);
  } catch (const json::exception& e) {
    throw DataError(path.string() + ": bad metadata: " + e.what());
  }
  for (const auto& e : ck.metadata.at("tensors")) {
    const auto offset = e.at("offset").get<std::size_t>();
    const auto count = e.at("count").get<std::size_t>();
    if (offset + count * sizeof(float) > rest.size()) throw DataError(path.string() + ": truncated payload");
    std::vector<float> raw(count);
    std::memcpy(raw.data(), rest.data() + offset, count * sizeof(float));
    ck.tensors.emplace_back(e.at("name").get<std::string>(),
                            Tensor(e.at("shape").get<Shape>(), std::vector<double>(raw.begin(), raw.end())));
  }
  ck.metadata.erase("tensors");
  return ck;
}

// --- training -------------------------------------------------------------------------------

json EpochRecord::to_json() const {
  json j = {{"epoch", epoch}, {"loss", loss}};
  for (const auto& [k, acc] : topk) j["top" + std::to_string(k)] = acc;
  return j;
}

TrainResult train(const TrainConfig& config, const Dataset& data, const EmbeddingTable& image,
                  const EmbeddingTable& text_raw, const TrainOptions& options) {
  config.validate();
  data.validate();
  if (data.split_indices(Split::seen).empty()) throw DataError("no seen-class trials to train on");
  for (int c : data.seen_classes) {
    if (!image.contains(c)) throw DataError("image table lacks seen class " + std::to_string(c));
    if (!text_raw.contains(c)) throw DataError("text table lacks seen class " + std::to_string(c));
  }
  const bool can_eval = !data.unseen_classes.empty();
  for (int c : data.unseen_classes)
    if (!image.contains(c)) throw DataError("image table lacks unseen class " + std::to_string(c));

  Model model = build_model(config, data, image, text_raw);
  const EmbeddingTable prototypes = aggregate_text_prototypes(text_raw);
  const std::size_t F = model.shape().embed_dim;
  Adam adam(model.trainable(), config.learning_rate);
  const EvalProtocol protocol{config.eval_n_way, config.eval_k, config.repetitions_averaged,
                              derive_seed(config.seed, "eval")};

  std::ofstream metrics_log;
  if (options.out_dir) {
    fs::create_directories(*options.out_dir);
    metrics_log.open(*options.out_dir / "metrics.jsonl", std::ios::trunc);
  }

  TrainResult result;
  std::size_t step = 0;
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    const auto plan = plan_batches(data, config.batch_size, derive_seed(config.seed, "batches", epoch),
                                   config.distinct_classes, Split::seen);
    double loss_sum = 0.0;
    for (const auto& indices : plan) {
      ++step;
      EEGBatch batch = gather_batch(data, indices);
      const std::size_t B = batch.size();
      std::mt19937_64 dropout_rng(derive_seed(config.seed, "dropout", step));
      Var z = model.encode(batch, ForwardMode{true, &dropout_rng});
      if (config.ablation.completion && config.noise_sigma > 0.0)
        z = perturb_embeddings(z, NoiseSpec{config.noise_sigma, config.renormalize_noise,
                                            derive_seed(config.seed, "noise", step)});

      // Per-sample text targets: the class prototype, or one raw description
      // per class when consistency is off.
      std::mt19937_64 text_rng(derive_seed(config.seed, "text", step));
      std::map<int, std::vector<double>> text_for_class;
      std::vector<int> order;
      for (int c : batch.class_ids) {
        if (text_for_class.count(c)) continue;
        order.push_back(c);
        if (config.ablation.consistency) {
          text_for_class[c] = prototypes.at(c);
        } else {
          std::uniform_int_distribution<std::size_t> pick(0, text_raw.items_for(c) - 1);
          const auto item = std::next(text_raw.entries.lower_bound({c, std::numeric_limits<int>::min()}),
                                      static_cast<std::ptrdiff_t>(pick(text_rng)));
          text_for_class[c] = item->second;
        }
      }
      Tensor img({B, F}), txt({B, F}), anchors({order.size(), F});
      for (std::size_t i = 0; i < B; ++i) {
        const auto& iv = image.at(batch.class_ids[i]);
        const auto& tv = text_for_class.at(batch.class_ids[i]);
        std::copy(iv.begin(), iv.end(), img.data.begin() + static_cast<std::ptrdiff_t>(i * F));
        std::copy(tv.begin(), tv.end(), txt.data.begin() + static_cast<std::ptrdiff_t>(i * F));
      }
      for (std::size_t i = 0; i < order.size(); ++i) {
        const auto& tv = text_for_class.at(order[i]);
        std::copy(tv.begin(), tv.end(), anchors.data.begin() + static_cast<std::ptrdiff_t>(i * F));
      }
      if (config.ablation.alignment) z = align_embeddings(model.alignment(), z, Var::constant(std::move(anchors)));

      Var loss = total_loss(z, Var::constant(std::move(img)), Var::constant(std::move(txt)), config.eta,
                            config.temperature, config.symmetric_loss);
      const double lv = loss.value()[0];
      if (!std::isfinite(lv))
        throw NumericalError("non-finite loss at epoch " + std::to_string(epoch) + ", step " + std::to_string(step));
      ad::backward(loss);
      adam.step();
      model.after_step();
      adam.zero_grad();
      loss_sum += lv;
      result.step_losses.push_back(lv);
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.loss = loss_sum / static_cast<double>(plan.size());
    Checkpoint ck = snapshot(model, epoch);
    if (can_eval && (options.evaluate_each_epoch || epoch == config.epochs)) {
      // Scored on the float32 snapshot so a reloaded checkpoint reproduces it.
      const EvalReport report = evaluate_unseen(restore_model(ck), data, image, protocol);
      rec.topk = report.metrics;
    }
    ck.metadata["metrics"] = rec.to_json();
    json curve = json::array();
    for (const auto& h : result.history) curve.push_back(h.to_json());
    curve.push_back(rec.to_json());
    ck.metadata["history"] = curve;
    result.history.push_back(rec);
    if (options.out_dir) {
      std::ostringstream name;
      name << "checkpoint_epoch_" << std::setw(3) << std::setfill('0') << epoch << ".nmck";
      save_checkpoint(ck, *options.out_dir / name.str());
      save_checkpoint(ck, *options.out_dir / "checkpoint.nmck");
      metrics_log << rec.to_json().dump() << '\n';
      metrics_log.flush();
    }
    if (options.on_epoch) options.on_epoch(rec);
    result.checkpoint = std::move(ck);
  }
  return result;
}

}  // namespace nmcrl

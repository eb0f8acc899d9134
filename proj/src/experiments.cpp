#include "nmcrl/experiments.hpp"

#include <fstream>

#include "nmcrl/errors.hpp"
#include "nmcrl/seeding.hpp"

namespace nmcrl {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json dataset_summary(const Dataset& d) {
  return {{"trials", d.trials.size()},
          {"channels", d.channels},
          {"length", d.length},
          {"sampling_rate_hz", d.sampling_rate_hz},
          {"subjects", d.n_subjects()},
          {"seen_classes", d.seen_classes.size()},
          {"unseen_classes", d.unseen_classes.size()}};
}

json topk_json(const std::map<std::size_t, double>& m) {
  json j = json::object();
  for (const auto& [k, v] : m) j["top" + std::to_string(k)] = v;
  return j;
}

json flags_json(const AblationFlags& f) {
  return {{"subject_specific", f.subject_specific},
          {"neural_spectral", f.neural_spectral},
          {"consistency", f.consistency},
          {"completion", f.completion},
          {"alignment", f.alignment}};
}

}  // namespace

std::vector<std::pair<std::string, AblationFlags>> ablation_variants() {
  std::vector<std::pair<std::string, AblationFlags>> out{{"Full model", AblationFlags{}}};
  AblationFlags f;
  f.subject_specific = false;
  out.emplace_back("w/o Subject-Specific", f);
  f = {};
  f.neural_spectral = false;
  out.emplace_back("w/o Neural-Spectral", f);
  f = {};
  f.consistency = false;
  out.emplace_back("w/o Consistency", f);
  f = {};
  f.completion = false;
  out.emplace_back("w/o Completion", f);
  f = {};
  f.alignment = false;
  out.emplace_back("w/o Alignment", f);
  return out;
}

const AblationRow& AblationReport::row(const std::string& name) const {
  for (const auto& r : rows)
    if (r.name == name) return r;
  throw std::out_of_range("no ablation row '" + name + "'");
}

json AblationReport::to_json() const {
  json rs = json::array();
  for (const auto& r : rows)
    rs.push_back({{"variant", r.name},
                  {"flags", flags_json(r.flags)},
                  {"metrics", topk_json(r.topk)},
                  {"epoch_losses", r.epoch_losses}});
  return {{"rows", rs}, {"metadata", metadata}};
}

void AblationReport::write_csv(const fs::path& path) const {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out.precision(9);
  out << "variant";
  if (!rows.empty())
    for (const auto& [k, v] : rows.front().topk) out << ",top" << k;
  out << ",final_loss\n";
  for (const auto& r : rows) {
    out << '"' << r.name << '"';
    for (const auto& [k, v] : r.topk) out << ',' << v;
    out << ',' << (r.epoch_losses.empty() ? 0.0 : r.epoch_losses.back()) << '\n';
  }
}

AblationReport run_ablation(const TrainConfig& base, const Dataset& data, const EmbeddingTable& image,
                            const EmbeddingTable& text_raw, const ProgressFn& progress) {
  base.validate();
  if (data.unseen_classes.empty()) throw DataError("ablation needs unseen classes to evaluate");
  AblationReport report;
  report.metadata = {{"seed", base.seed}, {"base_config", to_json(base)}, {"dataset", dataset_summary(data)}};
  json seeds = json::array();
  for (const auto& [name, flags] : ablation_variants()) {
    TrainConfig cfg = base;
    cfg.ablation = flags;
    TrainOptions opts;
    opts.evaluate_each_epoch = false;
    if (progress) opts.on_epoch = [&, n = name](const EpochRecord& r) { progress(n, r); };
    TrainResult res = train(cfg, data, image, text_raw, opts);
    AblationRow row;
    row.name = name;
    row.flags = flags;
    row.topk = res.history.back().topk;
    for (const auto& h : res.history) row.epoch_losses.push_back(h.loss);
    row.step_losses = std::move(res.step_losses);
    report.rows.push_back(std::move(row));
    seeds.push_back({{"variant", name}, {"seed", cfg.seed}});
  }
  report.metadata["variant_seeds"] = seeds;
  return report;
}

json EncoderComparison::to_json() const {
  json rs = json::array();
  for (const auto& r : rows) {
    json cells = json::array();
    for (const char* stage : {"untrained", "trained"}) {
      const auto& m = std::string(stage) == "trained" ? r.trained : r.untrained;
      for (const auto& [key, acc] : m)
        cells.push_back({{"stage", stage}, {"n_way", key.first}, {"k", key.second}, {"accuracy", acc}});
    }
    json trials = json::object();
    for (const auto& [n, t] : r.trials_evaluated) trials[std::to_string(n)] = t;
    rs.push_back({{"encoder", to_string(r.encoder)}, {"cells", cells}, {"trials_evaluated", trials}});
  }
  return {{"n_ways", n_ways}, {"k_list", k_list}, {"rows", rs}, {"metadata", metadata}};
}

void EncoderComparison::write_csv(const fs::path& path) const {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out.precision(9);
  out << "encoder,stage,n_way,k,accuracy\n";
  for (const auto& r : rows) {
    for (const auto& [key, acc] : r.untrained)
      out << to_string(r.encoder) << ",untrained," << key.first << ',' << key.second << ',' << acc << '\n';
    for (const auto& [key, acc] : r.trained)
      out << to_string(r.encoder) << ",trained," << key.first << ',' << key.second << ',' << acc << '\n';
  }
}

EncoderComparison compare_encoders(const TrainConfig& base, const std::vector<EncoderKind>& encoders,
                                   const Dataset& data, const EmbeddingTable& image, const EmbeddingTable& text_raw,
                                   std::vector<std::size_t> n_ways, std::vector<std::size_t> k_list,
                                   const ProgressFn& progress) {
  if (encoders.size() < 2) throw ConfigError("compare_encoders needs at least two encoders");
  if (n_ways.empty() || k_list.empty()) throw ConfigError("compare_encoders needs n_way and k values");
  base.validate();
  const std::size_t n_unseen = data.unseen_classes.size();
  for (auto& n : n_ways) {
    if (n == 0) n = n_unseen;
    if (n < 2 || n > n_unseen)
      throw ConfigError("n_way " + std::to_string(n) + " is not in [2, " + std::to_string(n_unseen) + "]");
  }
  EncoderComparison cmp;
  cmp.n_ways = n_ways;
  cmp.k_list = k_list;
  cmp.metadata = {{"seed", base.seed}, {"base_config", to_json(base)}, {"dataset", dataset_summary(data)}};
  json seeds = json::array();

  auto score = [&](const Model& model, std::map<std::pair<std::size_t, std::size_t>, double>& cells, EncoderRow& row) {
    for (std::size_t n : n_ways) {
      EvalProtocol protocol{n, k_list, base.repetitions_averaged, derive_seed(base.seed, "eval")};
      const EvalReport rep = evaluate_unseen(model, data, image, protocol);
      for (std::size_t k : k_list) cells[{n, k}] = rep.top(k);
      row.trials_evaluated[n] = rep.trials_evaluated;
    }
  };

  for (EncoderKind kind : encoders) {
    TrainConfig cfg = base;
    cfg.encoder = kind;
    EncoderRow row;
    row.encoder = kind;
    score(build_model(cfg, data, image, text_raw), row.untrained, row);
    TrainOptions opts;
    opts.evaluate_each_epoch = false;
    if (progress) opts.on_epoch = [&, n = to_string(kind)](const EpochRecord& r) { progress(n, r); };
    TrainResult res = train(cfg, data, image, text_raw, opts);
    score(restore_model(res.checkpoint), row.trained, row);
    cmp.rows.push_back(std::move(row));
    seeds.push_back({{"encoder", to_string(kind)}, {"seed", cfg.seed}});
  }
  cmp.metadata["encoder_seeds"] = seeds;
  return cmp;
}

}  // namespace nmcrl

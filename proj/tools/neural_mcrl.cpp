#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "nmcrl/config.hpp"
#include "nmcrl/errors.hpp"
#include "nmcrl/evaluation.hpp"
#include "nmcrl/experiments.hpp"
#include "nmcrl/seeding.hpp"
#include "nmcrl/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace nmcrl;

namespace {

void write_json(const fs::path& path, const json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

std::vector<std::size_t> parse_list(const std::string& text, const char* what, std::size_t full_value = 0) {
  std::vector<std::size_t> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item == "full" || item == "all") {
      out.push_back(full_value);
      continue;
    }
    try {
      std::size_t pos = 0;
      const long v = std::stol(item, &pos);
      if (pos != item.size() || v < 0) throw std::invalid_argument(item);
      out.push_back(static_cast<std::size_t>(v));
    } catch (const std::exception&) {
      throw ConfigError(std::string(what) + ": '" + item + "' is not a nonnegative integer");
    }
  }
  if (out.empty()) throw ConfigError(std::string(what) + " must list at least one value");
  return out;
}

void log_epoch(const std::string& run, const EpochRecord& r) {
  std::cerr << (run.empty() ? "" : "[" + run + "] ") << r.to_json().dump() << '\n';
}

struct Inputs {
  Dataset data;
  EmbeddingTable image;
  std::optional<EmbeddingTable> text;
};

Inputs load_inputs(const std::string& data, const std::string& image, const std::optional<std::string>& text) {
  Inputs in;
  in.data = load_dataset(data);
  in.image = load_embedding_table(image);
  if (text) in.text = load_embedding_table(*text, in.image.dim);
  return in;
}

// --- synth ------------------------------------------------------------------------------

struct SynthArgs {
  std::optional<std::string> spec;
  std::vector<std::string> set;
  std::string out;
};

void run_synth(const SynthArgs& a) {
  const SynthSpec spec = parse_synth_spec(a.spec ? std::optional<fs::path>(*a.spec) : std::nullopt, a.set);
  const SyntheticBundle b = generate_synthetic_dataset(spec);
  const fs::path out(a.out);
  save_dataset(b.dataset, out / "eeg");
  save_embedding_table(b.image, out / "image.json");
  save_embedding_table(b.text_raw, out / "text.json");
  RunManifest m;
  m.subcommand = "synth";
  m.config = to_json(spec);
  m.seed = spec.seed;
  if (a.spec) m.add_input("spec", *a.spec);
  m.write(manifest_path_for_dir(out));
  std::cerr << "wrote " << b.dataset.trials.size() << " trials to " << (out / "eeg").string() << '\n';
}

// --- train ------------------------------------------------------------------------------

struct TrainArgs {
  std::optional<std::string> config;
  std::vector<std::string> set;
  std::string data, image, text, out;
  std::optional<std::string> from_manifest;
  bool no_epoch_eval = false;
};

void run_train(TrainArgs a) {
  TrainConfig cfg;
  if (a.from_manifest) {
    const RunManifest prev = RunManifest::load(*a.from_manifest);
    if (prev.subcommand != "train") throw ConfigError(*a.from_manifest + " is not a train manifest");
    prev.verify_inputs();
    cfg = train_config_from_json(prev.config);
    a.data = prev.input_path("data");
    a.image = prev.input_path("image_emb");
    a.text = prev.input_path("text_emb");
  } else {
    if (a.data.empty() || a.image.empty() || a.text.empty())
      throw ConfigError("train needs --data, --image-emb and --text-emb (or --from-manifest)");
    cfg = parse_config(a.config ? std::optional<fs::path>(*a.config) : std::nullopt, a.set);
  }
  Inputs in = load_inputs(a.data, a.image, a.text);
  if (cfg.embed_dim == 0) cfg.embed_dim = in.image.dim;
  const fs::path out(a.out);
  RunManifest m;
  m.subcommand = "train";
  m.config = to_json(cfg);
  m.seed = cfg.seed;
  m.add_input("data", a.data);
  m.add_input("image_emb", a.image);
  m.add_input("text_emb", a.text);
  if (a.config && !a.from_manifest) m.add_input("config", *a.config);
  m.write(manifest_path_for_dir(out));

  TrainOptions opts;
  opts.out_dir = out;
  opts.evaluate_each_epoch = !a.no_epoch_eval;
  opts.on_epoch = [](const EpochRecord& r) { log_epoch("", r); };
  train(cfg, in.data, in.image, *in.text, opts);
  std::cerr << "checkpoints in " << out.string() << '\n';
}

// --- eval -------------------------------------------------------------------------------

struct EvalArgs {
  std::string ckpt, data, image, out;
  std::size_t n_way = 0;
  std::string k = "1,5";
  std::optional<std::uint64_t> seed;
  bool repetitions_averaged = false;
  std::optional<std::string> from_manifest;
};

void run_eval(EvalArgs a) {
  std::vector<std::size_t> k_list;
  if (a.from_manifest) {
    const RunManifest prev = RunManifest::load(*a.from_manifest);
    if (prev.subcommand != "eval") throw ConfigError(*a.from_manifest + " is not an eval manifest");
    prev.verify_inputs();
    a.ckpt = prev.input_path("ckpt");
    a.data = prev.input_path("data");
    a.image = prev.input_path("image_emb");
    a.n_way = prev.config.at("n_way").get<std::size_t>();
    k_list = prev.config.at("k").get<std::vector<std::size_t>>();
    a.seed = prev.config.at("seed").get<std::uint64_t>();
    a.repetitions_averaged = prev.config.at("repetitions_averaged").get<bool>();
  } else {
    if (a.ckpt.empty() || a.data.empty() || a.image.empty())
      throw ConfigError("eval needs --ckpt, --data and --image-emb (or --from-manifest)");
    k_list = parse_list(a.k, "--k");
  }
  const Checkpoint ck = load_checkpoint(a.ckpt);
  const Model model = restore_model(ck);
  Inputs in = load_inputs(a.data, a.image, std::nullopt);
  const std::uint64_t seed = a.seed.value_or(model.config().seed);
  const EvalProtocol protocol{a.n_way, k_list, a.repetitions_averaged, derive_seed(seed, "eval")};
  const EvalReport report = evaluate_unseen(model, in.data, in.image, protocol);

  json j = report.to_json();
  j["seed"] = seed;
  j["checkpoint_epoch"] = ck.metadata.value("epoch", 0);
  write_json(a.out, j);
  RunManifest m;
  m.subcommand = "eval";
  m.config = {{"n_way", a.n_way}, {"k", k_list}, {"seed", seed}, {"repetitions_averaged", a.repetitions_averaged}};
  m.seed = seed;
  m.add_input("ckpt", a.ckpt);
  m.add_input("data", a.data);
  m.add_input("image_emb", a.image);
  m.write(manifest_path_for_file(a.out));
  std::cerr << j.at("metrics").dump() << '\n';
}

// --- analyze ----------------------------------------------------------------------------

struct AnalyzeArgs {
  std::string ckpt, data, image, out;
  std::optional<std::string> categories, plot, embeddings;
  std::string split = "unseen";
};

std::map<int, std::string> load_categories(const fs::path& path) {
  const json j = read_json_file(path);
  std::map<int, std::string> out;
  for (const auto& [key, v] : j.items()) {
    if (!v.is_string()) throw ConfigError(path.string() + ": category of class " + key + " must be a string");
    try {
      out[std::stoi(key)] = v.get<std::string>();
    } catch (const std::exception&) {
      throw ConfigError(path.string() + ": '" + key + "' is not a class id");
    }
  }
  return out;
}

void run_analyze(const AnalyzeArgs& a) {
  const Model model = restore_model(load_checkpoint(a.ckpt));
  Inputs in = load_inputs(a.data, a.image, std::nullopt);
  std::vector<std::size_t> idx;
  if (a.split == "unseen" || a.split == "all") {
    auto u = in.data.split_indices(Split::unseen);
    idx.insert(idx.end(), u.begin(), u.end());
  }
  if (a.split == "seen" || a.split == "all") {
    auto s = in.data.split_indices(Split::seen);
    idx.insert(idx.end(), s.begin(), s.end());
  }
  if (a.split != "unseen" && a.split != "seen" && a.split != "all")
    throw ConfigError("--split must be seen, unseen or all");
  if (idx.empty()) throw DataError("no trials in split '" + a.split + "'");
  const Tensor emb = embed_trials(model, in.data, idx);
  std::vector<int> labels;
  for (std::size_t i : idx) labels.push_back(in.data.trials[i].class_id);
  const EmbeddingTable eeg = class_mean_embeddings(emb, labels);

  EmbeddingTable image = in.image;
  image.entries.clear();
  for (int c : eeg.class_ids()) image.entries[{c, 0}] = in.image.at(c);
  const auto cats = a.categories ? load_categories(*a.categories) : std::map<int, std::string>{};
  const SimilarityReport rep = similarity_matrix(eeg, image, cats);
  if (fs::path(a.out).has_parent_path()) fs::create_directories(fs::path(a.out).parent_path());
  rep.write_csv(a.out);
  if (a.plot) rep.write_png(*a.plot);
  if (a.embeddings) {
    std::ofstream out(*a.embeddings, std::ios::trunc);
    if (!out) throw DataError("cannot write " + *a.embeddings);
    out.precision(9);
    const std::size_t F = emb.dim(1);
    out << "trial_index,subject_id,class_id,exemplar_id";
    for (std::size_t j = 0; j < F; ++j) out << ",e" << j;
    out << '\n';
    for (std::size_t r = 0; r < idx.size(); ++r) {
      const auto& t = in.data.trials[idx[r]];
      out << idx[r] << ',' << t.subject_id << ',' << t.class_id << ',' << t.exemplar_id;
      for (double v : emb.row(r, F)) out << ',' << v;
      out << '\n';
    }
  }
  RunManifest m;
  m.subcommand = "analyze";
  m.config = {{"split", a.split}, {"plot", a.plot.has_value()}, {"embeddings", a.embeddings.has_value()}};
  m.seed = model.config().seed;
  m.add_input("ckpt", a.ckpt);
  m.add_input("data", a.data);
  m.add_input("image_emb", a.image);
  if (a.categories) m.add_input("categories", *a.categories);
  m.write(manifest_path_for_file(a.out));
}

// --- ablate / compare-encoders ------------------------------------------------------------

struct ExperimentArgs {
  std::optional<std::string> config;
  std::vector<std::string> set;
  std::string data, image, text, out;
  std::string n_way = "5,10,full";
  std::string k = "1,5";
  std::vector<std::string> encoders = {"nesta", "mlp"};
};

RunManifest experiment_manifest(const std::string& sub, const ExperimentArgs& a, const TrainConfig& cfg) {
  RunManifest m;
  m.subcommand = sub;
  m.config = to_json(cfg);
  m.seed = cfg.seed;
  m.add_input("data", a.data);
  m.add_input("image_emb", a.image);
  m.add_input("text_emb", a.text);
  if (a.config) m.add_input("config", *a.config);
  return m;
}

void run_ablate(const ExperimentArgs& a) {
  TrainConfig cfg = parse_config(a.config ? std::optional<fs::path>(*a.config) : std::nullopt, a.set);
  Inputs in = load_inputs(a.data, a.image, a.text);
  if (cfg.embed_dim == 0) cfg.embed_dim = in.image.dim;
  const fs::path out(a.out);
  RunManifest m = experiment_manifest("ablate", a, cfg);
  m.write(manifest_path_for_dir(out));
  const AblationReport rep = run_ablation(cfg, in.data, in.image, *in.text, log_epoch);
  write_json(out / "ablation.json", rep.to_json());
  rep.write_csv(out / "ablation.csv");
  for (const auto& r : rep.rows) std::cerr << r.name << ": " << json(r.topk).dump() << '\n';
}

void run_compare(const ExperimentArgs& a) {
  TrainConfig cfg = parse_config(a.config ? std::optional<fs::path>(*a.config) : std::nullopt, a.set);
  std::vector<EncoderKind> kinds;
  for (const auto& e : a.encoders) {
    if (e == "nesta") kinds.push_back(EncoderKind::nesta);
    else if (e == "mlp") kinds.push_back(EncoderKind::mlp);
    else throw ConfigError("unknown encoder '" + e + "' (expected nesta or mlp)");
  }
  Inputs in = load_inputs(a.data, a.image, a.text);
  if (cfg.embed_dim == 0) cfg.embed_dim = in.image.dim;
  const fs::path out(a.out);
  RunManifest m = experiment_manifest("compare-encoders", a, cfg);
  m.config["encoders"] = a.encoders;
  m.config["n_way"] = a.n_way;
  m.config["k"] = a.k;
  m.write(manifest_path_for_dir(out));
  const EncoderComparison cmp = compare_encoders(cfg, kinds, in.data, in.image, *in.text,
                                                 parse_list(a.n_way, "--n-way"), parse_list(a.k, "--k"), log_epoch);
  write_json(out / "encoders.json", cmp.to_json());
  cmp.write_csv(out / "encoders.csv");
}

// --- gradcheck --------------------------------------------------------------------------

struct GradArgs {
  std::vector<std::string> components;
  std::uint64_t seed = 0;
  double step = 1e-3;
  std::optional<double> tolerance;
  std::optional<std::string> out;
};

int run_gradcheck(const GradArgs& a) {
  const auto names = a.components.empty() ? registered_gradient_checks() : a.components;
  json reports = json::array();
  bool ok = true;
  for (const auto& n : names) {
    const GradCheckReport r = gradient_check(n, {a.seed, a.step, a.tolerance});
    std::cout << (r.passed ? "PASS " : "FAIL ") << n << " max_rel_error=" << r.max_rel_error
              << " tolerance=" << r.tolerance << '\n';
    ok = ok && r.passed;
    reports.push_back(r.to_json());
  }
  if (a.out) {
    write_json(*a.out, reports);
    RunManifest m;
    m.subcommand = "gradcheck";
    m.config = {{"components", names}, {"step", a.step}};
    if (a.tolerance) m.config["tolerance"] = *a.tolerance;
    m.seed = a.seed;
    m.write(manifest_path_for_file(*a.out));
  }
  return ok ? 0 : 3;
}

void add_data_options(CLI::App* sub, std::string& data, std::string& image) {
  sub->add_option("--data", data, "Dataset directory (or its manifest.json)");
  sub->add_option("--image-emb", image, "Image embedding table header (.json)");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Neural-MCRL: EEG zero-shot visual decoding toolkit", "neural-mcrl"};
  app.set_version_flag("--version", std::string(kToolVersion));
  app.require_subcommand(1);

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "Generate a synthetic EEG dataset with image and text embedding tables");
  s->add_option("--spec", synth.spec, "Synthetic spec JSON (missing keys keep defaults)")->check(CLI::ExistingFile);
  s->add_option("--set", synth.set, "Override a spec key, key=value (repeatable)");
  s->add_option("--out", synth.out, "Output directory: eeg/, image.json, text.json, run_manifest.json")->required();

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train the encoder and alignment head on the seen classes");
  t->add_option("--config", tr.config, "Training config JSON mirroring TrainConfig")->check(CLI::ExistingFile);
  t->add_option("--set", tr.set, "Override a config key, key=value; dotted keys reach nested objects (repeatable)");
  add_data_options(t, tr.data, tr.image);
  t->add_option("--text-emb", tr.text, "Raw text embedding table header (.json), K items per class");
  t->add_option("--out", tr.out, "Output directory for checkpoints, metrics.jsonl and run_manifest.json")->required();
  t->add_option("--from-manifest", tr.from_manifest, "Repeat the run recorded in a train run_manifest.json")
      ->check(CLI::ExistingFile);
  t->add_flag("--no-epoch-eval", tr.no_epoch_eval, "Evaluate on the unseen split only after the last epoch");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "N-way zero-shot evaluation of a checkpoint on the unseen split");
  e->add_option("--ckpt", ev.ckpt, "Checkpoint file (.nmck)");
  add_data_options(e, ev.data, ev.image);
  e->add_option("--n-way", ev.n_way, "Candidates per trial, 0 for every unseen class")->capture_default_str();
  e->add_option("--k", ev.k, "Comma-separated k values for top-k accuracy")->capture_default_str();
  e->add_option("--seed", ev.seed, "Distractor seed (default: the checkpoint's training seed)");
  e->add_flag("--repetitions-averaged", ev.repetitions_averaged,
              "Average embeddings of trials sharing (class, exemplar) before scoring");
  e->add_option("--out", ev.out, "Report JSON; a <out>.manifest.json is written beside it")->required();
  e->add_option("--from-manifest", ev.from_manifest, "Repeat the run recorded in an eval manifest")
      ->check(CLI::ExistingFile);

  AnalyzeArgs an;
  auto* n = app.add_subcommand("analyze", "Class-level EEG/image cosine similarity matrix");
  n->add_option("--ckpt", an.ckpt, "Checkpoint file (.nmck)")->required();
  add_data_options(n, an.data, an.image);
  n->get_option("--data")->required();
  n->get_option("--image-emb")->required();
  n->add_option("--categories", an.categories, "JSON object mapping class id to category label")
      ->check(CLI::ExistingFile);
  n->add_option("--split", an.split, "Trials to embed: unseen, seen or all")->capture_default_str();
  n->add_option("--out", an.out, "Similarity matrix CSV (header row of class ids, one row per class)")->required();
  n->add_option("--plot", an.plot, "Optional PNG heatmap of the matrix");
  n->add_option("--embeddings", an.embeddings, "Optional CSV of per-trial embeddings for external tools");

  ExperimentArgs ab;
  auto* b = app.add_subcommand("ablate", "Train and evaluate the full model and five single-component ablations");
  b->add_option("--config", ab.config, "Base training config JSON")->check(CLI::ExistingFile);
  b->add_option("--set", ab.set, "Override a config key, key=value (repeatable)");
  add_data_options(b, ab.data, ab.image);
  b->add_option("--text-emb", ab.text, "Raw text embedding table header (.json)")->required();
  b->get_option("--data")->required();
  b->get_option("--image-emb")->required();
  b->add_option("--out", ab.out, "Output directory: ablation.json, ablation.csv, run_manifest.json")->required();

  ExperimentArgs ce;
  auto* c = app.add_subcommand("compare-encoders", "Same protocol for each encoder, scored before and after training");
  c->add_option("--config", ce.config, "Base training config JSON")->check(CLI::ExistingFile);
  c->add_option("--set", ce.set, "Override a config key, key=value (repeatable)");
  add_data_options(c, ce.data, ce.image);
  c->add_option("--text-emb", ce.text, "Raw text embedding table header (.json)")->required();
  c->get_option("--data")->required();
  c->get_option("--image-emb")->required();
  c->add_option("--encoders", ce.encoders, "Encoders to compare: nesta, mlp")->delimiter(',')->capture_default_str();
  c->add_option("--n-way", ce.n_way, "Comma-separated N values; 'full' means every unseen class")
      ->capture_default_str();
  c->add_option("--k", ce.k, "Comma-separated k values")->capture_default_str();
  c->add_option("--out", ce.out, "Output directory: encoders.json, encoders.csv, run_manifest.json")->required();

  GradArgs gr;
  auto* g = app.add_subcommand("gradcheck", "Finite-difference gradient checks of the differentiable operations");
  g->add_option("--component", gr.components, "Component to check (repeatable; default: all registered)");
  g->add_option("--seed", gr.seed, "Seed for the random test inputs")->capture_default_str();
  g->add_option("--step", gr.step, "Central-difference step")->capture_default_str();
  g->add_option("--tolerance", gr.tolerance, "Override every component's registered tolerance");
  g->add_option("--out", gr.out, "Optional JSON report");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*s) run_synth(synth);
    else if (*t) run_train(tr);
    else if (*e) run_eval(ev);
    else if (*n) run_analyze(an);
    else if (*b) run_ablate(ab);
    else if (*c) run_compare(ce);
    else if (*g) return run_gradcheck(gr);
    return 0;
  } catch (const ConfigError& err) {
    std::cerr << "config error: " << err.what() << '\n';
    return 1;
  } catch (const NumericalError& err) {
    std::cerr << "numerical failure: " << err.what() << '\n';
    return 3;
  } catch (const DataError& err) {
    std::cerr << "data error: " << err.what() << '\n';
    return 2;
  } catch (const ShapeError& err) {
    std::cerr << "data error: " << err.what() << '\n';
    return 2;
  } catch (const std::domain_error& err) {
    std::cerr << "numerical failure: " << err.what() << '\n';
    return 3;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << '\n';
    return 1;
  }
}

#include "nmcrl/data_model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <random>
#include <unordered_map>

#include <json.hpp>

#include "nmcrl/errors.hpp"
#include "nmcrl/seeding.hpp"

namespace nmcrl {

namespace fs = std::filesystem;
using nlohmann::json;

static_assert(std::endian::native == std::endian::little, "raw tensor files are little-endian float32");

namespace {

constexpr int kFormatVersion = 1;

std::vector<float> read_f32_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw DataError("cannot open raw tensor file " + path.string());
  const auto bytes = static_cast<std::size_t>(in.tellg());
  if (bytes % sizeof(float) != 0) throw DataError(path.string() + ": byte length is not a multiple of 4");
  std::vector<float> out(bytes / sizeof(float));
  in.seekg(0);
  in.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(bytes));
  if (!in) throw DataError("short read on " + path.string());
  return out;
}

void write_f32_file(const fs::path& path, std::span<const float> values) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size_bytes()));
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

template <typename T>
T field(const json& j, const char* key, const fs::path& where) {
  if (!j.contains(key)) throw DataError(where.string() + ": missing field '" + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw DataError(where.string() + ": field '" + key + "': " + e.what());
  }
}

double norm2(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

void normalize(std::vector<double>& v) {
  const double n = norm2(v);
  for (auto& x : v) x /= n;
}

}  // namespace

// --- Dataset ----------------------------------------------------------------

int Dataset::n_subjects() const {
  int mx = -1;
  for (const auto& t : trials) mx = std::max(mx, t.subject_id);
  return mx + 1;
}

std::vector<std::size_t> Dataset::split_indices(Split split) const {
  const auto& cls = split == Split::seen ? seen_classes : unseen_classes;
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < trials.size(); ++i)
    if (cls.count(trials[i].class_id)) out.push_back(i);
  return out;
}

void Dataset::validate() const {
  if (channels == 0 || length == 0) throw DataError("dataset: C and L must be positive");
  if (!(sampling_rate_hz > 0.0)) throw DataError("dataset: sampling rate must be positive");
  if (eeg.size() != trials.size() * trial_size())
    throw DataError("dataset: tensor holds " + std::to_string(eeg.size()) + " values, expected " +
                    std::to_string(trials.size() * trial_size()));
  for (int c : seen_classes)
    if (unseen_classes.count(c)) throw DataError("class " + std::to_string(c) + " is in both seen and unseen splits");
  std::set<int> subjects;
  for (const auto& t : trials) {
    if (!seen_classes.count(t.class_id) && !unseen_classes.count(t.class_id))
      throw DataError("trial class " + std::to_string(t.class_id) + " belongs to neither split");
    if (t.subject_id < 0) throw DataError("negative subject id");
    subjects.insert(t.subject_id);
  }
  if (!subjects.empty() && static_cast<int>(subjects.size()) != *subjects.rbegin() + 1)
    throw DataError("subject ids must be contiguous from 0");
}

Dataset load_dataset(const fs::path& path) {
  const fs::path manifest = fs::is_directory(path) ? path / "manifest.json" : path;
  if (!fs::exists(manifest)) throw DataError("manifest not found: " + manifest.string());
  const fs::path dir = manifest.parent_path();
  const json j = read_json(manifest);

  Dataset d;
  if (field<int>(j, "version", manifest) != kFormatVersion) throw DataError(manifest.string() + ": unsupported version");
  d.channels = field<std::size_t>(j, "C", manifest);
  d.length = field<std::size_t>(j, "L", manifest);
  d.sampling_rate_hz = field<double>(j, "sampling_rate_hz", manifest);
  for (int c : field<std::vector<int>>(j, "seen_classes", manifest)) d.seen_classes.insert(c);
  for (int c : field<std::vector<int>>(j, "unseen_classes", manifest)) d.unseen_classes.insert(c);
  for (int c : d.seen_classes)
    if (d.unseen_classes.count(c)) throw DataError("class " + std::to_string(c) + " is in both seen and unseen splits");

  const auto& trials = j.at("trials");
  if (!trials.is_array()) throw DataError(manifest.string() + ": 'trials' must be an array");
  std::unordered_map<std::string, std::vector<float>> files;
  const std::size_t per_trial = d.channels * d.length;
  d.eeg.reserve(trials.size() * per_trial);
  for (const auto& t : trials) {
    const auto file = field<std::string>(t, "file", manifest);
    const auto offset = field<std::size_t>(t, "offset", manifest);
    auto it = files.find(file);
    if (it == files.end()) it = files.emplace(file, read_f32_file(dir / file)).first;
    const auto& raw = it->second;
    if (offset % sizeof(float) != 0) throw DataError(file + ": offset not aligned to float32");
    const std::size_t first = offset / sizeof(float);
    if (first + per_trial > raw.size())
      throw DataError(file + ": trial at byte offset " + std::to_string(offset) + " needs " +
                      std::to_string(per_trial * sizeof(float)) + " bytes but file holds " +
                      std::to_string(raw.size() * sizeof(float)));
    d.eeg.insert(d.eeg.end(), raw.begin() + static_cast<std::ptrdiff_t>(first),
                 raw.begin() + static_cast<std::ptrdiff_t>(first + per_trial));
    d.trials.push_back({field<int>(t, "subject_id", manifest), field<int>(t, "class_id", manifest),
                        field<int>(t, "exemplar_id", manifest)});
  }
  d.validate();
  return d;
}

void save_dataset(const Dataset& data, const fs::path& dir) {
  data.validate();
  fs::create_directories(dir);
  write_f32_file(dir / "eeg.f32", data.eeg);
  json trials = json::array();
  for (std::size_t i = 0; i < data.trials.size(); ++i) {
    const auto& t = data.trials[i];
    trials.push_back({{"file", "eeg.f32"},
                      {"offset", i * data.trial_size() * sizeof(float)},
                      {"subject_id", t.subject_id},
                      {"class_id", t.class_id},
                      {"exemplar_id", t.exemplar_id}});
  }
  json j = {{"version", kFormatVersion},
            {"C", data.channels},
            {"L", data.length},
            {"sampling_rate_hz", data.sampling_rate_hz},
            {"trials", trials},
            {"seen_classes", std::vector<int>(data.seen_classes.begin(), data.seen_classes.end())},
            {"unseen_classes", std::vector<int>(data.unseen_classes.begin(), data.unseen_classes.end())}};
  write_json(dir / "manifest.json", j);
}

// --- EmbeddingTable ---------------------------------------------------------------

std::string to_string(EmbeddingKind kind) {
  switch (kind) {
    case EmbeddingKind::image: return "image";
    case EmbeddingKind::text_raw: return "text_raw";
    case EmbeddingKind::text_prototype: return "text_prototype";
  }
  return "image";
}

EmbeddingKind embedding_kind_from_string(const std::string& s) {
  if (s == "image") return EmbeddingKind::image;
  if (s == "text_raw") return EmbeddingKind::text_raw;
  if (s == "text_prototype") return EmbeddingKind::text_prototype;
  throw DataError("unknown embedding kind '" + s + "'");
}

const std::vector<double>& EmbeddingTable::at(int class_id, int item) const {
  auto it = entries.find({class_id, item});
  if (it == entries.end())
    throw DataError("embedding table has no entry for class " + std::to_string(class_id) + " item " +
                    std::to_string(item));
  return it->second;
}

bool EmbeddingTable::contains(int class_id) const {
  auto it = entries.lower_bound({class_id, std::numeric_limits<int>::min()});
  return it != entries.end() && it->first.first == class_id;
}

std::vector<int> EmbeddingTable::class_ids() const {
  std::vector<int> out;
  for (const auto& [key, v] : entries)
    if (out.empty() || out.back() != key.first) out.push_back(key.first);
  return out;
}

std::size_t EmbeddingTable::items_for(int class_id) const {
  std::size_t n = 0;
  for (auto it = entries.lower_bound({class_id, std::numeric_limits<int>::min()});
       it != entries.end() && it->first.first == class_id; ++it)
    ++n;
  return n;
}

Tensor EmbeddingTable::class_matrix(std::span<const int> ids) const {
  Tensor out({ids.size(), dim});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const auto& v = at(ids[i]);
    std::copy(v.begin(), v.end(), out.data.begin() + static_cast<std::ptrdiff_t>(i * dim));
  }
  return out;
}

void EmbeddingTable::validate() const {
  if (dim == 0) throw DataError("embedding table: dim must be positive");
  for (const auto& [key, v] : entries) {
    if (v.size() != dim)
      throw DataError("embedding for class " + std::to_string(key.first) + " has length " + std::to_string(v.size()) +
                      ", expected " + std::to_string(dim));
    if (normalized) {
      const double n = norm2(v);
      if (n == 0.0) throw DataError("zero vector in a normalized table (class " + std::to_string(key.first) + ")");
      if (std::abs(n - 1.0) > 1e-5)
        throw DataError("vector for class " + std::to_string(key.first) + " has norm " + std::to_string(n) +
                        " in a normalized table");
    }
  }
}

EmbeddingTable load_embedding_table(const fs::path& path, std::optional<std::size_t> expect_dim) {
  if (!fs::exists(path)) throw DataError("embedding header not found: " + path.string());
  const json j = read_json(path);
  EmbeddingTable t;
  if (field<int>(j, "version", path) != kFormatVersion) throw DataError(path.string() + ": unsupported version");
  t.dim = field<std::size_t>(j, "dim", path);
  t.kind = embedding_kind_from_string(field<std::string>(j, "kind", path));
  t.normalized = field<bool>(j, "normalized", path);
  if (expect_dim && *expect_dim != t.dim)
    throw DataError(path.string() + ": dimension " + std::to_string(t.dim) + " does not match expected " +
                    std::to_string(*expect_dim));
  fs::path raw_path = path;
  raw_path.replace_extension(".f32");
  const auto raw = read_f32_file(raw_path);
  for (const auto& e : j.at("entries")) {
    const auto offset = field<std::size_t>(e, "offset", path);
    const std::size_t first = offset / sizeof(float);
    if (offset % sizeof(float) != 0 || first + t.dim > raw.size())
      throw DataError(path.string() + ": entry offset " + std::to_string(offset) + " outside raw file");
    std::vector<double> v(raw.begin() + static_cast<std::ptrdiff_t>(first),
                          raw.begin() + static_cast<std::ptrdiff_t>(first + t.dim));
    const std::pair key{field<int>(e, "class_id", path), field<int>(e, "item_index", path)};
    if (!t.entries.emplace(key, std::move(v)).second)
      throw DataError(path.string() + ": duplicate entry for class " + std::to_string(key.first));
  }
  t.validate();
  return t;
}

void save_embedding_table(const EmbeddingTable& table, const fs::path& path) {
  table.validate();
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::vector<float> raw;
  raw.reserve(table.entries.size() * table.dim);
  json entries = json::array();
  for (const auto& [key, v] : table.entries) {
    entries.push_back({{"class_id", key.first}, {"item_index", key.second}, {"offset", raw.size() * sizeof(float)}});
    for (double x : v) raw.push_back(static_cast<float>(x));
  }
  fs::path raw_path = path;
  raw_path.replace_extension(".f32");
  write_f32_file(raw_path, raw);
  write_json(path, {{"version", kFormatVersion},
                    {"dim", table.dim},
                    {"kind", to_string(table.kind)},
                    {"normalized", table.normalized},
                    {"entries", entries}});
}

// --- synthetic data ---------------------------------------------------------------

void SynthSpec::validate() const {
  if (n_classes < 2) throw ConfigError("synth: n_classes must be >= 2");
  if (embed_dim < 2) throw ConfigError("synth: embed_dim must be >= 2");
  if (n_unseen_classes < 0 || n_unseen_classes >= n_classes)
    throw ConfigError("synth: n_unseen_classes must lie in [0, n_classes)");
  if (n_subjects < 1 || trials_per_class_per_subject < 1 || exemplars_per_class < 1)
    throw ConfigError("synth: subject, trial and exemplar counts must be positive");
  if (channels < 1 || length < 2) throw ConfigError("synth: need C >= 1 and L >= 2");
  if (!(sampling_rate_hz > 0.0)) throw ConfigError("synth: sampling rate must be positive");
  if (text_per_class < 1) throw ConfigError("synth: text_per_class must be >= 1");
  if (class_separation < 0.0 || subject_perturbation < 0.0 || noise_sigma < 0.0 || text_noise < 0.0)
    throw ConfigError("synth: separation, perturbation and noise scales must be nonnegative");
  if (orthogonal_prototypes && n_classes > embed_dim)
    throw ConfigError("synth: orthogonal prototypes need n_classes <= embed_dim");
}

namespace {

// Carrier per canonical band, snapped to the DFT bin grid and kept below Nyquist.
std::vector<double> carrier_frequencies(double fs, std::size_t L) {
  const double nominal[] = {2.0, 6.0, 10.0, 20.0, 40.0};
  const double df = fs / static_cast<double>(L);
  const double nyquist = fs / 2.0;
  std::vector<double> out;
  for (double f : nominal) {
    double k = std::max(1.0, std::round(f / df));
    while (k * df >= nyquist && k > 1.0) k -= 1.0;
    out.push_back(k * df);
  }
  return out;
}

}  // namespace

SyntheticBundle generate_synthetic_dataset(const SynthSpec& spec) {
  spec.validate();
  const auto F = static_cast<std::size_t>(spec.embed_dim);
  const auto C = static_cast<std::size_t>(spec.channels);
  const auto L = static_cast<std::size_t>(spec.length);
  const auto K = static_cast<std::size_t>(spec.n_classes);
  const auto carriers = carrier_frequencies(spec.sampling_rate_hz, L);
  const std::size_t nb = carriers.size();

  std::mt19937_64 proto_rng(derive_seed(spec.seed, "synth/prototypes"));
  std::mt19937_64 mix_rng(derive_seed(spec.seed, "synth/mixing"));
  std::mt19937_64 text_rng(derive_seed(spec.seed, "synth/text"));
  std::mt19937_64 noise_rng(derive_seed(spec.seed, "synth/noise"));
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> phase_dist(0.0, 2.0 * std::numbers::pi);
  const double unit = 1.0 / std::sqrt(static_cast<double>(F));

  // Class signal g_c and nuisance h_c; image embedding leans toward g_c as
  // the separation grows, EEG amplitudes depend on g_c only.
  std::vector<std::vector<double>> signal(K, std::vector<double>(F)), nuisance(K, std::vector<double>(F));
  for (auto& g : signal)
    for (auto& x : g) x = normal(proto_rng) * unit;
  for (auto& h : nuisance)
    for (auto& x : h) x = normal(proto_rng) * unit;
  if (spec.orthogonal_prototypes) {
    for (std::size_t c = 0; c < K; ++c) {
      for (std::size_t p = 0; p < c; ++p) {
        double dot = 0.0;
        for (std::size_t i = 0; i < F; ++i) dot += signal[c][i] * signal[p][i];
        for (std::size_t i = 0; i < F; ++i) signal[c][i] -= dot * signal[p][i];
      }
      normalize(signal[c]);
    }
  }
  const double s = spec.class_separation;
  const double kappa = s / std::sqrt(1.0 + s * s);

  Tensor amp_map({C * nb, F});
  for (auto& x : amp_map.data) x = normal(proto_rng);
  std::vector<double> phase(C * nb);
  for (auto& p : phase) p = phase_dist(proto_rng);

  SyntheticBundle out;
  out.class_latents = Tensor({K, F});
  std::vector<std::vector<double>> amplitude(K, std::vector<double>(C * nb));
  for (std::size_t c = 0; c < K; ++c) {
    for (std::size_t i = 0; i < F; ++i) out.class_latents[c * F + i] = kappa * signal[c][i];
    for (std::size_t r = 0; r < C * nb; ++r) {
      double a = 0.0;
      for (std::size_t i = 0; i < F; ++i) a += amp_map[r * F + i] * out.class_latents[c * F + i];
      amplitude[c][r] = 1.0 + a;
    }
  }

  const auto S = static_cast<std::size_t>(spec.n_subjects);
  std::vector<Tensor> mixing;
  for (std::size_t sub = 0; sub < S; ++sub) {
    Tensor m = Tensor::identity(C);
    for (auto& x : m.data) x += spec.subject_perturbation * normal(mix_rng) / std::sqrt(static_cast<double>(C));
    mixing.push_back(std::move(m));
  }

  // Precomputed carriers [C * nb, L].
  std::vector<double> wave(C * nb * L);
  for (std::size_t ch = 0; ch < C; ++ch)
    for (std::size_t b = 0; b < nb; ++b)
      for (std::size_t t = 0; t < L; ++t)
        wave[(ch * nb + b) * L + t] =
            std::sin(2.0 * std::numbers::pi * carriers[b] * static_cast<double>(t) / spec.sampling_rate_hz +
                     phase[ch * nb + b]);

  Dataset& d = out.dataset;
  d.channels = C;
  d.length = L;
  d.sampling_rate_hz = spec.sampling_rate_hz;
  const int first_unseen = spec.n_classes - spec.n_unseen_classes;
  for (int c = 0; c < spec.n_classes; ++c) (c < first_unseen ? d.seen_classes : d.unseen_classes).insert(c);

  std::vector<double> clean(C * L), mixed(C * L);
  for (std::size_t sub = 0; sub < S; ++sub) {
    for (std::size_t c = 0; c < K; ++c) {
      std::fill(clean.begin(), clean.end(), 0.0);
      for (std::size_t ch = 0; ch < C; ++ch)
        for (std::size_t b = 0; b < nb; ++b) {
          const double a = amplitude[c][ch * nb + b];
          const double* w = &wave[(ch * nb + b) * L];
          for (std::size_t t = 0; t < L; ++t) clean[ch * L + t] += a * w[t];
        }
      std::fill(mixed.begin(), mixed.end(), 0.0);
      for (std::size_t i = 0; i < C; ++i)
        for (std::size_t j = 0; j < C; ++j) {
          const double m = mixing[sub][i * C + j];
          for (std::size_t t = 0; t < L; ++t) mixed[i * L + t] += m * clean[j * L + t];
        }
      for (int rep = 0; rep < spec.trials_per_class_per_subject; ++rep) {
        for (std::size_t i = 0; i < C * L; ++i)
          d.eeg.push_back(static_cast<float>(mixed[i] + spec.noise_sigma * normal(noise_rng)));
        d.trials.push_back({static_cast<int>(sub), static_cast<int>(c), rep % spec.exemplars_per_class});
      }
    }
  }

  out.image.dim = F;
  out.image.kind = EmbeddingKind::image;
  out.image.normalized = true;
  out.text_raw.dim = F;
  out.text_raw.kind = EmbeddingKind::text_raw;
  out.text_raw.normalized = true;
  // Values are rounded through float32 so in-memory tables equal their files.
  auto to_f32_unit = [](std::vector<double> v) {
    normalize(v);
    for (auto& x : v) x = static_cast<float>(x);
    return v;
  };
  for (std::size_t c = 0; c < K; ++c) {
    std::vector<double> v(F);
    for (std::size_t i = 0; i < F; ++i) v[i] = s * signal[c][i] + nuisance[c][i];
    normalize(v);
    out.image.entries[{static_cast<int>(c), 0}] = to_f32_unit(v);
    for (int k = 0; k < spec.text_per_class; ++k) {
      std::vector<double> t(F);
      for (std::size_t i = 0; i < F; ++i) t[i] = v[i] + spec.text_noise * unit * normal(text_rng);
      out.text_raw.entries[{static_cast<int>(c), k}] = to_f32_unit(std::move(t));
    }
  }
  d.validate();
  return out;
}

// --- batching -----------------------------------------------------------------------

std::vector<std::vector<std::size_t>> plan_batches(const Dataset& data, std::size_t batch_size, std::uint64_t seed,
                                                   bool distinct_classes, Split split) {
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  std::vector<std::size_t> idx = data.split_indices(split);
  if (idx.empty()) throw DataError(std::string("the ") + (split == Split::seen ? "seen" : "unseen") + " split is empty");
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);

  std::vector<std::vector<std::size_t>> batches;
  auto chunk = [&](const std::vector<std::size_t>& order) {
    for (std::size_t i = 0; i < order.size(); i += batch_size)
      batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                           order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), i + batch_size)));
  };
  if (!distinct_classes) {
    chunk(idx);
    return batches;
  }

  std::map<int, std::vector<std::size_t>> per_class;
  for (std::size_t i : idx) per_class[data.trials[i].class_id].push_back(i);
  if (batch_size > per_class.size())
    throw ConfigError("batch_size " + std::to_string(batch_size) + " exceeds the " + std::to_string(per_class.size()) +
                      " classes available for distinct-class batching");
  std::size_t passes = 0;
  for (const auto& [c, v] : per_class) passes = std::max(passes, v.size());
  for (std::size_t p = 0; p < passes; ++p) {
    std::vector<std::size_t> pass;
    for (const auto& [c, v] : per_class)
      if (p < v.size()) pass.push_back(v[p]);
    std::shuffle(pass.begin(), pass.end(), rng);
    chunk(pass);
  }
  return batches;
}

EEGBatch gather_batch(const Dataset& data, std::span<const std::size_t> trial_indices) {
  EEGBatch b;
  const std::size_t n = data.trial_size();
  b.eeg = Tensor({trial_indices.size(), data.channels, data.length});
  for (std::size_t i = 0; i < trial_indices.size(); ++i) {
    const std::size_t t = trial_indices[i];
    if (t >= data.trials.size()) throw DataError("trial index out of range");
    auto src = data.trial_eeg(t);
    std::copy(src.begin(), src.end(), b.eeg.data.begin() + static_cast<std::ptrdiff_t>(i * n));
    b.subject_ids.push_back(data.trials[t].subject_id);
    b.class_ids.push_back(data.trials[t].class_id);
    b.exemplar_ids.push_back(data.trials[t].exemplar_id);
    b.trial_indices.push_back(t);
  }
  return b;
}

std::vector<EEGBatch> make_batches(const Dataset& data, std::size_t batch_size, std::uint64_t seed,
                                   bool distinct_classes, Split split) {
  std::vector<EEGBatch> out;
  for (const auto& plan : plan_batches(data, batch_size, seed, distinct_classes, split))
    out.push_back(gather_batch(data, plan));
  return out;
}

}  // namespace nmcrl

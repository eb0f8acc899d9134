#include <cmath>
#include <functional>
#include <map>
#include <random>

#include "nmcrl/eitra.hpp"
#include "nmcrl/errors.hpp"
#include "nmcrl/nesta.hpp"
#include "nmcrl/seeding.hpp"
#include "nmcrl/training.hpp"

namespace nmcrl {

using ad::Var;
using nlohmann::json;

json GradCheckReport::to_json() const {
  json g = json::array();
  for (const auto& grp : groups)
    g.push_back({{"name", grp.name}, {"elements", grp.elements}, {"max_rel_error", grp.max_rel_error}});
  return {{"component", component},
          {"groups", g},
          {"max_rel_error", max_rel_error},
          {"tolerance", tolerance},
          {"passed", passed}};
}

namespace {

struct Problem {
  std::vector<std::pair<std::string, Var>> inputs;  // tensors to differentiate against
  std::function<Var()> forward;
};

struct Entry {
  double tolerance;
  std::function<Problem(std::mt19937_64&)> build;
};

Tensor randn(const Shape& shape, double scale, std::mt19937_64& rng, double mean = 0.0) {
  std::normal_distribution<double> n(mean, scale);
  Tensor t(shape);
  for (auto& v : t.data) v = n(rng);
  return t;
}

Var param(const Shape& shape, double scale, std::mt19937_64& rng, double mean = 0.0) {
  return Var::parameter(randn(shape, scale, rng, mean));
}

// Replaces every encoder tensor with a generic random value so no gradient
// path is hidden behind an initialisation that zeroes it.
void randomize(const std::vector<std::pair<std::string, Var>>& named, std::mt19937_64& rng) {
  for (auto [name, v] : named) {
    Tensor& t = v.mutable_value();
    if (name.ends_with("alpha")) {
      t[0] = 0.6;
      continue;
    }
    const bool gain = name.find("gain") != std::string::npos;
    const double fan = t.rank() >= 2 ? static_cast<double>(t.dim(t.rank() - 2)) : 1.0;
    t = randn(t.shape, gain ? 0.2 : 0.5 / std::sqrt(fan), rng, gain ? 1.0 : 0.0);
    if (name.ends_with("subject_matrices"))
      for (std::size_t s = 0; s < t.dim(0); ++s)
        for (std::size_t i = 0; i < t.dim(1); ++i) t[(s * t.dim(1) + i) * t.dim(1) + i] += 1.0;
  }
}

NestaParams small_nesta(std::size_t C, std::size_t L, std::size_t F, double fs, std::size_t subjects,
                        std::mt19937_64& rng) {
  NestaConfig cfg;
  cfg.channels = C;
  cfg.length = L;
  cfg.embed_dim = F;
  cfg.sampling_rate_hz = fs;
  cfg.n_subjects = subjects;
  cfg.heads = 2;
  NestaParams p = NestaParams::init(cfg, rng());
  randomize(p.named(), rng);
  return p;
}

std::vector<std::pair<std::string, Var>> with_prefix(const std::vector<std::pair<std::string, Var>>& named,
                                                     std::vector<std::pair<std::string, Var>> inputs) {
  for (const auto& p : named) inputs.push_back(p);
  return inputs;
}

const std::map<std::string, Entry>& registry() {
  static const std::map<std::string, Entry> r = {
      {"subject_transform",
       {1e-5,
        [](std::mt19937_64& rng) {
          auto p = std::make_shared<NestaParams>(small_nesta(3, 8, 4, 64.0, 2, rng));
          Var x = param({2, 3, 8}, 1.0, rng);
          auto ids = std::make_shared<std::vector<int>>(std::vector<int>{0, 1});
          return Problem{{{"eeg", x}, {"nesta.subject_matrices", p->subject_matrices}},
                         [p, x, ids] { return subject_transform(x, *ids, *p); }};
        }}},
      {"temporal_attention_block",
       {1e-4,
        [](std::mt19937_64& rng) {
          auto p = std::make_shared<NestaParams>(small_nesta(4, 16, 4, 64.0, 1, rng));
          Var x = param({2, 4, 16}, 1.0, rng);
          std::vector<std::pair<std::string, Var>> named;
          for (const auto& [n, v] : p->named())
            if (n.starts_with("nesta.block")) named.emplace_back(n, v);
          return Problem{with_prefix(named, {{"input", x}}),
                         [p, x] { return temporal_attention_block(x, *p, ForwardMode{}); }};
        }}},
      {"spectral_recompose",
       {1e-4,
        [](std::mt19937_64& rng) {
          // C=2, L=16 at 64 Hz: 4 Hz bins, every default band but delta populated.
          auto layout = std::make_shared<BandLayout>(BandLayout::make(16, 64.0, default_band_edges()));
          auto dft = std::make_shared<SpectralTransform>(SpectralTransform::make(16));
          const std::size_t nb = layout->n_bands();
          Var x = param({1, 2, 16}, 1.0, rng);
          Var residual = param({1, 2, 16}, 1.0, rng);
          Var wc = Var::parameter(Tensor({1, 2, 1}, std::vector<double>{0.3, 0.8}));
          Var ws = param({1, nb}, 0.1, rng, 0.2);
          Var alpha = Var::parameter(Tensor({1}, 0.6));
          Var gain = param({16}, 0.2, rng, 1.0);
          Var bias = param({16}, 0.2, rng);
          return Problem{{{"input", x}, {"residual", residual}, {"channel_weights", wc}, {"band_weights", ws},
                          {"alpha", alpha}, {"norm_gain", gain}, {"norm_bias", bias}},
                         [=] {
                           return spectral_recompose(band_decompose(x, *layout, *dft), wc, ws, residual, alpha, gain,
                                                     bias, *dft);
                         }};
        }}},
      {"neural_spectral_block",
       {1e-4,
        [](std::mt19937_64& rng) {
          auto p = std::make_shared<NestaParams>(small_nesta(3, 16, 4, 64.0, 1, rng));
          Var x = param({2, 3, 16}, 1.0, rng);
          std::vector<std::pair<std::string, Var>> named;
          for (const auto& [n, v] : p->named())
            if (n.starts_with("nesta.channel_") || n.starts_with("nesta.spectral_") || n == "nesta.alpha")
              named.emplace_back(n, v);
          return Problem{with_prefix(named, {{"input", x}}), [p, x] { return neural_spectral_block(x, *p); }};
        }}},
      {"project_embedding",
       {1e-4,
        [](std::mt19937_64& rng) {
          auto p = std::make_shared<NestaParams>(small_nesta(3, 8, 5, 64.0, 1, rng));
          Var x = param({2, 3, 8}, 1.0, rng);
          std::vector<std::pair<std::string, Var>> named;
          for (const auto& [n, v] : p->named())
            if (n.starts_with("nesta.proj_")) named.emplace_back(n, v);
          return Problem{with_prefix(named, {{"input", x}}), [p, x] { return project_embedding(x, *p); }};
        }}},
      {"encode",
       {1e-3,
        [](std::mt19937_64& rng) {
          auto p = std::make_shared<NestaParams>(small_nesta(4, 32, 8, 64.0, 2, rng));
          Var x = param({2, 4, 32}, 1.0, rng);
          auto ids = std::make_shared<std::vector<int>>(std::vector<int>{1, 0});
          return Problem{with_prefix(p->named(), {{"eeg", x}}),
                         [p, x, ids] { return encode(x, *ids, *p, ForwardMode{}); }};
        }}},
      {"mlp_baseline_encode",
       {1e-4,
        [](std::mt19937_64& rng) {
          MlpConfig cfg{4, 8, 6, 5, 0.25};
          auto p = std::make_shared<MlpParams>(MlpParams::init(cfg, rng()));
          randomize(p->named(), rng);
          Var x = param({2, 4, 8}, 1.0, rng);
          return Problem{with_prefix(p->named(), {{"eeg", x}}),
                         [p, x] { return mlp_baseline_encode(x, *p, ForwardMode{}); }};
        }}},
      {"eitra",
       {1e-3,
        [](std::mt19937_64& rng) {
          auto p = std::make_shared<AlignmentParams>(AlignmentParams::init({2, 8}, rng()));
          randomize(p->named(), rng);
          Var z = param({3, 8}, 0.35, rng);
          Var protos = param({4, 8}, 0.35, rng);
          return Problem{with_prefix(p->named(), {{"eeg_embeddings", z}, {"text_prototypes", protos}}),
                         [p, z, protos] { return align_embeddings(*p, z, protos); }};
        }}},
      {"info_nce",
       {1e-5,
        [](std::mt19937_64& rng) {
          Var a = param({4, 6}, 1.0, rng);
          Var b = param({4, 6}, 1.0, rng);
          return Problem{{{"z1", a}, {"z2", b}},
                         [a, b] { return info_nce(ad::l2_normalize_last(a), ad::l2_normalize_last(b), 0.5); }};
        }}},
      {"total_loss",
       {1e-5,
        [](std::mt19937_64& rng) {
          Var e = param({4, 6}, 1.0, rng);
          Var i = param({4, 6}, 1.0, rng);
          Var t = param({4, 6}, 1.0, rng);
          return Problem{{{"eeg", e}, {"image", i}, {"text", t}}, [e, i, t] {
                           return total_loss(ad::l2_normalize_last(e), ad::l2_normalize_last(i),
                                             ad::l2_normalize_last(t), 0.3, 0.5);
                         }};
        }}},
  };
  return r;
}

const Entry& lookup(const std::string& component) {
  const auto& r = registry();
  auto it = r.find(component);
  if (it == r.end()) {
    std::string known;
    for (const auto& [name, e] : r) known += (known.empty() ? "" : ", ") + name;
    throw ConfigError("no gradient check registered for '" + component + "' (known: " + known + ")");
  }
  return it->second;
}

double weighted_sum(const Tensor& out, const Tensor& r) {
  double s = 0.0;
  for (std::size_t i = 0; i < out.size(); ++i) s += out[i] * r[i];
  return s;
}

}  // namespace

std::vector<std::string> registered_gradient_checks() {
  std::vector<std::string> out;
  for (const auto& [name, e] : registry()) out.push_back(name);
  return out;
}

double default_gradient_tolerance(const std::string& component) { return lookup(component).tolerance; }

GradCheckReport gradient_check(const std::string& component, const GradCheckOptions& options) {
  const Entry& entry = lookup(component);
  std::mt19937_64 rng(derive_seed(options.seed, "gradcheck/" + component));
  Problem problem = entry.build(rng);

  Tensor weights;
  {
    ad::NoGradGuard guard;
    weights = randn(problem.forward().shape(), 1.0, rng);
  }
  for (auto& [name, v] : problem.inputs) v.zero_grad();
  Var out = problem.forward();
  ad::backward(ad::sum_all(ad::mul(out, Var::constant(weights))));

  GradCheckReport report;
  report.component = component;
  report.tolerance = options.tolerance.value_or(entry.tolerance);
  for (auto& [name, v] : problem.inputs) {
    const Tensor analytic = v.grad();
    Tensor numeric(v.shape());
    {
      ad::NoGradGuard guard;
      for (std::size_t i = 0; i < v.value().size(); ++i) {
        const double orig = v.value()[i];
        v.mutable_value()[i] = orig + options.step;
        const double up = weighted_sum(problem.forward().value(), weights);
        v.mutable_value()[i] = orig - options.step;
        const double down = weighted_sum(problem.forward().value(), weights);
        v.mutable_value()[i] = orig;
        numeric[i] = (up - down) / (2.0 * options.step);
      }
    }
    double diff = 0.0, na = 0.0, nn = 0.0;
    for (std::size_t i = 0; i < numeric.size(); ++i) {
      diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
      na += analytic[i] * analytic[i];
      nn += numeric[i] * numeric[i];
    }
    const double rel = std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nn), 1e-6});
    report.groups.push_back({name, numeric.size(), rel});
    report.max_rel_error = std::max(report.max_rel_error, rel);
  }
  report.passed = report.max_rel_error < report.tolerance;
  return report;
}

}  // namespace nmcrl

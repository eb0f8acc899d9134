// One PASS/FAIL line per acceptance criterion; exit status 1 if any fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "nmcrl/config.hpp"
#include "nmcrl/evaluation.hpp"
#include "nmcrl/experiments.hpp"
#include "nmcrl/nesta.hpp"
#include "nmcrl/seeding.hpp"
#include "nmcrl/training.hpp"

#ifndef NMCRL_CLI_PATH
#error "NMCRL_CLI_PATH must name the neural-mcrl executable"
#endif

using namespace nmcrl;
using ad::Var;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

int failures = 0;

void report(int id, bool ok, const std::string& what, const std::string& detail) {
  std::cout << (ok ? "PASS" : "FAIL") << " criterion " << id << ": " << what << " (" << detail << ")" << std::endl;
  if (!ok) ++failures;
}

void run(int id, const std::string& what, const std::function<std::pair<bool, std::string>()>& body) {
  try {
    auto [ok, detail] = body();
    report(id, ok, what, detail);
  } catch (const std::exception& e) {
    report(id, false, what, std::string("exception: ") + e.what());
  }
}

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(double v, int precision = 6) {
  std::ostringstream os;
  os.precision(precision);
  os << v;
  return os.str();
}

Tensor random_unit_rows(std::size_t n, std::size_t d, std::mt19937_64& rng) {
  std::normal_distribution<double> g;
  Tensor t({n, d});
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (auto& v : t.row(i, d)) s += (v = g(rng)) * v;
    for (auto& v : t.row(i, d)) v /= std::sqrt(s);
  }
  return t;
}

EmbeddingTable table_from(const Tensor& rows) {
  EmbeddingTable t;
  t.dim = rows.shape[1];
  for (std::size_t i = 0; i < rows.shape[0]; ++i)
    t.entries[{static_cast<int>(i), 0}] = {rows.row(i, t.dim).begin(), rows.row(i, t.dim).end()};
  return t;
}

// --- 1 -------------------------------------------------------------------------------------

std::pair<bool, std::string> gradient_suite() {
  const auto t0 = Clock::now();
  bool ok = true;
  std::ostringstream os;
  for (const auto& name : registered_gradient_checks()) {
    const auto r = gradient_check(name);
    ok = ok && r.passed;
    os << name << '=' << fmt(r.max_rel_error, 2) << '/' << fmt(r.tolerance, 1) << ' ';
  }
  const double secs = seconds_since(t0);
  os << "runtime=" << fmt(secs, 3) << "s";
  return {ok && secs < 300.0, os.str()};
}

// --- 2 -------------------------------------------------------------------------------------

std::pair<bool, std::string> spectral_invariants() {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> g;
  const std::size_t L = 250;
  const double fs = 250.0;
  const std::vector<BandEdge> partition{{"delta", 0.0, 4.0}, {"theta", 4.0, 8.0}, {"alpha", 8.0, 13.0},
                                        {"beta", 13.0, 30.0}, {"gamma", 30.0, 200.0}};
  auto layout = BandLayout::make(L, fs, partition);
  auto dft = SpectralTransform::make(L);

  // Round trip: alpha 1, unit attention, plain LayerNorm.
  const std::size_t B = 2, C = 3;
  Tensor e({B, C, L});
  for (auto& v : e.data) v = g(rng);
  auto spec = band_decompose(Var::constant(e), layout, dft);
  Tensor y = spectral_recompose(spec, Var::constant(Tensor({B, C, 1}, 1.0)), Var::constant(Tensor({B, 5}, 1.0)),
                                Var::constant(Tensor({B, C, L})), Var::constant(Tensor({1}, 1.0)),
                                Var::constant(Tensor({L}, 1.0)), Var::constant(Tensor({L}, 0.0)), dft)
                 .value();
  double ln_err = 0.0;
  for (std::size_t r = 0; r < B * C; ++r) {
    double mean = 0.0, var = 0.0;
    for (std::size_t t = 0; t < L; ++t) mean += e[r * L + t] / L;
    for (std::size_t t = 0; t < L; ++t) var += (e[r * L + t] - mean) * (e[r * L + t] - mean) / L;
    for (std::size_t t = 0; t < L; ++t)
      ln_err = std::max(ln_err, std::abs(y[r * L + t] - (e[r * L + t] - mean) / std::sqrt(var + 1e-5)));
  }

  // Parseval: one-sided band powers, doubled except at DC and Nyquist, give the time-domain energy.
  Tensor p = band_power(spec).value();
  double parseval = 0.0;
  for (std::size_t r = 0; r < B * C; ++r) {
    double energy = 0.0, dc = 0.0, nyq = 0.0, banded = 0.0;
    for (std::size_t t = 0; t < L; ++t) {
      energy += e[r * L + t] * e[r * L + t];
      dc += e[r * L + t];
      nyq += (t % 2 ? -1.0 : 1.0) * e[r * L + t];
    }
    dc = dc * dc / L;
    nyq = (L % 2 == 0) ? nyq * nyq / L : 0.0;
    for (std::size_t b = 0; b < 5; ++b) banded += p[r * 5 + b];
    parseval = std::max(parseval, std::abs(2.0 * banded - dc - nyq - energy) / energy);
  }

  // 10 Hz cosine against the standard bands.
  auto std_layout = BandLayout::make(L, fs, default_band_edges());
  Tensor x({1, 1, L});
  for (std::size_t t = 0; t < L; ++t) x[t] = std::cos(2.0 * std::numbers::pi * 10.0 * t / fs);
  Tensor cp = band_power(band_decompose(Var::constant(x), std_layout, dft)).value();
  const double total = std::accumulate(cp.data.begin(), cp.data.end(), 0.0);
  const double frac = cp[2] / total;

  const bool ok = ln_err <= 1e-5 && parseval <= 1e-6 && frac > 1.0 - 1e-9;
  return {ok, "layernorm_err=" + fmt(ln_err, 3) + " parseval_rel=" + fmt(parseval, 3) +
                  " alpha_fraction=1-" + fmt(1.0 - frac, 3)};
}

// --- 3 -------------------------------------------------------------------------------------

std::pair<bool, std::string> loss_correctness() {
  std::mt19937_64 rng(3);
  double worst = 0.0;
  for (std::size_t B = 1; B <= 8; ++B)
    for (int rep = 0; rep < 5; ++rep) {
      const double tau = 0.05 + 0.95 * std::uniform_real_distribution<double>()(rng);
      Tensor a = random_unit_rows(B, 16, rng), b = random_unit_rows(B, 16, rng);
      long double total = 0.0L;
      for (std::size_t i = 0; i < B; ++i) {
        std::vector<long double> s(B);
        for (std::size_t j = 0; j < B; ++j) {
          long double d = 0.0L;
          for (std::size_t f = 0; f < 16; ++f) d += (long double)a[i * 16 + f] * b[j * 16 + f];
          s[j] = d / tau;
        }
        long double z = 0.0L;
        for (auto v : s) z += std::exp(v);
        total += std::log(z) - s[i];
      }
      worst = std::max(worst, std::abs(info_nce(a, b, tau) - (double)(total / B)));
    }
  Tensor o({2, 2});
  o[0] = o[3] = 1.0;
  const double pair_err = std::abs(info_nce(o, o, 1.0) - std::log(1.0 + std::exp(-1.0)));
  Tensor e = random_unit_rows(6, 8, rng), i = random_unit_rows(6, 8, rng), t = random_unit_rows(6, 8, rng);
  const bool limits = total_loss(e, i, t, 1.0, 0.07) == info_nce(e, i, 0.07) &&
                      total_loss(e, i, t, 0.0, 0.07) == info_nce(e, t, 0.07);
  return {worst <= 1e-6 && pair_err <= 1e-6 && limits,
          "oracle_max_err=" + fmt(worst, 3) + " b2_err=" + fmt(pair_err, 3) +
              " eta_limits=" + (limits ? "exact" : "mismatch")};
}

// --- 4 -------------------------------------------------------------------------------------

std::pair<bool, std::string> chance_level() {
  SynthSpec s;
  s.n_classes = 68;
  s.n_unseen_classes = 60;
  s.n_subjects = 2;
  s.trials_per_class_per_subject = 42;
  s.class_separation = 0.0;
  s.seed = 4;
  auto bundle = generate_synthetic_dataset(s);
  bool ok = true;
  std::ostringstream os;
  for (EncoderKind enc : {EncoderKind::nesta, EncoderKind::mlp}) {
    TrainConfig c;
    c.encoder = enc;
    c.seed = 4;
    Model m = build_model(c, bundle.dataset, bundle.image, bundle.text_raw);
    for (std::size_t n : {5u, 10u, 50u}) {
      auto r = evaluate_unseen(m, bundle.dataset, bundle.image, {n, {1}, false, derive_seed(c.seed, "eval")});
      const double p = 1.0 / n, se = std::sqrt(p * (1.0 - p) / r.trials_evaluated);
      const double z = (r.top(1) - p) / se;
      ok = ok && std::abs(z) <= 3.0 && r.trials_evaluated >= 5000;
      os << to_string(enc) << "@" << n << "=" << fmt(r.top(1), 4) << "(z=" << fmt(z, 2) << ") ";
    }
  }
  os << "trials=" << bundle.dataset.split_indices(Split::unseen).size();
  return {ok, os.str()};
}

// --- 5 and 7 --------------------------------------------------------------------------------

struct ReferenceRun {
  TrainResult result;
  double seconds = 0.0;
  bool identity_at_start = false;
  std::size_t n_eval = 0;
};

ReferenceRun reference_run(const SyntheticBundle& bundle) {
  ReferenceRun out;
  TrainConfig c;
  Model initial = build_model(c, bundle.dataset, bundle.image, bundle.text_raw);
  const Tensor& m = initial.nesta()->subject_matrices.value();
  const std::size_t C = bundle.dataset.channels;
  out.identity_at_start = true;
  for (std::size_t k = 0; k < m.shape[0]; ++k)
    for (std::size_t i = 0; i < C; ++i)
      for (std::size_t j = 0; j < C; ++j)
        out.identity_at_start = out.identity_at_start && m[(k * C + i) * C + j] == (i == j ? 1.0 : 0.0);
  const auto t0 = Clock::now();
  out.result = train(c, bundle.dataset, bundle.image, bundle.text_raw);
  out.seconds = seconds_since(t0);
  out.n_eval = bundle.dataset.split_indices(Split::unseen).size();
  return out;
}

// --- 8 -------------------------------------------------------------------------------------

bool sh(const std::string& cmd) { return std::system((cmd + " >/dev/null 2>&1").c_str()) == 0; }

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::pair<bool, std::string> cli_determinism() {
  const fs::path dir = fs::temp_directory_path() / "nmcrl_acceptance_cli";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const std::string cli = std::string("\"") + NMCRL_CLI_PATH + "\"";
  const std::string d = "\"" + dir.string() + "\"";
  auto p = [&](const std::string& rel) { return "\"" + (dir / rel).string() + "\""; };
  if (!sh(cli + " synth --set n_classes=30 --set n_unseen_classes=8 --set trials_per_class_per_subject=4 --out " +
          p("data")))
    return {false, "synth failed"};
  const std::string data = " --data " + p("data/eeg") + " --image-emb " + p("data/image.json");
  if (!sh(cli + " train" + data + " --text-emb " + p("data/text.json") +
          " --set epochs=3 --set batch_size=16 --set seed=8 --out " + p("A")))
    return {false, "first train failed"};
  if (!sh(cli + " eval --ckpt " + p("A/checkpoint.nmck") + data + " --n-way 5 --k 1,5 --out " + p("repA.json")))
    return {false, "first eval failed"};
  if (!sh(cli + " train --from-manifest " + p("A/run_manifest.json") + " --out " + p("B")))
    return {false, "train from manifest failed"};
  if (!sh(cli + " eval --ckpt " + p("B/checkpoint.nmck") + data + " --n-way 5 --k 1,5 --out " + p("repB.json")))
    return {false, "second eval failed"};
  if (!sh(cli + " eval --from-manifest " + p("repA.json.manifest.json") + " --out " + p("repA2.json")))
    return {false, "eval from manifest failed"};
  (void)d;
  const bool reports = slurp(dir / "repA.json") == slurp(dir / "repB.json") &&
                       slurp(dir / "repA.json") == slurp(dir / "repA2.json") && !slurp(dir / "repA.json").empty();
  const bool ckpts = slurp(dir / "A/checkpoint.nmck") == slurp(dir / "B/checkpoint.nmck");
  const bool metrics = slurp(dir / "A/metrics.jsonl") == slurp(dir / "B/metrics.jsonl");
  return {reports && ckpts && metrics, std::string("reports=") + (reports ? "identical" : "differ") +
                                           " checkpoints=" + (ckpts ? "identical" : "differ") +
                                           " metrics=" + (metrics ? "identical" : "differ")};
}

// --- 9 -------------------------------------------------------------------------------------

std::pair<bool, std::string> evaluation_oracle() {
  std::mt19937_64 rng(9);
  const std::size_t T = 100, N = 50, F = 16;
  Tensor img = random_unit_rows(N, F, rng);
  auto cand = table_from(img);
  std::vector<int> labels(T);
  Tensor emb({T, F});
  std::normal_distribution<double> g(0.0, 0.3);
  for (std::size_t i = 0; i < T; ++i) {
    labels[i] = static_cast<int>(rng() % N);
    for (std::size_t f = 0; f < F; ++f) emb[i * F + f] = img[labels[i] * F + f] + g(rng);
  }
  const std::vector<std::size_t> ks{1, 5, 10};
  std::map<std::size_t, std::size_t> oracle_hits;
  std::size_t mismatched_trials = 0;
  for (std::size_t i = 0; i < T; ++i) {
    std::vector<double> sim(N);
    double ne = 0.0;
    for (std::size_t f = 0; f < F; ++f) ne += emb[i * F + f] * emb[i * F + f];
    for (std::size_t j = 0; j < N; ++j) {
      double dot = 0.0, nc = 0.0;
      for (std::size_t f = 0; f < F; ++f) {
        dot += emb[i * F + f] * img[j * F + f];
        nc += img[j * F + f] * img[j * F + f];
      }
      sim[j] = dot / (std::sqrt(ne) * std::sqrt(nc));
    }
    std::vector<std::size_t> order(N);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return sim[a] != sim[b] ? sim[a] > sim[b] : a < b; });
    const std::size_t rank = std::find(order.begin(), order.end(), static_cast<std::size_t>(labels[i])) - order.begin();
    Tensor one({1, F});
    std::copy(emb.row(i, F).begin(), emb.row(i, F).end(), one.data.begin());
    std::vector<int> l{labels[i]};
    auto r = zero_shot_classify(one, l, {}, cand, {0, ks, false, 0});
    for (std::size_t k : ks) {
      if (rank < k) ++oracle_hits[k];
      if (r.top(k) != (rank < k ? 1.0 : 0.0)) ++mismatched_trials;
    }
  }
  auto all = zero_shot_classify(emb, labels, {}, cand, {0, ks, false, 0});
  bool agg = true;
  std::ostringstream os;
  for (std::size_t k : ks) {
    agg = agg && all.top(k) == static_cast<double>(oracle_hits[k]) / T;
    os << "top" << k << "=" << all.top(k) << " ";
  }
  os << "per_trial_mismatches=" << mismatched_trials;
  return {agg && mismatched_trials == 0, os.str()};
}

}  // namespace

int main() {
  std::cout.setf(std::ios::unitbuf);
  run(1, "gradient suite passes within tolerances in under 5 minutes", gradient_suite);
  run(2, "spectral round trip, Parseval and 10 Hz alpha concentration", spectral_invariants);
  run(3, "InfoNCE matches brute-force oracle and eta limits are exact", loss_correctness);
  run(4, "untrained models score within 3 SE of 1/N for N in {5,10,50}", chance_level);

  SyntheticBundle reference = generate_synthetic_dataset(SynthSpec{});
  ReferenceRun ref;
  try {
    ref = reference_run(reference);
  } catch (const std::exception& e) {
    report(5, false, "desk-scale learning", std::string("exception: ") + e.what());
    report(7, false, "identity-initialised subject matrices", std::string("exception: ") + e.what());
  }
  if (!ref.result.history.empty()) {
    run(5, "reference run reaches 10-way top-1 >= 0.90 within budget", [&] {
      const auto& last = ref.result.history.back();
      const double top1 = last.topk.at(1);
      const double se = std::sqrt(0.1 * 0.9 / ref.n_eval);
      const double z = (top1 - 0.1) / se;
      const bool ok = top1 >= 0.90 && z >= 10.0 && ref.result.history.size() <= 50 && ref.seconds < 600.0;
      return std::pair{ok, "top1=" + fmt(top1, 4) + " top5=" + fmt(last.topk.at(5), 4) + " z_vs_chance=" +
                               fmt(z, 3) + " epochs=" + std::to_string(ref.result.history.size()) +
                               " seconds=" + fmt(ref.seconds, 4)};
    });
    run(7, "subject matrices start at identity and move during training", [&] {
      const Tensor& m = ref.result.checkpoint.tensor("nesta.subject_matrices");
      const std::size_t C = m.shape[1];
      double best = 0.0;
      std::ostringstream os;
      for (std::size_t k = 0; k < m.shape[0]; ++k) {
        double fro = 0.0;
        for (std::size_t i = 0; i < C; ++i)
          for (std::size_t j = 0; j < C; ++j) {
            const double d = m[(k * C + i) * C + j] - (i == j ? 1.0 : 0.0);
            fro += d * d;
          }
        best = std::max(best, std::sqrt(fro));
        os << "subject" << k << "_frobenius=" << fmt(std::sqrt(fro), 4) << " ";
      }
      os << "identity_at_start=" << (ref.identity_at_start ? "yes" : "no");
      return std::pair{ref.identity_at_start && best > 1e-4, os.str()};
    });
  }

  run(6, "ablation emits 6 rows under one seed; spectral flag changes the trajectory", [&] {
    TrainConfig base;
    const auto rep = run_ablation(base, reference.dataset, reference.image, reference.text_raw);
    bool seeds = rep.metadata.at("variant_seeds").size() == 6;
    for (const auto& v : rep.metadata.at("variant_seeds")) seeds = seeds && v.at("seed") == base.seed;
    const auto& full = rep.row("Full model");
    const bool rerouted = rep.row("w/o Neural-Spectral").step_losses != full.step_losses;
    const double delta = rep.row("w/o Alignment").topk.at(1) - full.topk.at(1);
    std::ostringstream os;
    os << "rows=" << rep.rows.size() << " seeds=" << (seeds ? "identical" : "differ")
       << " spectral_trajectory=" << (rerouted ? "differs" : "identical") << " full_top1=" << fmt(full.topk.at(1), 4)
       << " wo_alignment_top1_delta=" << fmt(delta, 4);
    return std::pair{rep.rows.size() == 6 && seeds && rerouted, os.str()};
  });
  run(8, "train + eval twice from one run manifest give bit-identical outputs", cli_determinism);
  run(9, "zero-shot scoring equals a brute-force sort on 100 trials", evaluation_oracle);

  std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << std::endl;
  return failures == 0 ? 0 : 1;
}

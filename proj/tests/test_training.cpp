#include <gtest/gtest.h>

#include <Eigen/QR>
#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <set>
#include <stdexcept>

#include "nmcrl/errors.hpp"
#include "nmcrl/seeding.hpp"
#include "nmcrl/training.hpp"
#include "test_util.hpp"

using namespace nmcrl;
using namespace nmcrl::testing_util;
using ad::Var;
namespace fs = std::filesystem;

namespace {

// -(1/B) sum_i [ s_ii - logsumexp_j s_ij ], s = z1 z2^T / tau, in long double.
double info_nce_oracle(const Tensor& z1, const Tensor& z2, double tau) {
  const std::size_t B = z1.shape[0], F = z1.shape[1];
  long double total = 0.0L;
  for (std::size_t i = 0; i < B; ++i) {
    std::vector<long double> s(B);
    for (std::size_t j = 0; j < B; ++j) {
      long double d = 0.0L;
      for (std::size_t f = 0; f < F; ++f) d += static_cast<long double>(z1[i * F + f]) * z2[j * F + f];
      s[j] = d / tau;
    }
    const long double mx = *std::max_element(s.begin(), s.end());
    long double z = 0.0L;
    for (long double v : s) z += std::exp(v - mx);
    total += -(s[i] - mx - std::log(z));
  }
  return static_cast<double>(total / B);
}

Tensor permute_rows(const Tensor& z, const std::vector<std::size_t>& perm) {
  const std::size_t F = z.shape[1];
  Tensor out(z.shape);
  for (std::size_t i = 0; i < perm.size(); ++i)
    std::copy(z.row(perm[i], F).begin(), z.row(perm[i], F).end(), out.row(i, F).begin());
  return out;
}

TrainConfig tiny_config(std::size_t epochs = 2) {
  TrainConfig c;
  c.epochs = epochs;
  c.batch_size = 8;
  c.seed = 5;
  c.heads = 2;
  c.alignment_rows = 4;
  return c;
}

}  // namespace

// --- objective ---------------------------------------------------------------------

TEST(InfoNce, SingleRowIsZero) {
  Tensor z({1, 3});
  z[0] = 1.0;
  EXPECT_EQ(info_nce(z, z, 0.07), 0.0);
}

TEST(InfoNce, OrthonormalPair) {
  Tensor z({2, 2});
  z[0] = 1.0;
  z[3] = 1.0;
  EXPECT_NEAR(info_nce(z, z, 1.0), std::log(1.0 + std::exp(-1.0)), 1e-12);
  EXPECT_NEAR(info_nce(z, z, 1.0), 0.31326, 1e-5);
}

TEST(InfoNce, MatchesBruteForceOracle) {
  std::mt19937_64 rng(1);
  for (std::size_t B = 1; B <= 8; ++B)
    for (double tau : {0.07, 0.5, 1.0}) {
      Tensor a = random_unit_rows(B, 6, rng), b = random_unit_rows(B, 6, rng);
      const double loss = info_nce(a, b, tau);
      EXPECT_NEAR(loss, info_nce_oracle(a, b, tau), 1e-6) << "B=" << B << " tau=" << tau;
      EXPECT_GE(loss, 0.0);
      EXPECT_NEAR(info_nce(Var::constant(a), Var::constant(b), tau).value()[0], loss, 1e-12);
    }
}

TEST(InfoNce, JointRowPermutation) {
  std::mt19937_64 rng(2);
  Tensor a = random_unit_rows(7, 5, rng), b = random_unit_rows(7, 5, rng);
  std::vector<std::size_t> perm(7);
  std::iota(perm.begin(), perm.end(), 0);
  for (int t = 0; t < 10; ++t) {
    std::shuffle(perm.begin(), perm.end(), rng);
    EXPECT_NEAR(info_nce(permute_rows(a, perm), permute_rows(b, perm), 0.1), info_nce(a, b, 0.1), 1e-7);
  }
}

TEST(InfoNce, IdentityPairingIsMinimal) {
  std::mt19937_64 rng(3);
  for (std::size_t B = 2; B <= 5; ++B) {
    Tensor z = random_unit_rows(B, 4, rng);
    const double base = info_nce(z, z, 0.2);
    std::vector<std::size_t> perm(B);
    std::iota(perm.begin(), perm.end(), 0);
    while (std::next_permutation(perm.begin(), perm.end())) EXPECT_GT(info_nce(z, permute_rows(z, perm), 0.2), base);
  }
}

TEST(InfoNce, InvariantUnderRotation) {
  std::mt19937_64 rng(4);
  const std::size_t B = 6, F = 5;
  Tensor a = random_unit_rows(B, F, rng), b = random_unit_rows(B, F, rng);
  for (int t = 0; t < 5; ++t) {
    Eigen::MatrixXd g(F, F);
    std::normal_distribution<double> n;
    for (std::size_t i = 0; i < F * F; ++i) g.data()[i] = n(rng);
    Eigen::MatrixXd q = Eigen::HouseholderQR<Eigen::MatrixXd>(g).householderQ();
    auto rotate = [&](const Tensor& z) {
      Tensor out(z.shape);
      for (std::size_t i = 0; i < B; ++i)
        for (std::size_t j = 0; j < F; ++j) {
          double s = 0.0;
          for (std::size_t k = 0; k < F; ++k) s += z[i * F + k] * q(k, j);
          out[i * F + j] = s;
        }
      return out;
    };
    EXPECT_NEAR(info_nce(rotate(a), rotate(b), 0.1), info_nce(a, b, 0.1), 1e-6);
  }
}

TEST(InfoNce, RejectsBadInputs) {
  std::mt19937_64 rng(5);
  Tensor z = random_unit_rows(3, 4, rng);
  EXPECT_THROW(info_nce(z, z, 0.0), std::domain_error);
  EXPECT_THROW(info_nce(z, z, -1.0), std::domain_error);
  Tensor off = z;
  off[0] *= 1.01;
  for (std::size_t j = 0; j < 4; ++j) off[j] *= 1.01;
  EXPECT_THROW(info_nce(off, z, 0.1), std::domain_error);
}

TEST(TotalLoss, Limits) {
  std::mt19937_64 rng(6);
  Tensor e = random_unit_rows(5, 6, rng), i = random_unit_rows(5, 6, rng), t = random_unit_rows(5, 6, rng);
  EXPECT_EQ(total_loss(e, i, t, 1.0, 0.1), info_nce(e, i, 0.1));
  EXPECT_EQ(total_loss(e, i, t, 0.0, 0.1), info_nce(e, t, 0.1));
  EXPECT_NEAR(total_loss(e, i, t, 0.5, 0.1), 0.5 * (info_nce(e, i, 0.1) + info_nce(e, t, 0.1)), 1e-7);
  EXPECT_EQ(total_loss(Var::constant(e), Var::constant(i), Var::constant(t), 1.0, 0.1).value()[0],
            info_nce(e, i, 0.1));
  EXPECT_ANY_THROW(total_loss(e, i, t, 1.5, 0.1));
  EXPECT_ANY_THROW(total_loss(e, i, t, -0.1, 0.1));
}

TEST(TotalLoss, SymmetricAveragesDirections) {
  std::mt19937_64 rng(7);
  Tensor e = random_unit_rows(4, 6, rng), i = random_unit_rows(4, 6, rng), t = random_unit_rows(4, 6, rng);
  const double expect = 0.3 * 0.5 * (info_nce(e, i, 0.2) + info_nce(i, e, 0.2)) +
                        0.7 * 0.5 * (info_nce(e, t, 0.2) + info_nce(t, e, 0.2));
  EXPECT_NEAR(total_loss(e, i, t, 0.3, 0.2, true), expect, 1e-12);
}

// --- optimiser -----------------------------------------------------------------------

TEST(Adam, FirstStepsMatchClosedForm) {
  Var w = Var::parameter(Tensor({3}));
  w.mutable_value().data = {1.0, -2.0, 0.5};
  Adam adam({w}, 0.1);
  double m[3] = {0, 0, 0}, v[3] = {0, 0, 0};
  std::vector<double> expect = w.value().data;
  for (int t = 1; t <= 3; ++t) {
    Var loss = ad::sum_all(ad::square(w));
    ad::backward(loss);
    for (int j = 0; j < 3; ++j) {
      const double g = 2.0 * expect[j];
      m[j] = 0.9 * m[j] + 0.1 * g;
      v[j] = 0.999 * v[j] + 0.001 * g * g;
      expect[j] -= 0.1 * (m[j] / (1 - std::pow(0.9, t))) / (std::sqrt(v[j] / (1 - std::pow(0.999, t))) + 1e-8);
    }
    adam.step();
    adam.zero_grad();
    for (int j = 0; j < 3; ++j) EXPECT_NEAR(w.value()[j], expect[j], 1e-12);
  }
  EXPECT_EQ(adam.steps(), 3u);
}

// --- model -------------------------------------------------------------------------------

TEST(Model, TrainableFollowsAblationFlags) {
  auto bundle = generate_synthetic_dataset(small_spec());
  auto names_of = [&](const TrainConfig& c) {
    Model m = build_model(c, bundle.dataset, bundle.image, bundle.text_raw);
    std::set<ad::Node*> live;
    for (const auto& v : m.trainable()) live.insert(v.node());
    std::set<std::string> out;
    for (const auto& [name, v] : m.named())
      if (live.count(v.node())) out.insert(name);
    return out;
  };
  TrainConfig full = tiny_config();
  auto all = names_of(full);
  EXPECT_TRUE(all.count("nesta.subject_matrices"));
  EXPECT_TRUE(all.count("nesta.alpha"));
  EXPECT_TRUE(std::any_of(all.begin(), all.end(), [](const std::string& n) { return n.starts_with("eitra."); }));

  TrainConfig c = full;
  c.ablation.subject_specific = false;
  EXPECT_FALSE(names_of(c).count("nesta.subject_matrices"));
  c = full;
  c.ablation.neural_spectral = false;
  for (const auto& n : names_of(c)) {
    EXPECT_NE(n, "nesta.alpha");
    EXPECT_FALSE(n.starts_with("nesta.channel_") || n.starts_with("nesta.spectral_")) << n;
  }
  c = full;
  c.ablation.alignment = false;
  for (const auto& n : names_of(c)) EXPECT_FALSE(n.starts_with("eitra.")) << n;
}

TEST(Model, NeuralSpectralOffForcesAlphaZero) {
  auto bundle = generate_synthetic_dataset(small_spec());
  TrainConfig c = tiny_config();
  c.ablation.neural_spectral = false;
  Model m = build_model(c, bundle.dataset, bundle.image, bundle.text_raw);
  EXPECT_EQ(m.nesta()->alpha.value()[0], 0.0);
}

TEST(Model, SubjectMatricesStartAtIdentity) {
  auto bundle = generate_synthetic_dataset(small_spec());
  Model m = build_model(tiny_config(), bundle.dataset, bundle.image, bundle.text_raw);
  const Tensor& s = m.nesta()->subject_matrices.value();
  const std::size_t C = bundle.dataset.channels;
  ASSERT_EQ(s.shape, (Shape{2, C, C}));
  for (std::size_t k = 0; k < 2; ++k)
    for (std::size_t i = 0; i < C; ++i)
      for (std::size_t j = 0; j < C; ++j) EXPECT_EQ(s[(k * C + i) * C + j], i == j ? 1.0 : 0.0);
}

TEST(Model, EmbeddingWidthMismatch) {
  auto bundle = generate_synthetic_dataset(small_spec());
  TrainConfig c = tiny_config();
  c.embed_dim = 12;
  EXPECT_THROW(build_model(c, bundle.dataset, bundle.image, bundle.text_raw), DataError);
  EXPECT_THROW(train(c, bundle.dataset, bundle.image, bundle.text_raw), DataError);
}

// --- training ------------------------------------------------------------------------------

TEST(Train, SameSeedSameTrajectory) {
  auto bundle = generate_synthetic_dataset(small_spec());
  auto a = train(tiny_config(), bundle.dataset, bundle.image, bundle.text_raw);
  auto b = train(tiny_config(), bundle.dataset, bundle.image, bundle.text_raw);
  ASSERT_EQ(a.history.size(), 2u);
  EXPECT_EQ(a.step_losses, b.step_losses);
  ASSERT_EQ(a.checkpoint.tensors.size(), b.checkpoint.tensors.size());
  for (std::size_t i = 0; i < a.checkpoint.tensors.size(); ++i)
    EXPECT_EQ(a.checkpoint.tensors[i].second.data, b.checkpoint.tensors[i].second.data);
  TrainConfig other = tiny_config();
  other.seed = 6;
  EXPECT_NE(train(other, bundle.dataset, bundle.image, bundle.text_raw).step_losses, a.step_losses);
}

TEST(Train, OrthogonalTenClassLossDecreases) {
  SynthSpec s = small_spec(3);
  s.n_classes = 10;
  s.n_unseen_classes = 2;
  s.embed_dim = 16;
  s.orthogonal_prototypes = true;
  s.trials_per_class_per_subject = 6;
  auto bundle = generate_synthetic_dataset(s);
  TrainConfig c = tiny_config(30);
  TrainOptions opt;
  opt.evaluate_each_epoch = false;
  auto r = train(c, bundle.dataset, bundle.image, bundle.text_raw, opt);
  ASSERT_EQ(r.history.size(), 30u);
  EXPECT_LT(r.history.back().loss, r.history.front().loss);
}

TEST(Train, EverythingOffWithBaselineEncoderStillTrains) {
  auto bundle = generate_synthetic_dataset(small_spec());
  TrainConfig c = tiny_config();
  c.encoder = EncoderKind::mlp;
  c.ablation = {false, false, false, false, false};
  auto dir = temp_dir("all_off");
  TrainOptions opt;
  opt.out_dir = dir;
  auto r = train(c, bundle.dataset, bundle.image, bundle.text_raw, opt);
  EXPECT_TRUE(fs::exists(dir / "checkpoint_epoch_001.nmck"));
  EXPECT_TRUE(fs::exists(dir / "checkpoint_epoch_002.nmck"));
  EXPECT_TRUE(fs::exists(dir / "checkpoint.nmck"));
  std::ifstream log(dir / "metrics.jsonl");
  std::string line;
  std::size_t lines = 0;
  while (std::getline(log, line)) {
    auto j = nlohmann::json::parse(line);
    EXPECT_TRUE(j.contains("loss") && j.contains("top1") && j.contains("top5"));
    ++lines;
  }
  EXPECT_EQ(lines, 2u);
  for (double l : r.step_losses) EXPECT_TRUE(std::isfinite(l));
}

TEST(Train, ConsistencyOffUsesRawDescriptions) {
  auto bundle = generate_synthetic_dataset(small_spec());
  TrainConfig c = tiny_config();
  auto a = train(c, bundle.dataset, bundle.image, bundle.text_raw);
  c.ablation.consistency = false;
  auto b = train(c, bundle.dataset, bundle.image, bundle.text_raw);
  EXPECT_NE(a.step_losses, b.step_losses);
}

TEST(Train, ReloadedCheckpointReproducesMetrics) {
  auto bundle = generate_synthetic_dataset(small_spec());
  TrainConfig c = tiny_config();
  auto dir = temp_dir("reload");
  TrainOptions opt;
  opt.out_dir = dir;
  auto r = train(c, bundle.dataset, bundle.image, bundle.text_raw, opt);
  for (std::size_t e = 1; e <= 2; ++e) {
    Checkpoint ck = load_checkpoint(dir / ("checkpoint_epoch_00" + std::to_string(e) + ".nmck"));
    Model m = restore_model(ck);
    EvalProtocol p{c.eval_n_way, c.eval_k, c.repetitions_averaged, derive_seed(c.seed, "eval")};
    auto report = evaluate_unseen(m, bundle.dataset, bundle.image, p);
    EXPECT_EQ(report.metrics, r.history[e - 1].topk);
    EXPECT_EQ(ck.metadata.at("metrics").at("top1").get<double>(), report.top(1));
  }
}

TEST(Train, CheckpointRoundTripIsBitExact) {
  auto bundle = generate_synthetic_dataset(small_spec());
  auto r = train(tiny_config(1), bundle.dataset, bundle.image, bundle.text_raw);
  auto path = temp_dir("ckpt") / "c.nmck";
  save_checkpoint(r.checkpoint, path);
  Checkpoint back = load_checkpoint(path);
  ASSERT_EQ(back.tensors.size(), r.checkpoint.tensors.size());
  for (std::size_t i = 0; i < back.tensors.size(); ++i) {
    EXPECT_EQ(back.tensors[i].first, r.checkpoint.tensors[i].first);
    EXPECT_EQ(back.tensors[i].second.data, r.checkpoint.tensors[i].second.data);
  }
  // Restoring and re-snapshotting is a fixed point.
  Checkpoint again = snapshot(restore_model(back), 1);
  for (std::size_t i = 0; i < back.tensors.size(); ++i)
    EXPECT_EQ(again.tensors[i].second.data, back.tensors[i].second.data);

  std::ofstream(path, std::ios::binary | std::ios::trunc) << "NOTACKPT";
  EXPECT_THROW(load_checkpoint(path), DataError);
}

TEST(Train, NonFiniteLossAborts) {
  auto bundle = generate_synthetic_dataset(small_spec());
  bundle.dataset.eeg[0] = std::numeric_limits<float>::quiet_NaN();
  EXPECT_THROW(train(tiny_config(), bundle.dataset, bundle.image, bundle.text_raw), NumericalError);
}

TEST(Train, EmptySeenSplit) {
  auto bundle = generate_synthetic_dataset(small_spec());
  Dataset d = bundle.dataset;
  std::vector<TrialInfo> trials;
  std::vector<float> eeg;
  for (std::size_t i = 0; i < d.trials.size(); ++i)
    if (d.unseen_classes.count(d.trials[i].class_id)) {
      trials.push_back(d.trials[i]);
      auto x = d.trial_eeg(i);
      eeg.insert(eeg.end(), x.begin(), x.end());
    }
  d.trials = trials;
  d.eeg = eeg;
  EXPECT_THROW(train(tiny_config(), d, bundle.image, bundle.text_raw), DataError);
}

// --- gradient checks ----------------------------------------------------------------------

TEST(GradientCheck, EveryRegisteredComponentPasses) {
  const auto names = registered_gradient_checks();
  for (const char* required : {"subject_transform", "temporal_attention_block", "spectral_recompose",
                               "project_embedding", "encode", "eitra", "info_nce"})
    EXPECT_NE(std::find(names.begin(), names.end(), required), names.end()) << required;
  for (const auto& n : names) {
    auto r = gradient_check(n);
    EXPECT_TRUE(r.passed) << n << " " << r.max_rel_error;
    EXPECT_LT(r.max_rel_error, default_gradient_tolerance(n));
    EXPECT_FALSE(r.groups.empty());
  }
  EXPECT_EQ(default_gradient_tolerance("subject_transform"), 1e-5);
  EXPECT_EQ(default_gradient_tolerance("spectral_recompose"), 1e-4);
  EXPECT_EQ(default_gradient_tolerance("encode"), 1e-3);
  EXPECT_EQ(default_gradient_tolerance("eitra"), 1e-3);
}

TEST(GradientCheck, ToleranceOverrideAndUnknownName) {
  GradCheckOptions o;
  o.tolerance = 1e-300;
  EXPECT_FALSE(gradient_check("project_embedding", o).passed);
  EXPECT_THROW(gradient_check("no_such_op"), ConfigError);
}

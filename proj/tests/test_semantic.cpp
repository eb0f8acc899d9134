#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "nmcrl/errors.hpp"
#include "nmcrl/semantic.hpp"
#include "test_util.hpp"

using namespace nmcrl;
using namespace nmcrl::testing_util;

namespace {

EmbeddingTable raw_table(std::size_t dim) {
  EmbeddingTable t;
  t.dim = dim;
  t.kind = EmbeddingKind::text_raw;
  return t;
}

}  // namespace

TEST(TextPrototypes, SingleDescriptionIsItsOwnPrototype) {
  std::mt19937_64 rng(1);
  auto t = raw_table(5);
  Tensor rows = random_unit_rows(3, 5, rng);
  for (int c = 0; c < 3; ++c) t.entries[{c, 0}] = {rows.row(c, 5).begin(), rows.row(c, 5).end()};
  auto p = aggregate_text_prototypes(t);
  EXPECT_EQ(p.kind, EmbeddingKind::text_prototype);
  ASSERT_EQ(p.entries.size(), 3u);
  for (int c = 0; c < 3; ++c)
    for (std::size_t j = 0; j < 5; ++j) EXPECT_NEAR(p.at(c)[j], t.at(c)[j], 1e-15);
}

TEST(TextPrototypes, AntipodalPairIsDegenerate) {
  auto t = raw_table(3);
  t.entries[{0, 0}] = {0.6, 0.8, 0.0};
  t.entries[{0, 1}] = {-0.6, -0.8, 0.0};
  EXPECT_THROW(aggregate_text_prototypes(t), DataError);
}

TEST(TextPrototypes, TwoAxesAverageToDiagonal) {
  auto t = raw_table(2);
  t.entries[{7, 0}] = {1.0, 0.0};
  t.entries[{7, 1}] = {0.0, 1.0};
  auto p = aggregate_text_prototypes(t);
  EXPECT_NEAR(p.at(7)[0], 1.0 / std::sqrt(2.0), 1e-15);
  EXPECT_NEAR(p.at(7)[1], 1.0 / std::sqrt(2.0), 1e-15);
}

TEST(TextPrototypes, PermutationOfDescriptionsIsExact) {
  std::mt19937_64 rng(2);
  const int K = 6;
  Tensor rows = random_unit_rows(K, 16, rng);
  std::vector<int> order(K);
  std::iota(order.begin(), order.end(), 0);
  std::vector<double> first;
  for (int trial = 0; trial < 20; ++trial) {
    std::shuffle(order.begin(), order.end(), rng);
    auto t = raw_table(16);
    for (int k = 0; k < K; ++k) t.entries[{0, k}] = {rows.row(order[k], 16).begin(), rows.row(order[k], 16).end()};
    auto p = aggregate_text_prototypes(t);
    if (trial == 0) first = p.at(0);
    else EXPECT_EQ(p.at(0), first);
  }
}

TEST(TextPrototypes, MatchesMeanThenNormalise) {
  std::mt19937_64 rng(3);
  auto t = raw_table(4);
  Tensor rows = random_unit_rows(3, 4, rng);
  for (int k = 0; k < 3; ++k) t.entries[{2, k}] = {rows.row(k, 4).begin(), rows.row(k, 4).end()};
  std::vector<double> mean(4, 0.0);
  for (int k = 0; k < 3; ++k)
    for (int j = 0; j < 4; ++j) mean[j] += rows[k * 4 + j] / 3.0;
  double n = 0.0;
  for (double v : mean) n += v * v;
  n = std::sqrt(n);
  auto p = aggregate_text_prototypes(t);
  for (int j = 0; j < 4; ++j) EXPECT_NEAR(p.at(2)[j], mean[j] / n, 1e-12);
}

TEST(Perturb, ZeroSigmaIsIdentity) {
  std::mt19937_64 rng(4);
  Tensor z = random_unit_rows(8, 6, rng);
  EXPECT_EQ(perturb_embeddings(z, {0.0, false, 1}).data, z.data);
  EXPECT_EQ(perturb_embeddings(z, {0.0, true, 1}).data, z.data);
}

TEST(Perturb, NegativeSigmaRejected) {
  Tensor z({2, 3}, 0.5);
  EXPECT_THROW(perturb_embeddings(z, {-0.1, false, 0}), std::domain_error);
}

TEST(Perturb, MonteCarloVariance) {
  Tensor z({1000, 100});
  Tensor out = perturb_embeddings(z, {0.1, false, 42});
  double mean = 0.0;
  for (double v : out.data) mean += v;
  mean /= static_cast<double>(out.size());
  double var = 0.0;
  for (double v : out.data) var += (v - mean) * (v - mean);
  var /= static_cast<double>(out.size() - 1);
  EXPECT_GE(var, 0.0095);
  EXPECT_LE(var, 0.0105);
}

TEST(Perturb, RenormalisedRowsAreUnit) {
  std::mt19937_64 rng(5);
  Tensor out = perturb_embeddings(random_unit_rows(50, 16, rng), {0.3, true, 9});
  for (std::size_t i = 0; i < 50; ++i) {
    double s = 0.0;
    for (double v : out.row(i, 16)) s += v * v;
    EXPECT_NEAR(std::sqrt(s), 1.0, 1e-6);
  }
}

TEST(Perturb, SeededReproducibility) {
  std::mt19937_64 rng(6);
  Tensor z = random_unit_rows(10, 8, rng);
  EXPECT_EQ(perturb_embeddings(z, {0.05, true, 3}).data, perturb_embeddings(z, {0.05, true, 3}).data);
  EXPECT_NE(perturb_embeddings(z, {0.05, true, 3}).data, perturb_embeddings(z, {0.05, true, 4}).data);
}

TEST(Perturb, VarOverloadMatchesTensorOverload) {
  std::mt19937_64 rng(7);
  Tensor z = random_unit_rows(4, 8, rng);
  NoiseSpec spec{0.2, true, 11};
  EXPECT_EQ(perturb_embeddings(ad::Var::constant(z), spec).value().data, perturb_embeddings(z, spec).data);
}

// ||theta|| for theta ~ N(0, sigma^2 I_F) follows sigma * chi_F. Its second
// moment is exactly sigma^2 F; its mean is sigma * sqrt(2) Gamma((F+1)/2) / Gamma(F/2).
TEST(Perturb, DisplacementMatchesChiDistribution) {
  const std::size_t n = 20000, F = 16;
  const double sigma = 0.1;
  Tensor z({n, F});
  Tensor out = perturb_embeddings(z, {sigma, false, 77});
  std::vector<double> d(n);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (double v : out.row(i, F)) s += v * v;
    d[i] = std::sqrt(s);
  }
  double mean = 0.0, sq = 0.0;
  for (double v : d) {
    mean += v;
    sq += v * v;
  }
  mean /= n;
  sq /= n;
  double var = 0.0;
  for (double v : d) var += (v - mean) * (v - mean);
  var /= (n - 1);
  const double se_mean = std::sqrt(var / n);
  const double chi_mean =
      sigma * std::sqrt(2.0) * std::exp(std::lgamma((F + 1) / 2.0) - std::lgamma(F / 2.0));
  EXPECT_NEAR(mean, chi_mean, 3.0 * se_mean);

  // RMS displacement: E||theta||^2 = sigma^2 F, Var ||theta||^2 = 2 sigma^4 F.
  const double se_sq = std::sqrt(2.0 * std::pow(sigma, 4) * F / n);
  EXPECT_NEAR(sq, sigma * sigma * F, 3.0 * se_sq);
  EXPECT_NEAR(std::sqrt(sq), sigma * std::sqrt(double(F)), 3.0 * se_sq / (2.0 * sigma * std::sqrt(double(F))));
}

#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "criteria.hpp"

using namespace vlp;

TEST(KMeans, SeparatedOneDimensionalBlobs) {
  Rng rng(1);
  Tensor x = Tensor::zeros({20, 1});
  for (std::size_t i = 0; i < 20; ++i) x.at(i, 0) = (i < 10 ? -10.0 : 10.0) + 0.1 * rng.normal();
  const auto r = kmeans2(x, rng);
  for (std::size_t i = 1; i < 20; ++i) EXPECT_EQ(r.labels[i] == r.labels[0], i < 10);
  EXPECT_FALSE(r.degenerate);
  EXPECT_EQ(r.centroids.shape(), (Shape{2, 1}));
}

TEST(KMeans, TwoPointsSplit) {
  Rng rng(2);
  const auto r = kmeans2(Tensor::matrix({{0, 1}, {3, 4}}), rng);
  EXPECT_NE(r.labels[0], r.labels[1]);
  EXPECT_EQ(r.objective, 0.0);
}

TEST(KMeans, IdenticalPointsAreDegenerate) {
  Rng rng(3);
  const auto r = kmeans2(Tensor::full({5, 3}, 2.5), rng);
  EXPECT_TRUE(r.degenerate);
  for (int l : r.labels) EXPECT_EQ(l, 0);
  for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(r.centroids.at(0, c), r.centroids.at(1, c));
}

TEST(KMeans, ObjectiveNonIncreasingAndNoBetterThanExhaustive) {
  Rng rng(4);
  for (int t = 0; t < 100; ++t) {
    const std::size_t n = 2 + rng.uniform_index(9);
    Tensor x = Tensor::zeros({n, 2});
    for (auto& v : x.data()) v = rng.normal();
    const auto r = kmeans2(x, rng);
    EXPECT_GE(r.objective, oracle::best_two_partition(oracle::to_matrix(x)) - 1e-12);
    for (std::size_t i = 1; i < r.objective_trace.size(); ++i)
      EXPECT_LE(r.objective_trace[i], r.objective_trace[i - 1] + 1e-12);
    for (double c : r.centroids.values()) EXPECT_TRUE(std::isfinite(c));
  }
}

TEST(Nmi, HandCases) {
  const std::vector<int> a{0, 0, 0, 1, 1, 1}, b{0, 0, 1, 1, 1, 1};
  EXPECT_DOUBLE_EQ(nmi(a, a), 1.0);
  EXPECT_DOUBLE_EQ(nmi(a, {1, 1, 1, 0, 0, 0}), 1.0);
  // Cells (0,0)=2, (0,1)=1, (1,1)=3.
  const double ha = std::log(2.0);
  const double hb = -(1.0 / 3.0) * std::log(1.0 / 3.0) - (2.0 / 3.0) * std::log(2.0 / 3.0);
  const double mi = (1.0 / 3.0) * std::log(2.0) + (1.0 / 6.0) * std::log(0.5) + 0.5 * std::log(1.5);
  EXPECT_NEAR(nmi(a, b), mi / std::sqrt(ha * hb), 1e-15);
  EXPECT_NEAR(nmi(a, b, NmiNormalization::kArithmetic), mi / (0.5 * (ha + hb)), 1e-15);
  EXPECT_EQ(nmi(a, {0, 0, 0, 0, 0, 0}), 0.0);
  EXPECT_THROW(nmi(a, {0, 1}), DimensionError);
}

TEST(Nmi, SymmetricBoundedAndMatchesContingency) {
  Rng rng(5);
  for (int t = 0; t < 500; ++t) {
    const std::size_t n = 1 + rng.uniform_index(10);
    std::vector<int> a(n), b(n);
    for (auto& v : a) v = static_cast<int>(rng.uniform_index(3));
    for (auto& v : b) v = static_cast<int>(rng.uniform_index(3));
    const double x = nmi(a, b);
    EXPECT_EQ(x, nmi(b, a));
    EXPECT_GE(x, 0.0);
    EXPECT_LE(x, 1.0);
    EXPECT_NEAR(x, oracle::contingency_nmi(a, b), 1e-12);
  }
}

TEST(NmiProfile, SeparatedAndSharedBlobs) {
  Rng rng(6);
  ModalityPartition truth;
  for (std::size_t i = 1; i <= 10; ++i) truth.vision.push_back(i);  // row 0 plays [CLS]
  for (std::size_t i = 11; i <= 16; ++i) truth.language.push_back(i);
  std::vector<std::vector<Tensor>> batch;
  std::vector<ModalityPartition> truths;
  Tape tape = Tape::inference();
  for (int e = 0; e < 20; ++e) {
    Tensor sep = concat_rows(tape, {Tensor::full({1, 4}, 50.0), criteria::blobs(10, 6, 4, 25.0, rng)});
    Tensor shared = concat_rows(tape, {Tensor::full({1, 4}, 50.0), criteria::blobs(10, 6, 4, 0.0, rng)});
    batch.push_back({sep, shared});
    truths.push_back(truth);
  }
  const auto prof = nmi_profile(batch, truths, rng);
  ASSERT_EQ(prof.mean.size(), 2u);
  EXPECT_EQ(prof.mean[0], 1.0);
  EXPECT_EQ(prof.stddev[0], 0.0);
  EXPECT_LT(prof.mean[1], 0.2);
  std::ostringstream os;
  write_nmi_csv(os, prof);
  EXPECT_EQ(os.str().substr(0, os.str().find('\n')), "layer,mean_nmi,std_nmi");
}

TEST(NmiProfile, AcceptanceSweep) {
  const auto v = criteria::nmi_criterion(55);
  EXPECT_TRUE(v.pass) << v.detail;
}

#include <gtest/gtest.h>

#include "criteria.hpp"

using namespace vlp;

TEST(MfrMask, KOneIsAnchorOnly) {
  Rng rng(1);
  const Tensor w = Tensor::full({5, 5}, 0.2);
  const auto plan = mfr_mask_plan(w, 1, rng);
  ASSERT_EQ(plan.size(), 1u);
  EXPECT_EQ(plan.positions[0], *plan.anchor);
}

TEST(MfrMask, ArgmaxOfAnchorRow) {
  const Tensor w = Tensor::matrix({{0.0, 0.9, 0.05, 0.05}, {0.25, 0.25, 0.25, 0.25}, {0.25, 0.25, 0.25, 0.25},
                                   {0.25, 0.25, 0.25, 0.25}});
  // Find a seed whose anchor is token 0.
  for (std::uint64_t s = 0; s < 200; ++s) {
    Rng probe(s);
    if (probe.uniform_index(4) != 0) continue;
    Rng rng(s);
    const auto plan = mfr_mask_plan(w, 2, rng);
    EXPECT_EQ(plan.positions, (std::vector<std::size_t>{0, 1}));
    return;
  }
  FAIL() << "no seed with anchor 0";
}

TEST(MfrMask, TiesGoToLowerIndex) {
  const Tensor w = Tensor::full({6, 6}, 1.0 / 6.0);
  for (std::uint64_t s = 0; s < 20; ++s) {
    Rng rng(s);
    const auto plan = mfr_mask_plan(w, 3, rng);
    std::vector<std::size_t> expected{*plan.anchor};
    for (std::size_t j = 0; expected.size() < 3; ++j)
      if (j != *plan.anchor) expected.push_back(j);
    EXPECT_EQ(plan.positions, expected);
  }
}

TEST(MfrMask, BlockContainment) {
  Tensor w = Tensor::zeros({8, 8});
  for (std::size_t i = 0; i < 8; ++i)
    for (std::size_t j = 0; j < 8; ++j)
      if (i / 4 == j / 4) w.at(i, j) = 0.1 + 0.05 * static_cast<double>((i * 3 + j) % 4);
  for (std::size_t i = 0; i < 8; ++i) {
    double s = 0;
    for (std::size_t j = 0; j < 8; ++j) s += w.at(i, j);
    for (std::size_t j = 0; j < 8; ++j) w.at(i, j) /= s;
  }
  for (std::uint64_t s = 0; s < 100; ++s) {
    Rng rng(s);
    const auto plan = mfr_mask_plan(w, 4, rng);
    for (auto p : plan.positions) EXPECT_EQ(p / 4, *plan.anchor / 4);
  }
}

TEST(MfrMask, ErrorsAndDeterminism) {
  Rng rng(1);
  const Tensor w = Tensor::full({4, 4}, 0.25);
  EXPECT_THROW(mfr_mask_plan(w, 5, rng), ConfigError);
  EXPECT_THROW(mfr_mask_plan(w, 0, rng), ConfigError);
  EXPECT_THROW(mfr_mask_plan(Tensor::zeros({3, 4}), 1, rng), DimensionError);
  Rng a(9), b(9);
  EXPECT_EQ(mfr_mask_plan(w, 3, a).positions, mfr_mask_plan(w, 3, b).positions);
}

TEST(MfrMask, RankingPropertyOnRandomAttention) {
  Rng rng(12);
  for (int t = 0; t < 500; ++t) {
    const std::size_t m = 2 + rng.uniform_index(20), k = 1 + rng.uniform_index(m);
    const auto w = oracle::random_row_stochastic(m, rng);
    const auto plan = mfr_mask_plan(oracle::to_tensor(w), k, rng);
    EXPECT_EQ(criteria::check_ranked_plan(plan, w[*plan.anchor], k), "");
  }
}

TEST(RandomMask, SizeAndDeterminism) {
  Rng a(3), b(3);
  const auto p = random_mask_plan(16, 0.25, a);
  EXPECT_EQ(p.size(), 4u);
  EXPECT_FALSE(p.anchor.has_value());
  EXPECT_EQ(p.positions, random_mask_plan(16, 0.25, b).positions);
  EXPECT_TRUE(std::is_sorted(p.positions.begin(), p.positions.end()));
  Rng c(1);
  EXPECT_THROW(random_mask_plan(4, 0.1, c), ConfigError);
}

TEST(RandomMask, PositionsUniform) {
  Rng rng(5);
  std::vector<double> hits(16, 0.0);
  const int draws = 20000;
  for (int d = 0; d < draws; ++d)
    for (auto p : random_mask_plan(16, 0.25, rng).positions) hits[p] += 1.0;
  const double p = 0.25, sigma = std::sqrt(p * (1 - p) / draws);
  for (double h : hits) EXPECT_LT(std::abs(h / draws - p), 4 * sigma);
}

TEST(CosineMask, DuplicateRanksFirstAndOrthogonalK1) {
  const Tensor f = Tensor::matrix({{1, 0, 0}, {0, 1, 0}, {1, 0, 0}, {0.5, 0.5, 0.1}});
  for (std::uint64_t s = 0; s < 30; ++s) {
    Rng rng(s);
    const auto plan = cosine_mask_plan(f, 2, rng);
    if (*plan.anchor == 0) EXPECT_EQ(plan.positions[1], 2u);
    if (*plan.anchor == 2) EXPECT_EQ(plan.positions[1], 0u);
  }
  Rng rng(0);
  const auto one = cosine_mask_plan(Tensor::identity(3), 1, rng);
  EXPECT_EQ(one.positions, (std::vector<std::size_t>{*one.anchor}));
}

TEST(CosineMask, HandOrdering) {
  // cos(0,1) = cos(1,2) = 1/√2, cos(0,2) = 0.
  const Tensor f = Tensor::matrix({{1, 0}, {1, 1}, {0, 1}});
  const std::vector<std::vector<std::size_t>> expected{{0, 1}, {1, 0}, {2, 1}};
  for (std::uint64_t s = 0; s < 30; ++s) {
    Rng rng(s);
    const auto plan = cosine_mask_plan(f, 2, rng);
    EXPECT_EQ(plan.positions, expected[*plan.anchor]);
  }
  Rng rng(0);
  EXPECT_THROW(cosine_mask_plan(Tensor::matrix({{1, 0}, {0, 0}}), 1, rng), NumericError);
}

TEST(MlmMask, ActionsAndReplacements) {
  Rng rng(7);
  MlmMaskOptions opt;
  opt.vocab = 64;
  for (int d = 0; d < 500; ++d) {
    const auto plan = mlm_mask_plan(12, rng, opt);
    EXPECT_EQ(plan.actions.size(), plan.size());
    EXPECT_EQ(plan.replacements.size(), plan.size());
    EXPECT_TRUE(std::is_sorted(plan.positions.begin(), plan.positions.end()));
    for (auto p : plan.positions) EXPECT_LT(p, 12u);
  }
  EXPECT_THROW(mlm_mask_plan(0, rng, opt), ContractError);
}

TEST(MlmMask, SerializesToText) {
  Rng rng(2);
  MlmMaskOptions opt;
  opt.vocab = 10;
  opt.select_prob = 1.0;
  const auto plan = mlm_mask_plan(3, rng, opt);
  const auto j = nlohmann::json::parse(plan.to_text());
  EXPECT_EQ(j.at("modality"), "language");
  EXPECT_EQ(j.at("positions").size(), 3u);
  EXPECT_EQ(j.at("actions").size(), 3u);
}

TEST(MaskPlans, AcceptanceSweep) {
  const auto v = criteria::mask_plan_criterion(99);
  EXPECT_TRUE(v.pass) << v.detail;
}

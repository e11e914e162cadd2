#include <algorithm>
#include <cmath>
#include <numbers>

#include <gtest/gtest.h>

#include "mulde/error.hpp"
#include "mulde/fast_scorer.hpp"
#include "mulde/pipeline.hpp"
#include "oracles.hpp"

namespace mulde {
namespace {

FeatureSet make_set(const Eigen::MatrixXd& rows) {
  FeatureSet s;
  s.dim = static_cast<int>(rows.cols());
  s.rows = rows;
  return s;
}

TEST(Standardizer, PopulationStdAndFloor) {
  Eigen::MatrixXd rows(2, 2);
  rows << 0.0, 5.0, 2.0, 5.0;
  const auto s = fit_standardizer(make_set(rows));
  EXPECT_EQ(s.mean(0), 1.0);
  EXPECT_EQ(s.std(0), 1.0);
  EXPECT_EQ(s.std(1), kDefaultStdFloor);
  EXPECT_EQ(apply_standardizer(s, s.mean), Eigen::VectorXd::Zero(2));
  EXPECT_LT((s.apply(s.mean + s.std) - Eigen::VectorXd::Ones(2)).norm(), 1e-7);
  EXPECT_THROW(fit_standardizer(make_set(Eigen::MatrixXd(0, 2))), UsageError);
  EXPECT_THROW(s.apply(Eigen::VectorXd::Zero(3)), ShapeError);
}

TEST(Standardizer, OwnTrainingSetHasUnitMoments) {
  Rng rng(1);
  Eigen::MatrixXd rows(500, 3);
  for (int i = 0; i < 500; ++i) rows.row(i) << 3 + 2 * rng.normal(), -1 + 0.1 * rng.normal(), rng.uniform();
  const auto s = fit_standardizer(make_set(rows));
  const auto z = s.apply_rows(rows);
  const Eigen::RowVectorXd mean = z.colwise().mean();
  const Eigen::RowVectorXd var = (z.rowwise() - mean).array().square().colwise().mean();
  EXPECT_LT(mean.cwiseAbs().maxCoeff(), 1e-9);
  EXPECT_LT((var.array() - 1.0).abs().maxCoeff(), 1e-9);
}

TEST(Standardizer, JsonRoundTrip) {
  Standardizer s{Eigen::Vector2d(1.0, -2.0), Eigen::Vector2d(0.5, 3.0), 1e-8};
  const auto back = standardizer_from_json(standardizer_to_json(s));
  EXPECT_EQ(back.mean, s.mean);
  EXPECT_EQ(back.std, s.std);
}

struct Fixture {
  EnergyNet net = oracle::random_net(3, {8, 8}, 5, 0.5);
  NoiseSchedule schedule = NoiseSchedule::linear(0.01, 1.0, 4);
  Standardizer standardizer{Eigen::Vector3d(0.5, -1.0, 2.0), Eigen::Vector3d(2.0, 0.5, 1.0), 1e-8};
  FeatureSet features;
  GaussianMixture gmm{{1.0}, {Eigen::VectorXd::Zero(4)}, {Eigen::MatrixXd::Identity(4, 4)}, 1e-12};

  Fixture() {
    features = make_set(Eigen::MatrixXd::Random(12, 3) * 3.0);
    const auto v = build_multiscale_vectors(net, standardizer.apply(features), schedule);
    gmm = fit_em(v, 2).mixture;
  }
};

TEST(ScoreRows, ComposesStandardizeEnergiesAndMixture) {
  Fixture f;
  const auto scores = score_rows(f.net, f.gmm, f.schedule, f.standardizer, f.features);
  ASSERT_EQ(scores.size(), 12u);
  const Eigen::VectorXd z = f.standardizer.apply(Eigen::VectorXd(f.features.rows.row(4).transpose()));
  Eigen::VectorXd v(4);
  for (int j = 0; j < 4; ++j) v(j) = f.net.forward(z, f.schedule.scales[static_cast<std::size_t>(j)]);
  EXPECT_NEAR(scores[4], f.gmm.nll(v), 1e-10);
}

TEST(ScoreRows, EmptyAndPermutation) {
  Fixture f;
  EXPECT_TRUE(score_rows(f.net, f.gmm, f.schedule, f.standardizer, make_set(Eigen::MatrixXd(0, 3))).empty());
  const auto scores = score_rows(f.net, f.gmm, f.schedule, f.standardizer, f.features);
  std::vector<std::size_t> perm = {3, 1, 0, 11, 7, 2};
  const auto sub = score_rows(f.net, f.gmm, f.schedule, f.standardizer, f.features.subset(perm));
  for (std::size_t i = 0; i < perm.size(); ++i) EXPECT_NEAR(sub[i], scores[perm[i]], 1e-12 * (1 + std::abs(sub[i])));
  EXPECT_THROW(score_rows(f.net, f.gmm, f.schedule, f.standardizer, make_set(Eigen::MatrixXd::Zero(2, 2))),
               ShapeError);
}

TEST(FastScorer, AgreesWithDoublePrecisionPath) {
  Fixture f;
  for (int L : {1, 4, 16, 21}) {
    const auto schedule = NoiseSchedule::linear(0.01, 1.0, L);
    const auto v = build_multiscale_vectors(f.net, f.standardizer.apply(f.features), schedule);
    const auto gmm = fit_em(v, 1).mixture;
    const FastScorer fast(f.net, schedule, f.standardizer, gmm);
    const auto exact = score_rows(f.net, gmm, schedule, f.standardizer, f.features);
    for (int i = 0; i < 12; ++i) {
      const Eigen::VectorXd x = f.features.rows.row(i).transpose();
      const auto e = fast.energies(x);
      EXPECT_LT((e - v.row(i).transpose()).cwiseAbs().maxCoeff(), 1e-4) << L;
      EXPECT_NEAR(fast.score(x), exact[static_cast<std::size_t>(i)], 1e-2 * (1 + std::abs(exact[static_cast<std::size_t>(i)])));
    }
  }
}

TEST(FastScorer, WideLayersWithRemainderRows) {
  const auto net = oracle::random_net(5, {37, 29, 11}, 6, 1.0);
  const auto schedule = NoiseSchedule::linear(0.001, 1.0, 16);
  Standardizer s{Eigen::VectorXd::Zero(5), Eigen::VectorXd::Ones(5), 1e-8};
  GaussianMixture gmm({1.0}, {Eigen::VectorXd::Zero(16)}, {Eigen::MatrixXd::Identity(16, 16)}, 1e-12);
  const FastScorer fast(net, schedule, s, gmm);
  Rng rng(2);
  const auto x = oracle::random_vector(rng, 5);
  const auto e = fast.energies(x);
  for (int j = 0; j < 16; ++j) {
    EXPECT_NEAR(e(j), net.forward(x, schedule.scales[static_cast<std::size_t>(j)]), 1e-4);
  }
  EXPECT_THROW(fast.energies(Eigen::VectorXd::Zero(4)), ShapeError);
}

std::vector<RowIndex> frame_index(const std::vector<std::pair<std::string, std::int64_t>>& rows) {
  std::vector<RowIndex> idx;
  for (const auto& [v, f] : rows) idx.push_back({v, f, std::nullopt, std::nullopt});
  return idx;
}

TEST(PoolObjects, MaxPerFrameAndEmptyFrameFallback) {
  const std::vector<double> scores = {0.2, 0.7, 0.4, 0.1, 0.9};
  const auto idx = frame_index({{"a", 0}, {"a", 0}, {"a", 1}, {"a", 3}, {"b", 0}});
  const std::map<std::string, std::int64_t> counts = {{"a", 5}, {"b", 1}};
  const auto series = pool_objects_to_frames(scores, idx, counts);
  ASSERT_EQ(series.size(), 2u);
  EXPECT_EQ(series[0].scores, (std::vector<double>{0.7, 0.4, 0.1, 0.1, 0.1}));
  EXPECT_EQ(series[1].scores, (std::vector<double>{0.9}));
  EXPECT_EQ(infer_frame_counts(idx), (std::map<std::string, std::int64_t>{{"a", 4}, {"b", 1}}));
  EXPECT_THROW(pool_objects_to_frames(scores, idx, {{"a", 2}, {"b", 1}}), ShapeError);
}

TEST(Fusion, ClipsAndSums) {
  const std::vector<ScoreStats> stats = {{0.0, 1.0}, {10.0, 2.0}};
  const auto fused = fuse_feature_types({{-0.5, 0.0}, {12.4, 10.0}}, stats);
  EXPECT_NEAR(fused[0], 1.2, 1e-12);
  EXPECT_EQ(fused[1], 0.0);
  const std::vector<ScoreStats> one = {{1.0, 0.5}};
  EXPECT_NEAR(fuse_feature_types({{2.0, 0.0}}, one)[0], 2.0, 1e-12);
  EXPECT_THROW(fuse_feature_types({{1.0, 2.0}, {1.0}}, stats), ShapeError);
}

TEST(Smoothing, KernelAndInvariants) {
  const auto k = gaussian_kernel(2.0);
  ASSERT_EQ(k.size(), 13u);
  double sum = 0.0;
  for (double v : k) sum += v;
  EXPECT_NEAR(sum, 1.0, 1e-15);

  ScoreSeries constant{"v", std::vector<double>(20, 3.5)};
  for (double v : smooth(constant, 4.0).scores) EXPECT_NEAR(v, 3.5, 1e-14);

  ScoreSeries s{"v", {1, 5, 2, 8, 3}};
  EXPECT_EQ(smooth(s, 0.0).scores, s.scores);
  for (double v : smooth(s, 3.0).scores) {
    EXPECT_GE(v, 1.0);
    EXPECT_LE(v, 8.0);
  }
  EXPECT_TRUE(smooth(s, 1.0).smoothed);
}

TEST(Smoothing, ImpulseReproducesKernel) {
  ScoreSeries impulse{"v", std::vector<double>(101, 0.0)};
  impulse.scores[50] = 1.0;
  const auto out = smooth(impulse, 3.0).scores;
  const double norm = [] {
    double z = 0.0;
    for (int i = -9; i <= 9; ++i) z += std::exp(-0.5 * i * i / 9.0);
    return z;
  }();
  for (int i = -9; i <= 9; ++i) EXPECT_NEAR(out[static_cast<std::size_t>(50 + i)], std::exp(-0.5 * i * i / 9.0) / norm, 1e-15);
  EXPECT_EQ(out[40], 0.0);
}

TEST(Smoothing, ReflectsAtBoundaries) {
  // Half-sample reflection: a step at the edge sees its own mirror.
  ScoreSeries s{"v", {1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0}};
  const auto k = gaussian_kernel(1.0);  // radius 3
  const auto out = smooth(s, 1.0).scores;
  EXPECT_NEAR(out[0], k[3] + k[2], 1e-15);  // offsets 0 and -1 (mirror of index 0)
}

TEST(PoolMultiscale, Modes) {
  Eigen::MatrixXd v(1, 3);
  v << -1.0, 0.0, 2.0;
  const std::vector<ScoreStats> stats(3, ScoreStats{0.0, 1.0});
  EXPECT_EQ(pool_multiscale(v, stats, PoolMode::kMax)[0], 2.0);
  EXPECT_NEAR(pool_multiscale(v, stats, PoolMode::kAvg)[0], 1.0 / 3.0, 1e-15);
  EXPECT_EQ(pool_multiscale(v, stats, PoolMode::kMedian)[0], 0.0);

  Eigen::MatrixXd one(2, 1);
  one << 3.0, 5.0;
  const std::vector<ScoreStats> s1 = {{1.0, 2.0}};
  for (auto m : {PoolMode::kMax, PoolMode::kAvg, PoolMode::kMedian}) EXPECT_EQ(pool_multiscale(one, s1, m)[1], 2.0);
  EXPECT_THROW(parse_pool_mode("mean"), UsageError);
  EXPECT_EQ(parse_pool_mode("median"), PoolMode::kMedian);
}

TEST(GradientNorm, ZeroNetScoresZero) {
  EnergyNet net(3, {4}, {0.01, 1.0});
  const auto schedule = NoiseSchedule::linear(0.01, 1.0, 3);
  Standardizer s{Eigen::VectorXd::Zero(3), Eigen::VectorXd::Ones(3), 1e-8};
  const auto features = make_set(Eigen::MatrixXd::Random(4, 3));
  const auto norms = gradient_norm_vectors(net, schedule, s, features);
  EXPECT_TRUE(norms.isZero());
  const std::vector<ScoreStats> stats(3, ScoreStats{0.0, 1.0});
  for (double v : gradient_norm_score(net, schedule, s, features, stats, PoolMode::kMax)) EXPECT_EQ(v, 0.0);
}

TEST(GradientNorm, InvariantToEnergyOffset) {
  auto net = oracle::random_net(3, {6}, 3);
  const auto schedule = NoiseSchedule::linear(0.01, 1.0, 3);
  Standardizer s{Eigen::VectorXd::Zero(3), Eigen::VectorXd::Ones(3), 1e-8};
  const auto features = make_set(Eigen::MatrixXd::Random(4, 3));
  const auto before = gradient_norm_vectors(net, schedule, s, features);
  net.mutable_params().layers.back().bias(0) += 10.0;
  EXPECT_EQ(gradient_norm_vectors(net, schedule, s, features), before);
}

}  // namespace
}  // namespace mulde

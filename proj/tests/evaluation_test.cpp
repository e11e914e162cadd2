#include <algorithm>
#include <cmath>

#include <gtest/gtest.h>

#include "mulde/evaluation.hpp"
#include "mulde/rng.hpp"
#include "oracles.hpp"

namespace mulde {
namespace {

TEST(RocAuc, Examples) {
  EXPECT_EQ(roc_auc(std::vector<double>{0.1, 0.9, 0.8}, std::vector<int>{0, 1, 0}), 1.0);
  EXPECT_EQ(roc_auc(std::vector<double>{0.5, 0.5}, std::vector<int>{0, 1}), 0.5);
  EXPECT_FALSE(roc_auc(std::vector<double>{0.1, 0.2}, std::vector<int>{1, 1}).has_value());
}

std::vector<LabeledSeries> random_videos(Rng& rng, int n_videos) {
  std::vector<LabeledSeries> videos;
  for (int v = 0; v < n_videos; ++v) {
    LabeledSeries s;
    s.video_id = "v" + std::to_string(v);
    const auto n = 2 + rng.uniform_index(30);
    for (std::uint64_t i = 0; i < n; ++i) {
      // Coarse grid so ties are common.
      s.scores.push_back(static_cast<double>(rng.uniform_index(8)) / 4.0);
      s.labels.push_back(rng.uniform() < 0.3 ? 1 : 0);
    }
    videos.push_back(std::move(s));
  }
  return videos;
}

TEST(RocAuc, MatchesBruteForceOnRandomInstancesWithTies) {
  Rng rng(1);
  int checked = 0;
  for (int t = 0; t < 200; ++t) {
    auto videos = random_videos(rng, 1 + static_cast<int>(rng.uniform_index(5)));
    std::vector<double> all_s;
    std::vector<int> all_l;
    double macro_sum = 0.0;
    int macro_n = 0;
    for (const auto& v : videos) {
      all_s.insert(all_s.end(), v.scores.begin(), v.scores.end());
      all_l.insert(all_l.end(), v.labels.begin(), v.labels.end());
      const bool both = std::count(v.labels.begin(), v.labels.end(), 1) > 0 &&
                        std::count(v.labels.begin(), v.labels.end(), 0) > 0;
      if (both) {
        macro_sum += oracle::brute_auc(v.scores, v.labels);
        ++macro_n;
      }
    }
    const auto micro = micro_auc(videos);
    const bool defined = std::count(all_l.begin(), all_l.end(), 1) > 0 && std::count(all_l.begin(), all_l.end(), 0) > 0;
    ASSERT_EQ(micro.has_value(), defined);
    if (defined) {
      EXPECT_NEAR(*micro, oracle::brute_auc(all_s, all_l), 1e-12);
      ++checked;
    }
    const auto macro = macro_auc(videos);
    ASSERT_EQ(macro.auc.has_value(), macro_n > 0);
    if (macro_n > 0) EXPECT_NEAR(*macro.auc, macro_sum / macro_n, 1e-12);
    EXPECT_EQ(macro.excluded.size(), videos.size() - static_cast<std::size_t>(macro_n));
  }
  EXPECT_GT(checked, 150);
}

TEST(MacroAuc, AveragesPerVideo) {
  std::vector<LabeledSeries> videos = {
      {"a", {0.1, 0.9}, {0, 1}},
      {"b", {0.5, 0.5}, {0, 1}},
      {"c", {0.3, 0.4}, {0, 0}},
  };
  const auto m = macro_auc(videos);
  EXPECT_EQ(*m.auc, 0.75);
  EXPECT_EQ(m.excluded, std::vector<std::string>{"c"});
  const auto single = macro_auc(std::span(videos).first(1));
  EXPECT_EQ(*single.auc, 1.0);
  EXPECT_FALSE(macro_auc(std::span(videos).last(1)).auc.has_value());
}

TEST(MicroAuc, SingleVideoAndShuffleInvariance) {
  Rng rng(2);
  auto videos = random_videos(rng, 3);
  videos[0].labels[0] = 1;
  videos[0].labels[1] = 0;
  EXPECT_EQ(micro_auc(std::span(videos).first(1)), roc_auc(videos[0].scores, videos[0].labels));
  std::vector<LabeledSeries> swapped = {videos[2], videos[0], videos[1]};
  EXPECT_NEAR(*micro_auc(swapped), *micro_auc(videos), 1e-15);

  // Disjoint score ranges: every anomaly of the second video outranks everything.
  std::vector<LabeledSeries> disjoint = {{"a", {0.1, 0.2, 0.3}, {0, 1, 0}}, {"b", {5.0, 6.0}, {0, 1}}};
  EXPECT_NEAR(*micro_auc(disjoint), oracle::brute_auc({0.1, 0.2, 0.3, 5.0, 6.0}, {0, 1, 0, 0, 1}), 1e-15);
}

TEST(EvalReport, JsonHasFieldsAndNulls) {
  std::vector<LabeledSeries> videos = {{"a", {0.1, 0.9}, {0, 1}}, {"c", {0.3, 0.4}, {0, 0}}};
  const auto report = evaluate(videos);
  EXPECT_EQ(report.n_videos_excluded, 1);
  const auto doc = report_to_json(report);
  EXPECT_EQ(doc.at("micro_auc").get<double>(), 1.0);
  EXPECT_TRUE(doc.at("per_video_auc")[1].at("auc").is_null());
}

TEST(AttachLabels, FrameLabelIsMaxOfRowsAndUnlabeledDropped) {
  std::vector<ScoreSeries> series = {{"a", {0.1, 0.2, 0.3}}};
  std::vector<RowIndex> index = {
      {"a", 0, 1, 0}, {"a", 0, 2, 1}, {"a", 2, std::nullopt, 0}, {"a", 1, std::nullopt, std::nullopt}};
  std::size_t dropped = 0;
  const auto labeled = attach_frame_labels(series, index, &dropped);
  ASSERT_EQ(labeled.size(), 1u);
  EXPECT_EQ(labeled[0].labels, (std::vector<int>{1, 0}));
  EXPECT_EQ(labeled[0].scores, (std::vector<double>{0.1, 0.3}));
  EXPECT_EQ(dropped, 1u);
}

TEST(Spearman, RanksWithTies) {
  EXPECT_NEAR(*spearman(std::vector<double>{1, 2, 3, 4}, std::vector<double>{10, 20, 30, 40}), 1.0, 1e-15);
  EXPECT_NEAR(*spearman(std::vector<double>{1, 2, 3, 4}, std::vector<double>{4, 3, 2, 1}), -1.0, 1e-15);
  EXPECT_NEAR(*spearman(std::vector<double>{1, 2, 2, 3}, std::vector<double>{1, 3, 2, 4}), 0.9486832980505138, 1e-12);
  EXPECT_FALSE(spearman(std::vector<double>{1, 1}, std::vector<double>{1, 2}).has_value());
}

TEST(Sweep, SingleScaleScheduleGivesOnePoint) {
  const auto net = oracle::random_net(2, {6}, 4);
  FeatureSet f;
  f.dim = 2;
  f.rows = Eigen::MatrixXd::Random(6, 2);
  for (int i = 0; i < 6; ++i) f.index.push_back({"v", i, std::nullopt, i % 3 == 0 ? 1 : 0});
  Standardizer s{Eigen::VectorXd::Zero(2), Eigen::VectorXd::Ones(2), 1e-8};
  const auto points = sweep_single_sigma(net, NoiseSchedule::linear(0.2, 0.2, 1), s, f);
  ASSERT_EQ(points.size(), 1u);
  std::vector<double> scores;
  std::vector<int> labels;
  for (int i = 0; i < 6; ++i) {
    scores.push_back(net.forward(f.rows.row(i).transpose(), 0.2));
    labels.push_back(i % 3 == 0 ? 1 : 0);
  }
  EXPECT_NEAR(*points[0].micro_auc, oracle::brute_auc(scores, labels), 1e-15);
}

}  // namespace
}  // namespace mulde

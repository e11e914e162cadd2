#pragma once

#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "mulde/datasets.hpp"
#include "mulde/energy_net.hpp"
#include "mulde/gmm.hpp"
#include "mulde/pipeline.hpp"

namespace mulde {

struct LabeledSeries {
  std::string video_id;
  std::vector<double> scores;
  std::vector<int> labels;  // 1 = anomalous frame
};

/// Mann-Whitney AUC with ties credited 0.5. Returns nullopt when the labels
/// contain a single class (AUC undefined).
std::optional<double> roc_auc(std::span<const double> scores, std::span<const int> labels);

/// AUC over the concatenation of all frames of all videos.
std::optional<double> micro_auc(std::span<const LabeledSeries> videos);

struct MacroAuc {
  std::optional<double> auc;  // nullopt when no video has both classes
  std::vector<std::pair<std::string, std::optional<double>>> per_video;
  std::vector<std::string> excluded;  // single-class videos
};

/// Mean of per-video AUCs; single-class videos are excluded and reported.
MacroAuc macro_auc(std::span<const LabeledSeries> videos);

struct EvalReport {
  std::optional<double> micro_auc;
  std::optional<double> macro_auc;
  std::vector<std::pair<std::string, std::optional<double>>> per_video_auc;
  int n_videos_excluded = 0;
};

EvalReport evaluate(std::span<const LabeledSeries> videos);
nlohmann::json report_to_json(const EvalReport& report);

/// Attaches frame labels from the index (frame label = max over its rows'
/// labels). Frames without a labeled row are dropped; `dropped` counts them.
std::vector<LabeledSeries> attach_frame_labels(std::span<const ScoreSeries> series,
                                               std::span<const RowIndex> index,
                                               std::size_t* dropped = nullptr);

/// Spearman rank correlation (average ranks for ties). nullopt when either
/// input is constant or the lengths differ or are below 2.
std::optional<double> spearman(std::span<const double> a, std::span<const double> b);

struct SweepPoint {
  double sigma;
  std::optional<double> micro_auc;
};

/// For each scale, f(., sigma_j) itself is the row score (no mixture); rows
/// are max-pooled to frames and scored by micro AUC. `features` must carry a
/// labeled index.
std::vector<SweepPoint> sweep_single_sigma(const EnergyNet& net, const NoiseSchedule& schedule,
                                           const Standardizer& standardizer,
                                           const FeatureSet& features);

}  // namespace mulde

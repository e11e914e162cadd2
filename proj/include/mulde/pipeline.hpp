#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "mulde/datasets.hpp"
#include "mulde/energy_net.hpp"
#include "mulde/gmm.hpp"

namespace mulde {

constexpr double kDefaultStdFloor = 1e-8;

/// Component-wise feature standardization fitted on training data.
struct Standardizer {
  Eigen::VectorXd mean;
  Eigen::VectorXd std;  // population std, floored at epsilon
  double epsilon = kDefaultStdFloor;

  Eigen::VectorXd apply(const Eigen::VectorXd& x) const;
  /// Standardizes every row of `rows` (N x d).
  Eigen::MatrixXd apply_rows(const Eigen::MatrixXd& rows) const;
  FeatureSet apply(const FeatureSet& set) const;
};

Standardizer fit_standardizer(const FeatureSet& train, double epsilon = kDefaultStdFloor);
Eigen::VectorXd apply_standardizer(const Standardizer& s, const Eigen::VectorXd& x);

nlohmann::json standardizer_to_json(const Standardizer& s);
Standardizer standardizer_from_json(const nlohmann::json& doc);

/// Mean and population std of a scalar score (or of each column of a matrix).
struct ScoreStats {
  double mean = 0.0;
  double std = 1.0;
};

ScoreStats fit_score_stats(std::span<const double> scores, double epsilon = kDefaultStdFloor);
std::vector<ScoreStats> fit_column_stats(const Eigen::MatrixXd& vectors,
                                         double epsilon = kDefaultStdFloor);

/// Per-frame scores of one video, ordered by frame index.
struct ScoreSeries {
  std::string video_id;
  std::vector<double> scores;
  bool smoothed = false;
  double smoothing_std = 0.0;
};

/// Raw features -> standardize -> multiscale energies -> GMM negative log-likelihood.
std::vector<double> score_rows(const EnergyNet& net, const GaussianMixture& gmm,
                               const NoiseSchedule& schedule, const Standardizer& standardizer,
                               const FeatureSet& features);

/// Object scores -> frame scores (max over the frame's objects). Frames
/// without any row receive the minimum row score of their video. Videos are
/// returned in the iteration order of `frame_counts`.
std::vector<ScoreSeries> pool_objects_to_frames(std::span<const double> row_scores,
                                                std::span<const RowIndex> index,
                                                const std::map<std::string, std::int64_t>& frame_counts);

/// Frame count per video inferred as max(frame_index) + 1.
std::map<std::string, std::int64_t> infer_frame_counts(std::span<const RowIndex> index);

/// Sum over feature types of max(0, (score - mean_t) / std_t).
/// `per_type[t][i]` is the score of frame i under feature type t.
std::vector<double> fuse_feature_types(const std::vector<std::vector<double>>& per_type,
                                       std::span<const ScoreStats> training_stats);

/// Discrete Gaussian kernel with radius ceil(3 * std), normalized to sum 1.
std::vector<double> gaussian_kernel(double kernel_std);

/// Gaussian temporal smoothing with reflected boundaries. kernel_std = 0 is the identity.
ScoreSeries smooth(const ScoreSeries& series, double kernel_std);

enum class PoolMode { kMax, kAvg, kMedian };

PoolMode parse_pool_mode(const std::string& name);

/// z-score every column with the training stats, then pool each row.
std::vector<double> pool_multiscale(const Eigen::MatrixXd& vectors,
                                    std::span<const ScoreStats> column_stats, PoolMode mode);

/// Per row and scale |grad_x f(x, sigma_j)|_2 on standardized rows (N x L).
Eigen::MatrixXd gradient_norm_vectors(const EnergyNet& net, const NoiseSchedule& schedule,
                                      const Standardizer& standardizer, const FeatureSet& features);

/// Gradient-norm baseline aggregated by multiscale pooling.
std::vector<double> gradient_norm_score(const EnergyNet& net, const NoiseSchedule& schedule,
                                        const Standardizer& standardizer, const FeatureSet& features,
                                        std::span<const ScoreStats> column_stats, PoolMode mode);

/// Gradient-norm baseline aggregated by a mixture fitted on gradient-norm vectors.
std::vector<double> gradient_norm_score(const EnergyNet& net, const NoiseSchedule& schedule,
                                        const Standardizer& standardizer, const FeatureSet& features,
                                        const GaussianMixture& gmm);

}  // namespace mulde

#include "mulde/pipeline.hpp"

#include <algorithm>
#include <cmath>

#include "mulde/error.hpp"

namespace mulde {

// --- Standardizer -----------------------------------------------------------

Standardizer fit_standardizer(const FeatureSet& train, double epsilon) {
  if (train.size() == 0) throw UsageError("fit_standardizer: empty training set");
  if (!(epsilon > 0.0)) throw UsageError("fit_standardizer: epsilon must be positive");
  Standardizer s;
  s.epsilon = epsilon;
  s.mean = train.rows.colwise().mean().transpose();
  const Eigen::MatrixXd centered = train.rows.rowwise() - s.mean.transpose();
  s.std = centered.array().square().colwise().mean().sqrt().transpose().cwiseMax(epsilon);
  return s;
}

Eigen::VectorXd Standardizer::apply(const Eigen::VectorXd& x) const {
  if (x.size() != mean.size()) {
    throw ShapeError("standardizer: expected dimension " + std::to_string(mean.size()) + ", got " +
                     std::to_string(x.size()));
  }
  return (x - mean).cwiseQuotient(std);
}

Eigen::MatrixXd Standardizer::apply_rows(const Eigen::MatrixXd& rows) const {
  if (rows.cols() != mean.size() && rows.rows() > 0) {
    throw ShapeError("standardizer: expected dimension " + std::to_string(mean.size()) + ", got " +
                     std::to_string(rows.cols()));
  }
  if (rows.rows() == 0) return Eigen::MatrixXd(0, mean.size());
  return (rows.rowwise() - mean.transpose()).array().rowwise() / std.transpose().array();
}

FeatureSet Standardizer::apply(const FeatureSet& set) const {
  FeatureSet out;
  out.dim = static_cast<int>(mean.size());
  out.rows = apply_rows(set.rows);
  out.index = set.index;
  return out;
}

Eigen::VectorXd apply_standardizer(const Standardizer& s, const Eigen::VectorXd& x) {
  return s.apply(x);
}

nlohmann::json standardizer_to_json(const Standardizer& s) {
  return {{"mean", std::vector<double>(s.mean.data(), s.mean.data() + s.mean.size())},
          {"std", std::vector<double>(s.std.data(), s.std.data() + s.std.size())},
          {"epsilon", s.epsilon}};
}

Standardizer standardizer_from_json(const nlohmann::json& doc) {
  try {
    const auto mean = doc.at("mean").get<std::vector<double>>();
    const auto std = doc.at("std").get<std::vector<double>>();
    if (mean.size() != std.size()) throw FormatError("standardizer: mean/std length mismatch", 0);
    Standardizer s;
    s.epsilon = doc.at("epsilon").get<double>();
    s.mean = Eigen::Map<const Eigen::VectorXd>(mean.data(), static_cast<Eigen::Index>(mean.size()));
    s.std = Eigen::Map<const Eigen::VectorXd>(std.data(), static_cast<Eigen::Index>(std.size()));
    if ((s.std.array() <= 0.0).any()) throw FormatError("standardizer: nonpositive std", 0);
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("standardizer: ") + e.what(), 0);
  }
}

// --- Score statistics -------------------------------------------------------

ScoreStats fit_score_stats(std::span<const double> scores, double epsilon) {
  if (scores.empty()) throw UsageError("fit_score_stats: no scores");
  double mean = 0.0;
  for (double s : scores) mean += s;
  mean /= static_cast<double>(scores.size());
  double var = 0.0;
  for (double s : scores) var += (s - mean) * (s - mean);
  var /= static_cast<double>(scores.size());
  return {mean, std::max(std::sqrt(var), epsilon)};
}

std::vector<ScoreStats> fit_column_stats(const Eigen::MatrixXd& vectors, double epsilon) {
  std::vector<ScoreStats> stats;
  for (Eigen::Index j = 0; j < vectors.cols(); ++j) {
    const Eigen::VectorXd col = vectors.col(j);
    stats.push_back(fit_score_stats({col.data(), static_cast<std::size_t>(col.size())}, epsilon));
  }
  return stats;
}

// --- Scoring ----------------------------------------------------------------

std::vector<double> score_rows(const EnergyNet& net, const GaussianMixture& gmm,
                               const NoiseSchedule& schedule, const Standardizer& standardizer,
                               const FeatureSet& features) {
  if (features.size() == 0) return {};
  if (gmm.dim() != static_cast<int>(schedule.scales.size())) {
    throw ShapeError("score_rows: mixture dimension " + std::to_string(gmm.dim()) +
                     " does not match schedule length " + std::to_string(schedule.scales.size()));
  }
  const FeatureSet standardized = standardizer.apply(features);
  const Eigen::VectorXd scores =
      gmm.nll_rows(build_multiscale_vectors(net, standardized, schedule));
  return {scores.data(), scores.data() + scores.size()};
}

std::map<std::string, std::int64_t> infer_frame_counts(std::span<const RowIndex> index) {
  std::map<std::string, std::int64_t> counts;
  for (const auto& row : index) {
    auto& c = counts[row.video_id];
    c = std::max(c, row.frame_index + 1);
  }
  return counts;
}

std::vector<ScoreSeries> pool_objects_to_frames(std::span<const double> row_scores,
                                                std::span<const RowIndex> index,
                                                const std::map<std::string, std::int64_t>& frame_counts) {
  if (row_scores.size() != index.size()) {
    throw ShapeError("pool_objects_to_frames: one index entry per row score required");
  }
  struct Accumulator {
    std::vector<double> best;
    std::vector<bool> seen;
    double video_min = 0.0;
    bool any = false;
  };
  std::map<std::string, Accumulator> acc;
  for (const auto& [video, count] : frame_counts) {
    if (count < 0) throw UsageError("pool_objects_to_frames: negative frame count");
    auto& a = acc[video];
    a.best.assign(static_cast<std::size_t>(count), 0.0);
    a.seen.assign(static_cast<std::size_t>(count), false);
  }
  for (std::size_t i = 0; i < index.size(); ++i) {
    const auto it = acc.find(index[i].video_id);
    if (it == acc.end()) {
      throw ShapeError("pool_objects_to_frames: row " + std::to_string(i) + " names unknown video '" +
                       index[i].video_id + "'");
    }
    auto& a = it->second;
    const auto frame = index[i].frame_index;
    if (frame < 0 || frame >= static_cast<std::int64_t>(a.best.size())) {
      throw ShapeError("pool_objects_to_frames: frame index " + std::to_string(frame) +
                       " out of range for video '" + index[i].video_id + "'");
    }
    const auto f = static_cast<std::size_t>(frame);
    const double s = row_scores[i];
    a.best[f] = a.seen[f] ? std::max(a.best[f], s) : s;
    a.seen[f] = true;
    a.video_min = a.any ? std::min(a.video_min, s) : s;
    a.any = true;
  }
  std::vector<ScoreSeries> out;
  for (const auto& [video, count] : frame_counts) {
    auto& a = acc.at(video);
    ScoreSeries series{video, std::move(a.best), false, 0.0};
    for (std::size_t f = 0; f < series.scores.size(); ++f) {
      if (!a.seen[f]) series.scores[f] = a.video_min;
    }
    out.push_back(std::move(series));
  }
  return out;
}

std::vector<double> fuse_feature_types(const std::vector<std::vector<double>>& per_type,
                                       std::span<const ScoreStats> training_stats) {
  if (per_type.empty()) throw UsageError("fuse_feature_types: no feature types");
  if (per_type.size() != training_stats.size()) {
    throw ShapeError("fuse_feature_types: one set of training stats per feature type required");
  }
  const std::size_t frames = per_type.front().size();
  std::vector<double> fused(frames, 0.0);
  for (std::size_t t = 0; t < per_type.size(); ++t) {
    if (per_type[t].size() != frames) {
      throw ShapeError("fuse_feature_types: feature types cover different frames");
    }
    const auto& stats = training_stats[t];
    for (std::size_t i = 0; i < frames; ++i) {
      fused[i] += std::max(0.0, (per_type[t][i] - stats.mean) / stats.std);
    }
  }
  return fused;
}

// --- Smoothing --------------------------------------------------------------

std::vector<double> gaussian_kernel(double kernel_std) {
  if (!(kernel_std >= 0.0)) throw UsageError("gaussian_kernel: std must be nonnegative");
  if (kernel_std == 0.0) return {1.0};
  const auto radius = static_cast<std::ptrdiff_t>(std::ceil(3.0 * kernel_std));
  std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
  double total = 0.0;
  for (std::ptrdiff_t k = -radius; k <= radius; ++k) {
    const double z = static_cast<double>(k) / kernel_std;
    const double w = std::exp(-0.5 * z * z);
    kernel[static_cast<std::size_t>(k + radius)] = w;
    total += w;
  }
  for (double& w : kernel) w /= total;
  return kernel;
}

namespace {

/// Half-sample symmetric reflection: ... 1 0 | 0 1 ... n-1 | n-1 n-2 ...
std::size_t reflect(std::ptrdiff_t i, std::size_t n) {
  const auto period = static_cast<std::ptrdiff_t>(2 * n);
  std::ptrdiff_t m = i % period;
  if (m < 0) m += period;
  if (m >= static_cast<std::ptrdiff_t>(n)) m = period - 1 - m;
  return static_cast<std::size_t>(m);
}

}  // namespace

ScoreSeries smooth(const ScoreSeries& series, double kernel_std) {
  const auto kernel = gaussian_kernel(kernel_std);
  ScoreSeries out{series.video_id, {}, true, kernel_std};
  const std::size_t n = series.scores.size();
  if (kernel.size() == 1 || n == 0) {
    out.scores = series.scores;
    return out;
  }
  const auto radius = static_cast<std::ptrdiff_t>(kernel.size() / 2);
  out.scores.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    double acc = 0.0;
    for (std::ptrdiff_t k = -radius; k <= radius; ++k) {
      acc += kernel[static_cast<std::size_t>(k + radius)] *
             series.scores[reflect(static_cast<std::ptrdiff_t>(i) + k, n)];
    }
    out.scores[i] = acc;
  }
  return out;
}

// --- Pooling ablations ------------------------------------------------------

PoolMode parse_pool_mode(const std::string& name) {
  if (name == "max") return PoolMode::kMax;
  if (name == "avg") return PoolMode::kAvg;
  if (name == "median") return PoolMode::kMedian;
  throw UsageError("unknown pooling mode '" + name + "' (expected max, avg or median)");
}

std::vector<double> pool_multiscale(const Eigen::MatrixXd& vectors,
                                    std::span<const ScoreStats> column_stats, PoolMode mode) {
  if (static_cast<std::size_t>(vectors.cols()) != column_stats.size()) {
    throw ShapeError("pool_multiscale: one set of stats per column required");
  }
  if (vectors.cols() == 0) throw UsageError("pool_multiscale: no scales");
  std::vector<double> out(static_cast<std::size_t>(vectors.rows()));
  std::vector<double> z(static_cast<std::size_t>(vectors.cols()));
  for (Eigen::Index i = 0; i < vectors.rows(); ++i) {
    for (Eigen::Index j = 0; j < vectors.cols(); ++j) {
      const auto& s = column_stats[static_cast<std::size_t>(j)];
      z[static_cast<std::size_t>(j)] = (vectors(i, j) - s.mean) / s.std;
    }
    double pooled = 0.0;
    switch (mode) {
      case PoolMode::kMax:
        pooled = *std::max_element(z.begin(), z.end());
        break;
      case PoolMode::kAvg:
        for (double v : z) pooled += v;
        pooled /= static_cast<double>(z.size());
        break;
      case PoolMode::kMedian: {
        std::sort(z.begin(), z.end());
        const std::size_t m = z.size() / 2;
        pooled = z.size() % 2 == 1 ? z[m] : 0.5 * (z[m - 1] + z[m]);
        break;
      }
    }
    out[static_cast<std::size_t>(i)] = pooled;
  }
  return out;
}

Eigen::MatrixXd gradient_norm_vectors(const EnergyNet& net, const NoiseSchedule& schedule,
                                      const Standardizer& standardizer, const FeatureSet& features) {
  if (features.size() == 0) return Eigen::MatrixXd(0, static_cast<Eigen::Index>(schedule.scales.size()));
  const Eigen::MatrixXd cols = standardizer.apply_rows(features.rows).transpose();
  return net.gradient_norm_multiscale(cols, schedule.scales);
}

std::vector<double> gradient_norm_score(const EnergyNet& net, const NoiseSchedule& schedule,
                                        const Standardizer& standardizer, const FeatureSet& features,
                                        std::span<const ScoreStats> column_stats, PoolMode mode) {
  return pool_multiscale(gradient_norm_vectors(net, schedule, standardizer, features), column_stats,
                         mode);
}

std::vector<double> gradient_norm_score(const EnergyNet& net, const NoiseSchedule& schedule,
                                        const Standardizer& standardizer, const FeatureSet& features,
                                        const GaussianMixture& gmm) {
  const Eigen::VectorXd scores =
      gmm.nll_rows(gradient_norm_vectors(net, schedule, standardizer, features));
  return {scores.data(), scores.data() + scores.size()};
}

}  // namespace mulde

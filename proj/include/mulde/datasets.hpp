#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

namespace mulde {

/// Identity of one feature row: which video and frame it belongs to, the
/// detected object (object-centric features only) and an optional frame label.
struct RowIndex {
  std::string video_id;
  std::int64_t frame_index = 0;
  std::optional<std::int64_t> object_id;
  std::optional<int> label;  // 1 = anomalous

  bool operator==(const RowIndex&) const = default;
};

/// N feature rows of dimension d. Stored as 32-bit floats on disk and widened
/// to double in memory. `index` is either empty or holds one entry per row.
struct FeatureSet {
  int dim = 0;
  Eigen::MatrixXd rows;  // N x d
  std::vector<RowIndex> index;

  std::size_t size() const { return static_cast<std::size_t>(rows.rows()); }
  bool has_index() const { return !index.empty(); }

  /// Rows whose label is not 1 (unlabeled rows count as normal).
  FeatureSet normal_only() const;
  FeatureSet subset(std::span<const std::size_t> rows) const;
};

// Binary layout (little-endian): "MFV1", u32 d, u64 N, N*d float32 row-major.
std::string encode_features(const Eigen::MatrixXd& rows);
Eigen::MatrixXd decode_features(std::string_view bytes);
void write_features(const std::filesystem::path& path, const Eigen::MatrixXd& rows);
Eigen::MatrixXd read_features(const std::filesystem::path& path);

// CSV with header row,video_id,frame_index,object_id,label.
std::string encode_index(std::span<const RowIndex> index);
std::vector<RowIndex> decode_index(std::string_view text);
void write_index(const std::filesystem::path& path, std::span<const RowIndex> index);
std::vector<RowIndex> read_index(const std::filesystem::path& path);

FeatureSet load_feature_set(const std::filesystem::path& features,
                            const std::optional<std::filesystem::path>& index = std::nullopt);
void save_feature_set(const FeatureSet& set, const std::filesystem::path& features,
                      const std::optional<std::filesystem::path>& index = std::nullopt);

/// Uniform anomalies in the box [low, high]^d, rejected when closer than
/// `exclusion_radius` to any mixture mean.
struct AnomalySpec {
  double fraction = 0.0;
  double low = -6.0;
  double high = 6.0;
  double exclusion_radius = 1.5;
};

/// Gaussian mixture sum_k weight_k N(mean_k, covariance_k).
struct MixtureSpec {
  std::vector<double> weights;
  std::vector<Eigen::VectorXd> means;
  std::vector<Eigen::MatrixXd> covariances;
  /// Only used by the synth workflow to append labeled anomalies.
  std::optional<AnomalySpec> anomaly;
  /// Rows are grouped into videos of this many frames when writing an index.
  std::int64_t frames_per_video = 0;

  int dim() const { return means.empty() ? 0 : static_cast<int>(means.front().size()); }
  void validate() const;

  /// The 2-D benchmark: four components at (+-3, +-3), isotropic variance
  /// 0.25, equal weights.
  static MixtureSpec toy_benchmark();

  /// The same distribution expressed in coordinates (x - mean) / std.
  MixtureSpec standardized(const Eigen::VectorXd& mean, const Eigen::VectorXd& std) const;
};

nlohmann::json mixture_to_json(const MixtureSpec& spec);
MixtureSpec mixture_from_json(const nlohmann::json& doc);

/// n iid draws (component by weight, then Gaussian). Index and labels empty.
FeatureSet synth_mixture(const MixtureSpec& spec, std::size_t n, std::uint64_t seed);

/// n iid anomalies as described by AnomalySpec (fraction is ignored).
Eigen::MatrixXd synth_anomalies(const MixtureSpec& spec, const AnomalySpec& anomaly, std::size_t n,
                                std::uint64_t seed);

/// Labeled stream: each row is an anomaly with probability anomaly->fraction,
/// otherwise a mixture draw. Index rows are grouped into videos of
/// frames_per_video frames (one video when zero).
FeatureSet synth_labeled(const MixtureSpec& spec, std::size_t n, std::uint64_t seed);

/// Exact -ln q_sigma(x) with q_sigma = sum_k w_k N(mu_k, Sigma_k + sigma^2 I).
double oracle_neg_log_density(const MixtureSpec& spec, double sigma, const Eigen::VectorXd& x);

/// Exact -grad_x ln q_sigma(x).
Eigen::VectorXd oracle_score(const MixtureSpec& spec, double sigma, const Eigen::VectorXd& x);

}  // namespace mulde

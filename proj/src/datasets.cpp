#include "mulde/datasets.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <limits>
#include <numbers>
#include <sstream>

#include "mulde/error.hpp"
#include "mulde/io.hpp"
#include "mulde/rng.hpp"

namespace mulde {
namespace {

constexpr char kMagic[4] = {'M', 'F', 'V', '1'};
constexpr std::size_t kHeaderBytes = 4 + 4 + 8;

template <typename T>
void put_le(std::string& out, T value) {
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    out.push_back(static_cast<char>((value >> (8 * i)) & 0xff));
  }
}

template <typename T>
T get_le(std::string_view bytes, std::size_t offset) {
  T value = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    value |= static_cast<T>(static_cast<unsigned char>(bytes[offset + i])) << (8 * i);
  }
  return value;
}

std::vector<std::string_view> split_csv_line(std::string_view line) {
  std::vector<std::string_view> fields;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = line.find(',', start);
    if (comma == std::string_view::npos) {
      fields.push_back(line.substr(start));
      break;
    }
    fields.push_back(line.substr(start, comma - start));
    start = comma + 1;
  }
  return fields;
}

std::int64_t parse_int(std::string_view field, std::size_t line_no, const char* name) {
  std::int64_t value = 0;
  const auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), value);
  if (ec != std::errc() || ptr != field.data() + field.size()) {
    throw FormatError(std::string("index: bad ") + name + " '" + std::string(field) + "'", line_no);
  }
  return value;
}

/// Symmetric square root factor A with A A^T = cov (cov PSD).
Eigen::MatrixXd psd_factor(const Eigen::MatrixXd& cov) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  const Eigen::VectorXd root = eig.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return eig.eigenvectors() * root.asDiagonal();
}

std::size_t pick_component(const std::vector<double>& weights, double u) {
  double cumulative = 0.0;
  std::size_t last_positive = 0;
  for (std::size_t k = 0; k < weights.size(); ++k) {
    if (weights[k] <= 0.0) continue;
    last_positive = k;
    cumulative += weights[k];
    if (u < cumulative) return k;
  }
  return last_positive;
}

struct SmoothedComponent {
  Eigen::LLT<Eigen::MatrixXd> chol;
  double log_norm;  // ln weight - 0.5 ln det(2 pi C)
};

std::vector<SmoothedComponent> smoothed_components(const MixtureSpec& spec, double sigma) {
  if (!(sigma >= 0.0)) throw UsageError("oracle: sigma must be nonnegative");
  const int d = spec.dim();
  std::vector<SmoothedComponent> out;
  out.reserve(spec.weights.size());
  for (std::size_t k = 0; k < spec.weights.size(); ++k) {
    Eigen::MatrixXd cov = spec.covariances[k];
    cov.diagonal().array() += sigma * sigma;
    Eigen::LLT<Eigen::MatrixXd> chol(cov);
    if (chol.info() != Eigen::Success) {
      throw NumericError("oracle: smoothed covariance of component " + std::to_string(k) +
                         " is singular");
    }
    const Eigen::MatrixXd l = chol.matrixL();
    const double log_det = 2.0 * l.diagonal().array().log().sum();
    const double log_weight =
        spec.weights[k] > 0.0 ? std::log(spec.weights[k]) : -std::numeric_limits<double>::infinity();
    out.push_back({std::move(chol),
                   log_weight - 0.5 * (d * std::log(2.0 * std::numbers::pi) + log_det)});
  }
  return out;
}

}  // namespace

// --- FeatureSet -------------------------------------------------------------

FeatureSet FeatureSet::normal_only() const {
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < size(); ++i) {
    if (index.empty() || index[i].label.value_or(0) != 1) keep.push_back(i);
  }
  return subset(keep);
}

FeatureSet FeatureSet::subset(std::span<const std::size_t> selected) const {
  FeatureSet out;
  out.dim = dim;
  out.rows.resize(static_cast<Eigen::Index>(selected.size()), dim);
  for (std::size_t i = 0; i < selected.size(); ++i) {
    out.rows.row(static_cast<Eigen::Index>(i)) = rows.row(static_cast<Eigen::Index>(selected[i]));
    if (!index.empty()) out.index.push_back(index[selected[i]]);
  }
  return out;
}

// --- Binary features --------------------------------------------------------

std::string encode_features(const Eigen::MatrixXd& rows) {
  if (rows.cols() > std::numeric_limits<std::uint32_t>::max()) {
    throw UsageError("features: dimension does not fit the file format");
  }
  std::string out;
  out.reserve(kHeaderBytes + static_cast<std::size_t>(rows.size()) * 4);
  out.append(kMagic, 4);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(rows.cols()));
  put_le<std::uint64_t>(out, static_cast<std::uint64_t>(rows.rows()));
  for (Eigen::Index i = 0; i < rows.rows(); ++i) {
    for (Eigen::Index j = 0; j < rows.cols(); ++j) {
      put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(static_cast<float>(rows(i, j))));
    }
  }
  return out;
}

Eigen::MatrixXd decode_features(std::string_view bytes) {
  if (bytes.size() < 4) throw FormatError("features: truncated header", bytes.size());
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw FormatError("features: bad magic", 0);
  if (bytes.size() < kHeaderBytes) throw FormatError("features: truncated header", bytes.size());
  const auto d = get_le<std::uint32_t>(bytes, 4);
  const auto n = get_le<std::uint64_t>(bytes, 8);
  if (d == 0) throw FormatError("features: zero dimension", 4);
  const std::size_t payload = bytes.size() - kHeaderBytes;
  if (n > payload / 4 / d || n * d * 4 != payload) {
    const std::size_t expected_end = kHeaderBytes + static_cast<std::size_t>(n) * d * 4;
    throw FormatError("features: payload size does not match header (expected " +
                          std::to_string(expected_end) + " bytes)",
                      std::min(expected_end, bytes.size()));
  }
  Eigen::MatrixXd rows(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  std::size_t offset = kHeaderBytes;
  for (Eigen::Index i = 0; i < rows.rows(); ++i) {
    for (Eigen::Index j = 0; j < rows.cols(); ++j) {
      rows(i, j) = std::bit_cast<float>(get_le<std::uint32_t>(bytes, offset));
      offset += 4;
    }
  }
  return rows;
}

void write_features(const std::filesystem::path& path, const Eigen::MatrixXd& rows) {
  io::atomic_write(path, encode_features(rows));
}

Eigen::MatrixXd read_features(const std::filesystem::path& path) {
  return decode_features(io::read_file(path));
}

// --- Index CSV --------------------------------------------------------------

std::string encode_index(std::span<const RowIndex> index) {
  std::ostringstream out;
  out << "row,video_id,frame_index,object_id,label\n";
  for (std::size_t i = 0; i < index.size(); ++i) {
    const auto& r = index[i];
    if (r.video_id.find_first_of(",\n\r") != std::string::npos) {
      throw UsageError("index: video_id may not contain commas or newlines");
    }
    out << i << ',' << r.video_id << ',' << r.frame_index << ',';
    if (r.object_id) out << *r.object_id;
    out << ',';
    if (r.label) out << *r.label;
    out << '\n';
  }
  return out.str();
}

std::vector<RowIndex> decode_index(std::string_view text) {
  std::vector<RowIndex> index;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  bool header_seen = false;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.empty()) continue;
    if (!header_seen) {
      if (line != "row,video_id,frame_index,object_id,label") {
        throw FormatError("index: unexpected header", line_no);
      }
      header_seen = true;
      continue;
    }
    const auto fields = split_csv_line(line);
    if (fields.size() != 5) throw FormatError("index: expected 5 columns", line_no);
    if (parse_int(fields[0], line_no, "row") != static_cast<std::int64_t>(index.size())) {
      throw FormatError("index: row column must equal the 0-based row position", line_no);
    }
    RowIndex row;
    row.video_id = std::string(fields[1]);
    if (row.video_id.empty()) throw FormatError("index: empty video_id", line_no);
    row.frame_index = parse_int(fields[2], line_no, "frame_index");
    if (row.frame_index < 0) throw FormatError("index: negative frame_index", line_no);
    if (!fields[3].empty()) row.object_id = parse_int(fields[3], line_no, "object_id");
    if (!fields[4].empty()) {
      const auto label = parse_int(fields[4], line_no, "label");
      if (label != 0 && label != 1) throw FormatError("index: label must be 0 or 1", line_no);
      row.label = static_cast<int>(label);
    }
    index.push_back(std::move(row));
  }
  if (!header_seen) throw FormatError("index: missing header", 0);
  return index;
}

void write_index(const std::filesystem::path& path, std::span<const RowIndex> index) {
  io::atomic_write(path, encode_index(index));
}

std::vector<RowIndex> read_index(const std::filesystem::path& path) {
  return decode_index(io::read_file(path));
}

FeatureSet load_feature_set(const std::filesystem::path& features,
                            const std::optional<std::filesystem::path>& index) {
  FeatureSet set;
  set.rows = read_features(features);
  set.dim = static_cast<int>(set.rows.cols());
  if (index) {
    set.index = read_index(*index);
    if (set.index.size() != set.size()) {
      throw ShapeError("index has " + std::to_string(set.index.size()) + " rows but features have " +
                       std::to_string(set.size()));
    }
  }
  return set;
}

void save_feature_set(const FeatureSet& set, const std::filesystem::path& features,
                      const std::optional<std::filesystem::path>& index) {
  write_features(features, set.rows);
  if (index) write_index(*index, set.index);
}

// --- Mixtures ---------------------------------------------------------------

void MixtureSpec::validate() const {
  if (weights.empty()) throw UsageError("mixture: at least one component required");
  if (means.size() != weights.size() || covariances.size() != weights.size()) {
    throw UsageError("mixture: weights, means and covariances must have equal length");
  }
  const int d = dim();
  if (d <= 0) throw UsageError("mixture: empty mean vector");
  double total = 0.0;
  for (std::size_t k = 0; k < weights.size(); ++k) {
    if (!(weights[k] >= 0.0)) throw UsageError("mixture: weights must be nonnegative");
    total += weights[k];
    if (means[k].size() != d) throw UsageError("mixture: inconsistent mean dimensions");
    const auto& cov = covariances[k];
    if (cov.rows() != d || cov.cols() != d) throw UsageError("mixture: covariance shape mismatch");
    if (!cov.allFinite() || !means[k].allFinite()) throw UsageError("mixture: non-finite parameter");
    const double scale = std::max(1.0, cov.cwiseAbs().maxCoeff());
    if ((cov - cov.transpose()).cwiseAbs().maxCoeff() > 1e-12 * scale) {
      throw UsageError("mixture: covariance " + std::to_string(k) + " is not symmetric");
    }
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov, Eigen::EigenvaluesOnly);
    if (eig.eigenvalues().minCoeff() < -1e-12 * scale) {
      throw UsageError("mixture: covariance " + std::to_string(k) + " is not PSD");
    }
  }
  if (std::abs(total - 1.0) > 1e-9) throw UsageError("mixture: weights must sum to 1");
  if (anomaly) {
    if (!(anomaly->fraction >= 0.0 && anomaly->fraction <= 1.0)) {
      throw UsageError("mixture: anomaly fraction must lie in [0, 1]");
    }
    if (!(anomaly->low < anomaly->high)) throw UsageError("mixture: anomaly box is empty");
  }
  if (frames_per_video < 0) throw UsageError("mixture: frames_per_video must be nonnegative");
}

MixtureSpec MixtureSpec::toy_benchmark() {
  MixtureSpec spec;
  for (double sx : {-3.0, 3.0}) {
    for (double sy : {-3.0, 3.0}) {
      spec.weights.push_back(0.25);
      spec.means.push_back(Eigen::Vector2d(sx, sy));
      spec.covariances.push_back(0.25 * Eigen::Matrix2d::Identity());
    }
  }
  spec.anomaly = AnomalySpec{0.0, -6.0, 6.0, 1.5};
  return spec;
}

MixtureSpec MixtureSpec::standardized(const Eigen::VectorXd& mean, const Eigen::VectorXd& std) const {
  if (mean.size() != dim() || std.size() != dim()) {
    throw ShapeError("mixture: standardizer dimension mismatch");
  }
  MixtureSpec out = *this;
  const Eigen::VectorXd inv = std.cwiseInverse();
  for (std::size_t k = 0; k < weights.size(); ++k) {
    out.means[k] = (means[k] - mean).cwiseProduct(inv);
    out.covariances[k] = inv.asDiagonal() * covariances[k] * inv.asDiagonal();
  }
  out.anomaly.reset();
  return out;
}

nlohmann::json mixture_to_json(const MixtureSpec& spec) {
  nlohmann::json means = nlohmann::json::array();
  nlohmann::json covs = nlohmann::json::array();
  for (std::size_t k = 0; k < spec.weights.size(); ++k) {
    means.push_back(std::vector<double>(spec.means[k].data(), spec.means[k].data() + spec.means[k].size()));
    nlohmann::json cov = nlohmann::json::array();
    for (Eigen::Index r = 0; r < spec.covariances[k].rows(); ++r) {
      Eigen::VectorXd row = spec.covariances[k].row(r).transpose();
      cov.push_back(std::vector<double>(row.data(), row.data() + row.size()));
    }
    covs.push_back(std::move(cov));
  }
  nlohmann::json doc = {{"weights", spec.weights}, {"means", std::move(means)},
                        {"covariances", std::move(covs)}};
  if (spec.anomaly) {
    doc["anomaly"] = {{"fraction", spec.anomaly->fraction},
                      {"low", spec.anomaly->low},
                      {"high", spec.anomaly->high},
                      {"exclusion_radius", spec.anomaly->exclusion_radius}};
  }
  if (spec.frames_per_video > 0) doc["frames_per_video"] = spec.frames_per_video;
  return doc;
}

MixtureSpec mixture_from_json(const nlohmann::json& doc) {
  MixtureSpec spec;
  try {
    spec.weights = doc.at("weights").get<std::vector<double>>();
    for (const auto& m : doc.at("means")) {
      const auto v = m.get<std::vector<double>>();
      spec.means.push_back(Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size())));
    }
    for (const auto& c : doc.at("covariances")) {
      const auto rows = c.get<std::vector<std::vector<double>>>();
      Eigen::MatrixXd cov(static_cast<Eigen::Index>(rows.size()),
                          rows.empty() ? 0 : static_cast<Eigen::Index>(rows.front().size()));
      for (std::size_t r = 0; r < rows.size(); ++r) {
        if (rows[r].size() != static_cast<std::size_t>(cov.cols())) {
          throw UsageError("mixture: ragged covariance matrix");
        }
        for (std::size_t col = 0; col < rows[r].size(); ++col) {
          cov(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(col)) = rows[r][col];
        }
      }
      spec.covariances.push_back(std::move(cov));
    }
    if (doc.contains("anomaly")) {
      const auto& a = doc.at("anomaly");
      spec.anomaly = AnomalySpec{a.value("fraction", 0.0), a.value("low", -6.0),
                                 a.value("high", 6.0), a.value("exclusion_radius", 1.5)};
    }
    spec.frames_per_video = doc.value("frames_per_video", std::int64_t{0});
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("mixture spec: ") + e.what(), 0);
  }
  spec.validate();
  return spec;
}

FeatureSet synth_mixture(const MixtureSpec& spec, std::size_t n, std::uint64_t seed) {
  spec.validate();
  const int d = spec.dim();
  std::vector<Eigen::MatrixXd> factors;
  for (const auto& cov : spec.covariances) factors.push_back(psd_factor(cov));
  Rng rng(seed);
  FeatureSet set;
  set.dim = d;
  set.rows.resize(static_cast<Eigen::Index>(n), d);
  Eigen::VectorXd z(d);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t k = pick_component(spec.weights, rng.uniform());
    for (int j = 0; j < d; ++j) z(j) = rng.normal();
    set.rows.row(static_cast<Eigen::Index>(i)) = (spec.means[k] + factors[k] * z).transpose();
  }
  return set;
}

namespace {

Eigen::VectorXd draw_anomaly(const MixtureSpec& spec, const AnomalySpec& anomaly, Rng& rng) {
  const int d = spec.dim();
  Eigen::VectorXd x(d);
  for (int attempt = 0; attempt < 1'000'000; ++attempt) {
    for (int j = 0; j < d; ++j) x(j) = anomaly.low + (anomaly.high - anomaly.low) * rng.uniform();
    bool excluded = false;
    for (const auto& mean : spec.means) {
      if ((x - mean).norm() < anomaly.exclusion_radius) {
        excluded = true;
        break;
      }
    }
    if (!excluded) return x;
  }
  throw UsageError("anomaly: exclusion balls cover the sampling box");
}

}  // namespace

Eigen::MatrixXd synth_anomalies(const MixtureSpec& spec, const AnomalySpec& anomaly, std::size_t n,
                                std::uint64_t seed) {
  spec.validate();
  Rng rng(seed);
  Eigen::MatrixXd rows(static_cast<Eigen::Index>(n), spec.dim());
  for (std::size_t i = 0; i < n; ++i) {
    rows.row(static_cast<Eigen::Index>(i)) = draw_anomaly(spec, anomaly, rng).transpose();
  }
  return rows;
}

FeatureSet synth_labeled(const MixtureSpec& spec, std::size_t n, std::uint64_t seed) {
  spec.validate();
  const AnomalySpec anomaly = spec.anomaly.value_or(AnomalySpec{});
  const int d = spec.dim();
  std::vector<Eigen::MatrixXd> factors;
  for (const auto& cov : spec.covariances) factors.push_back(psd_factor(cov));
  Rng rng(seed);
  FeatureSet set;
  set.dim = d;
  set.rows.resize(static_cast<Eigen::Index>(n), d);
  Eigen::VectorXd z(d);
  const std::int64_t per_video =
      spec.frames_per_video > 0 ? spec.frames_per_video : std::max<std::int64_t>(1, static_cast<std::int64_t>(n));
  for (std::size_t i = 0; i < n; ++i) {
    const bool is_anomaly = rng.uniform() < anomaly.fraction;
    Eigen::VectorXd x(d);
    if (is_anomaly) {
      x = draw_anomaly(spec, anomaly, rng);
    } else {
      const std::size_t k = pick_component(spec.weights, rng.uniform());
      for (int j = 0; j < d; ++j) z(j) = rng.normal();
      x = spec.means[k] + factors[k] * z;
    }
    set.rows.row(static_cast<Eigen::Index>(i)) = x.transpose();
    const auto row = static_cast<std::int64_t>(i);
    char video[32];
    std::snprintf(video, sizeof(video), "video_%04lld", static_cast<long long>(row / per_video));
    set.index.push_back({video, row % per_video, std::nullopt, is_anomaly ? 1 : 0});
  }
  return set;
}

// --- Oracles ----------------------------------------------------------------

double oracle_neg_log_density(const MixtureSpec& spec, double sigma, const Eigen::VectorXd& x) {
  if (x.size() != spec.dim()) throw ShapeError("oracle: dimension mismatch");
  const auto comps = smoothed_components(spec, sigma);
  std::vector<double> terms;
  terms.reserve(comps.size());
  for (std::size_t k = 0; k < comps.size(); ++k) {
    const Eigen::VectorXd diff = x - spec.means[k];
    const double maha = comps[k].chol.matrixL().solve(diff).squaredNorm();
    terms.push_back(comps[k].log_norm - 0.5 * maha);
  }
  const double top = *std::max_element(terms.begin(), terms.end());
  double sum = 0.0;
  for (double t : terms) sum += std::exp(t - top);
  return -(top + std::log(sum));
}

Eigen::VectorXd oracle_score(const MixtureSpec& spec, double sigma, const Eigen::VectorXd& x) {
  if (x.size() != spec.dim()) throw ShapeError("oracle: dimension mismatch");
  const auto comps = smoothed_components(spec, sigma);
  std::vector<double> terms;
  std::vector<Eigen::VectorXd> scores;
  for (std::size_t k = 0; k < comps.size(); ++k) {
    const Eigen::VectorXd diff = x - spec.means[k];
    const double maha = comps[k].chol.matrixL().solve(diff).squaredNorm();
    terms.push_back(comps[k].log_norm - 0.5 * maha);
    scores.push_back(comps[k].chol.solve(diff));
  }
  const double top = *std::max_element(terms.begin(), terms.end());
  double total = 0.0;
  Eigen::VectorXd weighted = Eigen::VectorXd::Zero(x.size());
  for (std::size_t k = 0; k < terms.size(); ++k) {
    const double r = std::exp(terms[k] - top);
    total += r;
    weighted += r * scores[k];
  }
  return weighted / total;
}

}  // namespace mulde

#include "mulde/gmm.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "mulde/error.hpp"
#include "mulde/rng.hpp"

namespace mulde {
namespace {

constexpr double kCollapsedMass = 1e-12;
constexpr Eigen::Index kChunk = 4096;

double log_sum_exp(const Eigen::Ref<const Eigen::RowVectorXd>& terms) {
  const double top = terms.maxCoeff();
  if (!std::isfinite(top)) return top;
  return top + std::log((terms.array() - top).exp().sum());
}

Eigen::MatrixXd population_covariance(const Eigen::MatrixXd& vectors) {
  const Eigen::RowVectorXd mean = vectors.colwise().mean();
  const Eigen::MatrixXd centered = vectors.rowwise() - mean;
  return centered.transpose() * centered / static_cast<double>(vectors.rows());
}

}  // namespace

NoiseSchedule NoiseSchedule::linear(double sigma_low, double sigma_high, int L) {
  if (!(sigma_low > 0.0 && sigma_low <= sigma_high)) {
    throw UsageError("schedule: need 0 < sigma_low <= sigma_high");
  }
  if (L < 1) throw UsageError("schedule: L must be positive");
  NoiseSchedule s{sigma_low, sigma_high, L, {}};
  s.scales.resize(static_cast<std::size_t>(L));
  for (int j = 0; j < L; ++j) {
    s.scales[static_cast<std::size_t>(j)] =
        L == 1 ? sigma_low : sigma_low + (sigma_high - sigma_low) * j / (L - 1);
  }
  if (L > 1) s.scales.back() = sigma_high;
  return s;
}

Eigen::MatrixXd build_multiscale_vectors(const EnergyNet& net, const FeatureSet& standardized,
                                         const NoiseSchedule& schedule) {
  if (schedule.scales.empty()) throw UsageError("build_multiscale_vectors: empty schedule");
  if (standardized.rows.cols() != net.feature_dim() && standardized.size() > 0) {
    throw ShapeError("build_multiscale_vectors: features have dimension " +
                     std::to_string(standardized.rows.cols()) + ", network expects " +
                     std::to_string(net.feature_dim()));
  }
  const auto n = static_cast<Eigen::Index>(standardized.size());
  const auto L = static_cast<Eigen::Index>(schedule.scales.size());
  Eigen::MatrixXd out(n, L);
  for (Eigen::Index start = 0; start < n; start += kChunk) {
    const Eigen::Index count = std::min(kChunk, n - start);
    const Eigen::MatrixXd cols = standardized.rows.middleRows(start, count).transpose();
    out.middleRows(start, count) = net.forward_multiscale(cols, schedule.scales);
  }
  return out;
}

// --- GaussianMixture --------------------------------------------------------

GaussianMixture::GaussianMixture(std::vector<double> weights, std::vector<Eigen::VectorXd> means,
                                 std::vector<Eigen::MatrixXd> covariances, double ridge)
    : weights_(std::move(weights)),
      means_(std::move(means)),
      covariances_(std::move(covariances)),
      ridge_(ridge) {
  if (weights_.empty()) throw UsageError("gmm: at least one component required");
  if (means_.size() != weights_.size() || covariances_.size() != weights_.size()) {
    throw UsageError("gmm: weights, means and covariances must have equal length");
  }
  if (!(ridge_ > 0.0)) throw UsageError("gmm: ridge must be positive");
  const auto L = means_.front().size();
  if (L == 0) throw UsageError("gmm: zero-dimensional components");
  double total = 0.0;
  for (double w : weights_) {
    if (!(w >= 0.0)) throw UsageError("gmm: weights must be nonnegative");
    total += w;
  }
  if (std::abs(total - 1.0) > 1e-9) throw UsageError("gmm: weights must sum to 1");
  for (double& w : weights_) w /= total;

  for (std::size_t k = 0; k < weights_.size(); ++k) {
    if (means_[k].size() != L || covariances_[k].rows() != L || covariances_[k].cols() != L) {
      throw UsageError("gmm: component " + std::to_string(k) + " has inconsistent dimensions");
    }
    Eigen::LLT<Eigen::MatrixXd> llt(covariances_[k]);
    if (llt.info() != Eigen::Success) {
      throw NumericError("gmm: covariance " + std::to_string(k) + " is not positive definite");
    }
    Eigen::MatrixXd lower = llt.matrixL();
    const double log_det = 2.0 * lower.diagonal().array().log().sum();
    const double log_weight =
        weights_[k] > 0.0 ? std::log(weights_[k]) : -std::numeric_limits<double>::infinity();
    log_norm_.push_back(log_weight -
                        0.5 * (static_cast<double>(L) * std::log(2.0 * std::numbers::pi) + log_det));
    chol_lower_.push_back(std::move(lower));
  }
}

Eigen::MatrixXd GaussianMixture::component_log_densities(const Eigen::MatrixXd& vectors) const {
  if (vectors.cols() != dim()) {
    throw ShapeError("gmm: vectors have dimension " + std::to_string(vectors.cols()) +
                     ", mixture has " + std::to_string(dim()));
  }
  Eigen::MatrixXd out(vectors.rows(), num_components());
  for (int k = 0; k < num_components(); ++k) {
    const auto ku = static_cast<std::size_t>(k);
    Eigen::MatrixXd centered = (vectors.rowwise() - means_[ku].transpose()).transpose();
    chol_lower_[ku].triangularView<Eigen::Lower>().solveInPlace(centered);
    out.col(k) = (log_norm_[ku] - 0.5 * centered.colwise().squaredNorm().array()).transpose();
  }
  return out;
}

Eigen::VectorXd GaussianMixture::nll_rows(const Eigen::MatrixXd& vectors) const {
  const Eigen::MatrixXd logs = component_log_densities(vectors);
  Eigen::VectorXd out(vectors.rows());
  for (Eigen::Index i = 0; i < logs.rows(); ++i) out(i) = -log_sum_exp(logs.row(i));
  return out;
}

double GaussianMixture::nll(const Eigen::VectorXd& v) const {
  if (v.size() != dim()) {
    throw ShapeError("gmm: vector has dimension " + std::to_string(v.size()) + ", mixture has " +
                     std::to_string(dim()));
  }
  return nll_rows(v.transpose())(0);
}

// --- EM ---------------------------------------------------------------------

double default_ridge(const Eigen::MatrixXd& vectors) {
  if (vectors.rows() == 0) return 1e-12;
  const Eigen::RowVectorXd mean = vectors.colwise().mean();
  const double mean_var = (vectors.rowwise() - mean).array().square().colwise().mean().mean();
  return std::max(1e-6 * mean_var, 1e-12);
}

Eigen::MatrixXd floor_eigenvalues(const Eigen::MatrixXd& sym, double ridge) {
  const Eigen::MatrixXd s = 0.5 * (sym + sym.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(s);
  if (eig.eigenvalues().minCoeff() >= ridge) return s;
  const Eigen::VectorXd clipped = eig.eigenvalues().cwiseMax(ridge);
  const Eigen::MatrixXd out = eig.eigenvectors() * clipped.asDiagonal() * eig.eigenvectors().transpose();
  return 0.5 * (out + out.transpose());
}

EmFit fit_em(const Eigen::MatrixXd& vectors, int K, int max_iters, double tol, double ridge,
             std::uint64_t seed) {
  const Eigen::Index n = vectors.rows();
  const Eigen::Index L = vectors.cols();
  if (K < 1) throw UsageError("fit_em: K must be positive");
  if (max_iters < 1) throw UsageError("fit_em: max_iters must be positive");
  if (!(tol > 0.0)) throw UsageError("fit_em: tol must be positive");
  if (n < K) {
    throw UsageError("fit_em: need at least K=" + std::to_string(K) + " vectors, got " +
                     std::to_string(n));
  }
  if (L == 0) throw UsageError("fit_em: zero-dimensional vectors");
  if (!vectors.allFinite()) throw NumericError("fit_em: non-finite input vectors");
  if (ridge <= 0.0) ridge = default_ridge(vectors);

  Rng rng(seed);
  EmTrace trace;
  const Eigen::MatrixXd global_cov = floor_eigenvalues(population_covariance(vectors), ridge);

  // k-means++ seeding.
  std::vector<Eigen::Index> centers;
  centers.push_back(static_cast<Eigen::Index>(rng.uniform_index(static_cast<std::uint64_t>(n))));
  Eigen::VectorXd dist2 =
      (vectors.rowwise() - vectors.row(centers.front())).rowwise().squaredNorm();
  while (static_cast<int>(centers.size()) < K) {
    const double total = dist2.sum();
    Eigen::Index pick = n - 1;
    if (total > 0.0) {
      const double target = rng.uniform() * total;
      double running = 0.0;
      for (Eigen::Index i = 0; i < n; ++i) {
        running += dist2(i);
        if (running > target && dist2(i) > 0.0) {
          pick = i;
          break;
        }
      }
    } else {
      pick = static_cast<Eigen::Index>(rng.uniform_index(static_cast<std::uint64_t>(n)));
    }
    centers.push_back(pick);
    dist2 = dist2.cwiseMin((vectors.rowwise() - vectors.row(pick)).rowwise().squaredNorm());
  }

  // Hard assignment to the nearest center becomes the first responsibility matrix.
  Eigen::MatrixXd resp = Eigen::MatrixXd::Zero(n, K);
  {
    Eigen::MatrixXd d2(n, K);
    for (int k = 0; k < K; ++k) {
      d2.col(k) = (vectors.rowwise() - vectors.row(centers[static_cast<std::size_t>(k)]))
                      .rowwise()
                      .squaredNorm();
    }
    for (Eigen::Index i = 0; i < n; ++i) {
      Eigen::Index best = 0;
      d2.row(i).minCoeff(&best);
      resp(i, best) = 1.0;
    }
  }

  std::vector<double> weights(static_cast<std::size_t>(K));
  std::vector<Eigen::VectorXd> means(static_cast<std::size_t>(K));
  std::vector<Eigen::MatrixXd> covs(static_cast<std::size_t>(K));

  auto m_step = [&](int iteration) {
    for (int k = 0; k < K; ++k) {
      const auto ku = static_cast<std::size_t>(k);
      const double mass = resp.col(k).sum();
      if (mass < kCollapsedMass) {
        const auto row = static_cast<Eigen::Index>(rng.uniform_index(static_cast<std::uint64_t>(n)));
        means[ku] = vectors.row(row).transpose();
        covs[ku] = global_cov;
        weights[ku] = 1.0 / static_cast<double>(n);
        trace.events.push_back("iteration " + std::to_string(iteration) + ": component " +
                               std::to_string(k) + " collapsed, re-seeded at row " +
                               std::to_string(row));
        continue;
      }
      means[ku] = (vectors.transpose() * resp.col(k)) / mass;
      const Eigen::MatrixXd centered = vectors.rowwise() - means[ku].transpose();
      const Eigen::MatrixXd scatter =
          centered.transpose() * resp.col(k).asDiagonal() * centered / mass;
      covs[ku] = floor_eigenvalues(scatter, ridge);
      weights[ku] = mass / static_cast<double>(n);
    }
    double total = 0.0;
    for (double w : weights) total += w;
    for (double& w : weights) w /= total;
  };

  m_step(0);
  GaussianMixture current(weights, means, covs, ridge);
  for (int iter = 0; iter < max_iters; ++iter) {
    const Eigen::MatrixXd logs = current.component_log_densities(vectors);
    double ll = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      const double row_ll = log_sum_exp(logs.row(i));
      ll += row_ll;
      resp.row(i) = (logs.row(i).array() - row_ll).exp();
    }
    if (!std::isfinite(ll)) throw NumericError("fit_em: non-finite log-likelihood");
    const bool have_previous = !trace.log_likelihood.empty();
    const double previous = have_previous ? trace.log_likelihood.back() : 0.0;
    trace.log_likelihood.push_back(ll);
    if (have_previous && (ll - previous) < tol * std::abs(previous)) {
      trace.converged = true;
      break;
    }
    if (iter + 1 == max_iters) break;
    m_step(iter + 1);
    current = GaussianMixture(weights, means, covs, ridge);
  }
  return {std::move(current), std::move(trace)};
}

// --- Serialization ----------------------------------------------------------

nlohmann::json gmm_to_json(const GaussianMixture& gmm) {
  nlohmann::json means = nlohmann::json::array();
  nlohmann::json covs = nlohmann::json::array();
  for (int k = 0; k < gmm.num_components(); ++k) {
    const auto& m = gmm.means()[static_cast<std::size_t>(k)];
    means.push_back(std::vector<double>(m.data(), m.data() + m.size()));
    const auto& c = gmm.covariances()[static_cast<std::size_t>(k)];
    nlohmann::json rows = nlohmann::json::array();
    for (Eigen::Index r = 0; r < c.rows(); ++r) {
      nlohmann::json row = nlohmann::json::array();
      for (Eigen::Index col = 0; col < c.cols(); ++col) row.push_back(c(r, col));
      rows.push_back(std::move(row));
    }
    covs.push_back(std::move(rows));
  }
  return {{"format", "mulde-gmm"}, {"version", 1},
          {"L", gmm.dim()},        {"K", gmm.num_components()},
          {"ridge", gmm.ridge()},  {"weights", gmm.weights()},
          {"means", std::move(means)}, {"covariances", std::move(covs)}};
}

GaussianMixture gmm_from_json(const nlohmann::json& doc) {
  try {
    if (doc.at("format").get<std::string>() != "mulde-gmm") {
      throw FormatError("not a mulde-gmm document", 0);
    }
    if (doc.at("version").get<int>() != 1) throw FormatError("unsupported mulde-gmm version", 0);
    const int L = doc.at("L").get<int>();
    const int K = doc.at("K").get<int>();
    auto weights = doc.at("weights").get<std::vector<double>>();
    std::vector<Eigen::VectorXd> means;
    std::vector<Eigen::MatrixXd> covs;
    for (const auto& m : doc.at("means")) {
      const auto v = m.get<std::vector<double>>();
      means.push_back(Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size())));
    }
    for (const auto& c : doc.at("covariances")) {
      const auto rows = c.get<std::vector<std::vector<double>>>();
      Eigen::MatrixXd cov(L, L);
      if (rows.size() != static_cast<std::size_t>(L)) throw FormatError("gmm: covariance shape", 0);
      for (int r = 0; r < L; ++r) {
        if (rows[static_cast<std::size_t>(r)].size() != static_cast<std::size_t>(L)) {
          throw FormatError("gmm: covariance shape", 0);
        }
        for (int col = 0; col < L; ++col) cov(r, col) = rows[static_cast<std::size_t>(r)][static_cast<std::size_t>(col)];
      }
      covs.push_back(std::move(cov));
    }
    if (weights.size() != static_cast<std::size_t>(K) || means.size() != static_cast<std::size_t>(K)) {
      throw FormatError("gmm: K does not match the component arrays", 0);
    }
    for (const auto& m : means) {
      if (m.size() != L) throw FormatError("gmm: mean has the wrong dimension", 0);
    }
    return GaussianMixture(std::move(weights), std::move(means), std::move(covs),
                           doc.at("ridge").get<double>());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed mulde-gmm document: ") + e.what(), 0);
  } catch (const UsageError& e) {
    throw FormatError(std::string("invalid mulde-gmm document: ") + e.what(), 0);
  }
}

}  // namespace mulde

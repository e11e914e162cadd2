#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "mulde/datasets.hpp"
#include "mulde/energy_net.hpp"

namespace mulde {

/// L linearly spaced evaluation scales from sigma_low to sigma_high inclusive.
/// With L = 1 the single scale is sigma_low.
struct NoiseSchedule {
  double sigma_low = 1e-3;
  double sigma_high = 1.0;
  int L = 16;
  std::vector<double> scales;

  static NoiseSchedule linear(double sigma_low, double sigma_high, int L);
};

/// Row i, column j = f(x_i, scales[j]) on the clean, standardized rows.
Eigen::MatrixXd build_multiscale_vectors(const EnergyNet& net, const FeatureSet& standardized,
                                         const NoiseSchedule& schedule);

/// Full-covariance Gaussian mixture over L-dimensional vectors. Cholesky
/// factors are computed once at construction.
class GaussianMixture {
 public:
  GaussianMixture(std::vector<double> weights, std::vector<Eigen::VectorXd> means,
                  std::vector<Eigen::MatrixXd> covariances, double ridge);

  int num_components() const { return static_cast<int>(weights_.size()); }
  int dim() const { return static_cast<int>(means_.front().size()); }
  double ridge() const { return ridge_; }
  const std::vector<double>& weights() const { return weights_; }
  const std::vector<Eigen::VectorXd>& means() const { return means_; }
  const std::vector<Eigen::MatrixXd>& covariances() const { return covariances_; }

  /// -ln sum_k w_k N(v; mu_k, Sigma_k), evaluated with log-sum-exp.
  double nll(const Eigen::VectorXd& v) const;

  /// nll of every row of `vectors` (N x L).
  Eigen::VectorXd nll_rows(const Eigen::MatrixXd& vectors) const;

  /// Per-component ln(w_k N(v_n; mu_k, Sigma_k)), N x K.
  Eigen::MatrixXd component_log_densities(const Eigen::MatrixXd& vectors) const;

 private:
  std::vector<double> weights_;
  std::vector<Eigen::VectorXd> means_;
  std::vector<Eigen::MatrixXd> covariances_;
  double ridge_;
  std::vector<Eigen::MatrixXd> chol_lower_;
  std::vector<double> log_norm_;  // ln w_k - 0.5 ln det(2 pi Sigma_k)
};

struct EmTrace {
  std::vector<double> log_likelihood;  // total data log-likelihood before each M-step
  std::vector<std::string> events;     // component re-seeds and similar
  bool converged = false;
};

struct EmFit {
  GaussianMixture mixture;
  EmTrace trace;
};

/// 1e-6 times the mean per-column variance of `vectors` (floored at 1e-12).
double default_ridge(const Eigen::MatrixXd& vectors);

/// Projects a symmetric matrix onto {Sigma : min eigenvalue >= ridge}: the
/// eigenvalues below `ridge` are raised to `ridge`. Matrices that already
/// satisfy the bound are returned unchanged (symmetrized).
Eigen::MatrixXd floor_eigenvalues(const Eigen::MatrixXd& sym, double ridge);

/// EM with k-means++ seeding followed by one hard-assignment M-step. The
/// covariance M-step maximizes the expected log-likelihood subject to
/// eigenvalues >= ridge, so the log-likelihood is nondecreasing. Stops when the
/// relative improvement drops below `tol` or after `max_iters` E-steps.
EmFit fit_em(const Eigen::MatrixXd& vectors, int K, int max_iters = 500, double tol = 1e-7,
             double ridge = -1.0, std::uint64_t seed = 0);

/// {format: "mulde-gmm", version: 1, L, K, ridge, weights, means, covariances}.
nlohmann::json gmm_to_json(const GaussianMixture& gmm);
GaussianMixture gmm_from_json(const nlohmann::json& doc);

}  // namespace mulde

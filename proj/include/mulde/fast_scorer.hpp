#pragma once

#include <vector>

#include <Eigen/Dense>

#include "mulde/energy_net.hpp"
#include "mulde/gmm.hpp"
#include "mulde/pipeline.hpp"

namespace mulde {

/// Single-feature inference path: 32-bit weights, all noise scales evaluated
/// together as one small matrix, mixture likelihood in double. Scores agree
/// with score_rows() to float rounding (relative ~1e-5).
class FastScorer {
 public:
  FastScorer(const EnergyNet& net, const NoiseSchedule& schedule, const Standardizer& standardizer,
             GaussianMixture gmm);

  /// Multiscale energies of one raw (unstandardized) feature.
  Eigen::VectorXd energies(const Eigen::VectorXd& raw) const;

  /// GMM negative log-likelihood of one raw feature.
  double score(const Eigen::VectorXd& raw) const;

  int feature_dim() const { return feature_dim_; }

 private:
  using RowMajorXf = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

  int feature_dim_;
  Eigen::VectorXd mean_;
  Eigen::VectorXd inv_std_;
  std::vector<float> cond_;  // encoded scales, padded to a whole number of tiles
  int num_scales_;

  RowMajorXf first_x_;         // first-layer weights on the feature slots
  Eigen::VectorXf first_cond_; // first-layer weights on the conditioning slot
  Eigen::VectorXf first_bias_;
  std::vector<RowMajorXf> hidden_weights_;  // layers 2..H
  std::vector<Eigen::VectorXf> hidden_biases_;
  Eigen::VectorXf out_weight_;
  float out_bias_;
  GaussianMixture gmm_;
};

}  // namespace mulde

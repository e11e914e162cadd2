#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

namespace mulde {

/// Exact-erf GELU u * Phi(u) together with its first and second derivative.
struct GeluDerivatives {
  double value;
  double first;
  double second;
};

GeluDerivatives gelu_derivatives(double u);

/// Maps a noise scale onto the extra conditioning input of the network:
/// ln(sigma) affinely rescaled so that [sigma_low, sigma_high] -> [-1, 1].
struct SigmaConditioning {
  double sigma_low = 1e-3;
  double sigma_high = 1.0;

  double encode(double sigma) const;
};

struct DenseLayer {
  Eigen::MatrixXd weight;  // fan_out x fan_in
  Eigen::VectorXd bias;    // fan_out
};

/// Parameter-shaped storage, shared by the network weights, their gradients
/// and the Adam moment estimates.
struct NetParams {
  std::vector<DenseLayer> layers;

  std::size_t size() const;
  NetParams zeros_like() const;
  bool same_shape(const NetParams& other) const;
  bool all_finite() const;

  /// Visits every weight matrix and bias vector as a flat span, in layer order
  /// (weight before bias).
  template <typename Fn>
  void for_each_block(Fn&& fn) {
    for (auto& layer : layers) {
      fn(std::span<double>(layer.weight.data(), static_cast<std::size_t>(layer.weight.size())));
      fn(std::span<double>(layer.bias.data(), static_cast<std::size_t>(layer.bias.size())));
    }
  }
  template <typename Fn>
  void for_each_block(Fn&& fn) const {
    for (const auto& layer : layers) {
      fn(std::span<const double>(layer.weight.data(), static_cast<std::size_t>(layer.weight.size())));
      fn(std::span<const double>(layer.bias.data(), static_cast<std::size_t>(layer.bias.size())));
    }
  }

  /// Flat-index access in for_each_block order. Used by tests and gradient checks.
  double& at(std::size_t flat_index);
  double at(std::size_t flat_index) const;
};

/// Scalar-output GELU MLP f(x, sigma) approximating the negative log-density of
/// sigma-smoothed data. Input layout is [x ; c(sigma)], so the first layer has
/// feature_dim + 1 inputs.
class EnergyNet {
 public:
  /// All-zero parameters.
  EnergyNet(int feature_dim, std::vector<int> hidden_widths, SigmaConditioning conditioning);

  /// Glorot-uniform weights (variance 2 / (fan_in + fan_out)) and zero biases.
  static EnergyNet initialized(int feature_dim, std::vector<int> hidden_widths,
                               SigmaConditioning conditioning, std::uint64_t seed);

  int feature_dim() const { return feature_dim_; }
  int input_dim() const { return feature_dim_ + 1; }
  const std::vector<int>& hidden_widths() const { return hidden_widths_; }
  const SigmaConditioning& conditioning() const { return conditioning_; }

  const NetParams& params() const { return params_; }
  NetParams& mutable_params() { return params_; }

  double forward(const Eigen::VectorXd& x, double sigma) const;

  /// d f / d x, excluding the derivative with respect to the conditioning slot.
  Eigen::VectorXd input_gradient(const Eigen::VectorXd& x, double sigma) const;

  /// Batched variants; `xs` holds one sample per column and `sigmas` one noise
  /// scale per column.
  Eigen::RowVectorXd forward_batch(const Eigen::MatrixXd& xs, std::span<const double> sigmas) const;
  Eigen::MatrixXd input_gradient_batch(const Eigen::MatrixXd& xs,
                                       std::span<const double> sigmas) const;

  /// Energies of every column of `xs` at every scale: result(i, j) = f(x_i, sigmas[j]).
  Eigen::MatrixXd forward_multiscale(const Eigen::MatrixXd& xs, std::span<const double> sigmas) const;

  /// Input-gradient norms: result(i, j) = |grad_x f(x_i, sigmas[j])|_2.
  Eigen::MatrixXd gradient_norm_multiscale(const Eigen::MatrixXd& xs,
                                           std::span<const double> sigmas) const;

  /// [xs ; c(sigmas)] as fed to the first layer.
  Eigen::MatrixXd conditioned_input(const Eigen::MatrixXd& xs, std::span<const double> sigmas) const;

 private:
  void check_input(const Eigen::MatrixXd& xs, std::size_t n_sigmas) const;

  int feature_dim_;
  std::vector<int> hidden_widths_;
  SigmaConditioning conditioning_;
  NetParams params_;
};

/// lambda(sigma) weighting of the score-matching residual.
enum class LossWeighting {
  kSigmaSquared,  // lambda = sigma^2
  kUnit,          // lambda = 1
};

struct LossBatchItem {
  Eigen::VectorXd x;        // clean sample
  Eigen::VectorXd x_tilde;  // perturbed sample
  double sigma;
};

/// Column-major batch: column i of `clean`/`noisy` belongs to `sigmas[i]`.
struct LossBatch {
  Eigen::MatrixXd clean;
  Eigen::MatrixXd noisy;
  std::vector<double> sigmas;

  static LossBatch from_items(std::span<const LossBatchItem> items);
  std::size_t size() const { return sigmas.size(); }
};

struct LossAndGradient {
  double loss;
  NetParams grads;
};

/// Mean over the batch of
///   lambda(sigma) * |grad_x f(x_tilde, sigma) - (x_tilde - x) / sigma^2|^2 + beta * f(x, sigma)^2
/// and its exact parameter gradient, obtained by differentiating through the
/// analytic input gradient.
LossAndGradient loss_and_param_gradient(const EnergyNet& net, const LossBatch& batch, double beta,
                                        LossWeighting weighting = LossWeighting::kSigmaSquared);

LossAndGradient loss_and_param_gradient(const EnergyNet& net, std::span<const LossBatchItem> items,
                                        double beta,
                                        LossWeighting weighting = LossWeighting::kSigmaSquared);

/// {format: "mulde-net", version: 1, ...}. Doubles round-trip exactly.
nlohmann::json net_to_json(const EnergyNet& net);
EnergyNet net_from_json(const nlohmann::json& doc);

}  // namespace mulde

#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "mulde/datasets.hpp"
#include "mulde/energy_net.hpp"
#include "mulde/error.hpp"
#include "mulde/rng.hpp"

namespace mulde {

struct TrainConfig {
  double learning_rate = 5e-4;  // object-centric default; 1e-4 for frame-centric features
  double adam_beta1 = 0.5;
  double adam_beta2 = 0.9;
  double adam_epsilon = 1e-8;
  int batch_size = 2048;
  double beta_reg = 0.1;
  double sigma_low = 1e-3;
  double sigma_high = 1.0;
  int L = 16;  // evaluation scales; not used during training
  int max_epochs = 100;
  std::vector<int> hidden_widths = {4096, 4096};
  std::uint64_t seed = 0;

  // Optional early stop: quit once the epoch loss improved by less than
  // early_stop_min_improvement (relative) for early_stop_patience epochs in a row.
  bool early_stop = false;
  int early_stop_patience = 10;
  double early_stop_min_improvement = 1e-3;

  void validate() const;
};

/// Keys: learning_rate, adam_beta1, adam_beta2, adam_epsilon, batch_size,
/// beta_reg, sigma_low, sigma_high, L, max_epochs, hidden_widths, seed.
/// Missing keys keep their defaults; unknown keys are a usage error.
TrainConfig config_from_json(const nlohmann::json& doc);
nlohmann::json config_to_json(const TrainConfig& config);

struct AdamState {
  NetParams first_moments;
  NetParams second_moments;
  std::uint64_t step_count = 0;

  static AdamState zeros_like(const NetParams& params);
};

/// exp(U), U ~ Uniform[ln sigma_low, ln sigma_high]; always inside the closed interval.
double sample_log_uniform(Rng& rng, double sigma_low, double sigma_high);

/// x + sigma * z with z iid standard normal, drawn in coordinate order.
Eigen::VectorXd perturb(const Eigen::VectorXd& x, double sigma, Rng& rng);

/// Bias-corrected Adam update of `params` in place.
void adam_step(NetParams& params, const NetParams& grads, AdamState& state,
               const TrainConfig& config);

struct TrainResult {
  EnergyNet net;
  std::vector<double> history;  // mean training loss per epoch
};

/// Raised when the loss or a gradient stops being finite. Carries the last
/// parameters for which every completed step was finite.
class TrainingDiverged : public NumericError {
 public:
  TrainingDiverged(const std::string& what, int layer, EnergyNet last_good,
                   std::vector<double> history)
      : NumericError(what, layer), last_good_(std::move(last_good)), history_(std::move(history)) {}

  const EnergyNet& last_good() const { return last_good_; }
  const std::vector<double>& history() const { return history_; }

 private:
  EnergyNet last_good_;
  std::vector<double> history_;
};

using EpochCallback = std::function<void(int epoch, double mean_loss, const EnergyNet& net)>;

/// Trains on standardized, normal-only features: per epoch the rows are
/// shuffled into batches (the last short batch is kept), each element gets its
/// own log-uniform sigma and Gaussian perturbation, and one Adam step is taken
/// per batch. Deterministic given config.seed.
TrainResult train(const FeatureSet& features, EnergyNet net, const TrainConfig& config,
                  const EpochCallback& on_epoch = {});

}  // namespace mulde

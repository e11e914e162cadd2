#include "mulde/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <string>

namespace mulde {

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw UsageError("config: learning_rate must be positive");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0)) throw UsageError("config: adam_beta1 must lie in [0, 1)");
  if (!(adam_beta2 >= 0.0 && adam_beta2 < 1.0)) throw UsageError("config: adam_beta2 must lie in [0, 1)");
  if (!(adam_epsilon > 0.0)) throw UsageError("config: adam_epsilon must be positive");
  if (batch_size < 1) throw UsageError("config: batch_size must be at least 1");
  if (!(beta_reg >= 0.0)) throw UsageError("config: beta_reg must be nonnegative");
  if (!(sigma_low > 0.0 && sigma_low <= sigma_high)) {
    throw UsageError("config: need 0 < sigma_low <= sigma_high");
  }
  if (L < 1) throw UsageError("config: L must be positive");
  if (max_epochs < 1) throw UsageError("config: max_epochs must be positive");
  if (hidden_widths.empty()) throw UsageError("config: hidden_widths must be nonempty");
  for (int w : hidden_widths) {
    if (w < 1) throw UsageError("config: hidden widths must be positive");
  }
}

TrainConfig config_from_json(const nlohmann::json& doc) {
  static const std::set<std::string> kKeys = {
      "learning_rate", "adam_beta1", "adam_beta2", "adam_epsilon", "batch_size", "beta_reg",
      "sigma_low",     "sigma_high", "L",          "max_epochs",   "hidden_widths", "seed"};
  if (!doc.is_object()) throw FormatError("config: expected a JSON object", 0);
  for (const auto& item : doc.items()) {
    if (!kKeys.contains(item.key())) throw UsageError("config: unknown key '" + item.key() + "'");
  }
  TrainConfig c;
  try {
    c.learning_rate = doc.value("learning_rate", c.learning_rate);
    c.adam_beta1 = doc.value("adam_beta1", c.adam_beta1);
    c.adam_beta2 = doc.value("adam_beta2", c.adam_beta2);
    c.adam_epsilon = doc.value("adam_epsilon", c.adam_epsilon);
    c.batch_size = doc.value("batch_size", c.batch_size);
    c.beta_reg = doc.value("beta_reg", c.beta_reg);
    c.sigma_low = doc.value("sigma_low", c.sigma_low);
    c.sigma_high = doc.value("sigma_high", c.sigma_high);
    c.L = doc.value("L", c.L);
    c.max_epochs = doc.value("max_epochs", c.max_epochs);
    c.hidden_widths = doc.value("hidden_widths", c.hidden_widths);
    c.seed = doc.value("seed", c.seed);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("config: ") + e.what(), 0);
  }
  c.validate();
  return c;
}

nlohmann::json config_to_json(const TrainConfig& c) {
  return {{"learning_rate", c.learning_rate}, {"adam_beta1", c.adam_beta1},
          {"adam_beta2", c.adam_beta2},       {"adam_epsilon", c.adam_epsilon},
          {"batch_size", c.batch_size},       {"beta_reg", c.beta_reg},
          {"sigma_low", c.sigma_low},         {"sigma_high", c.sigma_high},
          {"L", c.L},                         {"max_epochs", c.max_epochs},
          {"hidden_widths", c.hidden_widths}, {"seed", c.seed}};
}

AdamState AdamState::zeros_like(const NetParams& params) {
  return {params.zeros_like(), params.zeros_like(), 0};
}

double sample_log_uniform(Rng& rng, double sigma_low, double sigma_high) {
  if (!(sigma_low > 0.0 && sigma_low <= sigma_high)) {
    throw UsageError("sample_log_uniform: need 0 < sigma_low <= sigma_high");
  }
  const double lo = std::log(sigma_low);
  const double hi = std::log(sigma_high);
  const double sigma = std::exp(lo + (hi - lo) * rng.uniform());
  return std::clamp(sigma, sigma_low, sigma_high);
}

Eigen::VectorXd perturb(const Eigen::VectorXd& x, double sigma, Rng& rng) {
  if (!(sigma > 0.0)) throw UsageError("perturb: sigma must be positive");
  Eigen::VectorXd out(x.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) out(i) = x(i) + sigma * rng.normal();
  return out;
}

void adam_step(NetParams& params, const NetParams& grads, AdamState& state,
               const TrainConfig& config) {
  if (!params.same_shape(grads) || !params.same_shape(state.first_moments) ||
      !params.same_shape(state.second_moments)) {
    throw UsageError("adam_step: parameter, gradient and moment shapes differ");
  }
  ++state.step_count;
  const double b1 = config.adam_beta1;
  const double b2 = config.adam_beta2;
  const double t = static_cast<double>(state.step_count);
  const double correction1 = 1.0 - std::pow(b1, t);
  const double correction2 = 1.0 - std::pow(b2, t);
  const double lr = config.learning_rate;
  const double eps = config.adam_epsilon;

  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    auto update = [&](auto& p, const auto& g, auto& m, auto& v) {
      m = b1 * m + (1.0 - b1) * g;
      v = b2 * v + (1.0 - b2) * g.cwiseProduct(g);
      p.array() -= lr * (m.array() / correction1) / ((v.array() / correction2).sqrt() + eps);
    };
    update(params.layers[l].weight, grads.layers[l].weight, state.first_moments.layers[l].weight,
           state.second_moments.layers[l].weight);
    update(params.layers[l].bias, grads.layers[l].bias, state.first_moments.layers[l].bias,
           state.second_moments.layers[l].bias);
  }
}

TrainResult train(const FeatureSet& features, EnergyNet net, const TrainConfig& config,
                  const EpochCallback& on_epoch) {
  config.validate();
  const std::size_t n = features.size();
  if (n == 0) throw UsageError("train: no training rows");
  if (features.rows.cols() != net.feature_dim()) {
    throw ShapeError("train: features have dimension " + std::to_string(features.rows.cols()) +
                     " but the network expects " + std::to_string(net.feature_dim()));
  }
  const Eigen::MatrixXd samples = features.rows.transpose();  // one sample per column
  const int d = net.feature_dim();

  Rng rng(config.seed);
  AdamState adam = AdamState::zeros_like(net.params());
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<double> history;
  int stalled = 0;

  for (int epoch = 0; epoch < config.max_epochs; ++epoch) {
    // Fisher-Yates with the portable generator.
    for (std::size_t i = n - 1; i > 0; --i) std::swap(order[i], order[rng.uniform_index(i + 1)]);

    double loss_sum = 0.0;
    for (std::size_t start = 0; start < n; start += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t count = std::min(static_cast<std::size_t>(config.batch_size), n - start);
      LossBatch batch;
      batch.clean.resize(d, static_cast<Eigen::Index>(count));
      batch.noisy.resize(d, static_cast<Eigen::Index>(count));
      batch.sigmas.resize(count);
      for (std::size_t i = 0; i < count; ++i) {
        const auto col = static_cast<Eigen::Index>(i);
        const double sigma = sample_log_uniform(rng, config.sigma_low, config.sigma_high);
        batch.sigmas[i] = sigma;
        batch.clean.col(col) = samples.col(static_cast<Eigen::Index>(order[start + i]));
        batch.noisy.col(col) = perturb(batch.clean.col(col), sigma, rng);
      }

      LossAndGradient step;
      try {
        step = loss_and_param_gradient(net, batch, config.beta_reg, LossWeighting::kSigmaSquared);
      } catch (const NumericError& e) {
        throw TrainingDiverged(std::string("training diverged in epoch ") + std::to_string(epoch) +
                                   ": " + e.what(),
                               e.layer(), net, history);
      }
      adam_step(net.mutable_params(), step.grads, adam, config);
      loss_sum += step.loss * static_cast<double>(count);
    }

    const double mean_loss = loss_sum / static_cast<double>(n);
    if (!std::isfinite(mean_loss)) {
      throw TrainingDiverged("training diverged: non-finite epoch loss", -1, net, history);
    }
    if (!history.empty() && config.early_stop) {
      const double previous = history.back();
      const double improvement = (previous - mean_loss) / std::max(std::abs(previous), 1e-300);
      stalled = improvement < config.early_stop_min_improvement ? stalled + 1 : 0;
    }
    history.push_back(mean_loss);
    if (on_epoch) on_epoch(epoch, mean_loss, net);
    if (config.early_stop && stalled >= config.early_stop_patience) break;
  }
  return {std::move(net), std::move(history)};
}

}  // namespace mulde

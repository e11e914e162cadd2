#include "mulde/energy_net.hpp"

#include <cmath>
#include <numbers>
#include <string>

#include "mulde/error.hpp"
#include "mulde/rng.hpp"

namespace mulde {
namespace {

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

struct Activations {
  Eigen::MatrixXd value;
  Eigen::MatrixXd first;
  Eigen::MatrixXd second;
};

Eigen::MatrixXd gelu_value(const Eigen::MatrixXd& a) {
  return a.unaryExpr([](double u) { return 0.5 * u * std::erfc(-u * kInvSqrt2); });
}

Activations gelu_all(const Eigen::MatrixXd& a, bool need_second) {
  Activations out{Eigen::MatrixXd(a.rows(), a.cols()), Eigen::MatrixXd(a.rows(), a.cols()),
                  need_second ? Eigen::MatrixXd(a.rows(), a.cols()) : Eigen::MatrixXd()};
  const Eigen::Index n = a.size();
  const double* src = a.data();
  double* v = out.value.data();
  double* d1 = out.first.data();
  double* d2 = need_second ? out.second.data() : nullptr;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double u = src[i];
    const double cdf = 0.5 * std::erfc(-u * kInvSqrt2);
    const double pdf = kInvSqrt2Pi * std::exp(-0.5 * u * u);
    v[i] = u * cdf;
    d1[i] = cdf + u * pdf;
    if (d2) d2[i] = pdf * (2.0 - u * u);
  }
  return out;
}

void require_finite(const Eigen::MatrixXd& m, int layer, const char* what) {
  if (!m.allFinite()) {
    throw NumericError(std::string("non-finite ") + what + " in layer " + std::to_string(layer),
                       layer);
  }
}

}  // namespace

GeluDerivatives gelu_derivatives(double u) {
  const double cdf = 0.5 * std::erfc(-u * kInvSqrt2);
  const double pdf = kInvSqrt2Pi * std::exp(-0.5 * u * u);
  return {u * cdf, cdf + u * pdf, pdf * (2.0 - u * u)};
}

double SigmaConditioning::encode(double sigma) const {
  const double lo = std::log(sigma_low);
  const double hi = std::log(sigma_high);
  if (hi == lo) return 0.0;
  return 2.0 * (std::log(sigma) - lo) / (hi - lo) - 1.0;
}

// --- NetParams --------------------------------------------------------------

std::size_t NetParams::size() const {
  std::size_t n = 0;
  for (const auto& layer : layers) n += layer.weight.size() + layer.bias.size();
  return n;
}

NetParams NetParams::zeros_like() const {
  NetParams out;
  out.layers.reserve(layers.size());
  for (const auto& layer : layers) {
    out.layers.push_back({Eigen::MatrixXd::Zero(layer.weight.rows(), layer.weight.cols()),
                          Eigen::VectorXd::Zero(layer.bias.size())});
  }
  return out;
}

bool NetParams::same_shape(const NetParams& other) const {
  if (layers.size() != other.layers.size()) return false;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (layers[i].weight.rows() != other.layers[i].weight.rows() ||
        layers[i].weight.cols() != other.layers[i].weight.cols() ||
        layers[i].bias.size() != other.layers[i].bias.size()) {
      return false;
    }
  }
  return true;
}

bool NetParams::all_finite() const {
  for (const auto& layer : layers) {
    if (!layer.weight.allFinite() || !layer.bias.allFinite()) return false;
  }
  return true;
}

double& NetParams::at(std::size_t flat_index) {
  for (auto& layer : layers) {
    const auto nw = static_cast<std::size_t>(layer.weight.size());
    if (flat_index < nw) return layer.weight.data()[flat_index];
    flat_index -= nw;
    const auto nb = static_cast<std::size_t>(layer.bias.size());
    if (flat_index < nb) return layer.bias.data()[flat_index];
    flat_index -= nb;
  }
  throw UsageError("NetParams::at: index out of range");
}

double NetParams::at(std::size_t flat_index) const {
  return const_cast<NetParams*>(this)->at(flat_index);
}

// --- EnergyNet --------------------------------------------------------------

EnergyNet::EnergyNet(int feature_dim, std::vector<int> hidden_widths,
                     SigmaConditioning conditioning)
    : feature_dim_(feature_dim),
      hidden_widths_(std::move(hidden_widths)),
      conditioning_(conditioning) {
  if (feature_dim_ <= 0) throw UsageError("EnergyNet: feature_dim must be positive");
  if (!(conditioning_.sigma_low > 0.0) || !(conditioning_.sigma_low <= conditioning_.sigma_high)) {
    throw UsageError("EnergyNet: conditioning requires 0 < sigma_low <= sigma_high");
  }
  if (hidden_widths_.empty()) throw UsageError("EnergyNet: at least one hidden layer required");
  int fan_in = input_dim();
  for (int width : hidden_widths_) {
    if (width <= 0) throw UsageError("EnergyNet: hidden widths must be positive");
    params_.layers.push_back({Eigen::MatrixXd::Zero(width, fan_in), Eigen::VectorXd::Zero(width)});
    fan_in = width;
  }
  params_.layers.push_back({Eigen::MatrixXd::Zero(1, fan_in), Eigen::VectorXd::Zero(1)});
}

EnergyNet EnergyNet::initialized(int feature_dim, std::vector<int> hidden_widths,
                                 SigmaConditioning conditioning, std::uint64_t seed) {
  EnergyNet net(feature_dim, std::move(hidden_widths), conditioning);
  Rng rng(seed);
  for (auto& layer : net.params_.layers) {
    const double fan_sum = static_cast<double>(layer.weight.rows() + layer.weight.cols());
    const double limit = std::sqrt(6.0 / fan_sum);
    // Column-major fill order; fixed so that seeds are portable.
    for (Eigen::Index i = 0; i < layer.weight.size(); ++i) {
      layer.weight.data()[i] = limit * (2.0 * rng.uniform() - 1.0);
    }
  }
  return net;
}

void EnergyNet::check_input(const Eigen::MatrixXd& xs, std::size_t n_sigmas) const {
  if (xs.rows() != feature_dim_) {
    throw ShapeError("EnergyNet: expected feature dimension " + std::to_string(feature_dim_) +
                     ", got " + std::to_string(xs.rows()));
  }
  if (static_cast<std::size_t>(xs.cols()) != n_sigmas) {
    throw ShapeError("EnergyNet: one sigma per input column required");
  }
}

Eigen::MatrixXd EnergyNet::conditioned_input(const Eigen::MatrixXd& xs,
                                             std::span<const double> sigmas) const {
  check_input(xs, sigmas.size());
  Eigen::MatrixXd z(input_dim(), xs.cols());
  z.topRows(feature_dim_) = xs;
  for (Eigen::Index j = 0; j < xs.cols(); ++j) {
    const double sigma = sigmas[static_cast<std::size_t>(j)];
    if (!(sigma > 0.0)) throw UsageError("EnergyNet: sigma must be positive");
    z(feature_dim_, j) = conditioning_.encode(sigma);
  }
  return z;
}

Eigen::RowVectorXd EnergyNet::forward_batch(const Eigen::MatrixXd& xs,
                                            std::span<const double> sigmas) const {
  Eigen::MatrixXd h = conditioned_input(xs, sigmas);
  const auto n_layers = params_.layers.size();
  for (std::size_t l = 0; l + 1 < n_layers; ++l) {
    const auto& layer = params_.layers[l];
    Eigen::MatrixXd a = layer.weight * h;
    a.colwise() += layer.bias;
    h = gelu_value(a);
    require_finite(h, static_cast<int>(l), "activation");
  }
  const auto& out = params_.layers.back();
  Eigen::RowVectorXd f = out.weight * h;
  f.array() += out.bias(0);
  require_finite(f, static_cast<int>(n_layers - 1), "output");
  return f;
}

double EnergyNet::forward(const Eigen::VectorXd& x, double sigma) const {
  const double s[] = {sigma};
  return forward_batch(x, s)(0);
}

Eigen::MatrixXd EnergyNet::input_gradient_batch(const Eigen::MatrixXd& xs,
                                                std::span<const double> sigmas) const {
  Eigen::MatrixXd h = conditioned_input(xs, sigmas);
  const auto n_hidden = params_.layers.size() - 1;
  std::vector<Eigen::MatrixXd> slopes;
  slopes.reserve(n_hidden);
  for (std::size_t l = 0; l < n_hidden; ++l) {
    const auto& layer = params_.layers[l];
    Eigen::MatrixXd a = layer.weight * h;
    a.colwise() += layer.bias;
    Activations act = gelu_all(a, false);
    require_finite(act.value, static_cast<int>(l), "activation");
    h = std::move(act.value);
    slopes.push_back(std::move(act.first));
  }
  // delta = df/dh, starting at the output weights (identical for every column).
  Eigen::MatrixXd delta =
      params_.layers.back().weight.transpose().replicate(1, xs.cols());
  for (std::size_t l = n_hidden; l-- > 0;) {
    const Eigen::MatrixXd e = delta.cwiseProduct(slopes[l]);
    delta = params_.layers[l].weight.transpose() * e;
  }
  return delta.topRows(feature_dim_);
}

Eigen::VectorXd EnergyNet::input_gradient(const Eigen::VectorXd& x, double sigma) const {
  const double s[] = {sigma};
  return input_gradient_batch(x, s).col(0);
}

Eigen::MatrixXd EnergyNet::forward_multiscale(const Eigen::MatrixXd& xs,
                                              std::span<const double> sigmas) const {
  if (xs.rows() != feature_dim_) {
    throw ShapeError("EnergyNet: expected feature dimension " + std::to_string(feature_dim_) +
                     ", got " + std::to_string(xs.rows()));
  }
  const Eigen::Index n = xs.cols();
  Eigen::MatrixXd out(n, static_cast<Eigen::Index>(sigmas.size()));
  if (n == 0 || sigmas.empty()) return out;

  // The conditioning slot only shifts the first pre-activation, so the x part
  // of the first layer is shared across scales.
  const auto& first = params_.layers.front();
  Eigen::MatrixXd shared = first.weight.leftCols(feature_dim_) * xs;
  shared.colwise() += first.bias;
  const Eigen::VectorXd cond_column = first.weight.col(feature_dim_);

  for (std::size_t j = 0; j < sigmas.size(); ++j) {
    if (!(sigmas[j] > 0.0)) throw UsageError("EnergyNet: sigma must be positive");
    Eigen::MatrixXd a = shared;
    a.colwise() += conditioning_.encode(sigmas[j]) * cond_column;
    Eigen::MatrixXd h = gelu_value(a);
    require_finite(h, 0, "activation");
    for (std::size_t l = 1; l + 1 < params_.layers.size(); ++l) {
      const auto& layer = params_.layers[l];
      a.noalias() = layer.weight * h;
      a.colwise() += layer.bias;
      h = gelu_value(a);
      require_finite(h, static_cast<int>(l), "activation");
    }
    const auto& last = params_.layers.back();
    Eigen::RowVectorXd f = last.weight * h;
    f.array() += last.bias(0);
    require_finite(f, static_cast<int>(params_.layers.size() - 1), "output");
    out.col(static_cast<Eigen::Index>(j)) = f.transpose();
  }
  return out;
}

Eigen::MatrixXd EnergyNet::gradient_norm_multiscale(const Eigen::MatrixXd& xs,
                                                    std::span<const double> sigmas) const {
  const Eigen::Index n = xs.cols();
  Eigen::MatrixXd out(n, static_cast<Eigen::Index>(sigmas.size()));
  for (std::size_t j = 0; j < sigmas.size(); ++j) {
    const std::vector<double> column_sigmas(static_cast<std::size_t>(n), sigmas[j]);
    out.col(static_cast<Eigen::Index>(j)) =
        input_gradient_batch(xs, column_sigmas).colwise().norm().transpose();
  }
  return out;
}

// --- Loss -------------------------------------------------------------------

LossBatch LossBatch::from_items(std::span<const LossBatchItem> items) {
  LossBatch batch;
  if (items.empty()) return batch;
  const Eigen::Index d = items.front().x.size();
  const auto n = static_cast<Eigen::Index>(items.size());
  batch.clean.resize(d, n);
  batch.noisy.resize(d, n);
  batch.sigmas.reserve(items.size());
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& item = items[static_cast<std::size_t>(i)];
    if (item.x.size() != d || item.x_tilde.size() != d) {
      throw ShapeError("LossBatch: all items must share one feature dimension");
    }
    batch.clean.col(i) = item.x;
    batch.noisy.col(i) = item.x_tilde;
    batch.sigmas.push_back(item.sigma);
  }
  return batch;
}

LossAndGradient loss_and_param_gradient(const EnergyNet& net, std::span<const LossBatchItem> items,
                                        double beta, LossWeighting weighting) {
  return loss_and_param_gradient(net, LossBatch::from_items(items), beta, weighting);
}

LossAndGradient loss_and_param_gradient(const EnergyNet& net, const LossBatch& batch, double beta,
                                        LossWeighting weighting) {
  const std::size_t batch_size = batch.size();
  if (batch_size == 0) throw UsageError("loss_and_param_gradient: empty batch");
  if (!(beta >= 0.0)) throw UsageError("loss_and_param_gradient: beta must be nonnegative");
  if (batch.clean.cols() != batch.noisy.cols() || batch.clean.rows() != batch.noisy.rows()) {
    throw ShapeError("loss_and_param_gradient: clean and noisy batches differ in shape");
  }
  const auto& layers = net.params().layers;
  const std::size_t n_hidden = layers.size() - 1;
  const int d = net.feature_dim();
  const auto cols = static_cast<Eigen::Index>(batch_size);
  const double inv_n = 1.0 / static_cast<double>(batch_size);

  LossAndGradient result{0.0, net.params().zeros_like()};
  auto& grads = result.grads.layers;

  // Forward pass on the noisy inputs, keeping GELU derivatives.
  std::vector<Eigen::MatrixXd> inputs;  // h_{l-1} for every layer l
  std::vector<Activations> acts;
  inputs.reserve(layers.size());
  acts.reserve(n_hidden);
  inputs.push_back(net.conditioned_input(batch.noisy, batch.sigmas));
  for (std::size_t l = 0; l < n_hidden; ++l) {
    Eigen::MatrixXd a = layers[l].weight * inputs.back();
    a.colwise() += layers[l].bias;
    require_finite(a, static_cast<int>(l), "pre-activation");
    acts.push_back(gelu_all(a, true));
    inputs.push_back(acts.back().value);
  }

  // Backward pass for the input gradient: deltas[l] = df/dh_l.
  std::vector<Eigen::MatrixXd> deltas(n_hidden + 1);
  deltas[n_hidden] = layers.back().weight.transpose().replicate(1, cols);
  std::vector<Eigen::MatrixXd> slopes_times_delta(n_hidden);
  for (std::size_t l = n_hidden; l-- > 0;) {
    slopes_times_delta[l] = deltas[l + 1].cwiseProduct(acts[l].first);
    deltas[l] = layers[l].weight.transpose() * slopes_times_delta[l];
    require_finite(deltas[l], static_cast<int>(l), "input-gradient");
  }
  // deltas[0] is d f / d [x ; c]; only the x rows are the score.

  Eigen::MatrixXd residual = deltas[0].topRows(d);
  Eigen::RowVectorXd lambda(cols);
  for (Eigen::Index i = 0; i < cols; ++i) {
    const double sigma = batch.sigmas[static_cast<std::size_t>(i)];
    const double inv_var = 1.0 / (sigma * sigma);
    residual.col(i) -= (batch.noisy.col(i) - batch.clean.col(i)) * inv_var;
    lambda(i) = weighting == LossWeighting::kSigmaSquared ? sigma * sigma : 1.0;
  }
  const Eigen::RowVectorXd residual_sq = residual.colwise().squaredNorm();
  double score_term = 0.0;
  for (Eigen::Index i = 0; i < cols; ++i) score_term += lambda(i) * residual_sq(i);

  // Reverse-mode through the backward pass. adj_delta = dR / d deltas[l].
  Eigen::MatrixXd adj_delta = Eigen::MatrixXd::Zero(d + 1, cols);
  adj_delta.topRows(d) = residual * (2.0 * inv_n * lambda).asDiagonal();
  std::vector<Eigen::MatrixXd> adj_pre(n_hidden);  // direct dR / d a_l via GELU''
  for (std::size_t l = 0; l < n_hidden; ++l) {
    // deltas[l] = W_l^T (deltas[l+1] .* g'(a_l))
    const Eigen::MatrixXd adj_e = layers[l].weight * adj_delta;
    grads[l].weight.noalias() += slopes_times_delta[l] * adj_delta.transpose();
    adj_pre[l] = adj_e.cwiseProduct(deltas[l + 1]).cwiseProduct(acts[l].second);
    adj_delta = adj_e.cwiseProduct(acts[l].first);
  }
  // deltas[n_hidden] is the output weight row replicated over columns.
  grads.back().weight += adj_delta.rowwise().sum().transpose();

  // The pre-activations depend on parameters through the forward pass.
  Eigen::MatrixXd adj_a = std::move(adj_pre[n_hidden - 1]);
  for (std::size_t l = n_hidden; l-- > 0;) {
    grads[l].weight.noalias() += adj_a * inputs[l].transpose();
    grads[l].bias += adj_a.rowwise().sum();
    if (l > 0) {
      Eigen::MatrixXd next = layers[l].weight.transpose() * adj_a;
      adj_a = adj_pre[l - 1] + next.cwiseProduct(acts[l - 1].first);
    }
  }

  // Regularizer beta * f(x, sigma)^2 on the clean samples.
  double reg_term = 0.0;
  if (beta > 0.0) {
    std::vector<Eigen::MatrixXd> clean_inputs;
    std::vector<Eigen::MatrixXd> clean_slopes;
    clean_inputs.reserve(layers.size());
    clean_inputs.push_back(net.conditioned_input(batch.clean, batch.sigmas));
    for (std::size_t l = 0; l < n_hidden; ++l) {
      Eigen::MatrixXd a = layers[l].weight * clean_inputs.back();
      a.colwise() += layers[l].bias;
      require_finite(a, static_cast<int>(l), "pre-activation");
      Activations act = gelu_all(a, false);
      clean_inputs.push_back(std::move(act.value));
      clean_slopes.push_back(std::move(act.first));
    }
    Eigen::RowVectorXd f = layers.back().weight * clean_inputs.back();
    f.array() += layers.back().bias(0);
    require_finite(f, static_cast<int>(n_hidden), "output");
    reg_term = beta * f.squaredNorm();

    const Eigen::RowVectorXd adj_f = (2.0 * beta * inv_n) * f;
    grads.back().weight.noalias() += adj_f * clean_inputs.back().transpose();
    grads.back().bias(0) += adj_f.sum();
    Eigen::MatrixXd adj_h = layers.back().weight.transpose() * adj_f;
    for (std::size_t l = n_hidden; l-- > 0;) {
      const Eigen::MatrixXd adj = adj_h.cwiseProduct(clean_slopes[l]);
      grads[l].weight.noalias() += adj * clean_inputs[l].transpose();
      grads[l].bias += adj.rowwise().sum();
      if (l > 0) adj_h = layers[l].weight.transpose() * adj;
    }
  }

  result.loss = (score_term + reg_term) * inv_n;
  if (!std::isfinite(result.loss)) {
    throw NumericError("non-finite loss", static_cast<int>(n_hidden));
  }
  for (std::size_t l = 0; l < grads.size(); ++l) {
    if (!grads[l].weight.allFinite() || !grads[l].bias.allFinite()) {
      throw NumericError("non-finite parameter gradient in layer " + std::to_string(l),
                         static_cast<int>(l));
    }
  }
  return result;
}

// --- Serialization ----------------------------------------------------------

nlohmann::json net_to_json(const EnergyNet& net) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& layer : net.params().layers) {
    nlohmann::json rows = nlohmann::json::array();
    for (Eigen::Index r = 0; r < layer.weight.rows(); ++r) {
      nlohmann::json row = nlohmann::json::array();
      for (Eigen::Index c = 0; c < layer.weight.cols(); ++c) row.push_back(layer.weight(r, c));
      rows.push_back(std::move(row));
    }
    nlohmann::json bias = nlohmann::json::array();
    for (Eigen::Index r = 0; r < layer.bias.size(); ++r) bias.push_back(layer.bias(r));
    layers.push_back({{"w", std::move(rows)}, {"b", std::move(bias)}});
  }
  return {
      {"format", "mulde-net"},
      {"version", 1},
      {"input_dim", net.input_dim()},
      {"hidden_widths", net.hidden_widths()},
      {"conditioning",
       {{"kind", "log-affine"},
        {"sigma_low", net.conditioning().sigma_low},
        {"sigma_high", net.conditioning().sigma_high}}},
      {"layers", std::move(layers)},
  };
}

EnergyNet net_from_json(const nlohmann::json& doc) {
  try {
    if (doc.at("format").get<std::string>() != "mulde-net") {
      throw FormatError("not a mulde-net document", 0);
    }
    if (doc.at("version").get<int>() != 1) throw FormatError("unsupported mulde-net version", 0);
    const auto& cond = doc.at("conditioning");
    if (cond.at("kind").get<std::string>() != "log-affine") {
      throw FormatError("unsupported conditioning kind", 0);
    }
    EnergyNet net(doc.at("input_dim").get<int>() - 1, doc.at("hidden_widths").get<std::vector<int>>(),
                  {cond.at("sigma_low").get<double>(), cond.at("sigma_high").get<double>()});
    const auto& layers = doc.at("layers");
    auto& params = net.mutable_params().layers;
    if (layers.size() != params.size()) throw FormatError("layer count mismatch", 0);
    for (std::size_t l = 0; l < params.size(); ++l) {
      const auto& rows = layers[l].at("w");
      const auto& bias = layers[l].at("b");
      auto& w = params[l].weight;
      auto& b = params[l].bias;
      if (rows.size() != static_cast<std::size_t>(w.rows()) ||
          bias.size() != static_cast<std::size_t>(b.size())) {
        throw FormatError("layer " + std::to_string(l) + " has the wrong shape", l);
      }
      for (Eigen::Index r = 0; r < w.rows(); ++r) {
        const auto& row = rows[static_cast<std::size_t>(r)];
        if (row.size() != static_cast<std::size_t>(w.cols())) {
          throw FormatError("layer " + std::to_string(l) + " has the wrong shape", l);
        }
        for (Eigen::Index c = 0; c < w.cols(); ++c) w(r, c) = row[static_cast<std::size_t>(c)].get<double>();
      }
      for (Eigen::Index r = 0; r < b.size(); ++r) b(r) = bias[static_cast<std::size_t>(r)].get<double>();
    }
    if (!net.params().all_finite()) throw FormatError("non-finite parameter", 0);
    return net;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed mulde-net document: ") + e.what(), 0);
  } catch (const UsageError& e) {
    throw FormatError(std::string("invalid mulde-net document: ") + e.what(), 0);
  }
}

}  // namespace mulde

#include <cmath>
#include <limits>
#include <numbers>

#include <gtest/gtest.h>

#include "mulde/energy_net.hpp"
#include "mulde/error.hpp"
#include "mulde/rng.hpp"
#include "oracles.hpp"

namespace mulde {
namespace {

TEST(Gelu, ValuesAtZero) {
  const auto g = gelu_derivatives(0.0);
  EXPECT_EQ(g.value, 0.0);
  EXPECT_NEAR(g.first, 0.5, 1e-15);
  EXPECT_NEAR(g.second, 0.7978845608028654, 1e-12);
}

TEST(Gelu, ReflectionIdentity) {
  for (double u : {-3.0, -0.7, 0.1, 1.3, 4.0}) {
    EXPECT_NEAR(gelu_derivatives(u).value - gelu_derivatives(-u).value, u, 1e-14);
  }
}

TEST(Gelu, SaturatesForLargeInput) {
  const auto g = gelu_derivatives(10.0);
  EXPECT_NEAR(g.value, 10.0, 1e-6);
  EXPECT_NEAR(g.first, 1.0, 1e-6);
  EXPECT_NEAR(g.second, 0.0, 1e-6);
}

TEST(Gelu, DerivativesMatchFiniteDifferences) {
  for (double u = -5.0; u <= 5.0; u += 0.37) {
    const double h = 1e-5;
    const auto g = gelu_derivatives(u);
    const double d1 = (gelu_derivatives(u + h).value - gelu_derivatives(u - h).value) / (2 * h);
    const double d2 = (gelu_derivatives(u + h).first - gelu_derivatives(u - h).first) / (2 * h);
    EXPECT_NEAR(g.first, d1, 1e-9) << u;
    EXPECT_NEAR(g.second, d2, 1e-9) << u;
  }
}

TEST(Conditioning, MapsIntervalToUnitRange) {
  SigmaConditioning c{1e-3, 1.0};
  EXPECT_NEAR(c.encode(1e-3), -1.0, 1e-15);
  EXPECT_NEAR(c.encode(1.0), 1.0, 1e-15);
  EXPECT_NEAR(c.encode(std::sqrt(1e-3)), 0.0, 1e-15);
  EXPECT_EQ((SigmaConditioning{0.5, 0.5}.encode(0.5)), 0.0);
}

TEST(EnergyNet, ZeroWeightsReturnFinalBias) {
  EnergyNet net(3, {5, 4}, {1e-3, 1.0});
  net.mutable_params().layers.back().bias(0) = 1.75;
  Rng rng(1);
  for (int i = 0; i < 5; ++i) {
    const auto x = oracle::random_vector(rng, 3);
    EXPECT_EQ(net.forward(x, 0.1 + 0.2 * i), 1.75);
    EXPECT_EQ(net.input_gradient(x, 0.3), Eigen::VectorXd::Zero(3));
  }
}

TEST(EnergyNet, ForwardMatchesNaiveImplementation) {
  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    const auto net = oracle::random_net(4, {9, 7, 5}, 100 + trial);
    const auto x = oracle::random_vector(rng, 4);
    const double sigma = 1e-3 + rng.uniform();
    EXPECT_NEAR(net.forward(x, sigma), oracle::forward(net, x, sigma), 1e-12);
  }
}

TEST(EnergyNet, ForwardIsDeterministic) {
  const auto net = oracle::random_net(3, {16, 16}, 3);
  const Eigen::VectorXd x = Eigen::VectorXd::LinSpaced(3, -1, 1);
  EXPECT_EQ(net.forward(x, 0.2), net.forward(x, 0.2));
}

TEST(EnergyNet, InputGradientMatchesNaiveAndFiniteDifferences) {
  Rng rng(11);
  for (int trial = 0; trial < 30; ++trial) {
    const auto net = oracle::random_net(3, {8, 6}, 200 + trial);
    const auto x = oracle::random_vector(rng, 3);
    const double sigma = 0.01 + rng.uniform();
    const Eigen::VectorXd g = net.input_gradient(x, sigma);
    EXPECT_LT(oracle::rel_err(g, oracle::input_gradient(net, x, sigma)), 1e-12);
    const auto fd = oracle::fd_gradient([&](const Eigen::VectorXd& v) { return net.forward(v, sigma); }, x);
    EXPECT_LT(oracle::rel_err(g, fd), 1e-6);
  }
}

TEST(EnergyNet, BatchAndMultiscaleAgreeWithSingleCalls) {
  const auto net = oracle::random_net(2, {10, 10}, 5);
  Rng rng(5);
  Eigen::MatrixXd xs(2, 6);
  for (int i = 0; i < 6; ++i) xs.col(i) = oracle::random_vector(rng, 2);
  const std::vector<double> sigmas = {0.001, 0.01, 0.1, 0.3, 0.6, 1.0};
  const auto f = net.forward_batch(xs, sigmas);
  const auto g = net.input_gradient_batch(xs, sigmas);
  const auto multi = net.forward_multiscale(xs, sigmas);
  const auto norms = net.gradient_norm_multiscale(xs, sigmas);
  for (int i = 0; i < 6; ++i) {
    EXPECT_NEAR(f(i), net.forward(xs.col(i), sigmas[i]), 1e-13);
    EXPECT_LT(oracle::rel_err(g.col(i), net.input_gradient(xs.col(i), sigmas[i])), 1e-13);
    for (int j = 0; j < 6; ++j) {
      EXPECT_NEAR(multi(i, j), net.forward(xs.col(i), sigmas[j]), 1e-12);
      EXPECT_NEAR(norms(i, j), net.input_gradient(xs.col(i), sigmas[j]).norm(), 1e-12);
    }
  }
}

TEST(EnergyNet, HessianIsSymmetric) {
  Rng rng(13);
  for (int trial = 0; trial < 10; ++trial) {
    const auto net = oracle::random_net(4, {12, 12}, 300 + trial);
    const auto x = oracle::random_vector(rng, 4);
    Eigen::MatrixXd H(4, 4);
    for (int i = 0; i < 4; ++i) {
      H.row(i) = oracle::fd_gradient([&](const Eigen::VectorXd& v) { return net.input_gradient(v, 0.2)(i); }, x)
                     .transpose();
    }
    EXPECT_LT((H - H.transpose()).cwiseAbs().maxCoeff(), 1e-6);
  }
}

TEST(EnergyNet, DimensionMismatchThrows) {
  const auto net = oracle::random_net(3, {4}, 1);
  EXPECT_THROW(net.forward(Eigen::VectorXd::Zero(2), 0.1), ShapeError);
  EXPECT_THROW(net.input_gradient(Eigen::VectorXd::Zero(4), 0.1), ShapeError);
}

TEST(EnergyNet, RejectsInvalidConstruction) {
  EXPECT_THROW(EnergyNet(2, {}, {1e-3, 1.0}), UsageError);
  EXPECT_THROW(EnergyNet(2, {4}, {1.0, 1e-3}), UsageError);
}

TEST(EnergyNet, GlorotInitializationBounds) {
  const auto net = EnergyNet::initialized(10, {64, 32}, {1e-3, 1.0}, 9);
  for (const auto& layer : net.params().layers) {
    const double limit = std::sqrt(6.0 / static_cast<double>(layer.weight.rows() + layer.weight.cols()));
    EXPECT_LE(layer.weight.cwiseAbs().maxCoeff(), limit);
    EXPECT_TRUE(layer.bias.isZero());
  }
  const auto again = EnergyNet::initialized(10, {64, 32}, {1e-3, 1.0}, 9);
  EXPECT_EQ(net.params().layers[1].weight, again.params().layers[1].weight);
}

TEST(EnergyNet, NonFiniteForwardReportsLayer) {
  auto net = oracle::random_net(2, {4, 4}, 1);
  net.mutable_params().layers[1].weight(0, 0) = std::numeric_limits<double>::infinity();
  try {
    net.forward(Eigen::VectorXd::Ones(2), 0.1);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_GE(e.layer(), 1);
  }
}

TEST(Loss, ZeroNetAndCleanInputGivesZero) {
  EnergyNet net(2, {3}, {1e-3, 1.0});
  const std::vector<LossBatchItem> items = {{Eigen::Vector2d(1, 0), Eigen::Vector2d(1, 0), 0.1}};
  const auto r = loss_and_param_gradient(net, items, 0.0);
  EXPECT_EQ(r.loss, 0.0);
}

TEST(Loss, RegressionTargetArithmetic) {
  // Zero net: residual is the target itself, (20, 0), weighted by sigma^2.
  EnergyNet net(2, {3}, {1e-3, 1.0});
  const std::vector<LossBatchItem> items = {{Eigen::Vector2d(1, 0), Eigen::Vector2d(1.2, 0), 0.1}};
  EXPECT_NEAR(loss_and_param_gradient(net, items, 0.0).loss, 0.01 * 400.0, 1e-10);
  EXPECT_NEAR(loss_and_param_gradient(net, items, 0.0, LossWeighting::kUnit).loss, 400.0, 1e-9);
}

TEST(Loss, EmptyBatchIsUsageError) {
  const auto net = oracle::random_net(2, {3}, 1);
  EXPECT_THROW(loss_and_param_gradient(net, std::vector<LossBatchItem>{}, 0.1), UsageError);
}

std::vector<LossBatchItem> random_items(Rng& rng, int d, int n) {
  std::vector<LossBatchItem> items;
  for (int i = 0; i < n; ++i) {
    const double sigma = 0.05 + 0.9 * rng.uniform();
    const auto x = oracle::random_vector(rng, d);
    items.push_back({x, x + sigma * oracle::random_vector(rng, d), sigma});
  }
  return items;
}

TEST(Loss, MatchesNaiveLoss) {
  Rng rng(17);
  const auto net = oracle::random_net(3, {7, 5}, 17);
  const auto items = random_items(rng, 3, 6);
  EXPECT_NEAR(loss_and_param_gradient(net, items, 0.1).loss, oracle::loss(net, items, 0.1), 1e-11);
  EXPECT_NEAR(loss_and_param_gradient(net, items, 0.0, LossWeighting::kUnit).loss,
              oracle::loss(net, items, 0.0, false), 1e-10);
}

TEST(Loss, ParameterGradientMatchesFiniteDifferences) {
  Rng rng(19);
  for (const auto& hidden : {std::vector<int>{6}, std::vector<int>{6, 5}, std::vector<int>{4, 5, 3}}) {
    const auto net = oracle::random_net(3, hidden, 19);
    const auto items = random_items(rng, 3, 5);
    const auto r = loss_and_param_gradient(net, items, 0.1);
    for (std::size_t p = 0; p < r.grads.size(); ++p) {
      EnergyNet plus = net, minus = net;
      const double h = 1e-5 * (1.0 + std::abs(net.params().at(p)));
      plus.mutable_params().at(p) += h;
      minus.mutable_params().at(p) -= h;
      const double fd = (loss_and_param_gradient(plus, items, 0.1).loss -
                         loss_and_param_gradient(minus, items, 0.1).loss) / (2 * h);
      EXPECT_LT(oracle::rel_err(r.grads.at(p), fd, 1e-6), 1e-5) << "param " << p;
    }
  }
}

TEST(Loss, IsPureAndNonnegative) {
  Rng rng(23);
  const auto net = oracle::random_net(2, {5, 5}, 23);
  const auto items = random_items(rng, 2, 4);
  const auto a = loss_and_param_gradient(net, items, 0.1);
  const auto b = loss_and_param_gradient(net, items, 0.1);
  EXPECT_EQ(a.loss, b.loss);
  EXPECT_GE(a.loss, 0.0);
}

TEST(Serialization, RoundTripsExactly) {
  const auto net = oracle::random_net(3, {5, 4}, 29);
  const auto back = net_from_json(nlohmann::json::parse(net_to_json(net).dump()));
  EXPECT_EQ(back.hidden_widths(), net.hidden_widths());
  for (std::size_t p = 0; p < net.params().size(); ++p) {
    ASSERT_EQ(back.params().at(p), net.params().at(p));
  }
  EXPECT_EQ(back.conditioning().sigma_low, net.conditioning().sigma_low);
}

TEST(Serialization, RejectsWrongFormat) {
  auto doc = net_to_json(oracle::random_net(2, {3}, 1));
  doc["format"] = "something-else";
  EXPECT_THROW(net_from_json(doc), FormatError);
  doc = net_to_json(oracle::random_net(2, {3}, 1));
  doc["layers"][0]["b"] = nlohmann::json::array({1.0});
  EXPECT_THROW(net_from_json(doc), FormatError);
}

}  // namespace
}  // namespace mulde

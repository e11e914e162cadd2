#include "mulde/fast_scorer.hpp"

#include <unsupported/Eigen/SpecialFunctions>

#include "mulde/error.hpp"

namespace mulde {
namespace {

#if defined(__AVX512F__)
constexpr int kTile = 16;
constexpr int kRowBlock = 8;
#else
constexpr int kTile = 8;
constexpr int kRowBlock = 4;
#endif

typedef float TileVec __attribute__((vector_size(kTile * sizeof(float))));

// Column-major activations with kTile rows: column k is one TileVec.
using TileMatrix = Eigen::Matrix<float, kTile, Eigen::Dynamic>;

/// out(:, i) = bias(i) + sum_k weight(i, k) * in(:, k)
void dense_tile(const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>& weight,
                const Eigen::VectorXf& bias, const TileMatrix& in, TileMatrix& out) {
  const auto rows = static_cast<int>(weight.rows());
  const auto n = static_cast<int>(weight.cols());
  out.resize(kTile, rows);
  const auto* x = reinterpret_cast<const TileVec*>(in.data());
  auto* y = reinterpret_cast<TileVec*>(out.data());
  const float* w = weight.data();
  int i = 0;
  for (; i + kRowBlock <= rows; i += kRowBlock) {
    TileVec acc[kRowBlock] = {};
    const float* wi = w + static_cast<std::ptrdiff_t>(i) * n;
    for (int k = 0; k < n; ++k) {
      const TileVec xk = x[k];
      for (int r = 0; r < kRowBlock; ++r) acc[r] += wi[static_cast<std::ptrdiff_t>(r) * n + k] * xk;
    }
    for (int r = 0; r < kRowBlock; ++r) y[i + r] = acc[r] + bias[i + r];
  }
  for (; i < rows; ++i) {
    TileVec acc = {};
    const float* wi = w + static_cast<std::ptrdiff_t>(i) * n;
    for (int k = 0; k < n; ++k) acc += wi[k] * x[k];
    y[i] = acc + bias[i];
  }
}

void gelu_in_place(TileMatrix& m) {
  auto a = m.array();
  a = 0.5f * a * (1.0f + (a * 0.70710678118654752f).erf());
}

}  // namespace

FastScorer::FastScorer(const EnergyNet& net, const NoiseSchedule& schedule,
                       const Standardizer& standardizer, GaussianMixture gmm)
    : feature_dim_(net.feature_dim()),
      mean_(standardizer.mean),
      inv_std_(standardizer.std.cwiseInverse()),
      num_scales_(static_cast<int>(schedule.scales.size())),
      gmm_(std::move(gmm)) {
  if (standardizer.mean.size() != feature_dim_) {
    throw ShapeError("FastScorer: standardizer and network dimensions differ");
  }
  if (gmm_.dim() != num_scales_) {
    throw ShapeError("FastScorer: mixture dimension does not match the schedule");
  }
  const int padded = (num_scales_ + kTile - 1) / kTile * kTile;
  for (int j = 0; j < padded; ++j) {
    const double sigma = schedule.scales[static_cast<std::size_t>(std::min(j, num_scales_ - 1))];
    cond_.push_back(static_cast<float>(net.conditioning().encode(sigma)));
  }
  const auto& layers = net.params().layers;
  first_x_ = layers.front().weight.leftCols(feature_dim_).cast<float>();
  first_cond_ = layers.front().weight.col(feature_dim_).cast<float>();
  first_bias_ = layers.front().bias.cast<float>();
  for (std::size_t l = 1; l + 1 < layers.size(); ++l) {
    hidden_weights_.push_back(layers[l].weight.cast<float>());
    hidden_biases_.push_back(layers[l].bias.cast<float>());
  }
  out_weight_ = layers.back().weight.row(0).transpose().cast<float>();
  out_bias_ = static_cast<float>(layers.back().bias(0));
}

Eigen::VectorXd FastScorer::energies(const Eigen::VectorXd& raw) const {
  if (raw.size() != feature_dim_) {
    throw ShapeError("FastScorer: expected dimension " + std::to_string(feature_dim_) + ", got " +
                     std::to_string(raw.size()));
  }
  const Eigen::VectorXf x = (raw - mean_).cwiseProduct(inv_std_).cast<float>();
  const Eigen::VectorXf shared = first_x_ * x + first_bias_;
  const auto width = static_cast<Eigen::Index>(shared.size());

  Eigen::VectorXd out(num_scales_);
  TileMatrix h(kTile, width);
  TileMatrix next;
  for (int tile = 0; tile * kTile < num_scales_; ++tile) {
    for (int j = 0; j < kTile; ++j) {
      h.row(j) = (shared + cond_[static_cast<std::size_t>(tile * kTile + j)] * first_cond_).transpose();
    }
    gelu_in_place(h);
    for (std::size_t l = 0; l < hidden_weights_.size(); ++l) {
      dense_tile(hidden_weights_[l], hidden_biases_[l], h, next);
      gelu_in_place(next);
      std::swap(h, next);
    }
    const Eigen::Matrix<float, kTile, 1> f = h * out_weight_;
    for (int j = 0; j < kTile && tile * kTile + j < num_scales_; ++j) {
      out(tile * kTile + j) = static_cast<double>(f(j) + out_bias_);
    }
  }
  if (!out.allFinite()) throw NumericError("FastScorer: non-finite energy");
  return out;
}

double FastScorer::score(const Eigen::VectorXd& raw) const { return gmm_.nll(energies(raw)); }

}  // namespace mulde

#pragma once

// Latency regressor: a three-layer perceptron over the row-major vectorized
// 9x10 encoding, sigmoid between layers, linear output in normalized units.

#include <cstdint>
#include <utility>
#include <vector>

#include <Eigen/Core>
#include <json.hpp>

#include "lcnas/device_sim.hpp"
#include "lcnas/optim.hpp"
#include "lcnas/search_space.hpp"

namespace lcnas {

inline constexpr int kHidden1 = 256;
inline constexpr int kHidden2 = 128;

template <typename Scalar>
struct RegressorParamsT {
  using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
  using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

  Matrix W1;
  Vector b1;
  Matrix W2;
  Vector b2;
  Matrix W3;
  Vector b3;
  Scalar mu_ms = Scalar(0);
  Scalar sigma_ms = Scalar(1);

  static RegressorParamsT zeros(Eigen::Index in = kEncodingBits, Eigen::Index h1 = kHidden1,
                                Eigen::Index h2 = kHidden2) {
    RegressorParamsT p;
    p.W1 = Matrix::Zero(h1, in);
    p.b1 = Vector::Zero(h1);
    p.W2 = Matrix::Zero(h2, h1);
    p.b2 = Vector::Zero(h2);
    p.W3 = Matrix::Zero(1, h2);
    p.b3 = Vector::Zero(1);
    return p;
  }

  Eigen::Index input_size() const { return W1.cols(); }
  Eigen::Index num_weights() const { return W1.size() + b1.size() + W2.size() + b2.size() + W3.size() + b3.size(); }

  template <typename Other>
  RegressorParamsT<Other> cast() const {
    RegressorParamsT<Other> o;
    o.W1 = W1.template cast<Other>();
    o.b1 = b1.template cast<Other>();
    o.W2 = W2.template cast<Other>();
    o.b2 = b2.template cast<Other>();
    o.W3 = W3.template cast<Other>();
    o.b3 = b3.template cast<Other>();
    o.mu_ms = static_cast<Other>(mu_ms);
    o.sigma_ms = static_cast<Other>(sigma_ms);
    return o;
  }
};

using RegressorParams = RegressorParamsT<double>;

template <typename Scalar>
Scalar sigmoid(Scalar x) {
  using std::exp;
  return Scalar(1) / (Scalar(1) + exp(-x));
}

/// Row-major vectorization of an encoding-shaped matrix.
template <typename Derived>
Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, 1> vectorize(const Eigen::MatrixBase<Derived>& m) {
  using Scalar = typename Derived::Scalar;
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> v(m.size());
  Eigen::Index k = 0;
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) v(k++) = m(r, c);
  return v;
}

/// Predicted latency in ms. Accepts relaxed (real-valued) encodings.
template <typename Scalar, typename Derived>
Scalar latreg_forward(const RegressorParamsT<Scalar>& p, const Eigen::MatrixBase<Derived>& enc) {
  const auto x = vectorize(enc);
  const auto act = [](Scalar z) { return sigmoid(z); };
  const typename RegressorParamsT<Scalar>::Vector a1 = (p.W1 * x + p.b1).unaryExpr(act);
  const typename RegressorParamsT<Scalar>::Vector a2 = (p.W2 * a1 + p.b2).unaryExpr(act);
  const Scalar y = (p.W3 * a2 + p.b3)(0);
  return y * p.sigma_ms + p.mu_ms;
}

/// Predictions (ms) for a batch; one vectorized encoding per column.
Eigen::VectorXd latreg_predict(const RegressorParams& p, const Eigen::MatrixXd& inputs);

struct RegressorBackward {
  RegressorParams grads;        // dL/dparam, L = (y_norm - t_norm)^2; mu/sigma unused
  Eigen::MatrixXd input_grad;   // d prediction_ms / d enc, shaped like enc
  double prediction_ms = 0.0;
  double loss = 0.0;
};

RegressorBackward latreg_backward(const RegressorParams& p, const Eigen::Ref<const Eigen::MatrixXd>& enc,
                                  double target_ms);

/// Only the input gradient, d prediction_ms / d enc (row-major 9x10 layout).
CellMatrixd latreg_input_grad(const RegressorParams& p, const CellMatrixd& enc, double* prediction_ms = nullptr);

/// Flat parameter vector in the order W1,b1,W2,b2,W3,b3 (matrices row-major).
Eigen::VectorXd pack_params(const RegressorParams& p);
void unpack_params(const Eigen::VectorXd& flat, RegressorParams& p);

/// uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases.
RegressorParams init_regressor(std::uint64_t seed, Eigen::Index in = kEncodingBits, Eigen::Index h1 = kHidden1,
                               Eigen::Index h2 = kHidden2);

struct TrainOptions {
  int epochs = 70;
  int batch_size = 256;
  double lr = 1e-3;
  std::uint64_t seed = 0;
};

struct TrainReport {
  std::vector<double> train_mse;  // normalized units, full pass after each epoch
  std::vector<double> val_mse;
  double test_mae_ms = 0.0;
};

struct TrainResult {
  RegressorParams params;
  TrainReport report;
};

/// Shifts each intermediate node's block of first-layer input weights, with a
/// compensating bias change, so that predictions on every valid encoding are
/// unchanged while the cheapest non-Zero op has a mean input gradient of 0,
/// averaged over the node's rows and over `inputs` (one vectorized encoding
/// per column). Valid encodings hold exactly two ones in the rows feeding each
/// node, which leaves this level free.
void anchor_input_gauge(RegressorParams& p, const Eigen::MatrixXd& inputs);

/// Throws DegenerateDataset when sigma_train is 0 or a split is empty.
TrainResult train_latreg(const LatencyDataset& ds, const TrainOptions& opt);
TrainResult train_latreg(const LatencyDataset& ds, const TrainOptions& opt, RegressorParams init);

struct EvalResult {
  double mae_ms = 0.0;
  double slope = 0.0;      // least-squares slope of predicted on measured
  double intercept = 0.0;
  std::vector<std::pair<double, double>> pairs;  // (measured, predicted)
};

EvalResult eval_latreg(const RegressorParams& p, const LatencyDataset& ds, Split split);

struct CheckpointMeta {
  std::uint64_t seed = 0;
  int epochs = 0;
  int batch_size = 0;
  double lr = 0.0;
  std::string dataset_hash;
};

inline constexpr int kCheckpointVersion = 1;

nlohmann::json checkpoint_to_json(const RegressorParams& p, const CheckpointMeta& meta);
/// Throws InvalidInput on version/shape problems.
RegressorParams checkpoint_from_json(const nlohmann::json& j, CheckpointMeta* meta = nullptr);

}  // namespace lcnas

#include "lcnas/latreg.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include <fmt/format.h>

#include "lcnas/errors.hpp"
#include "lcnas/random.hpp"

namespace lcnas {

namespace {

using Eigen::MatrixXd;
using Eigen::VectorXd;

MatrixXd sigmoid_of(const MatrixXd& z) {
  return z.unaryExpr([](double v) { return sigmoid(v); });
}

struct BatchCache {
  MatrixXd a1, a2;
  Eigen::RowVectorXd y;  // normalized outputs
};

BatchCache forward_batch(const RegressorParams& p, const MatrixXd& x) {
  BatchCache c;
  c.a1 = sigmoid_of((p.W1 * x).colwise() + p.b1);
  c.a2 = sigmoid_of((p.W2 * c.a1).colwise() + p.b2);
  c.y = (p.W3 * c.a2).array() + p.b3(0);
  return c;
}

/// Gradients of mean((y - t)^2) over the batch columns.
double batch_grads(const RegressorParams& p, const MatrixXd& x, const Eigen::RowVectorXd& t, RegressorParams& g) {
  const auto c = forward_batch(p, x);
  const double b = static_cast<double>(x.cols());
  const Eigen::RowVectorXd r = c.y - t;
  const double loss = r.squaredNorm() / b;
  const Eigen::RowVectorXd dy = (2.0 / b) * r;
  g.W3 = dy * c.a2.transpose();
  g.b3 = VectorXd::Constant(1, dy.sum());
  const MatrixXd dz2 = ((p.W3.transpose() * dy).array() * c.a2.array() * (1.0 - c.a2.array())).matrix();
  g.W2 = dz2 * c.a1.transpose();
  g.b2 = dz2.rowwise().sum();
  const MatrixXd dz1 = ((p.W2.transpose() * dz2).array() * c.a1.array() * (1.0 - c.a1.array())).matrix();
  g.W1 = dz1 * x.transpose();
  g.b1 = dz1.rowwise().sum();
  return loss;
}

template <typename Block>
void put(VectorXd& flat, Eigen::Index& k, const Block& m) {
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) flat(k++) = m(r, c);
}

template <typename Block>
void take(const VectorXd& flat, Eigen::Index& k, Block& m) {
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = flat(k++);
}

struct SplitData {
  MatrixXd x;
  Eigen::RowVectorXd t;  // normalized targets
  Eigen::RowVectorXd lat_ms;
};

SplitData gather(const LatencyDataset& ds, Split s) {
  const auto idx = ds.indices(s);
  SplitData d;
  d.x = MatrixXd::Zero(kEncodingBits, static_cast<Eigen::Index>(idx.size()));
  d.t.resize(static_cast<Eigen::Index>(idx.size()));
  d.lat_ms.resize(d.t.size());
  for (std::size_t k = 0; k < idx.size(); ++k) {
    const auto& sample = ds.samples[idx[k]];
    d.x.col(static_cast<Eigen::Index>(k)) = vectorize(sample.encoding.bits());
    d.lat_ms(static_cast<Eigen::Index>(k)) = sample.latency_ms;
    d.t(static_cast<Eigen::Index>(k)) = (sample.latency_ms - ds.mu_ms) / ds.sigma_ms;
  }
  return d;
}

double mse_normalized(const RegressorParams& p, const SplitData& d) {
  if (d.x.cols() == 0) return 0.0;
  const auto c = forward_batch(p, d.x);
  return (c.y - d.t).squaredNorm() / static_cast<double>(d.x.cols());
}

}  // namespace

VectorXd latreg_predict(const RegressorParams& p, const MatrixXd& inputs) {
  if (inputs.rows() != p.input_size())
    throw ShapeMismatch(fmt::format("regressor expects {} inputs, got {}", p.input_size(), inputs.rows()));
  const auto c = forward_batch(p, inputs);
  return (c.y.array() * p.sigma_ms + p.mu_ms).matrix().transpose();
}

RegressorBackward latreg_backward(const RegressorParams& p, const Eigen::Ref<const MatrixXd>& enc, double target_ms) {
  if (enc.size() != p.input_size())
    throw ShapeMismatch(fmt::format("regressor expects {} inputs, got {}", p.input_size(), enc.size()));
  const MatrixXd x = vectorize(enc);
  const Eigen::RowVectorXd t = Eigen::RowVectorXd::Constant(1, (target_ms - p.mu_ms) / p.sigma_ms);

  RegressorBackward out;
  out.loss = batch_grads(p, x, t, out.grads);
  out.grads.mu_ms = 0.0;
  out.grads.sigma_ms = 0.0;

  const auto c = forward_batch(p, x);
  out.prediction_ms = c.y(0) * p.sigma_ms + p.mu_ms;
  const VectorXd d2 = (p.W3.transpose().array() * c.a2.array() * (1.0 - c.a2.array())).matrix();
  const VectorXd d1 = ((p.W2.transpose() * d2).array() * c.a1.array() * (1.0 - c.a1.array())).matrix();
  const VectorXd dx = p.sigma_ms * (p.W1.transpose() * d1);
  out.input_grad.resize(enc.rows(), enc.cols());
  Eigen::Index k = 0;
  for (Eigen::Index r = 0; r < enc.rows(); ++r)
    for (Eigen::Index col = 0; col < enc.cols(); ++col) out.input_grad(r, col) = dx(k++);
  return out;
}

CellMatrixd latreg_input_grad(const RegressorParams& p, const CellMatrixd& enc, double* prediction_ms) {
  if (p.input_size() != kEncodingBits)
    throw ShapeMismatch(fmt::format("regressor expects {} inputs, not a 9x10 encoding", p.input_size()));
  const VectorXd x = vectorize(enc);
  const VectorXd a1 = (p.W1 * x + p.b1).unaryExpr([](double v) { return sigmoid(v); });
  const VectorXd a2 = (p.W2 * a1 + p.b2).unaryExpr([](double v) { return sigmoid(v); });
  if (prediction_ms) *prediction_ms = (p.W3 * a2 + p.b3)(0) * p.sigma_ms + p.mu_ms;
  const VectorXd d2 = (p.W3.transpose().array() * a2.array() * (1.0 - a2.array())).matrix();
  const VectorXd d1 = ((p.W2.transpose() * d2).array() * a1.array() * (1.0 - a1.array())).matrix();
  const VectorXd dx = p.sigma_ms * (p.W1.transpose() * d1);
  return Eigen::Map<const CellMatrixd>(dx.data());
}

VectorXd pack_params(const RegressorParams& p) {
  VectorXd flat(p.num_weights());
  Eigen::Index k = 0;
  put(flat, k, p.W1);
  put(flat, k, p.b1);
  put(flat, k, p.W2);
  put(flat, k, p.b2);
  put(flat, k, p.W3);
  put(flat, k, p.b3);
  return flat;
}

void unpack_params(const VectorXd& flat, RegressorParams& p) {
  if (flat.size() != p.num_weights()) throw ShapeMismatch("flat parameter vector has the wrong length");
  Eigen::Index k = 0;
  take(flat, k, p.W1);
  take(flat, k, p.b1);
  take(flat, k, p.W2);
  take(flat, k, p.b2);
  take(flat, k, p.W3);
  take(flat, k, p.b3);
}

RegressorParams init_regressor(std::uint64_t seed, Eigen::Index in, Eigen::Index h1, Eigen::Index h2) {
  auto p = RegressorParams::zeros(in, h1, h2);
  Rng rng(seed);
  auto fill = [&](MatrixXd& w) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(w.cols()));
    for (Eigen::Index r = 0; r < w.rows(); ++r)
      for (Eigen::Index c = 0; c < w.cols(); ++c) w(r, c) = uniform_real(rng, -bound, bound);
  };
  fill(p.W1);
  fill(p.W2);
  fill(p.W3);
  return p;
}

void anchor_input_gauge(RegressorParams& p, const MatrixXd& inputs) {
  if (p.input_size() != kEncodingBits || inputs.rows() != kEncodingBits || inputs.cols() == 0) return;
  const auto c = forward_batch(p, inputs);
  const MatrixXd d2 = (p.W3.transpose().replicate(1, inputs.cols()).array() * c.a2.array() * (1.0 - c.a2.array())).matrix();
  const MatrixXd d1 = ((p.W2.transpose() * d2).array() * c.a1.array() * (1.0 - c.a1.array())).matrix();
  const VectorXd v = d1.rowwise().mean();
  const double vv = v.squaredNorm();
  if (!(vv > 0.0)) return;
  const VectorXd mean_grad = p.sigma_ms * (p.W1.transpose() * v);
  for (int node = 0; node < kNumIntermediate; ++node) {
    const auto edges = incoming_edges(node);
    double lowest = std::numeric_limits<double>::infinity();
    for (int n = 0; n < kNumOps; ++n) {
      if (n == index(Op::Zero)) continue;
      double level = 0.0;
      for (int m : edges) level += mean_grad(m * kNumOps + n);
      lowest = std::min(lowest, level / static_cast<double>(edges.size()));
    }
    const VectorXd u = (-lowest / (p.sigma_ms * vv)) * v;
    for (int m : edges)
      for (int n = 0; n < kNumOps; ++n) p.W1.col(m * kNumOps + n) += u;
    p.b1 -= static_cast<double>(kEdgesPerNode) * u;
  }
}

TrainResult train_latreg(const LatencyDataset& ds, const TrainOptions& opt) {
  return train_latreg(ds, opt, init_regressor(derive_seed(opt.seed, 0)));
}

TrainResult train_latreg(const LatencyDataset& ds, const TrainOptions& opt, RegressorParams init) {
  if (!(ds.sigma_ms > 0.0)) throw DegenerateDataset("sigma_train is 0; cannot normalize latencies");
  if (opt.batch_size < 1) throw InvalidInput("batch_size must be >= 1");
  if (opt.epochs < 0) throw InvalidInput("epochs must be >= 0");
  const auto train = gather(ds, Split::Train);
  const auto val = gather(ds, Split::Val);
  if (train.x.cols() == 0 || val.x.cols() == 0 || ds.indices(Split::Test).empty())
    throw DegenerateDataset("train, val and test splits must all be nonempty");

  TrainResult res;
  res.params = std::move(init);
  res.params.mu_ms = ds.mu_ms;
  res.params.sigma_ms = ds.sigma_ms;

  AdamState adam({opt.lr, 0.9, 0.999, 1e-8}, res.params.num_weights());
  VectorXd theta = pack_params(res.params);
  RegressorParams grads = RegressorParams::zeros(res.params.input_size(), res.params.W1.rows(), res.params.W2.rows());

  const Eigen::Index n = train.x.cols();
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  MatrixXd xb;
  Eigen::RowVectorXd tb;
  for (int epoch = 0; epoch < opt.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), Eigen::Index{0});
    Rng rng(derive_seed(opt.seed, static_cast<std::uint64_t>(epoch) + 1));
    shuffle(order.begin(), order.end(), rng);
    for (Eigen::Index start = 0; start < n; start += opt.batch_size) {
      const Eigen::Index b = std::min<Eigen::Index>(opt.batch_size, n - start);
      xb.resize(kEncodingBits, b);
      tb.resize(b);
      for (Eigen::Index k = 0; k < b; ++k) {
        const auto i = order[static_cast<std::size_t>(start + k)];
        xb.col(k) = train.x.col(i);
        tb(k) = train.t(i);
      }
      batch_grads(res.params, xb, tb, grads);
      adam_step(adam, theta, pack_params(grads));
      unpack_params(theta, res.params);
    }
    res.report.train_mse.push_back(mse_normalized(res.params, train));
    res.report.val_mse.push_back(mse_normalized(res.params, val));
  }
  if (opt.epochs > 0) anchor_input_gauge(res.params, train.x);
  res.report.test_mae_ms = eval_latreg(res.params, ds, Split::Test).mae_ms;
  return res;
}

EvalResult eval_latreg(const RegressorParams& p, const LatencyDataset& ds, Split split) {
  const auto d = gather(ds, split);
  if (d.x.cols() == 0) throw DegenerateDataset(fmt::format("split {} is empty", split_name(split)));
  const VectorXd pred = latreg_predict(p, d.x);
  EvalResult r;
  const auto n = static_cast<double>(d.x.cols());
  const VectorXd meas = d.lat_ms.transpose();
  r.mae_ms = (pred - meas).cwiseAbs().sum() / n;
  const double mx = meas.mean();
  const double my = pred.mean();
  const double sxy = ((meas.array() - mx) * (pred.array() - my)).sum();
  const double sxx = (meas.array() - mx).square().sum();
  r.slope = sxx > 0.0 ? sxy / sxx : 0.0;
  r.intercept = my - r.slope * mx;
  r.pairs.reserve(static_cast<std::size_t>(d.x.cols()));
  for (Eigen::Index i = 0; i < d.x.cols(); ++i) r.pairs.emplace_back(meas(i), pred(i));
  return r;
}

namespace {

nlohmann::json matrix_json(const MatrixXd& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    nlohmann::json row = nlohmann::json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

nlohmann::json vector_json(const VectorXd& v) {
  nlohmann::json a = nlohmann::json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v(i));
  return a;
}

MatrixXd matrix_from(const nlohmann::json& j, const char* key, Eigen::Index rows, Eigen::Index cols) {
  if (!j.contains(key) || !j[key].is_array() || static_cast<Eigen::Index>(j[key].size()) != rows)
    throw InvalidInput(fmt::format("checkpoint.{}: expected {} rows", key, rows));
  MatrixXd m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const auto& row = j[key][static_cast<std::size_t>(r)];
    if (!row.is_array() || static_cast<Eigen::Index>(row.size()) != cols)
      throw InvalidInput(fmt::format("checkpoint.{}: row {} must have {} entries", key, r, cols));
    for (Eigen::Index c = 0; c < cols; ++c) {
      const auto& v = row[static_cast<std::size_t>(c)];
      if (!v.is_number()) throw InvalidInput(fmt::format("checkpoint.{}: non-numeric entry", key));
      m(r, c) = v.get<double>();
    }
  }
  return m;
}

VectorXd vector_from(const nlohmann::json& j, const char* key, Eigen::Index size) {
  if (!j.contains(key) || !j[key].is_array() || static_cast<Eigen::Index>(j[key].size()) != size)
    throw InvalidInput(fmt::format("checkpoint.{}: expected {} entries", key, size));
  VectorXd v(size);
  for (Eigen::Index i = 0; i < size; ++i) {
    const auto& x = j[key][static_cast<std::size_t>(i)];
    if (!x.is_number()) throw InvalidInput(fmt::format("checkpoint.{}: non-numeric entry", key));
    v(i) = x.get<double>();
  }
  return v;
}

}  // namespace

nlohmann::json checkpoint_to_json(const RegressorParams& p, const CheckpointMeta& meta) {
  return {{"version", kCheckpointVersion},
          {"mu", p.mu_ms},
          {"sigma", p.sigma_ms},
          {"W1", matrix_json(p.W1)},
          {"b1", vector_json(p.b1)},
          {"W2", matrix_json(p.W2)},
          {"b2", vector_json(p.b2)},
          {"W3", matrix_json(p.W3)},
          {"b3", vector_json(p.b3)},
          {"meta",
           {{"seed", meta.seed},
            {"epochs", meta.epochs},
            {"batch_size", meta.batch_size},
            {"lr", meta.lr},
            {"dataset_hash", meta.dataset_hash}}}};
}

RegressorParams checkpoint_from_json(const nlohmann::json& j, CheckpointMeta* meta) {
  if (!j.is_object()) throw InvalidInput("checkpoint: expected a JSON object");
  if (!j.contains("version") || !j["version"].is_number_integer() || j["version"].get<int>() != kCheckpointVersion)
    throw InvalidInput(fmt::format("checkpoint.version: expected {}", kCheckpointVersion));
  RegressorParams p;
  p.W1 = matrix_from(j, "W1", kHidden1, kEncodingBits);
  p.b1 = vector_from(j, "b1", kHidden1);
  p.W2 = matrix_from(j, "W2", kHidden2, kHidden1);
  p.b2 = vector_from(j, "b2", kHidden2);
  p.W3 = matrix_from(j, "W3", 1, kHidden2);
  p.b3 = vector_from(j, "b3", 1);
  if (!j.contains("mu") || !j["mu"].is_number()) throw InvalidInput("checkpoint.mu: missing");
  if (!j.contains("sigma") || !j["sigma"].is_number()) throw InvalidInput("checkpoint.sigma: missing");
  p.mu_ms = j["mu"].get<double>();
  p.sigma_ms = j["sigma"].get<double>();
  if (!(p.sigma_ms > 0.0)) throw InvalidInput("checkpoint.sigma: must be > 0");
  if (meta && j.contains("meta")) {
    const auto& m = j["meta"];
    meta->seed = m.value("seed", std::uint64_t{0});
    meta->epochs = m.value("epochs", 0);
    meta->batch_size = m.value("batch_size", 0);
    meta->lr = m.value("lr", 0.0);
    meta->dataset_hash = m.value("dataset_hash", std::string{});
  }
  return p;
}

}  // namespace lcnas

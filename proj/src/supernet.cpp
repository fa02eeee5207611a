#include "lcnas/supernet.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include <fmt/format.h>

#include "lcnas/errors.hpp"
#include "lcnas/optim.hpp"
#include "lcnas/random.hpp"

namespace lcnas {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;
using RowMajorMap = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using RowMajorMapMut = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

void TaskConfig::validate() const {
  if (dim < 1) throw InvalidInput("task.dim must be >= 1");
  if (classes < 2) throw InvalidInput("task.classes must be >= 2");
  if (n_train < 1) throw InvalidInput("task.n_train must be >= 1");
  if (n_val < 1) throw InvalidInput("task.n_val must be >= 1");
  if (clusters_per_class < 1) throw InvalidInput("task.clusters_per_class must be >= 1");
  if (!(cluster_spread > 0.0)) throw InvalidInput("task.cluster_spread must be > 0");
  if (!(warp >= 0.0)) throw InvalidInput("task.warp must be >= 0");
}

nlohmann::json task_config_to_json(const TaskConfig& c) {
  return {{"dim", c.dim},
          {"classes", c.classes},
          {"n_train", c.n_train},
          {"n_val", c.n_val},
          {"clusters_per_class", c.clusters_per_class},
          {"cluster_spread", c.cluster_spread},
          {"warp", c.warp},
          {"seed", c.seed}};
}

TaskConfig task_config_from_json(const nlohmann::json& j, const TaskConfig& base) {
  if (!j.is_object()) throw InvalidInput("task: expected a JSON object");
  TaskConfig c = base;
  auto integer = [](const nlohmann::json& v, const std::string& key) {
    if (!v.is_number_integer()) throw InvalidInput(fmt::format("task.{} must be an integer", key));
    return v.get<int>();
  };
  auto number = [](const nlohmann::json& v, const std::string& key) {
    if (!v.is_number()) throw InvalidInput(fmt::format("task.{} must be a number", key));
    return v.get<double>();
  };
  for (const auto& [key, v] : j.items()) {
    if (key == "dim") c.dim = integer(v, key);
    else if (key == "classes") c.classes = integer(v, key);
    else if (key == "n_train") c.n_train = integer(v, key);
    else if (key == "n_val") c.n_val = integer(v, key);
    else if (key == "clusters_per_class") c.clusters_per_class = integer(v, key);
    else if (key == "cluster_spread") c.cluster_spread = number(v, key);
    else if (key == "warp") c.warp = number(v, key);
    else if (key == "seed") {
      if (!v.is_number_unsigned()) throw InvalidInput("task.seed must be a non-negative integer");
      c.seed = v.get<std::uint64_t>();
    } else {
      throw InvalidInput(fmt::format("task: unknown key \"{}\"", key));
    }
  }
  c.validate();
  return c;
}

SyntheticTask SyntheticTask::generate(const TaskConfig& cfg) {
  cfg.validate();
  Rng rng(derive_seed(cfg.seed, 0x7461736bULL));
  const int d = cfg.dim;
  const int k = cfg.classes * cfg.clusters_per_class;
  MatrixXd centers(d, k);
  for (Index i = 0; i < centers.size(); ++i) centers(i) = standard_normal(rng);
  MatrixXd warp(d, d);
  for (Index i = 0; i < warp.size(); ++i) warp(i) = standard_normal(rng) * 1.5 / std::sqrt(static_cast<double>(d));

  auto draw = [&](int n, Rng& r) {
    TaskData t;
    t.x.resize(d, n);
    t.y.resize(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
      const auto c = static_cast<int>(uniform_index(r, static_cast<std::uint64_t>(k)));
      VectorXd p(d);
      for (int j = 0; j < d; ++j) p(j) = centers(j, c) + cfg.cluster_spread * standard_normal(r);
      t.x.col(i) = p + cfg.warp * (warp * p).array().sin().matrix();
      t.y[static_cast<std::size_t>(i)] = c % cfg.classes;
    }
    return t;
  };
  SyntheticTask task;
  task.config = cfg;
  Rng train_rng(derive_seed(cfg.seed, 1));
  Rng val_rng(derive_seed(cfg.seed, 2));
  task.train = draw(cfg.n_train, train_rng);
  task.val = draw(cfg.n_val, val_rng);
  return task;
}

int op_depth(Op op) {
  switch (op) {
    case Op::SkipConnect:
    case Op::Zero: return 0;
    case Op::Conv1x1:
    case Op::SemiGCN:
    case Op::SAGE: return 1;
    case Op::GIN:
    case Op::RelSAGE: return 2;
    case Op::GAT:
    case Op::EdgeConv:
    case Op::MRConv: return 3;
  }
  return 0;
}

bool op_has_params(Op op) { return op_depth(op) > 0; }

namespace {

bool has_bias(Op op) { return op != Op::Conv1x1; }

Index block_size(int dim, Op op) { return static_cast<Index>(dim) * dim + (has_bias(op) ? dim : 0); }

}  // namespace

SupernetLayout::SupernetLayout(int dim, int classes) : dim_(dim), classes_(classes) {
  Index off = 0;
  for (int i = 0; i < 2; ++i) {
    stem_[i] = off;
    off += static_cast<Index>(dim) * dim;
  }
  for (int m = 0; m < kNumEdges; ++m)
    for (int n = 0; n < kNumOps; ++n) {
      const Op op = static_cast<Op>(n);
      op_[m][n] = off;
      off += op_depth(op) * block_size(dim, op);
    }
  head_w_ = off;
  off += static_cast<Index>(classes) * kNumIntermediate * dim;
  head_b_ = off;
  off += classes;
  size_ = off;
}

Index SupernetLayout::block(int edge, Op op, int layer) const {
  return op_[edge][index(op)] + layer * block_size(dim_, op);
}

SupernetWeights init_supernet(int dim, int classes, std::uint64_t seed) {
  SupernetWeights w{SupernetLayout(dim, classes), {}};
  w.flat = VectorXd::Zero(w.layout.size());
  Rng rng(seed);
  auto fill = [&](Index off, Index rows, Index cols, double bound) {
    for (Index i = 0; i < rows * cols; ++i) w.flat(off + i) = uniform_real(rng, -bound, bound);
  };
  const double lecun = std::sqrt(3.0 / dim);
  fill(w.layout.stem(0), dim, dim, lecun);
  fill(w.layout.stem(1), dim, dim, lecun);
  for (int m = 0; m < kNumEdges; ++m)
    for (int n = 0; n < kNumOps; ++n) {
      const Op op = static_cast<Op>(n);
      for (int l = 0; l < op_depth(op); ++l) fill(w.layout.block(m, op, l), dim, dim, lecun);
    }
  fill(w.layout.head_weight(), classes, kNumIntermediate * dim, std::sqrt(3.0 / (kNumIntermediate * dim)));
  return w;
}

namespace {

struct OpTrace {
  Op op;
  double weight;
  std::vector<MatrixXd> acts;  // output of each block; the last one is the op output
};

struct EdgeTrace {
  int edge;
  int src;  // node slot 0..4
  int dst;
  std::vector<OpTrace> ops;
};

struct Trace {
  std::array<MatrixXd, 5> nodes;  // in0, in1, n0, n1, n2
  std::vector<EdgeTrace> edges;
  MatrixXd concat;
  MatrixXd logits;
  MatrixXd probs;
  double loss = 0.0;
};

/// (op, mixing weight) pairs that contribute on edge m; empty when pruned.
std::vector<std::pair<Op, double>> active_ops(const AlphaMatrix& a, const CellMatrixd& beta, int m) {
  std::vector<std::pair<Op, double>> out;
  if (a.decided[m]) {
    out.emplace_back(*a.decided[m], 1.0);
  } else if (!a.pruned(m)) {
    for (int n = 0; n < kNumOps; ++n)
      if (static_cast<Op>(n) != Op::Zero) out.emplace_back(static_cast<Op>(n), beta(m, n));
  }
  return out;
}

Trace run_forward(const SupernetWeights& w, const AlphaMatrix& a, const MatrixXd& x, std::span<const int> y) {
  const auto& L = w.layout;
  const int d = L.dim();
  if (x.rows() != d) throw ShapeMismatch(fmt::format("batch width {} does not match supernet dim {}", x.rows(), d));
  if (static_cast<Index>(y.size()) != x.cols())
    throw ShapeMismatch(fmt::format("{} labels for {} samples", y.size(), x.cols()));
  for (int label : y)
    if (label < 0 || label >= L.classes()) throw ShapeMismatch(fmt::format("label {} out of range", label));

  const Index b = x.cols();
  const double* p = w.flat.data();
  const CellMatrixd beta = softmax_rows(a);
  Trace t;
  t.nodes[0] = RowMajorMap(p + L.stem(0), d, d) * x;
  t.nodes[1] = RowMajorMap(p + L.stem(1), d, d) * x;
  for (int j = 2; j < 5; ++j) t.nodes[j] = MatrixXd::Zero(d, b);

  for (int m = 0; m < kNumEdges; ++m) {
    const auto& id = canonical_edges()[m];
    EdgeTrace et{m, static_cast<int>(id.src), static_cast<int>(id.dst), {}};
    const MatrixXd& in = t.nodes[et.src];
    for (auto [op, weight] : active_ops(a, beta, m)) {
      OpTrace ot{op, weight, {}};
      if (op == Op::SkipConnect) {
        t.nodes[et.dst] += weight * in;
      } else if (op == Op::Conv1x1) {
        ot.acts.push_back(RowMajorMap(p + L.block(m, op, 0), d, d) * in);
        t.nodes[et.dst] += weight * ot.acts.back();
      } else {
        const MatrixXd* h = &in;
        for (int l = 0; l < op_depth(op); ++l) {
          const Index off = L.block(m, op, l);
          MatrixXd z = RowMajorMap(p + off, d, d) * *h;
          z.colwise() += Eigen::Map<const VectorXd>(p + off + static_cast<Index>(d) * d, d);
          ot.acts.push_back(z.array().tanh().matrix());
          h = &ot.acts.back();
        }
        t.nodes[et.dst] += weight * ot.acts.back();
      }
      et.ops.push_back(std::move(ot));
    }
    t.edges.push_back(std::move(et));
  }

  t.concat.resize(kNumIntermediate * d, b);
  for (int j = 0; j < kNumIntermediate; ++j) t.concat.middleRows(j * d, d) = t.nodes[2 + j];
  t.logits = RowMajorMap(p + L.head_weight(), L.classes(), kNumIntermediate * d) * t.concat;
  t.logits.colwise() += Eigen::Map<const VectorXd>(p + L.head_bias(), L.classes());
  t.probs.resize(L.classes(), b);
  double loss = 0.0;
  for (Index c = 0; c < b; ++c) {
    const double mx = t.logits.col(c).maxCoeff();
    const double lse = mx + std::log((t.logits.col(c).array() - mx).exp().sum());
    t.probs.col(c) = (t.logits.col(c).array() - lse).exp().matrix();
    loss += lse - t.logits(y[static_cast<std::size_t>(c)], c);
  }
  t.loss = b > 0 ? loss / static_cast<double>(b) : 0.0;
  return t;
}

}  // namespace

ForwardResult mixture_forward(const SupernetWeights& w, const AlphaMatrix& a, const MatrixXd& x,
                              std::span<const int> y) {
  auto t = run_forward(w, a, x, y);
  return {std::move(t.logits), t.loss};
}

SupernetGrads supernet_backward(const SupernetWeights& w, const AlphaMatrix& a, const MatrixXd& x,
                                std::span<const int> y, Wrt wrt) {
  const bool want_w = (static_cast<int>(wrt) & static_cast<int>(Wrt::Weights)) != 0;
  const bool want_a = (static_cast<int>(wrt) & static_cast<int>(Wrt::Alpha)) != 0;
  const auto& L = w.layout;
  const int d = L.dim();
  const double* p = w.flat.data();

  auto t = run_forward(w, a, x, y);
  SupernetGrads g;
  g.loss = t.loss;
  if (want_w) g.weights = VectorXd::Zero(L.size());
  const Index b = x.cols();
  if (b == 0) return g;

  MatrixXd dlogits = t.probs;
  for (Index c = 0; c < b; ++c) dlogits(y[static_cast<std::size_t>(c)], c) -= 1.0;
  dlogits /= static_cast<double>(b);

  const Index cd = static_cast<Index>(kNumIntermediate) * d;
  if (want_w) {
    RowMajorMapMut(g.weights.data() + L.head_weight(), L.classes(), cd) = dlogits * t.concat.transpose();
    Eigen::Map<VectorXd>(g.weights.data() + L.head_bias(), L.classes()) = dlogits.rowwise().sum();
  }
  const MatrixXd dconcat = RowMajorMap(p + L.head_weight(), L.classes(), cd).transpose() * dlogits;

  std::array<MatrixXd, 5> dnodes;
  for (int j = 0; j < 2; ++j) dnodes[j] = MatrixXd::Zero(d, b);
  for (int j = 0; j < kNumIntermediate; ++j) dnodes[2 + j] = dconcat.middleRows(j * d, d);

  CellMatrixd dbeta = CellMatrixd::Zero();
  // edges are stored in canonical order, which is topological; walk it backwards
  for (auto et = t.edges.rbegin(); et != t.edges.rend(); ++et) {
    const MatrixXd& dnode = dnodes[et->dst];
    const MatrixXd& in = t.nodes[et->src];
    MatrixXd& din = dnodes[et->src];
    const int m = et->edge;
    for (const auto& ot : et->ops) {
      const Op op = ot.op;
      if (op == Op::SkipConnect) {
        if (want_a) dbeta(m, index(op)) = dnode.cwiseProduct(in).sum();
        din += ot.weight * dnode;
        continue;
      }
      const MatrixXd& out = ot.acts.back();
      if (want_a) dbeta(m, index(op)) = dnode.cwiseProduct(out).sum();
      MatrixXd dh = ot.weight * dnode;
      if (op == Op::Conv1x1) {
        const Index off = L.block(m, op, 0);
        if (want_w) RowMajorMapMut(g.weights.data() + off, d, d) += dh * in.transpose();
        din += RowMajorMap(p + off, d, d).transpose() * dh;
        continue;
      }
      for (int l = op_depth(op) - 1; l >= 0; --l) {
        const Index off = L.block(m, op, l);
        const MatrixXd& h = ot.acts[static_cast<std::size_t>(l)];
        const MatrixXd dz = (dh.array() * (1.0 - h.array().square())).matrix();
        const MatrixXd& prev = l == 0 ? in : ot.acts[static_cast<std::size_t>(l - 1)];
        if (want_w) {
          RowMajorMapMut(g.weights.data() + off, d, d) += dz * prev.transpose();
          Eigen::Map<VectorXd>(g.weights.data() + off + static_cast<Index>(d) * d, d) += dz.rowwise().sum();
        }
        dh = RowMajorMap(p + off, d, d).transpose() * dz;
      }
      din += dh;
    }
  }

  if (want_w) {
    RowMajorMapMut(g.weights.data() + L.stem(0), d, d) = dnodes[0] * x.transpose();
    RowMajorMapMut(g.weights.data() + L.stem(1), d, d) = dnodes[1] * x.transpose();
  }
  if (want_a) {
    const CellMatrixd beta = softmax_rows(a);
    for (int m = 0; m < kNumEdges; ++m) {
      if (a.decided[m] || a.pruned(m)) continue;
      const double mean = beta.row(m).dot(dbeta.row(m));
      for (int n = 0; n < kNumOps; ++n) g.alpha(m, n) = beta(m, n) * (dbeta(m, n) - mean);
    }
  }
  return g;
}

double accuracy(const SupernetWeights& w, const AlphaMatrix& a, const TaskData& data) {
  if (data.size() == 0) return 0.0;
  const auto r = mixture_forward(w, a, data.x, data.y);
  Index correct = 0;
  for (Index c = 0; c < data.size(); ++c) {
    Index best;
    r.logits.col(c).maxCoeff(&best);
    if (best == data.y[static_cast<std::size_t>(c)]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

AlphaMatrix alpha_for(const Architecture& arch) {
  AlphaMatrix a;
  for (const auto& e : arch.edges()) a.decided[e.edge] = e.op;
  return a;
}

DerivedResult train_derived(const Architecture& arch, const SyntheticTask& task, const DerivedOptions& opt) {
  if (opt.epochs < 0 || opt.batch_size < 1) throw InvalidInput("derived training needs epochs >= 0, batch_size >= 1");
  const AlphaMatrix a = alpha_for(arch);
  auto w = init_supernet(task.config.dim, task.config.classes, derive_seed(opt.seed, 0));
  SgdState sgd({opt.lr, opt.momentum, opt.weight_decay}, w.layout.size());

  const Index n = task.train.size();
  std::vector<Index> order(static_cast<std::size_t>(n));
  MatrixXd xb;
  std::vector<int> yb;
  DerivedResult res;
  for (int epoch = 0; epoch < opt.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), Index{0});
    Rng rng(derive_seed(opt.seed, static_cast<std::uint64_t>(epoch) + 1));
    shuffle(order.begin(), order.end(), rng);
    const double lr = 0.5 * opt.lr * (1.0 + std::cos(std::numbers::pi * epoch / std::max(1, opt.epochs)));
    double loss_sum = 0.0;
    int batches = 0;
    for (Index start = 0; start < n; start += opt.batch_size) {
      const Index bsz = std::min<Index>(opt.batch_size, n - start);
      xb.resize(task.config.dim, bsz);
      yb.resize(static_cast<std::size_t>(bsz));
      for (Index k = 0; k < bsz; ++k) {
        const Index i = order[static_cast<std::size_t>(start + k)];
        xb.col(k) = task.train.x.col(i);
        yb[static_cast<std::size_t>(k)] = task.train.y[static_cast<std::size_t>(i)];
      }
      const auto g = supernet_backward(w, a, xb, yb, Wrt::Weights);
      sgd_step(sgd, w.flat, g.weights, lr);
      loss_sum += g.loss;
      ++batches;
    }
    const double acc = accuracy(w, a, task.val);
    res.history.push_back({epoch, batches ? loss_sum / batches : 0.0, acc});
    res.best_val_accuracy = std::max(res.best_val_accuracy, acc);
  }
  return res;
}

}  // namespace lcnas

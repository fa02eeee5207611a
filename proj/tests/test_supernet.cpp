#include <doctest.h>

#include <cmath>
#include <numeric>

#include "lcnas/errors.hpp"
#include "lcnas/gradcheck.hpp"
#include "lcnas/supernet.hpp"

using namespace lcnas;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

MatrixXd block_matrix(const SupernetWeights& w, Eigen::Index off, int rows, int cols) {
  MatrixXd m(rows, cols);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) m(r, c) = w.flat(off + r * cols + c);
  return m;
}

// Straight-line forward pass for one sample, written independently of the library.
VectorXd oracle_logits(const SupernetWeights& w, const CellMatrixd& beta, const VectorXd& x) {
  const int d = w.layout.dim();
  std::vector<VectorXd> nodes(5, VectorXd::Zero(d));
  nodes[0] = block_matrix(w, w.layout.stem(0), d, d) * x;
  nodes[1] = block_matrix(w, w.layout.stem(1), d, d) * x;
  for (int m = 0; m < kNumEdges; ++m) {
    const auto& e = canonical_edges()[static_cast<std::size_t>(m)];
    const VectorXd& in = nodes[static_cast<std::size_t>(e.src)];
    VectorXd sum = VectorXd::Zero(d);
    for (int n = 0; n < kNumOps; ++n) {
      const Op op = op_from_index(n);
      VectorXd out;
      if (op == Op::Zero) {
        out = VectorXd::Zero(d);
      } else if (op == Op::SkipConnect) {
        out = in;
      } else if (op == Op::Conv1x1) {
        out = block_matrix(w, w.layout.block(m, op, 0), d, d) * in;
      } else {
        out = in;
        for (int l = 0; l < op_depth(op); ++l) {
          const auto off = w.layout.block(m, op, l);
          VectorXd z = block_matrix(w, off, d, d) * out;
          for (int i = 0; i < d; ++i) z(i) += w.flat(off + d * d + i);
          out = z.array().tanh().matrix();
        }
      }
      sum += beta(m, n) * out;
    }
    nodes[static_cast<std::size_t>(e.dst)] += sum;
  }
  VectorXd concat(3 * d);
  concat << nodes[2], nodes[3], nodes[4];
  VectorXd logits = block_matrix(w, w.layout.head_weight(), w.layout.classes(), 3 * d) * concat;
  for (int c = 0; c < w.layout.classes(); ++c) logits(c) += w.flat(w.layout.head_bias() + c);
  return logits;
}

TaskConfig tiny_task(int dim) {
  TaskConfig c;
  c.dim = dim;
  c.classes = 3;
  c.n_train = 40;
  c.n_val = 20;
  c.seed = 5;
  return c;
}

// Multinomial logistic regression on raw features, full-batch gradient descent.
double linear_probe_accuracy(const SyntheticTask& task) {
  const int d = task.config.dim, k = task.config.classes;
  MatrixXd W = MatrixXd::Zero(k, d);
  VectorXd b = VectorXd::Zero(k);
  const auto n = static_cast<double>(task.train.size());
  for (int it = 0; it < 3000; ++it) {
    MatrixXd logits = W * task.train.x;
    logits.colwise() += b;
    MatrixXd g = MatrixXd::Zero(k, task.train.size());
    for (Eigen::Index i = 0; i < task.train.size(); ++i) {
      VectorXd p = (logits.col(i).array() - logits.col(i).maxCoeff()).exp();
      p /= p.sum();
      p(task.train.y[static_cast<std::size_t>(i)]) -= 1.0;
      g.col(i) = p;
    }
    W -= 0.5 * g * task.train.x.transpose() / n;
    b -= 0.5 * g.rowwise().sum() / n;
  }
  MatrixXd logits = W * task.val.x;
  logits.colwise() += b;
  int correct = 0;
  for (Eigen::Index i = 0; i < task.val.size(); ++i) {
    Eigen::Index best;
    logits.col(i).maxCoeff(&best);
    correct += best == task.val.y[static_cast<std::size_t>(i)];
  }
  return correct / static_cast<double>(task.val.size());
}

Architecture uniform_arch(Op op) {
  return Architecture({{0, op}, {1, op}, {2, op}, {3, op}, {5, op}, {6, op}});
}

}  // namespace

TEST_CASE("op capacity ladder") {
  CHECK(op_depth(Op::SkipConnect) == 0);
  CHECK(op_depth(Op::Zero) == 0);
  CHECK_FALSE(op_has_params(Op::SkipConnect));
  CHECK_FALSE(op_has_params(Op::Zero));
  CHECK(op_depth(Op::Conv1x1) == 1);
  CHECK(op_depth(Op::SemiGCN) == 1);
  CHECK(op_depth(Op::SAGE) == 1);
  CHECK(op_depth(Op::GIN) == 2);
  CHECK(op_depth(Op::RelSAGE) == 2);
  CHECK(op_depth(Op::GAT) == 3);
  CHECK(op_depth(Op::EdgeConv) == 3);
  CHECK(op_depth(Op::MRConv) == 3);
}

TEST_CASE("task generation") {
  const auto a = SyntheticTask::generate(TaskConfig{});
  const auto b = SyntheticTask::generate(TaskConfig{});
  CHECK(a.train.x == b.train.x);
  CHECK(a.val.y == b.val.y);
  CHECK(a.train.size() == 2000);
  CHECK(a.val.size() == 1000);
  CHECK(a.train.x.rows() == 8);
  std::vector<int> counts(4, 0);
  for (int y : a.train.y) ++counts[static_cast<std::size_t>(y)];
  for (int c : counts) CHECK(c > 350);

  TaskConfig bad;
  bad.classes = 1;
  CHECK_THROWS_AS(bad.validate(), InvalidInput);
  CHECK(task_config_from_json(task_config_to_json(tiny_task(3))).n_train == 40);
  CHECK_THROWS_AS(task_config_from_json(nlohmann::json{{"depth", 3}}), InvalidInput);
}

TEST_CASE("mixture forward matches an independent oracle") {
  const auto task = SyntheticTask::generate(tiny_task(3));
  const auto w = init_supernet(3, 3, 4);
  Rng rng(6);
  for (int t = 0; t < 5; ++t) {
    const auto a = random_alpha(rng, 1.0, false);
    const auto beta = softmax_rows(a);
    const auto r = mixture_forward(w, a, task.train.x, task.train.y);
    for (Eigen::Index i = 0; i < task.train.size(); ++i)
      CHECK((r.logits.col(i) - oracle_logits(w, beta, task.train.x.col(i))).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("all-Skip supernet is a sum of identity copies") {
  const auto task = SyntheticTask::generate(tiny_task(3));
  const auto w = init_supernet(3, 3, 8);
  AlphaMatrix a;
  a.alpha.col(0).setConstant(1000.0);
  const auto r = mixture_forward(w, a, task.train.x, task.train.y);
  const MatrixXd S0 = block_matrix(w, w.layout.stem(0), 3, 3);
  const MatrixXd S1 = block_matrix(w, w.layout.stem(1), 3, 3);
  const MatrixXd H = block_matrix(w, w.layout.head_weight(), 3, 9);
  for (Eigen::Index i = 0; i < task.train.size(); ++i) {
    const VectorXd x = task.train.x.col(i);
    const VectorXd in0 = S0 * x, in1 = S1 * x;
    const VectorXd n0 = in0 + in1;
    const VectorXd n1 = in0 + in1 + n0;
    const VectorXd n2 = in0 + in1 + n0 + n1;
    VectorXd cat(9);
    cat << n0, n1, n2;
    VectorXd expected = H * cat;
    for (int c = 0; c < 3; ++c) expected(c) += w.flat(w.layout.head_bias() + c);
    CHECK((r.logits.col(i) - expected).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("Zero contributes nothing") {
  const auto task = SyntheticTask::generate(tiny_task(3));
  const auto w = init_supernet(3, 3, 9);
  const AlphaMatrix uniform;
  const auto r = mixture_forward(w, uniform, task.train.x, task.train.y);
  CellMatrixd beta = CellMatrixd::Constant(0.1);
  beta.col(index(Op::Zero)).setZero();
  for (Eigen::Index i = 0; i < task.train.size(); ++i)
    CHECK((r.logits.col(i) - oracle_logits(w, beta, task.train.x.col(i))).cwiseAbs().maxCoeff() < 1e-12);

  const auto g = supernet_backward(w, uniform, task.train.x, task.train.y, Wrt::Alpha);
  const auto g2 = supernet_backward(w, uniform, task.train.x, task.train.y, Wrt::Alpha);
  CHECK(g.alpha == g2.alpha);
}

TEST_CASE("one-hot mixture equals the discrete network") {
  const auto task = SyntheticTask::generate(tiny_task(3));
  const auto w = init_supernet(3, 3, 10);
  Rng rng(7);
  for (int t = 0; t < 10; ++t) {
    const auto arch = random_architecture(rng);
    AlphaMatrix hard;
    hard.alpha.setConstant(-1000.0);
    for (int m = 0; m < kNumEdges; ++m) {
      const auto op = arch.op_on(m);
      hard.alpha(m, op ? index(*op) : index(Op::Zero)) = 1000.0;
    }
    const auto mixed = mixture_forward(w, hard, task.train.x, task.train.y);
    const auto discrete = mixture_forward(w, alpha_for(arch), task.train.x, task.train.y);
    CHECK((mixed.logits - discrete.logits).cwiseAbs().maxCoeff() < 1e-12);
    CHECK(mixed.loss == doctest::Approx(discrete.loss).epsilon(1e-12));
  }
}

TEST_CASE("empty batch and shape errors") {
  const auto w = init_supernet(3, 3, 1);
  const auto r = mixture_forward(w, AlphaMatrix{}, MatrixXd(3, 0), {});
  CHECK(r.loss == 0.0);
  const auto g = supernet_backward(w, AlphaMatrix{}, MatrixXd(3, 0), {}, Wrt::Both);
  CHECK(g.weights.isZero());
  CHECK(g.alpha.isZero());
  const std::vector<int> y = {0, 1};
  CHECK_THROWS_AS(mixture_forward(w, AlphaMatrix{}, MatrixXd::Zero(4, 2), y), ShapeMismatch);
  CHECK_THROWS_AS(mixture_forward(w, AlphaMatrix{}, MatrixXd::Zero(3, 3), y), ShapeMismatch);
}

TEST_CASE("loss is invariant to sample order") {
  const auto task = SyntheticTask::generate(tiny_task(3));
  const auto w = init_supernet(3, 3, 2);
  Rng rng(1);
  const auto a = random_alpha(rng, 1.0, false);
  std::vector<Eigen::Index> order(static_cast<std::size_t>(task.train.size()));
  std::iota(order.begin(), order.end(), 0);
  shuffle(order.begin(), order.end(), rng);
  MatrixXd x(3, task.train.size());
  std::vector<int> y(order.size());
  for (std::size_t k = 0; k < order.size(); ++k) {
    x.col(static_cast<Eigen::Index>(k)) = task.train.x.col(order[k]);
    y[k] = task.train.y[static_cast<std::size_t>(order[k])];
  }
  CHECK(mixture_forward(w, a, x, y).loss ==
        doctest::Approx(mixture_forward(w, a, task.train.x, task.train.y).loss).epsilon(1e-12));
}

TEST_CASE("supernet gradients match finite differences") {
  const auto r = check_supernet(2, 3);
  CHECK(r.probes > 0);
  CHECK(r.failures == 0);
}

TEST_CASE("alpha gradient rows sum to zero; decided and pruned rows are zero") {
  const auto task = SyntheticTask::generate(tiny_task(3));
  const auto w = init_supernet(3, 3, 3);
  Rng rng(2);
  for (int t = 0; t < 20; ++t) {
    auto a = random_alpha(rng, 1.0, true);
    if (t % 4 == 0) {
      a.decided = {};
      a.decided[2] = Op::GIN;
      a.decided[4] = Op::SAGE;
    }
    const auto g = supernet_backward(w, a, task.train.x, task.train.y, Wrt::Alpha);
    for (int m = 0; m < kNumEdges; ++m) {
      if (a.decided[static_cast<std::size_t>(m)] || a.pruned(m))
        CHECK(g.alpha.row(m).isZero(0.0));
      else
        CHECK(std::abs(g.alpha.row(m).sum()) < 1e-12);
    }
  }
}

TEST_CASE("parameterless ops own no weights") {
  const SupernetLayout L(4, 3);
  for (int m = 0; m < kNumEdges; ++m) {
    CHECK(L.block(m, Op::SkipConnect, 0) == L.block(m, Op::Conv1x1, 0));
    if (m + 1 < kNumEdges) CHECK(L.block(m, Op::Zero, 0) == L.block(m + 1, Op::SkipConnect, 0));
  }
  CHECK(L.block(kNumEdges - 1, Op::Zero, 0) == L.head_weight());
}

TEST_CASE("derived training is deterministic") {
  const auto task = SyntheticTask::generate(TaskConfig{});
  DerivedOptions opt;
  opt.epochs = 3;
  opt.seed = 4;
  const auto arch = random_architecture(2);
  const auto a = train_derived(arch, task, opt);
  const auto b = train_derived(arch, task, opt);
  REQUIRE(a.history.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(a.history[i].train_loss == b.history[i].train_loss);
    CHECK(a.history[i].val_accuracy == b.history[i].val_accuracy);
  }
  CHECK(a.best_val_accuracy == b.best_val_accuracy);
}

TEST_CASE("all-Skip cell performs like a linear probe") {
  const auto task = SyntheticTask::generate(TaskConfig{});
  DerivedOptions opt;
  const double skip = train_derived(uniform_arch(Op::SkipConnect), task, opt).best_val_accuracy;
  const double probe = linear_probe_accuracy(task);
  MESSAGE("all-Skip " << skip << ", linear probe " << probe);
  CHECK(std::abs(skip - probe) <= 0.03);
}

TEST_CASE("high-capacity cell beats the all-Skip cell") {
  const auto task = SyntheticTask::generate(TaskConfig{});
  double skip = 0.0, heavy = 0.0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    DerivedOptions opt;
    opt.seed = seed;
    skip += train_derived(uniform_arch(Op::SkipConnect), task, opt).best_val_accuracy / 5.0;
    heavy += train_derived(uniform_arch(Op::MRConv), task, opt).best_val_accuracy / 5.0;
  }
  MESSAGE("all-Skip " << skip << ", all-MRConv " << heavy);
  CHECK(heavy >= skip + 0.03);
}

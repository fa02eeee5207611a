#pragma once

// Toy stand-in for the point-cloud search task: a synthetic classification
// problem and a one-cell differentiable supernet whose candidate ops are
// small dense transforms ordered by capacity.

#include <cstdint>
#include <span>
#include <vector>

#include <Eigen/Core>
#include <json.hpp>

#include "lcnas/constraint.hpp"
#include "lcnas/search_space.hpp"

namespace lcnas {

struct TaskConfig {
  int dim = 8;
  int classes = 4;
  int n_train = 2000;
  int n_val = 1000;
  int clusters_per_class = 3;
  double cluster_spread = 0.55;
  double warp = 0.6;
  std::uint64_t seed = 0;

  void validate() const;
};

nlohmann::json task_config_to_json(const TaskConfig& c);
TaskConfig task_config_from_json(const nlohmann::json& j, const TaskConfig& base = {});

struct TaskData {
  Eigen::MatrixXd x;  // dim x n, one sample per column
  std::vector<int> y;

  Eigen::Index size() const { return x.cols(); }
};

/// Gaussian-mixture classes (several clusters per class) pushed through a
/// fixed sinusoidal warp, so nonlinear ops pay off over linear ones.
struct SyntheticTask {
  TaskConfig config;
  TaskData train;
  TaskData val;

  static SyntheticTask generate(const TaskConfig& cfg);
};

/// Number of linear(+tanh) blocks for an op; Conv-1x1 is a single linear map
/// without activation, Skip and Zero have no parameters.
int op_depth(Op op);
bool op_has_params(Op op);

/// Offsets of every parameter block inside the flat weight vector.
class SupernetLayout {
 public:
  SupernetLayout() = default;
  SupernetLayout(int dim, int classes);

  int dim() const { return dim_; }
  int classes() const { return classes_; }
  Eigen::Index size() const { return size_; }

  Eigen::Index stem(int input) const { return stem_[input]; }
  /// Offset of block `layer` of op `op` on edge `edge`: dim x dim weights
  /// (row-major) followed by dim biases for tanh blocks.
  Eigen::Index block(int edge, Op op, int layer) const;
  Eigen::Index head_weight() const { return head_w_; }
  Eigen::Index head_bias() const { return head_b_; }

 private:
  int dim_ = 0;
  int classes_ = 0;
  std::array<Eigen::Index, 2> stem_{};
  std::array<std::array<Eigen::Index, kNumOps>, kNumEdges> op_{};
  Eigen::Index head_w_ = 0;
  Eigen::Index head_b_ = 0;
  Eigen::Index size_ = 0;
};

struct SupernetWeights {
  SupernetLayout layout;
  Eigen::VectorXd flat;
};

SupernetWeights init_supernet(int dim, int classes, std::uint64_t seed);

struct ForwardResult {
  Eigen::MatrixXd logits;  // classes x batch
  double loss = 0.0;       // mean cross-entropy
};

/// Throws ShapeMismatch if x has the wrong width or y the wrong length.
ForwardResult mixture_forward(const SupernetWeights& w, const AlphaMatrix& a, const Eigen::MatrixXd& x,
                              std::span<const int> y);

enum class Wrt { Weights = 1, Alpha = 2, Both = 3 };

struct SupernetGrads {
  Eigen::VectorXd weights;  // empty unless requested
  CellMatrixd alpha = CellMatrixd::Zero();
  double loss = 0.0;
};

SupernetGrads supernet_backward(const SupernetWeights& w, const AlphaMatrix& a, const Eigen::MatrixXd& x,
                                std::span<const int> y, Wrt wrt);

double accuracy(const SupernetWeights& w, const AlphaMatrix& a, const TaskData& data);

/// Alpha with every edge of `arch` decided; the other edges are pruned.
AlphaMatrix alpha_for(const Architecture& arch);

struct DerivedOptions {
  int epochs = 30;
  int batch_size = 64;
  double lr = 0.05;
  double momentum = 0.9;
  double weight_decay = 3e-4;
  std::uint64_t seed = 0;
};

struct DerivedEpoch {
  int epoch;
  double train_loss;
  double val_accuracy;
};

struct DerivedResult {
  double best_val_accuracy = 0.0;
  std::vector<DerivedEpoch> history;
};

/// Trains the discrete cell from scratch with SGD; deterministic in seed.
DerivedResult train_derived(const Architecture& arch, const SyntheticTask& task, const DerivedOptions& opt);

}  // namespace lcnas

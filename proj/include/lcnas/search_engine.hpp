#pragma once

// Latency-constrained differentiable search: alternating first-order updates
// of supernet weights and architectural parameters, with one edge decided
// greedily every few epochs after a warm-up.

#include <array>
#include <cstdint>
#include <deque>
#include <optional>
#include <vector>

#include <json.hpp>

#include "lcnas/constraint.hpp"
#include "lcnas/device_sim.hpp"
#include "lcnas/latreg.hpp"
#include "lcnas/optim.hpp"
#include "lcnas/supernet.hpp"

namespace lcnas {

struct SearchConfig {
  LatencyLossSpec loss{LossMode::Hinge, 0.5, 12.0};
  int epochs = 50;
  int warmup_epochs = 9;
  int decision_period = 7;
  int history_window = 4;
  int batch_size = 28;
  int batch_growth = 4;
  SgdConfig w_optimizer{0.005, 0.9, 3e-4};
  double w_lr_min = 1e-4;  // cosine-annealed floor
  double w_grad_clip = 5.0;
  AdamConfig alpha_optimizer{3e-4, 0.5, 0.999, 1e-8};
  double alpha_weight_decay = 1e-3;
  std::uint64_t seed = 0;
  bool evaluate_derived = true;
  DerivedOptions derived;

  /// Throws InvalidInput naming the offending field.
  void validate() const;
  /// First epoch (0-based, decision taken at its end) of each decision.
  std::vector<int> decision_epochs() const;
};

nlohmann::json search_config_to_json(const SearchConfig& c);
/// Unknown keys are errors; missing keys keep `base`'s values.
SearchConfig search_config_from_json(const nlohmann::json& j, const SearchConfig& base = {});

struct Decision {
  int epoch;
  int edge;
  Op op;
};

/// Non-Zero-renormalized beta per edge, one entry per finished epoch.
using EdgeHistogram = std::array<std::array<double, kNumOps - 1>, kNumEdges>;

struct SearchState {
  SupernetWeights weights;
  AlphaMatrix alpha;
  SgdState w_opt;
  AdamState alpha_opt;
  std::deque<EdgeHistogram> history;
  std::vector<Decision> decisions;
  int epoch = 0;
  int batch_size = 0;
  long step = 0;
};

SearchState init_search(const SearchConfig& cfg, const SyntheticTask& task);

/// Pushes the current non-Zero-renormalized beta, keeping `window` entries.
void record_history(SearchState& s, int window);

struct EdgeScore {
  double importance;   // 1 - beta[Zero]
  double certainty;    // 1 - H(p)/ln 9
  double stability;    // mean histogram intersection over the history
  double score;        // normalized importance * normalized certainty * stability
};

/// Scores for edges still open for a decision (undecided, destination quota
/// not yet filled); nullopt elsewhere. Needs a nonempty history.
std::array<std::optional<EdgeScore>, kNumEdges> sgas_scores(const SearchState& s);

/// Fixes the best-scoring open edge to its argmax non-Zero op and grows the
/// batch. Throws std::logic_error when no edge is open.
Decision decide_edge(SearchState& s, int epoch, int batch_growth);

struct StepStats {
  double val_loss = 0.0;
  double pred_lat_ms = 0.0;
  double lat_loss = 0.0;
  CellMatrixd alpha_grad = CellMatrixd::Zero();  // combined gradient applied to alpha
};

/// One weight step on the train batch, then one alpha step on the val batch.
StepStats search_step(SearchState& s, const SearchConfig& cfg, const RegressorParams& reg,
                      const Eigen::MatrixXd& train_x, std::span<const int> train_y, const Eigen::MatrixXd& val_x,
                      std::span<const int> val_y, double w_lr);

struct EpochLog {
  int epoch;
  long step;
  double val_loss;
  double pred_lat_ms;
  double lat_loss;
  std::optional<Decision> decision;
  int batch_size;
};

struct SearchResult {
  Architecture architecture;
  std::vector<Decision> decisions;
  std::vector<EpochLog> log;
  double predicted_ms = 0.0;
  double simulated_ms = 0.0;  // noiseless
  double accuracy = 0.0;      // derived network, best val accuracy
};

SearchResult search(const SearchConfig& cfg, const SyntheticTask& task, const DeviceModel& device,
                    const RegressorParams& reg);

struct SweepRow {
  double target_ms;
  double achieved_ms;
  double predicted_ms;
  double accuracy;
  SearchResult result;
};

/// One search per target, run on up to `jobs` threads; results in target order.
std::vector<SweepRow> sweep_targets(const SearchConfig& base, std::span<const double> targets,
                                    const SyntheticTask& task, const DeviceModel& device,
                                    const RegressorParams& reg, int jobs = 1);

nlohmann::json search_result_to_json(const SearchResult& r, const SearchConfig& cfg);

}  // namespace lcnas

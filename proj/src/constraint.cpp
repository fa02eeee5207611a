#include "lcnas/constraint.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include <fmt/format.h>

#include "lcnas/errors.hpp"

namespace lcnas {

namespace {

int dst_of(int edge) { return intermediate_index(canonical_edges()[edge].dst); }

/// Argmax over non-Zero ops; lowest index on ties.
int best_op(const CellMatrixd& beta, int m) {
  int best = 0;
  for (int n = 1; n < index(Op::Zero); ++n)
    if (beta(m, n) > beta(m, best)) best = n;
  return best;
}

double best_weight(const CellMatrixd& beta, int m) { return beta(m, best_op(beta, m)); }

}  // namespace

int AlphaMatrix::decided_count() const {
  return static_cast<int>(std::count_if(decided.begin(), decided.end(), [](auto& d) { return d.has_value(); }));
}

int AlphaMatrix::decided_into(int node) const {
  int k = 0;
  for (int e : incoming_edges(node))
    if (decided[e]) ++k;
  return k;
}

bool AlphaMatrix::pruned(int edge) const { return !decided[edge] && decided_into(dst_of(edge)) >= kEdgesPerNode; }

void AlphaMatrix::validate() const {
  for (int m = 0; m < kNumEdges; ++m)
    if (decided[m] && *decided[m] == Op::Zero)
      throw InvalidArchitecture(fmt::format("edge {} decided as Zero", m));
  for (int node = 0; node < kNumIntermediate; ++node)
    if (decided_into(node) > kEdgesPerNode)
      throw InvalidArchitecture(fmt::format("node n{} has more than {} decided edges", node, kEdgesPerNode));
}

CellMatrixd softmax_rows(const AlphaMatrix& a) {
  CellMatrixd beta = softmax_rows(a.alpha);
  for (int m = 0; m < kNumEdges; ++m)
    if (a.decided[m]) {
      beta.row(m).setZero();
      beta(m, index(*a.decided[m])) = 1.0;
    }
  return beta;
}

Binarization binarize(const AlphaMatrix& a) { return binarize(a, softmax_rows(a)); }

Binarization binarize(const AlphaMatrix& a, const CellMatrixd& beta) {
  Binarization out;
  for (int node = 0; node < kNumIntermediate; ++node) {
    const auto in = incoming_edges(node);
    std::vector<int> keep;
    std::vector<int> open;
    for (int e : in) (a.decided[e] ? keep : open).push_back(e);
    // stable sort keeps the lowest edge index first among equal weights
    std::stable_sort(open.begin(), open.end(),
                     [&](int x, int y) { return best_weight(beta, x) > best_weight(beta, y); });
    for (std::size_t k = 0; keep.size() < static_cast<std::size_t>(kEdgesPerNode) && k < open.size(); ++k)
      keep.push_back(open[k]);
    for (int e : keep) {
      const Op op = a.decided[e] ? *a.decided[e] : static_cast<Op>(best_op(beta, e));
      out.chosen[e] = op;
      out.encoding(e, index(op)) = 1.0;
    }
  }
  return out;
}

CellMatrixd zeta_mask(const CellMatrixd& beta, const Binarization& bin) {
  CellMatrixd zeta = CellMatrixd::Zero();
  for (int m = 0; m < kNumEdges; ++m)
    if (bin.chosen[m]) {
      const int n = index(*bin.chosen[m]);
      zeta(m, n) = 1.0 / beta(m, n);
    }
  return zeta;
}

std::string_view loss_mode_name(LossMode m) {
  switch (m) {
    case LossMode::Hinge: return "hinge";
    case LossMode::Mse: return "mse";
    case LossMode::NonTargeted: return "non_targeted";
  }
  return "?";
}

std::optional<LossMode> loss_mode_from_name(std::string_view s) {
  if (s == "hinge") return LossMode::Hinge;
  if (s == "mse") return LossMode::Mse;
  if (s == "non_targeted" || s == "non-targeted") return LossMode::NonTargeted;
  return std::nullopt;
}

void LatencyLossSpec::validate() const {
  if (!(lambda >= 0.0)) throw InvalidInput("lambda must be >= 0");
  if (mode != LossMode::NonTargeted && !(target_ms > 0.0)) throw InvalidInput("target_ms must be > 0");
}

double latency_loss(const LatencyLossSpec& spec, double pred) {
  switch (spec.mode) {
    case LossMode::Hinge: return spec.lambda * std::max(pred - spec.target_ms, 0.0);
    case LossMode::Mse: return spec.lambda * (pred - spec.target_ms) * (pred - spec.target_ms);
    case LossMode::NonTargeted: return spec.lambda * pred;
  }
  return 0.0;
}

double latency_loss_slope(const LatencyLossSpec& spec, double pred) {
  switch (spec.mode) {
    case LossMode::Hinge: return pred > spec.target_ms ? spec.lambda : 0.0;
    case LossMode::Mse: return 2.0 * spec.lambda * (pred - spec.target_ms);
    case LossMode::NonTargeted: return spec.lambda;
  }
  return 0.0;
}

LatencyGradient latency_loss_grad_alpha(const LatencyLossSpec& spec, const RegressorParams& p, const AlphaMatrix& a) {
  LatencyGradient r;
  r.beta = softmax_rows(a);
  r.binarization = binarize(a, r.beta);
  r.zeta = zeta_mask(r.beta, r.binarization);
  r.input_grad = latreg_input_grad(p, r.binarization.encoding, &r.prediction_ms);
  r.loss = latency_loss(spec, r.prediction_ms);
  const double g = latency_loss_slope(spec, r.prediction_ms);
  if (g == 0.0) return r;
  for (int m = 0; m < kNumEdges; ++m) {
    if (!r.binarization.chosen[m] || a.decided[m]) continue;
    const int chosen = index(*r.binarization.chosen[m]);
    const double d = g * r.input_grad(m, chosen);
    for (int n = 0; n < kNumOps; ++n) r.grad(m, n) = n == chosen ? d * (1.0 - r.beta(m, n)) : -d * r.beta(m, n);
  }
  return r;
}

double frozen_surrogate_loss(const LatencyLossSpec& spec, const RegressorParams& p, const AlphaMatrix& a,
                             const CellMatrixd& zeta) {
  const CellMatrixd relaxed = softmax_rows(a).cwiseProduct(zeta);
  return latency_loss(spec, latreg_forward(p, relaxed));
}

}  // namespace lcnas

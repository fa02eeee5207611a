#pragma once

// Latency constraint on the architectural parameters: softmax relaxation,
// binarization to a discrete encoding, the mask that makes binarization
// locally linear, the latency losses, and their gradient w.r.t. alpha.

#include <array>
#include <optional>
#include <string_view>

#include "lcnas/latreg.hpp"
#include "lcnas/search_space.hpp"

namespace lcnas {

/// Architectural logits plus the per-edge ops already fixed by greedy search.
struct AlphaMatrix {
  CellMatrixd alpha = CellMatrixd::Zero();
  std::array<std::optional<Op>, kNumEdges> decided{};

  int decided_count() const;
  int decided_into(int node) const;
  /// Undecided edge whose destination already has its two decided edges.
  bool pruned(int edge) const;
  /// Throws InvalidArchitecture if decisions break the quota or use Zero.
  void validate() const;
};

/// Numerically stable row-wise softmax.
template <typename Derived>
CellMatrix<typename Derived::Scalar> softmax_rows(const Eigen::MatrixBase<Derived>& a) {
  using Scalar = typename Derived::Scalar;
  CellMatrix<Scalar> b;
  for (int m = 0; m < kNumEdges; ++m) {
    const Scalar mx = a.row(m).maxCoeff();
    using std::exp;
    Scalar z(0);
    for (int n = 0; n < kNumOps; ++n) {
      b(m, n) = exp(a(m, n) - mx);
      z += b(m, n);
    }
    b.row(m) /= z;
  }
  return b;
}

/// Softmax with decided rows replaced by an exact one-hot.
CellMatrixd softmax_rows(const AlphaMatrix& a);

struct Binarization {
  CellMatrixd encoding = CellMatrixd::Zero();     // exactly six ones
  std::array<std::optional<Op>, kNumEdges> chosen{};  // op per retained edge

  Architecture architecture() const { return decode(encoding); }
};

/// Keeps two edges per node (decided first, then by max non-Zero beta) and
/// the argmax non-Zero op on each; ties go to the lowest index.
Binarization binarize(const AlphaMatrix& a);
Binarization binarize(const AlphaMatrix& a, const CellMatrixd& beta);

/// 1/beta at each chosen entry, 0 elsewhere; beta .* zeta == encoding.
CellMatrixd zeta_mask(const CellMatrixd& beta, const Binarization& bin);

enum class LossMode { Hinge, Mse, NonTargeted };

std::string_view loss_mode_name(LossMode m);
std::optional<LossMode> loss_mode_from_name(std::string_view s);

struct LatencyLossSpec {
  LossMode mode = LossMode::Hinge;
  double lambda = 0.5;
  double target_ms = 0.0;

  void validate() const;
};

double latency_loss(const LatencyLossSpec& spec, double prediction_ms);
/// dL/dprediction; the hinge kink at pred == target takes the flat side.
double latency_loss_slope(const LatencyLossSpec& spec, double prediction_ms);

struct LatencyGradient {
  CellMatrixd grad = CellMatrixd::Zero();
  CellMatrixd beta = CellMatrixd::Zero();
  CellMatrixd zeta = CellMatrixd::Zero();
  CellMatrixd input_grad = CellMatrixd::Zero();  // d prediction / d encoding
  Binarization binarization;
  double prediction_ms = 0.0;
  double loss = 0.0;
};

/// Approximate gradient of the latency loss w.r.t. alpha through the
/// binarization. Rows of dropped and decided edges are zero.
LatencyGradient latency_loss_grad_alpha(const LatencyLossSpec& spec, const RegressorParams& p, const AlphaMatrix& a);

/// The latency loss with the binarization frozen: L(LatReg(softmax(alpha) .* zeta)).
/// Its exact gradient at the freezing point is what latency_loss_grad_alpha returns.
double frozen_surrogate_loss(const LatencyLossSpec& spec, const RegressorParams& p, const AlphaMatrix& a,
                             const CellMatrixd& zeta);

}  // namespace lcnas

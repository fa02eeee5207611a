#pragma once

// Central finite-difference checks of every analytic gradient in the library.
// Used by the `gradcheck` command and by the test suites.

#include <cstdint>
#include <string>
#include <vector>

#include "lcnas/constraint.hpp"
#include "lcnas/latreg.hpp"

namespace lcnas {

struct Tolerance {
  double relative = 1e-4;
  double absolute = 1e-8;

  bool accepts(double analytic, double numeric) const;
};

struct GradcheckResult {
  std::string name;
  long probes = 0;
  long failures = 0;
  double max_rel_error = 0.0;
  double max_row_sum = 0.0;  // latency gradient only: max |sum of a retained row|
  bool ok = true;
};

/// Parameter gradients of the regressor MSE on small random networks.
GradcheckResult check_regressor_params(std::uint64_t seed, int instances, Tolerance tol = {});
/// d prediction / d encoding on the full-size network, binary and relaxed inputs.
GradcheckResult check_regressor_input(std::uint64_t seed, int instances, Tolerance tol = {});
GradcheckResult check_softmax_jacobian(std::uint64_t seed, int instances, Tolerance tol = {1e-6, 1e-10});
/// Closed-form alpha gradient against the frozen-binarization surrogate.
GradcheckResult check_latency_gradient(LossMode mode, std::uint64_t seed, int instances, Tolerance tol = {});
/// Weight and alpha gradients of the supernet cross-entropy (dim 3 toy).
GradcheckResult check_supernet(std::uint64_t seed, int instances, Tolerance tol = {});

std::vector<GradcheckResult> run_all_gradchecks(std::uint64_t seed);

/// Random alpha with a few random valid decisions.
AlphaMatrix random_alpha(Rng& rng, double scale, bool with_decisions);
/// Random full-size regressor (uniform init, given normalization).
RegressorParams random_regressor(std::uint64_t seed, double mu_ms = 15.0, double sigma_ms = 2.5);

}  // namespace lcnas

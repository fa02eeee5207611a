#include "lcnas/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "lcnas/random.hpp"
#include "lcnas/supernet.hpp"

namespace lcnas {

namespace {

constexpr double kStep = 1e-5;

template <typename F>
double central(F&& f, double& x) {
  const double saved = x;
  x = saved + kStep;
  const double up = f();
  x = saved - kStep;
  const double down = f();
  x = saved;
  return (up - down) / (2.0 * kStep);
}

void record(GradcheckResult& r, const Tolerance& tol, double analytic, double numeric) {
  ++r.probes;
  const double diff = std::abs(analytic - numeric);
  const double scale = std::max(std::abs(analytic), std::abs(numeric));
  r.max_rel_error = std::max(r.max_rel_error, diff / std::max(scale, tol.absolute));
  if (!tol.accepts(analytic, numeric)) {
    ++r.failures;
    r.ok = false;
  }
}

}  // namespace

bool Tolerance::accepts(double analytic, double numeric) const {
  const double diff = std::abs(analytic - numeric);
  return diff <= absolute || diff <= relative * std::max(std::abs(analytic), std::abs(numeric));
}

AlphaMatrix random_alpha(Rng& rng, double scale, bool with_decisions) {
  AlphaMatrix a;
  for (Eigen::Index i = 0; i < a.alpha.size(); ++i) a.alpha(i) = scale * standard_normal(rng);
  if (with_decisions) {
    const auto count = uniform_index(rng, 4);
    for (std::uint64_t k = 0; k < count; ++k) {
      const int e = static_cast<int>(uniform_index(rng, kNumEdges));
      const int node = intermediate_index(canonical_edges()[e].dst);
      if (a.decided[e] || a.decided_into(node) >= kEdgesPerNode) continue;
      a.decided[e] = static_cast<Op>(uniform_index(rng, kNumOps - 1));
    }
  }
  return a;
}

RegressorParams random_regressor(std::uint64_t seed, double mu_ms, double sigma_ms) {
  auto p = init_regressor(seed);
  Rng rng(derive_seed(seed, 1));
  for (Eigen::Index i = 0; i < p.b1.size(); ++i) p.b1(i) = uniform_real(rng, -0.5, 0.5);
  for (Eigen::Index i = 0; i < p.b2.size(); ++i) p.b2(i) = uniform_real(rng, -0.5, 0.5);
  p.b3(0) = uniform_real(rng, -0.5, 0.5);
  // larger output weights make the input gradient non-trivial
  p.W3 *= 4.0;
  p.mu_ms = mu_ms;
  p.sigma_ms = sigma_ms;
  return p;
}

GradcheckResult check_regressor_params(std::uint64_t seed, int instances, Tolerance tol) {
  GradcheckResult r{"regressor parameter gradients"};
  for (int k = 0; k < instances; ++k) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(k)));
    auto p = init_regressor(rng(), 7, 5, 4);
    for (Eigen::Index i = 0; i < p.b1.size(); ++i) p.b1(i) = uniform_real(rng, -1, 1);
    for (Eigen::Index i = 0; i < p.b2.size(); ++i) p.b2(i) = uniform_real(rng, -1, 1);
    p.mu_ms = uniform_real(rng, 5, 20);
    p.sigma_ms = uniform_real(rng, 0.5, 3);
    Eigen::MatrixXd x(1, 7);
    for (Eigen::Index i = 0; i < x.size(); ++i) x(i) = uniform01(rng);
    const double target = p.mu_ms + uniform_real(rng, -3, 3);
    const auto back = latreg_backward(p, x, target);

    auto loss = [&] {
      const double pred = latreg_forward(p, x);
      const double yn = (pred - p.mu_ms) / p.sigma_ms;
      const double tn = (target - p.mu_ms) / p.sigma_ms;
      return (yn - tn) * (yn - tn);
    };
    auto probe = [&](Eigen::MatrixXd& w, const Eigen::MatrixXd& g) {
      for (Eigen::Index i = 0; i < w.size(); ++i) record(r, tol, g(i), central(loss, w(i)));
    };
    auto probe_v = [&](Eigen::VectorXd& w, const Eigen::VectorXd& g) {
      for (Eigen::Index i = 0; i < w.size(); ++i) record(r, tol, g(i), central(loss, w(i)));
    };
    probe(p.W1, back.grads.W1);
    probe_v(p.b1, back.grads.b1);
    probe(p.W2, back.grads.W2);
    probe_v(p.b2, back.grads.b2);
    probe(p.W3, back.grads.W3);
    probe_v(p.b3, back.grads.b3);
  }
  return r;
}

GradcheckResult check_regressor_input(std::uint64_t seed, int instances, Tolerance tol) {
  GradcheckResult r{"regressor input gradient"};
  for (int k = 0; k < instances; ++k) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(k)));
    const auto p = random_regressor(rng());
    CellMatrixd enc = encode(random_architecture(rng)).bits();
    if (k % 2 == 1)
      for (Eigen::Index i = 0; i < enc.size(); ++i) enc(i) = uniform01(rng);
    const auto back = latreg_backward(p, enc, p.mu_ms);
    for (Eigen::Index i = 0; i < enc.size(); ++i) {
      auto f = [&] { return latreg_forward(p, enc); };
      record(r, tol, back.input_grad(i / kNumOps, i % kNumOps), central(f, enc(i)));
    }
  }
  return r;
}

GradcheckResult check_softmax_jacobian(std::uint64_t seed, int instances, Tolerance tol) {
  GradcheckResult r{"softmax Jacobian"};
  for (int k = 0; k < instances; ++k) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(k)));
    CellMatrixd a;
    for (Eigen::Index i = 0; i < a.size(); ++i) a(i) = 2.0 * standard_normal(rng);
    const CellMatrixd beta = softmax_rows(a);
    const int m = static_cast<int>(uniform_index(rng, kNumEdges));
    for (int kk = 0; kk < kNumOps; ++kk)
      for (int n = 0; n < kNumOps; ++n) {
        const double analytic = n == kk ? beta(m, n) - beta(m, n) * beta(m, n) : -beta(m, n) * beta(m, kk);
        auto f = [&] { return softmax_rows(a)(m, kk); };
        record(r, tol, analytic, central(f, a(m, n)));
      }
  }
  return r;
}

GradcheckResult check_latency_gradient(LossMode mode, std::uint64_t seed, int instances, Tolerance tol) {
  GradcheckResult r{"latency gradient (" + std::string(loss_mode_name(mode)) + ")"};
  for (int k = 0; k < instances; ++k) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(k)));
    const auto p = random_regressor(rng());
    AlphaMatrix a = random_alpha(rng, 1.0, k % 3 == 2);
    const double pred = latreg_forward(p, binarize(a).encoding);
    LatencyLossSpec spec{mode, uniform_real(rng, 0.1, 1.0), 0.0};
    if (mode != LossMode::NonTargeted) {
      // keep clear of the hinge kink so the central difference stays on one side
      double offset = uniform_real(rng, 0.05, 3.0);
      if (uniform01(rng) < 0.5) offset = -offset;
      spec.target_ms = std::max(0.5, pred + offset);
    }
    const auto g = latency_loss_grad_alpha(spec, p, a);
    for (int m = 0; m < kNumEdges; ++m)
      if (g.binarization.chosen[m] && !a.decided[m]) r.max_row_sum = std::max(r.max_row_sum, std::abs(g.grad.row(m).sum()));
    for (int m = 0; m < kNumEdges; ++m)
      for (int n = 0; n < kNumOps; ++n) {
        auto f = [&] { return frozen_surrogate_loss(spec, p, a, g.zeta); };
        record(r, tol, g.grad(m, n), central(f, a.alpha(m, n)));
      }
  }
  if (r.max_row_sum >= 1e-10) r.ok = false;
  return r;
}

GradcheckResult check_supernet(std::uint64_t seed, int instances, Tolerance tol) {
  GradcheckResult r{"supernet gradients"};
  for (int k = 0; k < instances; ++k) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(k)));
    const int dim = 3;
    const int classes = 3;
    auto w = init_supernet(dim, classes, rng());
    AlphaMatrix a = random_alpha(rng, 1.0, k % 2 == 1);
    Eigen::MatrixXd x(dim, 5);
    for (Eigen::Index i = 0; i < x.size(); ++i) x(i) = standard_normal(rng);
    std::vector<int> y(5);
    for (auto& v : y) v = static_cast<int>(uniform_index(rng, classes));
    const auto g = supernet_backward(w, a, x, y, Wrt::Both);
    auto f = [&] { return mixture_forward(w, a, x, y).loss; };
    for (Eigen::Index i = 0; i < w.flat.size(); ++i) record(r, tol, g.weights(i), central(f, w.flat(i)));
    for (int m = 0; m < kNumEdges; ++m)
      for (int n = 0; n < kNumOps; ++n) record(r, tol, g.alpha(m, n), central(f, a.alpha(m, n)));
  }
  return r;
}

std::vector<GradcheckResult> run_all_gradchecks(std::uint64_t seed) {
  return {check_regressor_params(derive_seed(seed, 1), 10),
          check_regressor_input(derive_seed(seed, 2), 10),
          check_softmax_jacobian(derive_seed(seed, 3), 50),
          check_latency_gradient(LossMode::Hinge, derive_seed(seed, 4), 200),
          check_latency_gradient(LossMode::Mse, derive_seed(seed, 5), 200),
          check_latency_gradient(LossMode::NonTargeted, derive_seed(seed, 6), 200),
          check_supernet(derive_seed(seed, 7), 3)};
}

}  // namespace lcnas

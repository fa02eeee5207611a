#pragma once

#include <cmath>

#include <Eigen/Core>

namespace lcnas {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Moment accumulators for a flat parameter vector.
struct AdamState {
  AdamConfig config;
  Eigen::VectorXd m;
  Eigen::VectorXd v;
  long t = 0;

  AdamState() = default;
  AdamState(const AdamConfig& cfg, Eigen::Index size)
      : config(cfg), m(Eigen::VectorXd::Zero(size)), v(Eigen::VectorXd::Zero(size)) {}
};

/// One bias-corrected Adam update of `params` in place.
inline void adam_step(AdamState& s, Eigen::Ref<Eigen::VectorXd> params,
                      const Eigen::Ref<const Eigen::VectorXd>& grads) {
  const auto& c = s.config;
  ++s.t;
  s.m = c.beta1 * s.m + (1.0 - c.beta1) * grads;
  s.v = c.beta2 * s.v + (1.0 - c.beta2) * grads.cwiseProduct(grads);
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(s.t));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(s.t));
  params.array() -= c.lr * (s.m.array() / bc1) / ((s.v.array() / bc2).sqrt() + c.eps);
}

struct SgdConfig {
  double lr = 0.005;
  double momentum = 0.9;
  double weight_decay = 3e-4;
};

/// Heavy-ball SGD with coupled L2 weight decay (PyTorch convention).
struct SgdState {
  SgdConfig config;
  Eigen::VectorXd velocity;

  SgdState() = default;
  SgdState(const SgdConfig& cfg, Eigen::Index size) : config(cfg), velocity(Eigen::VectorXd::Zero(size)) {}
};

inline void sgd_step(SgdState& s, Eigen::Ref<Eigen::VectorXd> params, const Eigen::Ref<const Eigen::VectorXd>& grads,
                     double lr) {
  const auto& c = s.config;
  s.velocity = c.momentum * s.velocity + grads + c.weight_decay * params;
  params -= lr * s.velocity;
}

}  // namespace lcnas

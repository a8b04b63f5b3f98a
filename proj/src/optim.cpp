#include "medl/optim.hpp"

#include <cmath>

#include "medl/errors.hpp"

namespace medl {

void AdamState::step(std::span<double> params, std::span<const double> grad) {
  if (params.size() != m.size() || grad.size() != m.size()) {
    throw ConfigError("AdamState::step: size mismatch");
  }
  ++t;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grad[i];
    m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
    v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
    const double mhat = m[i] / bc1;
    const double vhat = v[i] / bc2;
    params[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
  }
}

void sgd_step(std::span<double> params, std::span<const double> grad, double lr) {
  if (params.size() != grad.size()) {
    throw ConfigError("sgd_step: size mismatch");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    params[i] -= lr * grad[i];
  }
}

}  // namespace medl

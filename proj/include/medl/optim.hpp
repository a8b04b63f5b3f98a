#ifndef MEDL_OPTIM_HPP
#define MEDL_OPTIM_HPP

#include <cstdint>
#include <span>
#include <vector>

namespace medl {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Per-coordinate Adam moments for one contiguous parameter block.
struct AdamState {
  AdamConfig cfg;
  std::vector<double> m;
  std::vector<double> v;
  std::uint64_t t = 0;

  AdamState() = default;
  AdamState(std::size_t n, AdamConfig c) : cfg(c), m(n, 0.0), v(n, 0.0) {}

  void step(std::span<double> params, std::span<const double> grad);
};

// Constant-rate gradient descent: params -= lr * grad.
void sgd_step(std::span<double> params, std::span<const double> grad, double lr);

}  // namespace medl

#endif  // MEDL_OPTIM_HPP

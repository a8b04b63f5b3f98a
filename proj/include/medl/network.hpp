#ifndef MEDL_NETWORK_HPP
#define MEDL_NETWORK_HPP

#include <cstdint>
#include <span>
#include <vector>

#include "medl/matrix.hpp"
#include "medl/param_vector.hpp"

namespace medl {

// Binary keep-masks for the outputs of each hidden layer (the head is never
// masked). keep[l] has either one row (shared across the batch, the shape a
// posterior draw uses) or one row per sample (the shape training uses).
// Kept activations are scaled by 1/(1-rate) so a rate-0 mask is a no-op.
struct DropoutMask {
  double rate = 0.0;
  std::vector<Matrix> keep;

  bool empty() const { return keep.empty(); }

  // Pure function of (seed, draw_index): regenerating gives identical bits.
  static DropoutMask for_draw(const NetworkLayout& layout, double rate,
                              std::uint64_t seed, std::uint64_t draw_index);
  static DropoutMask per_sample(const NetworkLayout& layout, double rate,
                                std::size_t n, Rng& rng);
};

// Cached activations from one forward pass, enough to backpropagate from any
// layer. act[l] is post-activation and post-mask.
struct ForwardTrace {
  NetworkLayout layout;
  Matrix input;
  std::vector<Matrix> pre;
  std::vector<Matrix> act;
  DropoutMask mask;

  const Matrix& output() const { return act.back(); }
  const Matrix& head_logits() const { return pre.back(); }
};

ForwardTrace forward_trace(const NetworkLayout& layout, std::span<const double> params,
                           const Matrix& x, const DropoutMask& mask = {});

// Head activations only (row-wise softmax / sigmoid already applied).
Matrix forward(const NetworkLayout& layout, std::span<const double> params,
               const Matrix& x, const DropoutMask& mask = {});

// Head pre-activations ("logits").
Matrix head_logits(const NetworkLayout& layout, std::span<const double> params,
                   const Matrix& x, const DropoutMask& mask = {});

// Reverse pass seeded with dL/d(pre-activation of layer `top`). Accumulates
// into param_grad (size layout.param_count()) and returns dL/d(input).
Matrix backprop_from_preact(const ForwardTrace& trace, std::span<const double> params,
                            std::size_t top, const Matrix& seed,
                            std::span<double> param_grad);

// Converts a gradient w.r.t. act[layer] into one w.r.t. pre[layer], applying
// the activation derivative and any mask scaling.
Matrix activation_seed_to_preact(const ForwardTrace& trace, std::size_t layer,
                                 const Matrix& seed_at_act);

enum class LossTag { bce, categorical_ce };

struct GradResult {
  double loss = 0.0;
  std::vector<double> param_grad;
  Matrix input_grad;  // n x input_dim
};

// Mean loss over the batch plus exact gradients w.r.t. parameters and inputs.
// bce expects a sigmoid head and targets in [0,1]; categorical_ce expects a
// softmax head and rows that sum to 1.
GradResult backward(const NetworkLayout& layout, std::span<const double> params,
                    const Matrix& x, const Matrix& y, LossTag tag,
                    const DropoutMask& mask = {});

double bce_from_logits(const Matrix& logits, const Matrix& y);
double cce_from_logits(const Matrix& logits, const Matrix& targets);
double stable_sigmoid(double x);
double softplus(double x);

enum class GradTarget { logit, probability };

// Per-sample gradient of one head output w.r.t. every input feature.
// logit differentiates the pre-activation, probability the activation.
GradResult prediction_input_grad(const NetworkLayout& layout,
                                 std::span<const double> params, const Matrix& x,
                                 GradTarget target = GradTarget::logit,
                                 std::size_t output_index = 0,
                                 const DropoutMask& mask = {});

}  // namespace medl

#endif  // MEDL_NETWORK_HPP

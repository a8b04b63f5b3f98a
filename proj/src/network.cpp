#include "medl/network.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "medl/errors.hpp"

namespace medl {

namespace {

void check_params(const NetworkLayout& layout, std::span<const double> params,
                  const char* where) {
  if (params.size() != layout.param_count()) {
    throw ConfigError(std::string(where) + ": parameter vector has wrong length");
  }
}

void check_input(const NetworkLayout& layout, const Matrix& x, const char* where) {
  if (x.cols != layout.input_dim()) {
    throw ConfigError(std::string(where) + ": input width " + std::to_string(x.cols) +
                      " does not match layout input dim " +
                      std::to_string(layout.input_dim()));
  }
}

void check_mask(const NetworkLayout& layout, const DropoutMask& mask, std::size_t n,
                const char* where) {
  if (mask.empty()) {
    return;
  }
  const std::size_t hidden = layout.depth() - 1;
  if (mask.keep.size() != hidden) {
    throw ConfigError(std::string(where) + ": mask layer count mismatch");
  }
  for (std::size_t l = 0; l < hidden; ++l) {
    const Matrix& m = mask.keep[l];
    if (m.cols != layout.layers()[l].out || (m.rows != 1 && m.rows != n)) {
      throw ConfigError(std::string(where) + ": mask shape mismatch at layer " +
                        std::to_string(l));
    }
  }
  if (mask.rate < 0.0 || mask.rate >= 1.0) {
    throw ConfigError(std::string(where) + ": dropout rate must lie in [0, 1)");
  }
}

void softmax_row(std::span<const double> pre, std::span<double> out) {
  double mx = pre[0];
  for (const double v : pre) {
    mx = std::max(mx, v);
  }
  double sum = 0.0;
  for (std::size_t c = 0; c < pre.size(); ++c) {
    out[c] = std::exp(pre[c] - mx);
    sum += out[c];
  }
  for (std::size_t c = 0; c < pre.size(); ++c) {
    out[c] /= sum;
  }
}

}  // namespace

double softplus(double x) {
  if (x > 30.0) {
    return x;
  }
  if (x < -30.0) {
    return std::exp(x);
  }
  return std::log1p(std::exp(x));
}

double stable_sigmoid(double x) {
  if (x >= 0.0) {
    const double e = std::exp(-x);
    return 1.0 / (1.0 + e);
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

DropoutMask DropoutMask::for_draw(const NetworkLayout& layout, double rate,
                                  std::uint64_t seed, std::uint64_t draw_index) {
  if (rate < 0.0 || rate >= 1.0) {
    throw ConfigError("DropoutMask: rate must lie in [0, 1)");
  }
  Rng rng = derive_stream(seed, "dropout", draw_index);
  DropoutMask mask;
  mask.rate = rate;
  for (std::size_t l = 0; l + 1 < layout.depth(); ++l) {
    Matrix keep(1, layout.layers()[l].out, 1.0);
    for (std::size_t o = 0; o < keep.cols; ++o) {
      keep(0, o) = rng.uniform() < rate ? 0.0 : 1.0;
    }
    mask.keep.push_back(std::move(keep));
  }
  return mask;
}

DropoutMask DropoutMask::per_sample(const NetworkLayout& layout, double rate,
                                    std::size_t n, Rng& rng) {
  if (rate < 0.0 || rate >= 1.0) {
    throw ConfigError("DropoutMask: rate must lie in [0, 1)");
  }
  DropoutMask mask;
  mask.rate = rate;
  for (std::size_t l = 0; l + 1 < layout.depth(); ++l) {
    Matrix keep(n, layout.layers()[l].out, 1.0);
    for (double& v : keep.data) {
      v = rng.uniform() < rate ? 0.0 : 1.0;
    }
    mask.keep.push_back(std::move(keep));
  }
  return mask;
}

ForwardTrace forward_trace(const NetworkLayout& layout, std::span<const double> params,
                           const Matrix& x, const DropoutMask& mask) {
  check_params(layout, params, "forward");
  check_input(layout, x, "forward");
  check_mask(layout, mask, x.rows, "forward");

  ForwardTrace trace;
  trace.layout = layout;
  trace.input = x;
  trace.mask = mask;
  trace.pre.reserve(layout.depth());
  trace.act.reserve(layout.depth());

  const double scale = mask.empty() ? 1.0 : 1.0 / (1.0 - mask.rate);
  const Matrix* prev = &x;
  for (std::size_t l = 0; l < layout.depth(); ++l) {
    const LayerSpec& spec = layout.layers()[l];
    const std::size_t w0 = layout.weight_offset(l);
    const std::size_t b0 = layout.bias_offset(l);
    Matrix pre(x.rows, spec.out);
    for (std::size_t s = 0; s < x.rows; ++s) {
      const auto in_row = prev->row(s);
      for (std::size_t o = 0; o < spec.out; ++o) {
        double acc = params[b0 + o];
        const double* w = &params[w0 + o * spec.in];
        for (std::size_t i = 0; i < spec.in; ++i) {
          acc += w[i] * in_row[i];
        }
        pre(s, o) = acc;
      }
    }

    Matrix act(x.rows, spec.out);
    switch (spec.act) {
      case Activation::identity:
        act.data = pre.data;
        break;
      case Activation::relu:
        for (std::size_t i = 0; i < pre.data.size(); ++i) {
          act.data[i] = pre.data[i] > 0.0 ? pre.data[i] : 0.0;
        }
        break;
      case Activation::sigmoid:
        for (std::size_t i = 0; i < pre.data.size(); ++i) {
          act.data[i] = stable_sigmoid(pre.data[i]);
        }
        break;
      case Activation::softmax:
        for (std::size_t s = 0; s < x.rows; ++s) {
          softmax_row(pre.row(s), act.row(s));
        }
        break;
    }

    const bool hidden = l + 1 < layout.depth();
    if (hidden && !mask.empty()) {
      const Matrix& keep = mask.keep[l];
      for (std::size_t s = 0; s < x.rows; ++s) {
        const std::size_t mrow = keep.rows == 1 ? 0 : s;
        for (std::size_t o = 0; o < spec.out; ++o) {
          act(s, o) *= keep(mrow, o) * scale;
        }
      }
    }

    trace.pre.push_back(std::move(pre));
    trace.act.push_back(std::move(act));
    prev = &trace.act.back();
  }
  return trace;
}

Matrix forward(const NetworkLayout& layout, std::span<const double> params,
               const Matrix& x, const DropoutMask& mask) {
  return forward_trace(layout, params, x, mask).output();
}

Matrix head_logits(const NetworkLayout& layout, std::span<const double> params,
                   const Matrix& x, const DropoutMask& mask) {
  return forward_trace(layout, params, x, mask).head_logits();
}

Matrix activation_seed_to_preact(const ForwardTrace& trace, std::size_t layer,
                                 const Matrix& seed_at_act) {
  const LayerSpec& spec = trace.layout.layers()[layer];
  const bool hidden = layer + 1 < trace.layout.depth();
  const double scale = trace.mask.empty() ? 1.0 : 1.0 / (1.0 - trace.mask.rate);
  const Matrix& pre = trace.pre[layer];
  Matrix dpre(seed_at_act.rows, seed_at_act.cols);

  for (std::size_t s = 0; s < seed_at_act.rows; ++s) {
    // d(act)/d(g) from mask scaling, applied before the activation derivative.
    std::vector<double> dg(spec.out);
    for (std::size_t o = 0; o < spec.out; ++o) {
      double v = seed_at_act(s, o);
      if (hidden && !trace.mask.empty()) {
        const Matrix& keep = trace.mask.keep[layer];
        const std::size_t mrow = keep.rows == 1 ? 0 : s;
        v *= keep(mrow, o) * scale;
      }
      dg[o] = v;
    }
    switch (spec.act) {
      case Activation::identity:
        for (std::size_t o = 0; o < spec.out; ++o) {
          dpre(s, o) = dg[o];
        }
        break;
      case Activation::relu:
        for (std::size_t o = 0; o < spec.out; ++o) {
          dpre(s, o) = pre(s, o) > 0.0 ? dg[o] : 0.0;
        }
        break;
      case Activation::sigmoid:
        for (std::size_t o = 0; o < spec.out; ++o) {
          const double a = stable_sigmoid(pre(s, o));
          dpre(s, o) = dg[o] * a * (1.0 - a);
        }
        break;
      case Activation::softmax: {
        std::vector<double> p(spec.out);
        softmax_row(pre.row(s), p);
        double dot = 0.0;
        for (std::size_t o = 0; o < spec.out; ++o) {
          dot += dg[o] * p[o];
        }
        for (std::size_t o = 0; o < spec.out; ++o) {
          dpre(s, o) = p[o] * (dg[o] - dot);
        }
        break;
      }
    }
  }
  return dpre;
}

Matrix backprop_from_preact(const ForwardTrace& trace, std::span<const double> params,
                            std::size_t top, const Matrix& seed,
                            std::span<double> param_grad) {
  const NetworkLayout& layout = trace.layout;
  check_params(layout, params, "backprop");
  if (param_grad.size() != layout.param_count()) {
    throw ConfigError("backprop: gradient span has wrong length");
  }
  if (top >= layout.depth()) {
    throw ConfigError("backprop: top layer out of range");
  }
  if (seed.rows != trace.input.rows || seed.cols != layout.layers()[top].out) {
    throw ConfigError("backprop: seed shape mismatch");
  }

  Matrix dpre = seed;
  for (std::size_t li = top + 1; li-- > 0;) {
    const LayerSpec& spec = layout.layers()[li];
    const std::size_t w0 = layout.weight_offset(li);
    const std::size_t b0 = layout.bias_offset(li);
    const Matrix& in = li == 0 ? trace.input : trace.act[li - 1];

    for (std::size_t s = 0; s < dpre.rows; ++s) {
      const auto in_row = in.row(s);
      for (std::size_t o = 0; o < spec.out; ++o) {
        const double d = dpre(s, o);
        if (d == 0.0) {
          continue;
        }
        double* wg = &param_grad[w0 + o * spec.in];
        for (std::size_t i = 0; i < spec.in; ++i) {
          wg[i] += d * in_row[i];
        }
        param_grad[b0 + o] += d;
      }
    }

    Matrix dinput(dpre.rows, spec.in, 0.0);
    for (std::size_t s = 0; s < dpre.rows; ++s) {
      for (std::size_t o = 0; o < spec.out; ++o) {
        const double d = dpre(s, o);
        if (d == 0.0) {
          continue;
        }
        const double* w = &params[w0 + o * spec.in];
        for (std::size_t i = 0; i < spec.in; ++i) {
          dinput(s, i) += d * w[i];
        }
      }
    }
    if (li == 0) {
      return dinput;
    }
    dpre = activation_seed_to_preact(trace, li - 1, dinput);
  }
  return Matrix();  // unreachable
}

double bce_from_logits(const Matrix& logits, const Matrix& y) {
  if (logits.rows != y.rows || logits.cols != y.cols) {
    throw ConfigError("bce: prediction/target shape mismatch");
  }
  if (logits.data.empty()) {
    throw ConfigError("bce: empty batch");
  }
  double total = 0.0;
  for (std::size_t i = 0; i < logits.data.size(); ++i) {
    const double eta = logits.data[i];
    const double t = y.data[i];
    total += t * softplus(-eta) + (1.0 - t) * softplus(eta);
  }
  return total / static_cast<double>(logits.data.size());
}

double cce_from_logits(const Matrix& logits, const Matrix& targets) {
  if (logits.rows != targets.rows || logits.cols != targets.cols) {
    throw ConfigError("cce: prediction/target shape mismatch");
  }
  if (logits.rows == 0) {
    throw ConfigError("cce: empty batch");
  }
  double total = 0.0;
  for (std::size_t s = 0; s < logits.rows; ++s) {
    const auto row = logits.row(s);
    double mx = row[0];
    for (const double v : row) {
      mx = std::max(mx, v);
    }
    double lse = 0.0;
    for (const double v : row) {
      lse += std::exp(v - mx);
    }
    lse = mx + std::log(lse);
    for (std::size_t c = 0; c < logits.cols; ++c) {
      total -= targets(s, c) * (row[c] - lse);
    }
  }
  return total / static_cast<double>(logits.rows);
}

namespace {

void throw_non_finite(const ForwardTrace& trace, const char* what) {
  for (std::size_t l = 0; l < trace.pre.size(); ++l) {
    for (const double v : trace.pre[l].data) {
      if (!std::isfinite(v)) {
        throw NumericError(std::string(what) + ": non-finite value at layer " +
                           std::to_string(l));
      }
    }
  }
  throw NumericError(std::string(what) + ": non-finite loss");
}

}  // namespace

GradResult backward(const NetworkLayout& layout, std::span<const double> params,
                    const Matrix& x, const Matrix& y, LossTag tag,
                    const DropoutMask& mask) {
  if (x.rows == 0) {
    throw ConfigError("backward: empty batch");
  }
  if (y.rows != x.rows) {
    throw ConfigError("backward: target row count mismatch");
  }
  ForwardTrace trace = forward_trace(layout, params, x, mask);
  const Matrix& logits = trace.head_logits();
  const Matrix& probs = trace.output();
  if (y.cols != logits.cols) {
    throw ConfigError("backward: target width mismatch");
  }

  GradResult result;
  result.param_grad.assign(layout.param_count(), 0.0);

  Matrix dpre(x.rows, logits.cols);
  const std::size_t head = layout.depth() - 1;
  switch (tag) {
    case LossTag::bce: {
      if (layout.layers()[head].act != Activation::sigmoid) {
        throw ConfigError("backward: bce requires a sigmoid head");
      }
      result.loss = bce_from_logits(logits, y);
      const double n = static_cast<double>(logits.data.size());
      for (std::size_t i = 0; i < dpre.data.size(); ++i) {
        dpre.data[i] = (probs.data[i] - y.data[i]) / n;
      }
      break;
    }
    case LossTag::categorical_ce: {
      if (layout.layers()[head].act != Activation::softmax) {
        throw ConfigError("backward: categorical_ce requires a softmax head");
      }
      result.loss = cce_from_logits(logits, y);
      const double n = static_cast<double>(logits.rows);
      for (std::size_t i = 0; i < dpre.data.size(); ++i) {
        dpre.data[i] = (probs.data[i] - y.data[i]) / n;
      }
      break;
    }
  }
  if (!std::isfinite(result.loss)) {
    throw_non_finite(trace, "backward");
  }
  result.input_grad = backprop_from_preact(trace, params, head, dpre, result.param_grad);
  return result;
}

GradResult prediction_input_grad(const NetworkLayout& layout,
                                 std::span<const double> params, const Matrix& x,
                                 GradTarget target, std::size_t output_index,
                                 const DropoutMask& mask) {
  if (x.rows == 0) {
    throw ConfigError("prediction_input_grad: empty batch");
  }
  ForwardTrace trace = forward_trace(layout, params, x, mask);
  const std::size_t head = layout.depth() - 1;
  const LayerSpec& head_spec = layout.layers()[head];
  if (output_index >= head_spec.out) {
    throw ConfigError("prediction_input_grad: output index out of range");
  }

  GradResult result;
  result.param_grad.assign(layout.param_count(), 0.0);

  Matrix dpre(x.rows, head_spec.out, 0.0);
  double mean_target = 0.0;
  switch (target) {
    case GradTarget::logit:
      for (std::size_t s = 0; s < x.rows; ++s) {
        dpre(s, output_index) = 1.0;
        mean_target += trace.head_logits()(s, output_index);
      }
      break;
    case GradTarget::probability: {
      Matrix dact(x.rows, head_spec.out, 0.0);
      for (std::size_t s = 0; s < x.rows; ++s) {
        dact(s, output_index) = 1.0;
        mean_target += trace.output()(s, output_index);
      }
      dpre = activation_seed_to_preact(trace, head, dact);
      break;
    }
  }
  result.loss = mean_target / static_cast<double>(x.rows);
  result.input_grad = backprop_from_preact(trace, params, head, dpre, result.param_grad);
  return result;
}

}  // namespace medl

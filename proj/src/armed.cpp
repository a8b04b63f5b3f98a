#include "medl/armed.hpp"

#include <cmath>
#include <limits>
#include <string>

#include "medl/errors.hpp"

namespace medl {

namespace {

constexpr double kZRowTol = 1e-6;

Matrix column_matrix(const std::vector<double>& v) {
  Matrix m(v.size(), 1);
  m.data = v;
  return m;
}

void check_batch(const ArmedSpec& spec, const Batch& batch, const char* where) {
  if (batch.size() == 0) {
    throw ConfigError(std::string(where) + ": empty batch");
  }
  if (batch.x.cols != spec.n_features) {
    throw ConfigError(std::string(where) + ": feature width mismatch");
  }
  if (batch.y.size() != batch.size()) {
    throw ConfigError(std::string(where) + ": label count mismatch");
  }
  for (const double v : batch.y) {
    if (!(v >= 0.0 && v <= 1.0)) {
      throw DataError(std::string(where) + ": targets must lie in [0, 1]");
    }
  }
  if (batch.z.rows != batch.size() || batch.z.cols != spec.n_clusters) {
    throw ConfigError(std::string(where) + ": cluster matrix shape mismatch");
  }
}

void check_z_rows(const Matrix& z, const char* where) {
  for (std::size_t s = 0; s < z.rows; ++s) {
    double sum = 0.0;
    for (const double v : z.row(s)) {
      sum += v;
    }
    if (std::fabs(sum - 1.0) > kZRowTol) {
      throw DataError(std::string(where) + ": cluster membership row " +
                      std::to_string(s) + " does not sum to 1");
    }
  }
}

}  // namespace

// ----------------------------------------------------------------------
// spec and flat parameter vector
// ----------------------------------------------------------------------

NetworkLayout ArmedSpec::fe_layout() const {
  NetworkSpec net;
  net.input_dim = n_features;
  net.hidden = fe_hidden;
  net.head_width = 1;
  net.head_act = Activation::sigmoid;
  return net.layout();
}

NetworkLayout ArmedSpec::re_layout() const {
  return NetworkLayout({{n_clusters, n_features + 1, Activation::identity}});
}

NetworkLayout ArmedSpec::adv_layout() const {
  return NetworkLayout({{penult_width(), n_clusters, Activation::softmax}});
}

NetworkLayout ArmedSpec::zpred_layout() const {
  NetworkSpec net;
  net.input_dim = n_features;
  net.hidden = zpred_hidden;
  net.head_width = n_clusters;
  net.head_act = Activation::softmax;
  return net.layout();
}

std::size_t ArmedSpec::re_offset() const { return fe_layout().param_count(); }

std::size_t ArmedSpec::adv_offset() const {
  return re_offset() + re_layout().param_count();
}

std::size_t ArmedSpec::zpred_offset() const {
  return adv_offset() + adv_layout().param_count();
}

std::size_t ArmedSpec::total_params() const {
  return zpred_offset() + zpred_layout().param_count();
}

ArmedParams::ArmedParams(ArmedSpec s) : spec(std::move(s)) {
  if (spec.n_features == 0 || spec.n_clusters == 0) {
    throw ConfigError("ArmedParams: n_features and n_clusters must be positive");
  }
  values.assign(spec.total_params(), 0.0);
}

std::span<double> ArmedParams::fe() {
  return {values.data(), spec.re_offset()};
}
std::span<const double> ArmedParams::fe() const {
  return {values.data(), spec.re_offset()};
}
std::span<double> ArmedParams::re() {
  return {values.data() + spec.re_offset(), spec.adv_offset() - spec.re_offset()};
}
std::span<const double> ArmedParams::re() const {
  return {values.data() + spec.re_offset(), spec.adv_offset() - spec.re_offset()};
}
std::span<double> ArmedParams::adv() {
  return {values.data() + spec.adv_offset(), spec.zpred_offset() - spec.adv_offset()};
}
std::span<const double> ArmedParams::adv() const {
  return {values.data() + spec.adv_offset(), spec.zpred_offset() - spec.adv_offset()};
}
std::span<double> ArmedParams::zpred() {
  return {values.data() + spec.zpred_offset(), values.size() - spec.zpred_offset()};
}
std::span<const double> ArmedParams::zpred() const {
  return {values.data() + spec.zpred_offset(), values.size() - spec.zpred_offset()};
}
std::span<double> ArmedParams::main_slice() {
  return {values.data(), spec.adv_offset()};
}

ArmedParams init_armed_params(const ArmedSpec& spec, Rng& rng) {
  ArmedParams params(spec);
  glorot_init(spec.fe_layout(), params.fe(), rng);
  return params;  // re, adv, zpred stay zero
}

Batch subset_batch(const Batch& batch, std::span<const std::size_t> rows) {
  Batch out;
  out.x = Matrix(rows.size(), batch.x.cols);
  out.z = Matrix(rows.size(), batch.z.cols);
  out.y.resize(rows.size());
  out.cluster.resize(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const std::size_t src = rows[i];
    if (src >= batch.size()) {
      throw ConfigError("subset_batch: row index out of range");
    }
    const auto xs = batch.x.row(src);
    std::copy(xs.begin(), xs.end(), out.x.row(i).begin());
    const auto zs = batch.z.row(src);
    std::copy(zs.begin(), zs.end(), out.z.row(i).begin());
    out.y[i] = batch.y[src];
    out.cluster[i] = batch.cluster.empty() ? 0 : batch.cluster[src];
  }
  return out;
}

std::vector<Batch> partition_batch(const Batch& batch, std::size_t batch_size,
                                   Rng& shuffle_rng) {
  std::vector<std::size_t> order(batch.size());
  for (std::size_t i = 0; i < order.size(); ++i) {
    order[i] = i;
  }
  shuffle_rng.shuffle(order);

  std::vector<Batch> views;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    const std::size_t stop = std::min(order.size(), start + batch_size);
    views.push_back(subset_batch(
        batch, std::span<const std::size_t>(order.data() + start, stop - start)));
  }
  return views;
}

// ----------------------------------------------------------------------
// forward passes
// ----------------------------------------------------------------------

Matrix fe_penultimate(const ArmedParams& params, const Matrix& x,
                      const DropoutMask& fe_mask) {
  if (params.spec.fe_hidden.empty()) {
    return x;
  }
  ForwardTrace trace = forward_trace(params.spec.fe_layout(), params.fe(), x, fe_mask);
  return trace.act[trace.layout.depth() - 2];
}

Matrix adversary_forward(const ArmedParams& params, const Matrix& x,
                         const DropoutMask& fe_mask) {
  const Matrix penult = fe_penultimate(params, x, fe_mask);
  return forward(params.spec.adv_layout(), params.adv(), penult);
}

MixedPrediction mixed_forward(const ArmedParams& params, const Matrix& x,
                              const Matrix& z, const DropoutMask& fe_mask) {
  const ArmedSpec& spec = params.spec;
  if (x.cols != spec.n_features) {
    throw ConfigError("mixed_forward: feature width mismatch");
  }
  if (z.rows != x.rows || z.cols != spec.n_clusters) {
    throw ConfigError("mixed_forward: cluster matrix shape mismatch");
  }
  check_z_rows(z, "mixed_forward");

  const std::size_t n = x.rows;
  const std::size_t d = spec.n_features;

  MixedPrediction out;
  out.z_used = z;

  const Matrix re_out = forward(spec.re_layout(), params.re(), z);
  out.u = Matrix(n, d);
  out.u0.resize(n);
  out.h_random = Matrix(n, d);
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t i = 0; i < d; ++i) {
      out.u(s, i) = re_out(s, i);
      out.h_random(s, i) = x(s, i) * (1.0 + re_out(s, i));
    }
    out.u0[s] = re_out(s, d);
  }

  const NetworkLayout fe_layout = spec.fe_layout();
  const Matrix logit_f = head_logits(fe_layout, params.fe(), x, fe_mask);
  const Matrix logit_m_raw = head_logits(fe_layout, params.fe(), out.h_random, fe_mask);

  out.y_fixed.resize(n);
  out.y_mixed.resize(n);
  out.logit_fixed.resize(n);
  out.logit_mixed.resize(n);
  for (std::size_t s = 0; s < n; ++s) {
    out.logit_fixed[s] = logit_f(s, 0);
    out.y_fixed[s] = stable_sigmoid(out.logit_fixed[s]);
    out.logit_mixed[s] = logit_m_raw(s, 0) + out.u0[s];
    out.y_mixed[s] = stable_sigmoid(out.logit_mixed[s]);
  }
  return out;
}

// ----------------------------------------------------------------------
// loss and gradients
// ----------------------------------------------------------------------

LossBreakdown armed_loss(const ArmedParams& params, const Batch& batch,
                         const LossWeights& weights) {
  check_batch(params.spec, batch, "armed_loss");
  check_z_rows(batch.z, "armed_loss");

  const MixedPrediction mp = mixed_forward(params, batch.x, batch.z);
  const Matrix y = column_matrix(batch.y);

  LossBreakdown loss;
  loss.fixed_bce = bce_from_logits(column_matrix(mp.logit_fixed), y);
  loss.mixed_bce = bce_from_logits(column_matrix(mp.logit_mixed), y);
  const Matrix penult = fe_penultimate(params, batch.x);
  const Matrix adv_logits =
      head_logits(params.spec.adv_layout(), params.adv(), penult);
  loss.adversary_ce = cce_from_logits(adv_logits, batch.z);
  loss.total = weights.fixed * loss.fixed_bce + weights.mixed * loss.mixed_bce -
               weights.adversary * loss.adversary_ce;
  return loss;
}

ArmedGrads armed_main_grad(const ArmedParams& params, const Batch& batch,
                           const LossWeights& weights, const DropoutMask& fe_mask) {
  const ArmedSpec& spec = params.spec;
  check_batch(spec, batch, "armed_main_grad");
  check_z_rows(batch.z, "armed_main_grad");

  const std::size_t n = batch.size();
  const std::size_t d = spec.n_features;
  const double dn = static_cast<double>(n);
  const NetworkLayout fe_layout = spec.fe_layout();
  const NetworkLayout re_layout = spec.re_layout();
  const NetworkLayout adv_layout = spec.adv_layout();
  const std::size_t fe_head = fe_layout.depth() - 1;
  const Matrix y = column_matrix(batch.y);

  ArmedGrads out;
  out.grad.assign(spec.total_params(), 0.0);
  std::span<double> fe_grad(out.grad.data(), spec.re_offset());
  std::span<double> re_grad(out.grad.data() + spec.re_offset(),
                            spec.adv_offset() - spec.re_offset());

  // --- fixed path: BCE(sigmoid(fe(x)), y)
  ForwardTrace trace_f = forward_trace(fe_layout, params.fe(), batch.x, fe_mask);
  out.loss.fixed_bce = bce_from_logits(trace_f.head_logits(), y);
  if (weights.fixed != 0.0) {
    Matrix dpre(n, 1);
    for (std::size_t s = 0; s < n; ++s) {
      dpre(s, 0) = (trace_f.output()(s, 0) - batch.y[s]) / dn * weights.fixed;
    }
    backprop_from_preact(trace_f, params.fe(), fe_head, dpre, fe_grad);
  }

  // --- mixed path: BCE(sigmoid(fe(x*(1+u)) + u0), y)
  ForwardTrace trace_re = forward_trace(re_layout, params.re(), batch.z);
  const Matrix& re_out = trace_re.output();
  Matrix h_random(n, d);
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t i = 0; i < d; ++i) {
      h_random(s, i) = batch.x(s, i) * (1.0 + re_out(s, i));
    }
  }
  ForwardTrace trace_m = forward_trace(fe_layout, params.fe(), h_random, fe_mask);
  {
    Matrix logit_m(n, 1);
    for (std::size_t s = 0; s < n; ++s) {
      logit_m(s, 0) = trace_m.head_logits()(s, 0) + re_out(s, d);
    }
    out.loss.mixed_bce = bce_from_logits(logit_m, y);
    if (weights.mixed != 0.0) {
      Matrix deta(n, 1);
      for (std::size_t s = 0; s < n; ++s) {
        const double y_m = stable_sigmoid(logit_m(s, 0));
        deta(s, 0) = (y_m - batch.y[s]) / dn * weights.mixed;
      }
      const Matrix dh =
          backprop_from_preact(trace_m, params.fe(), fe_head, deta, fe_grad);
      Matrix dre(n, d + 1);
      for (std::size_t s = 0; s < n; ++s) {
        for (std::size_t i = 0; i < d; ++i) {
          dre(s, i) = dh(s, i) * batch.x(s, i);  // d h_R / d u = x
        }
        dre(s, d) = deta(s, 0);  // intercept adds straight into the logit
      }
      backprop_from_preact(trace_re, params.re(), 0, dre, re_grad);
    }
  }

  // --- adversarial path: -w_a * CE(adversary(penult(x)), z), adversary frozen
  {
    const Matrix& penult =
        spec.fe_hidden.empty() ? batch.x : trace_f.act[fe_layout.depth() - 2];
    ForwardTrace trace_a = forward_trace(adv_layout, params.adv(), penult);
    out.loss.adversary_ce = cce_from_logits(trace_a.head_logits(), batch.z);
    if (weights.adversary != 0.0 && !spec.fe_hidden.empty()) {
      Matrix dpre_a(n, spec.n_clusters);
      for (std::size_t s = 0; s < n; ++s) {
        for (std::size_t c = 0; c < spec.n_clusters; ++c) {
          dpre_a(s, c) = -(trace_a.output()(s, c) - batch.z(s, c)) / dn *
                         weights.adversary;
        }
      }
      std::vector<double> scratch(adv_layout.param_count(), 0.0);
      const Matrix da =
          backprop_from_preact(trace_a, params.adv(), 0, dpre_a, scratch);
      const Matrix dpen =
          activation_seed_to_preact(trace_f, fe_layout.depth() - 2, da);
      backprop_from_preact(trace_f, params.fe(), fe_layout.depth() - 2, dpen,
                           fe_grad);
    }
  }

  out.loss.total = weights.fixed * out.loss.fixed_bce +
                   weights.mixed * out.loss.mixed_bce -
                   weights.adversary * out.loss.adversary_ce;
  return out;
}

AdversaryGrads armed_adversary_grad(const ArmedParams& params, const Batch& batch,
                                    const DropoutMask& fe_mask) {
  const ArmedSpec& spec = params.spec;
  check_batch(spec, batch, "armed_adversary_grad");
  check_z_rows(batch.z, "armed_adversary_grad");

  const Matrix penult = fe_penultimate(params, batch.x, fe_mask);
  const GradResult g = backward(spec.adv_layout(), params.adv(), penult, batch.z,
                                LossTag::categorical_ce);
  AdversaryGrads out;
  out.ce = g.loss;
  out.grad.assign(spec.total_params(), 0.0);
  std::copy(g.param_grad.begin(), g.param_grad.end(),
            out.grad.begin() + static_cast<std::ptrdiff_t>(spec.adv_offset()));
  return out;
}

// ----------------------------------------------------------------------
// training
// ----------------------------------------------------------------------

ArmedTrainer::ArmedTrainer(const Batch& batch, TrainConfig cfg, ArmedParams init)
    : batch_(batch),
      cfg_(cfg),
      params_(std::move(init)),
      adam_main_(params_.spec.adv_offset(), AdamConfig{cfg.lr, 0.9, 0.999, 1e-8}),
      adam_adv_(params_.spec.zpred_offset() - params_.spec.adv_offset(),
                AdamConfig{cfg.lr, 0.9, 0.999, 1e-8}),
      dropout_rng_(derive_stream(cfg.seed, "dropout-train")),
      shuffle_rng_(derive_stream(cfg.seed, "shuffle")) {
  check_batch(params_.spec, batch_, "ArmedTrainer");
  if (params_.values.size() != params_.spec.total_params()) {
    throw ConfigError("ArmedTrainer: init parameter vector has wrong length");
  }
}

double ArmedTrainer::adversary_phase(const Batch& view) {
  // skipped entirely when the adversarial weight is zero
  if (cfg_.weights.adversary <= 0.0) {
    return std::numeric_limits<double>::quiet_NaN();
  }
  const ArmedSpec& spec = params_.spec;
  DropoutMask mask;
  if (cfg_.dropout_rate > 0.0) {
    mask = DropoutMask::per_sample(spec.fe_layout(), cfg_.dropout_rate,
                                   view.size(), dropout_rng_);
  }
  const AdversaryGrads g = armed_adversary_grad(params_, view, mask);
  std::span<double> adv_params = params_.adv();
  std::span<const double> adv_grad(g.grad.data() + spec.adv_offset(),
                                   adv_params.size());
  if (cfg_.optim == OptimKind::adam) {
    adam_adv_.step(adv_params, adv_grad);
  } else {
    sgd_step(adv_params, adv_grad, cfg_.lr);
  }
  return g.ce;
}

LossBreakdown ArmedTrainer::main_phase(const Batch& view) {
  const ArmedSpec& spec = params_.spec;
  DropoutMask mask;
  if (cfg_.dropout_rate > 0.0) {
    mask = DropoutMask::per_sample(spec.fe_layout(), cfg_.dropout_rate,
                                   view.size(), dropout_rng_);
  }
  ArmedGrads g = armed_main_grad(params_, view, cfg_.weights, mask);
  if (cfg_.freeze_re) {
    std::fill(g.grad.begin() + static_cast<std::ptrdiff_t>(spec.re_offset()),
              g.grad.begin() + static_cast<std::ptrdiff_t>(spec.adv_offset()), 0.0);
  }
  std::span<double> main_params = params_.main_slice();
  std::span<const double> main_grad(g.grad.data(), main_params.size());
  if (cfg_.optim == OptimKind::adam) {
    adam_main_.step(main_params, main_grad);
  } else {
    sgd_step(main_params, main_grad, cfg_.lr);
  }
  if (!std::isfinite(g.loss.total)) {
    throw NumericError("train_armed: non-finite loss at epoch " +
                       std::to_string(epoch_));
  }
  return g.loss;
}

void ArmedTrainer::run_epoch() {
  if (cfg_.batch_size == 0 || cfg_.batch_size >= batch_.size()) {
    // full batch: both alternation granularities coincide
    history_.adversary_ce.push_back(adversary_phase(batch_));
    history_.main.push_back(main_phase(batch_));
    ++epoch_;
    return;
  }

  // mini-batch path: one shuffled partition reused by both phases
  const std::vector<Batch> views = partition_batch(batch_, cfg_.batch_size, shuffle_rng_);
  std::vector<double> ces;
  std::vector<LossBreakdown> losses;
  ces.reserve(views.size());
  losses.reserve(views.size());
  if (cfg_.per_batch) {
    // interleaved: adversary step then main step on every mini-batch
    for (const Batch& view : views) {
      ces.push_back(adversary_phase(view));
      losses.push_back(main_phase(view));
    }
  } else {
    // per-epoch alternation: the adversary sweeps the whole partition first,
    // then the main nets sweep the same partition
    for (const Batch& view : views) {
      ces.push_back(adversary_phase(view));
    }
    for (const Batch& view : views) {
      losses.push_back(main_phase(view));
    }
  }

  // aggregate one sample-weighted history row per epoch
  LossBreakdown agg;
  double adv_acc = 0.0;
  bool adv_any = false;
  double total_n = 0.0;
  for (std::size_t i = 0; i < views.size(); ++i) {
    const double w = static_cast<double>(views[i].size());
    agg.total += losses[i].total * w;
    agg.fixed_bce += losses[i].fixed_bce * w;
    agg.mixed_bce += losses[i].mixed_bce * w;
    agg.adversary_ce += losses[i].adversary_ce * w;
    if (std::isfinite(ces[i])) {
      adv_acc += ces[i] * w;
      adv_any = true;
    }
    total_n += w;
  }
  agg.total /= total_n;
  agg.fixed_bce /= total_n;
  agg.mixed_bce /= total_n;
  agg.adversary_ce /= total_n;
  history_.main.push_back(agg);
  history_.adversary_ce.push_back(
      adv_any ? adv_acc / total_n : std::numeric_limits<double>::quiet_NaN());
  ++epoch_;
}

TrainResult train_armed(const Batch& batch, const TrainConfig& cfg,
                        const ArmedParams& init) {
  ArmedTrainer trainer(batch, cfg, init);
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    trainer.run_epoch();
  }
  return {trainer.take_params(), trainer.history()};
}

MlpTrainResult train_mlp(const NetworkLayout& layout, const Matrix& x,
                         const std::vector<double>& y, std::size_t epochs, double lr,
                         std::vector<double> init) {
  if (init.size() != layout.param_count()) {
    throw ConfigError("train_mlp: init parameter vector has wrong length");
  }
  const Matrix targets = column_matrix(y);
  MlpTrainResult result;
  result.params = std::move(init);
  AdamState adam(result.params.size(), AdamConfig{lr, 0.9, 0.999, 1e-8});
  for (std::size_t e = 0; e < epochs; ++e) {
    const GradResult g = backward(layout, result.params, x, targets, LossTag::bce);
    if (!std::isfinite(g.loss)) {
      throw NumericError("train_mlp: non-finite loss at epoch " + std::to_string(e));
    }
    result.loss_history.push_back(g.loss);
    adam.step(result.params, g.param_grad);
  }
  return result;
}

ZpredResult train_zpredictor(const Matrix& x, const Matrix& z, const ArmedSpec& spec,
                             std::size_t epochs, double lr) {
  if (x.rows != z.rows || z.cols != spec.n_clusters ||
      x.cols != spec.n_features) {
    throw ConfigError("train_zpredictor: shape mismatch");
  }
  if (x.rows == 0) {
    throw ConfigError("train_zpredictor: empty batch");
  }
  const NetworkLayout layout = spec.zpred_layout();
  ZpredResult result;
  result.params.assign(layout.param_count(), 0.0);
  result.degenerate = spec.n_clusters == 1;
  AdamState adam(result.params.size(), AdamConfig{lr, 0.9, 0.999, 1e-8});
  for (std::size_t e = 0; e < epochs; ++e) {
    const GradResult g =
        backward(layout, result.params, x, z, LossTag::categorical_ce);
    if (!std::isfinite(g.loss)) {
      throw NumericError("train_zpredictor: non-finite loss at epoch " +
                         std::to_string(e));
    }
    result.final_ce = g.loss;
    adam.step(result.params, g.param_grad);
  }
  return result;
}

MixedPrediction predict_unseen(const ArmedParams& params, const Matrix& x,
                               bool fe_only, const DropoutMask& fe_mask) {
  const ArmedSpec& spec = params.spec;
  const Matrix z_soft = forward(spec.zpred_layout(), params.zpred(), x);
  if (!fe_only) {
    return mixed_forward(params, x, z_soft, fe_mask);
  }
  // fixed-effects-only policy: reuse the fixed head for the mixed prediction
  const std::size_t n = x.rows;
  const std::size_t d = spec.n_features;
  MixedPrediction out;
  out.z_used = z_soft;
  const Matrix logit_f = head_logits(spec.fe_layout(), params.fe(), x, fe_mask);
  out.y_fixed.resize(n);
  out.logit_fixed.resize(n);
  for (std::size_t s = 0; s < n; ++s) {
    out.logit_fixed[s] = logit_f(s, 0);
    out.y_fixed[s] = stable_sigmoid(logit_f(s, 0));
  }
  out.y_mixed = out.y_fixed;
  out.logit_mixed = out.logit_fixed;
  out.u = Matrix(n, d, 0.0);
  out.u0.assign(n, 0.0);
  out.h_random = x;
  return out;
}

}  // namespace medl

#include "medl/uq.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <numeric>
#include <string>

#include <json.hpp>

#include "medl/errors.hpp"

namespace medl {

namespace {

using nlohmann::json;

bool near(double a, double b) { return std::fabs(a - b) < 1e-12; }

bool in_grid(double v, std::initializer_list<double> grid) {
  for (const double g : grid) {
    if (near(v, g)) return true;
  }
  return false;
}

double parse_suffix(const std::string& token, std::size_t prefix_len) {
  const std::string s = token.substr(prefix_len);
  const char* begin = s.c_str();
  char* end = nullptr;
  const double v = std::strtod(begin, &end);
  if (end == begin || *end != '\0' || !std::isfinite(v)) {
    throw ConfigError("backend '" + token + "' has a malformed numeric suffix");
  }
  return v;
}

std::string format_value(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

// Effective posterior scale, floored to keep sampling finite.
double effective_sigma(double rho, double floor_value) {
  return std::max(softplus(rho), floor_value);
}

void check_finite_iterate(std::span<const double> theta, std::size_t epoch,
                          const char* where) {
  for (const double v : theta) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string(where) + ": non-finite iterate at epoch " +
                         std::to_string(epoch) + "; lower the learning rate");
    }
  }
}

}  // namespace

// ----------------------------------------------------------------------
// backend parsing
// ----------------------------------------------------------------------

std::string to_string(SamplerKind kind) {
  switch (kind) {
    case SamplerKind::bnn_vi: return "bnn-vi";
    case SamplerKind::swag_diag: return "swag-diag";
    case SamplerKind::swag_full: return "swag-full";
    case SamplerKind::mc_dropout: return "mc-dropout";
    case SamplerKind::ensemble_init: return "ensemble-init";
    case SamplerKind::ensemble_subsample: return "ensemble-subsample";
  }
  throw ConfigError("unknown sampler kind");
}

SamplerKind sampler_kind_from_string(const std::string& s) {
  if (s == "bnn-vi") return SamplerKind::bnn_vi;
  if (s == "swag-diag") return SamplerKind::swag_diag;
  if (s == "swag-full") return SamplerKind::swag_full;
  if (s == "mc-dropout") return SamplerKind::mc_dropout;
  if (s == "ensemble-init") return SamplerKind::ensemble_init;
  if (s == "ensemble-subsample") return SamplerKind::ensemble_subsample;
  throw ConfigError("unknown sampler kind '" + s + "'");
}

BackendSpec parse_backend(const std::string& token, bool allow_custom) {
  BackendSpec bk;
  bk.name = token;

  if (token == "bnn-first" || token == "bnn-last" || token == "bnn-all") {
    bk.kind = SamplerKind::bnn_vi;
    bk.bnn_layers = token.substr(4);
    return bk;
  }
  if (token.rfind("dropout-", 0) == 0) {
    bk.kind = SamplerKind::mc_dropout;
    bk.dropout_rate = parse_suffix(token, 8);
    if (bk.dropout_rate < 0.0 || bk.dropout_rate >= 1.0) {
      throw ConfigError("dropout rate must lie in [0, 1); got " +
                        format_value(bk.dropout_rate));
    }
    if (!allow_custom && !in_grid(bk.dropout_rate, {0.1, 0.2, 0.3, 0.4, 0.5})) {
      throw ConfigError("dropout rate " + format_value(bk.dropout_rate) +
                        " is outside the benchmark grid {0.1..0.5};"
                        " pass --allow-custom to use it");
    }
    return bk;
  }
  const bool swag_diag = token.rfind("swag-diag-", 0) == 0;
  const bool swag_full = token.rfind("swag-full-", 0) == 0;
  if (swag_diag || swag_full) {
    bk.kind = swag_diag ? SamplerKind::swag_diag : SamplerKind::swag_full;
    bk.swag_lr = parse_suffix(token, 10);
    if (!(bk.swag_lr > 0.0)) {
      throw ConfigError("SWAG learning rate must be positive; got " +
                        format_value(bk.swag_lr));
    }
    if (!allow_custom && !in_grid(bk.swag_lr, {0.1, 0.01, 0.001, 0.0001})) {
      throw ConfigError("SWAG learning rate " + format_value(bk.swag_lr) +
                        " is outside the benchmark grid {1e-1,1e-2,1e-3,1e-4};"
                        " pass --allow-custom to use it");
    }
    return bk;
  }
  if (token == "ensemble-init") {
    bk.kind = SamplerKind::ensemble_init;
    return bk;
  }
  if (token.rfind("ensemble-sub-", 0) == 0) {
    bk.kind = SamplerKind::ensemble_subsample;
    bk.subsample_fraction = parse_suffix(token, 13);
    if (!(bk.subsample_fraction > 0.0 && bk.subsample_fraction <= 1.0)) {
      throw ConfigError("ensemble subsample fraction must lie in (0, 1]; got " +
                        format_value(bk.subsample_fraction));
    }
    if (!allow_custom && !in_grid(bk.subsample_fraction, {0.7, 0.8, 0.9})) {
      throw ConfigError("ensemble subsample fraction " +
                        format_value(bk.subsample_fraction) +
                        " is outside the benchmark grid {0.7,0.8,0.9};"
                        " pass --allow-custom to use it");
    }
    return bk;
  }
  throw ConfigError("unknown backend '" + token +
                    "'; expected bnn-{first|last|all}, dropout-<rate>,"
                    " swag-{diag|full}-<lr>, ensemble-init or ensemble-sub-<fraction>");
}

std::vector<std::string> default_backend_grid() {
  std::vector<std::string> grid = {"bnn-first", "bnn-last", "bnn-all"};
  for (const char* r : {"0.1", "0.2", "0.3", "0.4", "0.5"}) {
    grid.push_back(std::string("dropout-") + r);
  }
  for (const char* v : {"diag", "full"}) {
    for (const char* lr : {"0.1", "0.01", "0.001", "0.0001"}) {
      grid.push_back(std::string("swag-") + v + "-" + lr);
    }
  }
  grid.push_back("ensemble-init");
  for (const char* f : {"0.7", "0.8", "0.9"}) {
    grid.push_back(std::string("ensemble-sub-") + f);
  }
  return grid;
}

// ----------------------------------------------------------------------
// SWAG state
// ----------------------------------------------------------------------

void SwagState::accumulate(std::span<const double> theta) {
  if (dim == 0) {
    dim = theta.size();
    mean.assign(dim, 0.0);
    second.assign(dim, 0.0);
  }
  if (theta.size() != dim) {
    throw ConfigError("SwagState: iterate length changed between snapshots");
  }
  check_finite_iterate(theta, count, "SWAG collection");
  ++count;
  const double inv = 1.0 / static_cast<double>(count);
  std::vector<double> dev(dim);
  for (std::size_t i = 0; i < dim; ++i) {
    mean[i] += (theta[i] - mean[i]) * inv;
    second[i] += (theta[i] * theta[i] - second[i]) * inv;
    dev[i] = theta[i] - mean[i];
  }
  deviations.push_back(std::move(dev));
  if (deviations.size() > max_rank) {
    deviations.erase(deviations.begin());
  }
}

std::vector<double> SwagState::diag_variance() const {
  std::vector<double> var(dim);
  for (std::size_t i = 0; i < dim; ++i) {
    var[i] = std::max(second[i] - mean[i] * mean[i], 0.0);
  }
  return var;
}

std::vector<double> SwagState::sample(bool full_rank, Rng& rng) const {
  if (count == 0) {
    throw ConfigError("SwagState: no iterates collected");
  }
  const std::vector<double> var = diag_variance();
  std::vector<double> theta = mean;
  const double diag_scale = full_rank ? 1.0 / std::sqrt(2.0) : 1.0;
  for (std::size_t i = 0; i < dim; ++i) {
    theta[i] += diag_scale * std::sqrt(var[i]) * rng.normal();
  }
  if (full_rank && !deviations.empty()) {
    const double coef = 1.0 / std::sqrt(2.0 * static_cast<double>(deviations.size()));
    for (const auto& dev : deviations) {
      const double xi = rng.normal();
      for (std::size_t i = 0; i < dim; ++i) {
        theta[i] += coef * dev[i] * xi;
      }
    }
  }
  return theta;
}

// ----------------------------------------------------------------------
// sampler draw rules
// ----------------------------------------------------------------------

ArmedParams PosteriorSampler::draw_params(std::size_t draw) const {
  if (draw >= draws) {
    throw ConfigError("draw index " + std::to_string(draw) + " out of range (" +
                      std::to_string(draws) + " draws)");
  }
  ArmedParams out(spec);
  switch (kind) {
    case SamplerKind::bnn_vi: {
      Rng rng = derive_stream(seed, "sample", draw);
      out.values = mu;
      for (std::size_t i = 0; i < mu.size(); ++i) {
        if (bayesian[i]) {
          out.values[i] += effective_sigma(rho[i], sigma_floor) * rng.normal();
        }
      }
      return out;
    }
    case SamplerKind::swag_diag:
    case SamplerKind::swag_full: {
      Rng rng = derive_stream(seed, "sample", draw);
      out.values = swag.sample(kind == SamplerKind::swag_full, rng);
      return out;
    }
    case SamplerKind::mc_dropout:
      out.values = point.values;
      return out;
    case SamplerKind::ensemble_init:
    case SamplerKind::ensemble_subsample:
      out.values = members.at(draw);
      return out;
  }
  throw ConfigError("unknown sampler kind");
}

DropoutMask PosteriorSampler::draw_mask(std::size_t draw) const {
  if (kind != SamplerKind::mc_dropout || dropout_rate <= 0.0) {
    return {};
  }
  return DropoutMask::for_draw(spec.fe_layout(), dropout_rate, seed, draw);
}

MixedPrediction PosteriorSampler::draw_predict(std::size_t draw, const Matrix& x,
                                               const Matrix& z) const {
  if (kind == SamplerKind::mc_dropout) {
    return mixed_forward(point, x, z, draw_mask(draw));
  }
  return mixed_forward(draw_params(draw), x, z);
}

MixedPrediction PosteriorSampler::draw_predict_unseen(std::size_t draw, const Matrix& x,
                                                      bool fe_only) const {
  if (kind == SamplerKind::mc_dropout) {
    return predict_unseen(point, x, fe_only, draw_mask(draw));
  }
  return predict_unseen(draw_params(draw), x, fe_only);
}

DrawPredictions posterior_predict(const PosteriorSampler& sampler, const Matrix& x,
                                  const Matrix* z, bool fe_only_unseen) {
  DrawPredictions out;
  out.y_fixed = Matrix(sampler.draws, x.rows);
  out.y_mixed = Matrix(sampler.draws, x.rows);
  for (std::size_t s = 0; s < sampler.draws; ++s) {
    const MixedPrediction mp = z ? sampler.draw_predict(s, x, *z)
                                 : sampler.draw_predict_unseen(s, x, fe_only_unseen);
    std::copy(mp.y_fixed.begin(), mp.y_fixed.end(), out.y_fixed.row(s).begin());
    std::copy(mp.y_mixed.begin(), mp.y_mixed.end(), out.y_mixed.row(s).begin());
  }
  return out;
}

// ----------------------------------------------------------------------
// fits
// ----------------------------------------------------------------------

namespace {

PosteriorSampler make_base(const Batch& train, const ArmedParams& init,
                           const BackendSpec& backend, const FitOptions& opt) {
  if (init.values.size() != init.spec.total_params()) {
    throw ConfigError("fit: init parameter vector has wrong length");
  }
  if (train.size() == 0) {
    throw ConfigError("fit: empty training batch");
  }
  PosteriorSampler s;
  s.kind = backend.kind;
  s.name = backend.name;
  s.spec = init.spec;
  s.draws = opt.draws;
  s.seed = opt.seed;
  return s;
}

}  // namespace

PosteriorSampler fit_bnn(const Batch& train, const ArmedParams& init,
                         const BackendSpec& backend, const FitOptions& opt,
                         VariationalHistory* history) {
  PosteriorSampler s = make_base(train, init, backend, opt);
  const ArmedSpec& spec = init.spec;
  const NetworkLayout fe_layout = spec.fe_layout();
  const std::size_t total = spec.total_params();
  const std::size_t main_len = spec.adv_offset();
  const std::size_t adv_len = spec.zpred_offset() - spec.adv_offset();

  s.mu = init.values;
  s.rho.assign(total, std::log(std::expm1(1e-3)));  // sigma starts near 1e-3
  s.bayesian.assign(total, 0);

  std::vector<std::size_t> selected;
  if (backend.bnn_layers == "first") {
    selected = {0};
  } else if (backend.bnn_layers == "last") {
    selected = {fe_layout.depth() - 1};
  } else if (backend.bnn_layers == "all") {
    for (std::size_t l = 0; l < fe_layout.depth(); ++l) selected.push_back(l);
  } else {
    throw ConfigError("BNN layer selection must be first, last or all; got '" +
                      backend.bnn_layers + "'");
  }
  for (const std::size_t l : selected) {
    const std::size_t begin = fe_layout.weight_offset(l);
    const std::size_t count = fe_layout.layers()[l].param_count();
    std::fill(s.bayesian.begin() + static_cast<std::ptrdiff_t>(begin),
              s.bayesian.begin() + static_cast<std::ptrdiff_t>(begin + count), 1);
  }

  const double lambda_k =
      opt.kl_scale >= 0.0 ? opt.kl_scale : 1.0 / static_cast<double>(train.size());
  const TrainConfig& tc = opt.train;

  AdamState adam_mu(main_len, AdamConfig{tc.lr, 0.9, 0.999, 1e-8});
  AdamState adam_rho(main_len, AdamConfig{tc.lr, 0.9, 0.999, 1e-8});
  AdamState adam_adv(adv_len, AdamConfig{tc.lr, 0.9, 0.999, 1e-8});
  Rng noise_rng = derive_stream(opt.seed, "vi-noise");
  Rng shuffle_rng = derive_stream(tc.seed, "shuffle");

  ArmedParams w(spec);
  std::vector<double> eps(total, 0.0);
  std::vector<double> dmu(main_len), drho(main_len);

  auto process_view = [&](const Batch& view) -> std::pair<double, double> {
    // One reparameterized weight draw per batch.
    for (std::size_t i = 0; i < total; ++i) {
      if (s.bayesian[i]) {
        eps[i] = noise_rng.normal();
        const double sig = effective_sigma(s.rho[i], s.sigma_floor);
        if (softplus(s.rho[i]) < s.sigma_floor) s.sigma_clamped = true;
        w.values[i] = s.mu[i] + sig * eps[i];
      } else {
        w.values[i] = s.mu[i];
      }
    }

    if (tc.weights.adversary > 0.0) {
      const AdversaryGrads g = armed_adversary_grad(w, view);
      std::span<double> mu_adv(s.mu.data() + spec.adv_offset(), adv_len);
      std::span<const double> grad_adv(g.grad.data() + spec.adv_offset(), adv_len);
      adam_adv.step(mu_adv, grad_adv);
      std::copy(mu_adv.begin(), mu_adv.end(),
                w.values.begin() + static_cast<std::ptrdiff_t>(spec.adv_offset()));
    }

    const ArmedGrads g = armed_main_grad(w, view, tc.weights);

    double kl = 0.0;
    for (std::size_t i = 0; i < main_len; ++i) {
      dmu[i] = g.grad[i];
      drho[i] = 0.0;
      if (s.bayesian[i]) {
        const double sp = softplus(s.rho[i]);
        const bool clamped = sp < s.sigma_floor;
        const double sig = clamped ? s.sigma_floor : sp;
        const double dsig_drho = clamped ? 0.0 : stable_sigmoid(s.rho[i]);
        kl += -std::log(sig) + 0.5 * (sig * sig + s.mu[i] * s.mu[i] - 1.0);
        dmu[i] += lambda_k * s.mu[i];
        drho[i] = (g.grad[i] * eps[i] + lambda_k * (sig - 1.0 / sig)) * dsig_drho;
      }
    }
    if (tc.freeze_re) {
      for (std::size_t i = spec.re_offset(); i < main_len; ++i) {
        dmu[i] = 0.0;
        drho[i] = 0.0;
      }
    }
    adam_mu.step(std::span<double>(s.mu.data(), main_len), dmu);
    adam_rho.step(std::span<double>(s.rho.data(), main_len), drho);
    return {g.loss.total + lambda_k * kl, kl};
  };

  for (std::size_t epoch = 0; epoch < tc.epochs; ++epoch) {
    double loss_acc = 0.0, kl_acc = 0.0, n_acc = 0.0;
    if (tc.batch_size == 0 || tc.batch_size >= train.size()) {
      const auto [loss, kl] = process_view(train);
      loss_acc = loss;
      kl_acc = kl;
      n_acc = 1.0;
    } else {
      for (const Batch& view : partition_batch(train, tc.batch_size, shuffle_rng)) {
        const auto [loss, kl] = process_view(view);
        const double wgt = static_cast<double>(view.size());
        loss_acc += loss * wgt;
        kl_acc += kl * wgt;
        n_acc += wgt;
      }
    }
    const double epoch_loss = loss_acc / n_acc;
    if (!std::isfinite(epoch_loss)) {
      throw NumericError("fit_bnn: non-finite variational loss at epoch " +
                         std::to_string(epoch));
    }
    if (history) {
      history->loss.push_back(epoch_loss);
      history->kl.push_back(kl_acc / n_acc);
    }
  }

  // Point estimate: the variational means (useful for diagnostics).
  s.point = ArmedParams(spec);
  s.point.values = s.mu;
  return s;
}

PosteriorSampler fit_swag(const Batch& train, const ArmedParams& init,
                          const BackendSpec& backend, const FitOptions& opt) {
  PosteriorSampler s = make_base(train, init, backend, opt);
  if (opt.swag_epochs < 2) {
    throw ConfigError("SWAG needs at least 2 collection epochs");
  }

  TrainResult base = train_armed(train, opt.train, init);
  s.point = base.params;

  TrainConfig collect = opt.train;
  collect.optim = OptimKind::sgd;
  collect.lr = backend.swag_lr;
  collect.seed = derive_seed(opt.seed, "swag-collect");

  ArmedTrainer trainer(train, collect, std::move(base.params));
  s.swag.max_rank = opt.swag_epochs - 1;
  for (std::size_t k = 0; k < opt.swag_epochs; ++k) {
    try {
      trainer.run_epoch();
    } catch (const NumericError&) {
      throw NumericError("SWAG collection diverged at lr=" +
                         format_value(backend.swag_lr) + " (epoch " +
                         std::to_string(k) + "); lower the learning rate");
    }
    s.swag.accumulate(trainer.params().values);
  }
  return s;
}

PosteriorSampler fit_mc_dropout(const Batch& train, const ArmedParams& init,
                                const BackendSpec& backend, const FitOptions& opt) {
  PosteriorSampler s = make_base(train, init, backend, opt);
  if (backend.dropout_rate < 0.0 || backend.dropout_rate >= 1.0) {
    throw ConfigError("dropout rate must lie in [0, 1)");
  }
  s.dropout_rate = backend.dropout_rate;
  TrainConfig tc = opt.train;
  tc.dropout_rate = backend.dropout_rate;
  s.point = train_armed(train, tc, init).params;
  return s;
}

PosteriorSampler fit_ensemble(const Batch& train, const ArmedParams& init,
                              const BackendSpec& backend, const FitOptions& opt) {
  PosteriorSampler s = make_base(train, init, backend, opt);
  const ArmedSpec& spec = init.spec;
  const std::size_t n = train.size();
  s.point = init;
  s.subsample_fraction = backend.subsample_fraction;

  std::vector<std::vector<std::size_t>> by_cluster;
  if (backend.kind == SamplerKind::ensemble_subsample) {
    const double f = backend.subsample_fraction;
    if (f * static_cast<double>(n) < 2.0 * static_cast<double>(spec.n_clusters)) {
      throw DataError("ensemble subsample of " + format_value(f * 100.0) +
                      "% of " + std::to_string(n) +
                      " samples cannot stratify " + std::to_string(spec.n_clusters) +
                      " clusters");
    }
    by_cluster.resize(spec.n_clusters);
    for (std::size_t r = 0; r < n; ++r) {
      const auto c = static_cast<std::size_t>(train.cluster[r]);
      if (c >= spec.n_clusters) {
        throw DataError("ensemble subsample: row cluster id out of range");
      }
      by_cluster[c].push_back(r);
    }
  }

  for (std::size_t m = 0; m < opt.draws; ++m) {
    TrainConfig tc = opt.train;
    tc.seed = derive_seed(opt.seed, "member", m);

    if (backend.kind == SamplerKind::ensemble_subsample) {
      Rng rng = derive_stream(opt.seed, "subsample", m);
      std::vector<std::size_t> rows;
      for (auto idx : by_cluster) {
        const auto need = static_cast<std::size_t>(
            std::ceil(backend.subsample_fraction * static_cast<double>(idx.size())));
        rng.shuffle(idx);
        rows.insert(rows.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(need));
      }
      const Batch sub = subset_batch(train, rows);
      s.member_rows.push_back(std::move(rows));
      s.members.push_back(train_armed(sub, tc, init).params.values);
    } else {
      Rng rng = derive_stream(opt.seed, "member-init", m);
      ArmedParams member_init = init_armed_params(spec, rng);
      const auto zp = init.zpred();
      std::copy(zp.begin(), zp.end(), member_init.zpred().begin());
      s.members.push_back(train_armed(train, tc, member_init).params.values);
    }
  }
  return s;
}

PosteriorSampler fit_backend(const Batch& train, const ArmedParams& init,
                             const BackendSpec& backend, const FitOptions& opt) {
  switch (backend.kind) {
    case SamplerKind::bnn_vi: return fit_bnn(train, init, backend, opt);
    case SamplerKind::swag_diag:
    case SamplerKind::swag_full: return fit_swag(train, init, backend, opt);
    case SamplerKind::mc_dropout: return fit_mc_dropout(train, init, backend, opt);
    case SamplerKind::ensemble_init:
    case SamplerKind::ensemble_subsample: return fit_ensemble(train, init, backend, opt);
  }
  throw ConfigError("unknown sampler kind");
}

// ----------------------------------------------------------------------
// covariate coefficients
// ----------------------------------------------------------------------

std::vector<double> coefficient_vector(const ArmedParams& params, const Matrix& x,
                                       const Matrix& z, EffectKind effect,
                                       Averaging averaging, GradTarget target,
                                       const DropoutMask& fe_mask) {
  const ArmedSpec& spec = params.spec;
  if (x.rows == 0 || x.cols != spec.n_features) {
    throw ConfigError("coefficient_vector: feature matrix shape mismatch");
  }
  const std::size_t d = spec.n_features;
  const NetworkLayout fe_layout = spec.fe_layout();

  if (effect != EffectKind::fixed &&
      (z.rows != x.rows || z.cols != spec.n_clusters)) {
    throw DataError(
        "mixed and random-slope coefficients need per-sample cluster membership");
  }

  Matrix xbar(1, d);
  for (std::size_t c = 0; c < d; ++c) {
    double acc = 0.0;
    for (std::size_t r = 0; r < x.rows; ++r) acc += x(r, c);
    xbar(0, c) = acc / static_cast<double>(x.rows);
  }

  std::vector<double> coef(d, 0.0);
  switch (effect) {
    case EffectKind::fixed: {
      const Matrix& eval = averaging == Averaging::at_mean ? xbar : x;
      const GradResult g =
          prediction_input_grad(fe_layout, params.fe(), eval, target, 0, fe_mask);
      for (std::size_t i = 0; i < d; ++i) {
        double acc = 0.0;
        for (std::size_t r = 0; r < eval.rows; ++r) acc += g.input_grad(r, i);
        coef[i] = acc / static_cast<double>(eval.rows);
      }
      return coef;
    }
    case EffectKind::mixed: {
      Matrix zin = z;
      Matrix xin = x;
      if (averaging == Averaging::at_mean) {
        Matrix zbar(1, spec.n_clusters);
        for (std::size_t c = 0; c < spec.n_clusters; ++c) {
          double acc = 0.0;
          for (std::size_t r = 0; r < z.rows; ++r) acc += z(r, c);
          zbar(0, c) = acc / static_cast<double>(z.rows);
        }
        zin = std::move(zbar);
        xin = xbar;
      }
      const MixedPrediction mp = mixed_forward(params, xin, zin, fe_mask);
      const GradResult g = prediction_input_grad(fe_layout, params.fe(), mp.h_random,
                                                 GradTarget::logit, 0, fe_mask);
      for (std::size_t i = 0; i < d; ++i) {
        double acc = 0.0;
        for (std::size_t r = 0; r < xin.rows; ++r) {
          double v = g.input_grad(r, i) * (1.0 + mp.u(r, i));
          if (target == GradTarget::probability) {
            v *= mp.y_mixed[r] * (1.0 - mp.y_mixed[r]);
          }
          acc += v;
        }
        coef[i] = acc / static_cast<double>(xin.rows);
      }
      return coef;
    }
    case EffectKind::random_slope: {
      Matrix zin = z;
      if (averaging == Averaging::at_mean) {
        Matrix zbar(1, spec.n_clusters);
        for (std::size_t c = 0; c < spec.n_clusters; ++c) {
          double acc = 0.0;
          for (std::size_t r = 0; r < z.rows; ++r) acc += z(r, c);
          zbar(0, c) = acc / static_cast<double>(z.rows);
        }
        zin = std::move(zbar);
      }
      const Matrix re_out = forward(spec.re_layout(), params.re(), zin);
      for (std::size_t i = 0; i < d; ++i) {
        double acc = 0.0;
        for (std::size_t r = 0; r < zin.rows; ++r) acc += 1.0 + re_out(r, i);
        coef[i] = acc / static_cast<double>(zin.rows);
      }
      return coef;
    }
  }
  throw ConfigError("unknown effect kind");
}

Matrix coefficient_draws(const PosteriorSampler& sampler, const Matrix& x,
                         const Matrix& z, EffectKind effect, Averaging averaging,
                         GradTarget target) {
  Matrix out(sampler.draws, sampler.spec.n_features);
  for (std::size_t s = 0; s < sampler.draws; ++s) {
    std::vector<double> coef;
    if (sampler.kind == SamplerKind::mc_dropout) {
      coef = coefficient_vector(sampler.point, x, z, effect, averaging, target,
                                sampler.draw_mask(s));
    } else {
      coef = coefficient_vector(sampler.draw_params(s), x, z, effect, averaging,
                                target);
    }
    std::copy(coef.begin(), coef.end(), out.row(s).begin());
  }
  return out;
}

// ----------------------------------------------------------------------
// serialization
// ----------------------------------------------------------------------

void save_sampler(const PosteriorSampler& sampler, const std::string& path) {
  json j;
  j["format_version"] = 1;
  j["kind"] = to_string(sampler.kind);
  j["name"] = sampler.name;
  j["spec"] = {{"n_features", sampler.spec.n_features},
               {"n_clusters", sampler.spec.n_clusters},
               {"fe_hidden", sampler.spec.fe_hidden},
               {"zpred_hidden", sampler.spec.zpred_hidden}};
  j["draws"] = sampler.draws;
  j["seed"] = sampler.seed;
  j["train_seconds"] = sampler.train_seconds;
  j["point"] = sampler.point.values;
  switch (sampler.kind) {
    case SamplerKind::bnn_vi: {
      j["mu"] = sampler.mu;
      j["rho"] = sampler.rho;
      std::vector<int> flags(sampler.bayesian.begin(), sampler.bayesian.end());
      j["bayesian"] = flags;
      j["sigma_floor"] = sampler.sigma_floor;
      j["sigma_clamped"] = sampler.sigma_clamped;
      break;
    }
    case SamplerKind::swag_diag:
    case SamplerKind::swag_full:
      j["swag"] = {{"dim", sampler.swag.dim},
                   {"max_rank", sampler.swag.max_rank},
                   {"count", sampler.swag.count},
                   {"mean", sampler.swag.mean},
                   {"second", sampler.swag.second},
                   {"deviations", sampler.swag.deviations}};
      break;
    case SamplerKind::mc_dropout:
      j["dropout_rate"] = sampler.dropout_rate;
      break;
    case SamplerKind::ensemble_init:
    case SamplerKind::ensemble_subsample:
      j["subsample_fraction"] = sampler.subsample_fraction;
      j["members"] = sampler.members;
      j["member_rows"] = sampler.member_rows;
      break;
  }
  std::ofstream out(path);
  if (!out) {
    throw DataError("cannot open '" + path + "' for writing");
  }
  out << j.dump() << '\n';
  if (!out) {
    throw DataError("failed while writing '" + path + "'");
  }
}

PosteriorSampler load_sampler(const std::string& path) {
  std::ifstream in(path);
  if (!in) {
    throw DataError("cannot open model file '" + path + "'");
  }
  json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw DataError("model file '" + path + "' is not valid JSON: " + e.what());
  }
  if (j.value("format_version", 0) != 1) {
    throw DataError("model file '" + path + "' has unsupported format version");
  }

  PosteriorSampler s;
  s.kind = sampler_kind_from_string(j.at("kind").get<std::string>());
  s.name = j.at("name").get<std::string>();
  const json& sp = j.at("spec");
  s.spec.n_features = sp.at("n_features").get<std::size_t>();
  s.spec.n_clusters = sp.at("n_clusters").get<std::size_t>();
  s.spec.fe_hidden = sp.at("fe_hidden").get<std::vector<std::size_t>>();
  s.spec.zpred_hidden = sp.at("zpred_hidden").get<std::vector<std::size_t>>();
  s.draws = j.at("draws").get<std::size_t>();
  s.seed = j.at("seed").get<std::uint64_t>();
  s.train_seconds = j.value("train_seconds", 0.0);
  s.point = ArmedParams(s.spec);
  s.point.values = j.at("point").get<std::vector<double>>();
  if (s.point.values.size() != s.spec.total_params()) {
    throw DataError("model file '" + path + "' parameter length mismatch");
  }
  switch (s.kind) {
    case SamplerKind::bnn_vi: {
      s.mu = j.at("mu").get<std::vector<double>>();
      s.rho = j.at("rho").get<std::vector<double>>();
      const auto flags = j.at("bayesian").get<std::vector<int>>();
      s.bayesian.assign(flags.begin(), flags.end());
      s.sigma_floor = j.at("sigma_floor").get<double>();
      s.sigma_clamped = j.at("sigma_clamped").get<bool>();
      if (s.mu.size() != s.spec.total_params() || s.rho.size() != s.mu.size() ||
          s.bayesian.size() != s.mu.size()) {
        throw DataError("model file '" + path + "' variational state mismatch");
      }
      break;
    }
    case SamplerKind::swag_diag:
    case SamplerKind::swag_full: {
      const json& sw = j.at("swag");
      s.swag.dim = sw.at("dim").get<std::size_t>();
      s.swag.max_rank = sw.at("max_rank").get<std::size_t>();
      s.swag.count = sw.at("count").get<std::size_t>();
      s.swag.mean = sw.at("mean").get<std::vector<double>>();
      s.swag.second = sw.at("second").get<std::vector<double>>();
      s.swag.deviations = sw.at("deviations").get<std::vector<std::vector<double>>>();
      if (s.swag.dim != s.spec.total_params()) {
        throw DataError("model file '" + path + "' SWAG state mismatch");
      }
      break;
    }
    case SamplerKind::mc_dropout:
      s.dropout_rate = j.at("dropout_rate").get<double>();
      break;
    case SamplerKind::ensemble_init:
    case SamplerKind::ensemble_subsample:
      s.subsample_fraction = j.value("subsample_fraction", 0.0);
      s.members = j.at("members").get<std::vector<std::vector<double>>>();
      s.member_rows =
          j.value("member_rows", std::vector<std::vector<std::size_t>>{});
      for (const auto& m : s.members) {
        if (m.size() != s.spec.total_params()) {
          throw DataError("model file '" + path + "' member length mismatch");
        }
      }
      break;
  }
  return s;
}

}  // namespace medl

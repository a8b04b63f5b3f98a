#ifndef MEDL_UQ_HPP
#define MEDL_UQ_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "medl/armed.hpp"
#include "medl/matrix.hpp"
#include "medl/network.hpp"
#include "medl/rng.hpp"

namespace medl {

// ----------------------------------------------------------------------
// backend selection
// ----------------------------------------------------------------------

enum class SamplerKind {
  bnn_vi,
  swag_diag,
  swag_full,
  mc_dropout,
  ensemble_init,
  ensemble_subsample,
};

std::string to_string(SamplerKind kind);
SamplerKind sampler_kind_from_string(const std::string& s);

// One configured backend, parsed from a token such as "bnn-all",
// "dropout-0.3", "swag-diag-0.01", "ensemble-init" or "ensemble-sub-0.9".
// Numeric values outside the benchmark grids need allow_custom.
struct BackendSpec {
  SamplerKind kind = SamplerKind::mc_dropout;
  std::string name;
  std::string bnn_layers = "all";  // first | last | all
  double swag_lr = 0.01;
  double dropout_rate = 0.0;
  double subsample_fraction = 0.0;
};

BackendSpec parse_backend(const std::string& token, bool allow_custom = false);

// Every token in the benchmark grid: 3 BNN layer selections, 5 dropout
// rates, 8 SWAG (diag/full x 4 learning rates), 4 ensembles.
std::vector<std::string> default_backend_grid();

// ----------------------------------------------------------------------
// SWAG moment accumulator
// ----------------------------------------------------------------------

// First/second moments of constant-lr SGD iterates plus the most recent
// centered deviations (rank K-1 for K snapshots once max_rank = K-1).
struct SwagState {
  std::size_t dim = 0;
  std::size_t max_rank = 29;
  std::size_t count = 0;
  std::vector<double> mean;    // running mean of iterates
  std::vector<double> second;  // running mean of squared iterates
  std::vector<std::vector<double>> deviations;

  void accumulate(std::span<const double> theta);
  std::vector<double> diag_variance() const;  // max(second - mean^2, 0)

  // diag: theta = mean + sqrt(var) * xi.
  // full: theta = mean + sqrt(var/2) * xi1 + D * xi2 / sqrt(2 R), R = columns
  // of D, so Cov = var/2 + D D^T / (2 R).
  std::vector<double> sample(bool full_rank, Rng& rng) const;
};

// ----------------------------------------------------------------------
// posterior sampler
// ----------------------------------------------------------------------

struct FitOptions {
  TrainConfig train;
  std::size_t draws = 30;
  std::uint64_t seed = 0;     // backend stream master
  std::size_t swag_epochs = 30;
  double kl_scale = -1.0;     // < 0: 1 / n_train
};

// A fitted UQ backend: yields `draws` deterministic weight draws (or dropout
// masks) over the full flat ArmedParams vector.
struct PosteriorSampler {
  SamplerKind kind = SamplerKind::mc_dropout;
  std::string name;
  ArmedSpec spec;
  std::size_t draws = 30;
  std::uint64_t seed = 0;
  double train_seconds = 0.0;

  ArmedParams point;  // trained point estimate (base model for dropout/SWAG)

  // bnn-vi
  std::vector<double> mu;
  std::vector<double> rho;     // sigma = softplus(rho) on bayesian coords
  std::vector<char> bayesian;  // per-parameter flag
  double sigma_floor = 1e-6;
  bool sigma_clamped = false;

  // swag
  SwagState swag;

  // mc-dropout
  double dropout_rate = 0.0;

  // ensembles
  double subsample_fraction = 0.0;
  std::vector<std::vector<double>> members;
  std::vector<std::vector<std::size_t>> member_rows;

  ArmedParams draw_params(std::size_t draw) const;
  DropoutMask draw_mask(std::size_t draw) const;  // empty unless mc-dropout
  MixedPrediction draw_predict(std::size_t draw, const Matrix& x, const Matrix& z) const;
  MixedPrediction draw_predict_unseen(std::size_t draw, const Matrix& x,
                                      bool fe_only = false) const;
};

struct VariationalHistory {
  std::vector<double> loss;  // main loss + kl penalty, one entry per epoch
  std::vector<double> kl;
};

// All fits expect `init` to already carry the fold-trained Z-predictor in its
// zpred slice; fits only retrain the fe/re/adv parts.
PosteriorSampler fit_bnn(const Batch& train, const ArmedParams& init,
                         const BackendSpec& backend, const FitOptions& opt,
                         VariationalHistory* history = nullptr);
PosteriorSampler fit_swag(const Batch& train, const ArmedParams& init,
                          const BackendSpec& backend, const FitOptions& opt);
PosteriorSampler fit_mc_dropout(const Batch& train, const ArmedParams& init,
                                const BackendSpec& backend, const FitOptions& opt);
PosteriorSampler fit_ensemble(const Batch& train, const ArmedParams& init,
                              const BackendSpec& backend, const FitOptions& opt);
PosteriorSampler fit_backend(const Batch& train, const ArmedParams& init,
                             const BackendSpec& backend, const FitOptions& opt);

struct DrawPredictions {
  Matrix y_fixed;  // draws x n
  Matrix y_mixed;  // draws x n
};

// z == nullptr: rows come from clusters never seen in training; membership is
// inferred by the Z-predictor (or the fixed head alone with fe_only_unseen).
DrawPredictions posterior_predict(const PosteriorSampler& sampler, const Matrix& x,
                                  const Matrix* z, bool fe_only_unseen = false);

// ----------------------------------------------------------------------
// covariate coefficients
// ----------------------------------------------------------------------

enum class EffectKind { fixed, mixed, random_slope };
enum class Averaging { per_sample_mean, at_mean };

// One coefficient per feature: mean input-gradient of the fixed/mixed head
// (on the logit or probability scale) or the mean random-effect slope
// diagonal d h_R_i / d x_i = 1 + u_i(z).
std::vector<double> coefficient_vector(const ArmedParams& params, const Matrix& x,
                                       const Matrix& z, EffectKind effect,
                                       Averaging averaging,
                                       GradTarget target = GradTarget::logit,
                                       const DropoutMask& fe_mask = {});

// draws x d matrix of coefficient vectors, one row per posterior draw.
Matrix coefficient_draws(const PosteriorSampler& sampler, const Matrix& x,
                         const Matrix& z, EffectKind effect, Averaging averaging,
                         GradTarget target = GradTarget::logit);

// ----------------------------------------------------------------------
// serialization
// ----------------------------------------------------------------------

// Versioned JSON model files; numbers round-trip bit-exactly so re-emitted
// reports match the original run.
void save_sampler(const PosteriorSampler& sampler, const std::string& path);
PosteriorSampler load_sampler(const std::string& path);

}  // namespace medl

#endif  // MEDL_UQ_HPP

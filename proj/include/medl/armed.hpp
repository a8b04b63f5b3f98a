#ifndef MEDL_ARMED_HPP
#define MEDL_ARMED_HPP

#include <cstdint>
#include <span>
#include <vector>

#include "medl/matrix.hpp"
#include "medl/network.hpp"
#include "medl/optim.hpp"
#include "medl/param_vector.hpp"
#include "medl/rng.hpp"

namespace medl {

// Architecture of one mixed-effects model:
//   fe     feature MLP ending in a sigmoid head (the "conventional" model),
//   re     linear map cluster-membership -> per-feature slopes + intercept,
//   adv    softmax cluster classifier on the fe penultimate activations,
//   zpred  softmax cluster-membership predictor from raw features.
// All four live in one flat parameter vector: [fe | re | adv | zpred].
struct ArmedSpec {
  std::size_t n_features = 0;
  std::size_t n_clusters = 0;  // seen clusters
  std::vector<std::size_t> fe_hidden = {4, 4, 4, 4};
  std::vector<std::size_t> zpred_hidden = {};

  NetworkLayout fe_layout() const;
  // Output row = [u_1 .. u_d, u0]: slopes first, scalar intercept last.
  NetworkLayout re_layout() const;
  NetworkLayout adv_layout() const;
  NetworkLayout zpred_layout() const;

  std::size_t penult_width() const {
    return fe_hidden.empty() ? n_features : fe_hidden.back();
  }

  std::size_t fe_offset() const { return 0; }
  std::size_t re_offset() const;
  std::size_t adv_offset() const;
  std::size_t zpred_offset() const;
  std::size_t total_params() const;

  bool operator==(const ArmedSpec&) const = default;
};

struct ArmedParams {
  ArmedSpec spec;
  std::vector<double> values;

  ArmedParams() = default;
  explicit ArmedParams(ArmedSpec s);

  std::span<double> fe();
  std::span<const double> fe() const;
  std::span<double> re();
  std::span<const double> re() const;
  std::span<double> adv();
  std::span<const double> adv() const;
  std::span<double> zpred();
  std::span<const double> zpred() const;
  // fe and re are adjacent; the main training phase updates them together.
  std::span<double> main_slice();
};

// Glorot fe weights from the init stream; re, adv and zpred start at zero
// (zero re makes the mixed path coincide with the fixed path, zero softmax
// weights give uniform cluster distributions).
ArmedParams init_armed_params(const ArmedSpec& spec, Rng& rng);

struct Batch {
  Matrix x;
  std::vector<double> y;
  Matrix z;                  // n x n_clusters, rows sum to 1
  std::vector<int> cluster;  // row cluster ids (used for stratified draws)

  std::size_t size() const { return x.rows; }
};

// Row-subset copy of a batch.
Batch subset_batch(const Batch& batch, std::span<const std::size_t> rows);

// Shuffles row order and cuts the batch into contiguous mini-batches.
std::vector<Batch> partition_batch(const Batch& batch, std::size_t batch_size,
                                   Rng& shuffle_rng);

struct MixedPrediction {
  std::vector<double> y_fixed;
  std::vector<double> y_mixed;
  std::vector<double> logit_fixed;
  std::vector<double> logit_mixed;
  Matrix h_random;  // x * (1 + u(z))
  Matrix u;         // n x d slopes
  std::vector<double> u0;
  Matrix z_used;
};

// y_F = sigmoid(fe(x)); y_M = sigmoid(fe(x * (1 + u(z))) + u0(z)).
MixedPrediction mixed_forward(const ArmedParams& params, const Matrix& x,
                              const Matrix& z, const DropoutMask& fe_mask = {});

// Softmax over seen clusters from the fe penultimate activations.
Matrix adversary_forward(const ArmedParams& params, const Matrix& x,
                         const DropoutMask& fe_mask = {});
Matrix fe_penultimate(const ArmedParams& params, const Matrix& x,
                      const DropoutMask& fe_mask = {});

struct LossWeights {
  double fixed = 1.0;
  double mixed = 1.0;
  double adversary = 0.1;
};

struct LossBreakdown {
  double total = 0.0;
  double fixed_bce = 0.0;
  double mixed_bce = 0.0;
  double adversary_ce = 0.0;
};

// total = w_f * BCE(y_F, y) + w_m * BCE(y_M, y) - w_a * CE(adversary, z).
LossBreakdown armed_loss(const ArmedParams& params, const Batch& batch,
                         const LossWeights& weights);

struct ArmedGrads {
  LossBreakdown loss;
  std::vector<double> grad;  // full flat length; fe+re slices filled
};

// Gradient of the composite loss w.r.t. fe and re with the adversary frozen.
ArmedGrads armed_main_grad(const ArmedParams& params, const Batch& batch,
                           const LossWeights& weights, const DropoutMask& fe_mask = {});

struct AdversaryGrads {
  double ce = 0.0;
  std::vector<double> grad;  // full flat length; adv slice filled
};

// Gradient of the adversary cross-entropy w.r.t. adv with fe frozen.
AdversaryGrads armed_adversary_grad(const ArmedParams& params, const Batch& batch,
                                    const DropoutMask& fe_mask = {});

enum class OptimKind { adam, sgd };

struct TrainConfig {
  std::size_t epochs = 300;
  double lr = 0.01;
  LossWeights weights{};
  std::size_t batch_size = 0;  // 0 = full batch
  // When mini-batching, the default keeps per-epoch alternation: the
  // adversary sweeps every mini-batch, then the main nets sweep the same
  // partition. per_batch = true interleaves the two phases on each
  // mini-batch instead.
  bool per_batch = false;
  double dropout_rate = 0.0;  // fe-subnet masking during training
  bool freeze_re = false;
  OptimKind optim = OptimKind::adam;
  std::uint64_t seed = 0;
};

struct TrainHistory {
  std::vector<LossBreakdown> main;     // one per epoch, evaluated pre-update
  std::vector<double> adversary_ce;    // NaN when the adversary phase is off
};

// Alternates one adversary minimization phase and one main phase per epoch
// (or per mini-batch when TrainConfig::per_batch is set).
class ArmedTrainer {
 public:
  ArmedTrainer(const Batch& batch, TrainConfig cfg, ArmedParams init);

  void run_epoch();
  const ArmedParams& params() const { return params_; }
  ArmedParams take_params() { return std::move(params_); }
  const TrainHistory& history() const { return history_; }

 private:
  const Batch& batch_;
  TrainConfig cfg_;
  ArmedParams params_;
  AdamState adam_main_;
  AdamState adam_adv_;
  Rng dropout_rng_;
  Rng shuffle_rng_;
  TrainHistory history_;
  std::size_t epoch_ = 0;

  // One optimizer step each; return the value logged into the history.
  double adversary_phase(const Batch& view);
  LossBreakdown main_phase(const Batch& view);
};

struct TrainResult {
  ArmedParams params;
  TrainHistory history;
};

TrainResult train_armed(const Batch& batch, const TrainConfig& cfg,
                        const ArmedParams& init);

// Plain BCE training of a standalone MLP (reference model / reduction tests).
struct MlpTrainResult {
  std::vector<double> params;
  std::vector<double> loss_history;
};

MlpTrainResult train_mlp(const NetworkLayout& layout, const Matrix& x,
                         const std::vector<double>& y, std::size_t epochs, double lr,
                         std::vector<double> init);

struct ZpredResult {
  std::vector<double> params;  // zpred-layout sized
  double final_ce = 0.0;
  bool degenerate = false;  // single seen cluster: constant predictor
};

ZpredResult train_zpredictor(const Matrix& x, const Matrix& z, const ArmedSpec& spec,
                             std::size_t epochs, double lr);

// Cluster membership for rows whose cluster was never seen: soft zpred
// probabilities by default, or the fixed-effects head alone.
MixedPrediction predict_unseen(const ArmedParams& params, const Matrix& x,
                               bool fe_only = false, const DropoutMask& fe_mask = {});

}  // namespace medl

#endif  // MEDL_ARMED_HPP

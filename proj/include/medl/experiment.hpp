#ifndef MEDL_EXPERIMENT_HPP
#define MEDL_EXPERIMENT_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "medl/armed.hpp"
#include "medl/simdata.hpp"
#include "medl/stats.hpp"
#include "medl/uq.hpp"

namespace medl {

inline constexpr const char* kVersion = "medl-uq 1.0.0";

// ----------------------------------------------------------------------
// configuration
// ----------------------------------------------------------------------

struct DatasetConfig {
  std::string source = "generate";  // generate | csv
  std::string csv_path;
  std::string sidecar_path;
  GeneratorConfig generator;  // generator.seed is derived from the run seed
};

struct ExperimentConfig {
  DatasetConfig dataset;
  std::size_t folds = 10;
  std::size_t draws = 30;
  std::vector<std::string> backends;  // UQ tokens; the baseline always runs
  bool allow_custom = false;
  LossWeights weights{};
  std::size_t epochs = 200;
  double lr = 0.01;
  std::size_t batch_size = 32;  // 0 = full batch
  bool per_batch = false;       // mini-batch alternation granularity
  double dropout = 0.0;         // fe-subnet masking during training
  std::size_t zpred_epochs = 300;
  double zpred_lr = 0.01;
  std::size_t swag_epochs = 30;
  double kl_scale = -1.0;  // < 0: 1 / n_train
  std::string grad_target = "logit";          // logit | probability
  std::string unseen_strategy = "zpred-soft";  // zpred-soft | fe-only
  std::uint64_t seed = 0;
  bool seed_set = false;

  // Execution knobs, excluded from the canonical form: they change where and
  // how fast results appear, never the results themselves.
  std::string out_dir;
  bool parallel = false;
};

// Canonical sorted-key JSON of every result-affecting field.
std::string canonical_config_string(const ExperimentConfig& cfg);
std::uint64_t config_hash(const ExperimentConfig& cfg);

ExperimentConfig load_config_file(const std::string& path);
void save_config_file(const ExperimentConfig& cfg, const std::string& path);

// Full validation: seed present, folds/draws sane, backend tokens parseable,
// enum strings recognized. Returns the parsed backends.
std::vector<BackendSpec> validate_config(const ExperimentConfig& cfg);

// Dataset resolution (generation seeded from the run seed, or CSV ingestion).
ClusteredDataset resolve_dataset(const ExperimentConfig& cfg);

// ----------------------------------------------------------------------
// report rows
// ----------------------------------------------------------------------

struct MetricSummary {
  double mean = 0.0;
  double lo = 0.0;
  double hi = 0.0;
};

struct PerformanceRow {
  std::string model;
  std::string split;  // seen-test | unseen
  std::size_t n_folds = 0;
  MetricSummary auroc, bal_acc_youden, sens_youden, spec_youden;
  MetricSummary sens_at_spec80, sens_at_spec90, bal_acc_05;
  PooledStat fit;  // one-sided test of logit balanced accuracy (0.5 rule)
  bool fit_applicable = false;
};

struct CovariateRow {
  std::string model;
  std::string effect;     // fixed | mixed | random
  std::string averaging;  // per-sample | at-mean
  std::string feature;
  bool is_probe = false;
  double coef = 0.0;
  PooledStat stat;  // two-sided vs 0
  bool stat_applicable = false;
  std::size_t rank = 0;  // 1 = largest |coef| within (model, effect, averaging)
};

struct ConfidenceRow {
  std::string model;
  std::string split;  // train | seen-test | unseen
  std::size_t n_subjects = 0;
  double accuracy = 0.0;
  double mean_confidence = 0.0;
  CalibrationComparison cmp;
};

struct TimingRow {
  std::string model;
  std::size_t folds = 0;
  double train_s_total = 0.0;
  double train_s_mean = 0.0;
  double infer_s_total = 0.0;
  double infer_s_mean = 0.0;
};

struct ModelFailure {
  std::string model;
  std::size_t fold = 0;
  std::string error;
};

struct ExperimentReport {
  ExperimentConfig config;
  std::uint64_t hash = 0;
  std::size_t n_rows = 0, n_features = 0, n_clusters = 0, n_seen_clusters = 0;
  std::vector<std::string> probe_features;
  std::vector<std::string> models;  // baseline first, then configured backends
  std::vector<PerformanceRow> performance;
  std::vector<CovariateRow> covariates;
  std::vector<ConfidenceRow> confidence;
  std::vector<TimingRow> timing;
  std::vector<ModelFailure> failures;
};

// ----------------------------------------------------------------------
// pipeline
// ----------------------------------------------------------------------

// Trains the baseline and every configured backend across all folds, pools
// the statistics, and (when cfg.out_dir is set) saves the dataset, resolved
// config and fitted samplers so `report` can re-emit without retraining.
ExperimentReport run_experiment(const ExperimentConfig& cfg);

// Rebuilds the report from a previous run directory (saved config, dataset
// and model files). Training is skipped; recorded train times are reused.
ExperimentReport reemit_from_saved(const std::string& dir);

// Deterministic JSON serialization of everything except wall-clock timing.
std::string report_json(const ExperimentReport& report);

// performance.csv, covariates.csv, confidence.csv, timing.csv, report.json.
void emit_reports(const ExperimentReport& report, const std::string& dir);

}  // namespace medl

#endif  // MEDL_EXPERIMENT_HPP

#ifndef MEDL_SIMDATA_HPP
#define MEDL_SIMDATA_HPP

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "medl/armed.hpp"
#include "medl/matrix.hpp"

namespace medl {

// Clustered tabular dataset. Cluster ids below n_seen_clusters are "seen"
// (available for cross-validation); the rest form a fixed held-out unseen
// split. Feature columns are z-scored with seen-row statistics only.
struct ClusteredDataset {
  Matrix x;
  std::vector<double> y;
  std::vector<int> cluster;
  std::vector<std::string> cluster_names;
  std::size_t n_seen_clusters = 0;
  std::vector<std::string> feature_names;
  std::vector<bool> is_probe;
  std::vector<bool> is_informative;  // generator truth; empty for ingested data
  std::vector<double> true_prob;     // latent P(y=1); empty for ingested data

  std::size_t n_rows() const { return x.rows; }
  std::size_t n_features() const { return x.cols; }
  std::size_t n_clusters() const { return cluster_names.size(); }

  std::vector<std::size_t> seen_rows() const;
  std::vector<std::size_t> unseen_rows() const;

  // One-hot cluster batch over the seen clusters; rejects unseen rows.
  Batch make_batch(std::span<const std::size_t> rows) const;
  Matrix features_of(std::span<const std::size_t> rows) const;
  std::vector<double> labels_of(std::span<const std::size_t> rows) const;

  ArmedSpec armed_spec(std::vector<std::size_t> fe_hidden = {4, 4, 4, 4}) const;
};

// Synthetic generator: latent logit = fe_strength * f(x_informative)
// + cluster intercept + cluster slopes . x, with f one tanh-warped main
// effect per informative feature plus one pairwise product. Probe columns
// are cluster-gain-scaled readouts of the outcome probability.
struct GeneratorConfig {
  std::size_t n_clusters = 34;
  std::size_t n_seen = 20;
  std::size_t samples_per_cluster_min = 18;
  std::size_t samples_per_cluster_max = 24;
  std::size_t d_bio = 20;
  std::size_t k_informative = 6;
  double sigma_intercept = 1.0;
  double sigma_slope = 0.15;
  double fe_strength = 2.0;
  double base_rate = 0.30;
  std::size_t n_probes = 5;
  double probe_noise = 1.5;
  std::uint64_t seed = 0;
};

ClusteredDataset generate(const GeneratorConfig& cfg);

// Appends site-associated probe columns: probe_m = gain_m(cluster embedding)
// * h_m(p) + noise * eps, z-scored on seen rows. p is the latent probability
// when available, else the empirical cluster-conditional positive rate.
void attach_probes(ClusteredDataset& data, std::size_t n_probes, double noise,
                   std::uint64_t seed);

// Cluster-stratified k-fold split of the seen rows; unseen rows are shared by
// every fold. Every fold's training split covers every seen cluster.
struct FoldPlan {
  std::size_t k = 0;
  std::vector<std::vector<std::size_t>> test_rows;
  std::vector<std::vector<std::size_t>> train_rows;
  std::vector<std::size_t> unseen_rows;
};

FoldPlan plan_folds(const ClusteredDataset& data, std::size_t k, std::uint64_t seed);

// CSV: header row, `cluster` column, `target` column in {0,1}, remaining
// columns numeric features. The JSON sidecar records probe columns, the seen
// cluster list and whether features are already standardized.
void save_csv(const ClusteredDataset& data, const std::string& csv_path,
              const std::string& sidecar_path);
ClusteredDataset load_csv(const std::string& csv_path,
                          const std::string& sidecar_path = "");

}  // namespace medl

#endif  // MEDL_SIMDATA_HPP

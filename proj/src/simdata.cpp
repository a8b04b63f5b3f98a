#include "medl/simdata.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>
#include <unordered_map>

#include <json.hpp>

#include "medl/errors.hpp"
#include "medl/network.hpp"
#include "medl/rng.hpp"

namespace medl {

namespace {

using nlohmann::json;

// Standardize one column in place using seen-row statistics.
void zscore_column(Matrix& x, std::size_t col, std::span<const std::size_t> seen) {
  if (seen.empty()) throw DataError("cannot standardize: no seen rows");
  double mean = 0.0;
  for (std::size_t r : seen) mean += x(r, col);
  mean /= static_cast<double>(seen.size());
  double ss = 0.0;
  for (std::size_t r : seen) {
    const double d = x(r, col) - mean;
    ss += d * d;
  }
  const double var = seen.size() > 1 ? ss / static_cast<double>(seen.size() - 1) : 0.0;
  const double sd = var > 1e-24 ? std::sqrt(var) : 1.0;
  for (std::size_t r = 0; r < x.rows; ++r) x(r, col) = (x(r, col) - mean) / sd;
}

void zscore_all(ClusteredDataset& data) {
  const auto seen = data.seen_rows();
  for (std::size_t c = 0; c < data.x.cols; ++c) zscore_column(data.x, c, seen);
}

std::string padded_name(const char* stem, std::size_t idx, std::size_t total) {
  const int width = total >= 100 ? 3 : 2;
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s%0*zu", stem, width, idx + 1);
  return buf;
}

// Monotone threshold readout of the outcome probability: -0.5 below the
// reference cut, +0.5 above it. The two-level design keeps every derived
// magnitude flat: probe^2 is constant in p, and because all probes share one
// cut, the product of any two probe columns is constant in p as well. Only
// the sign channel remains, and the gains flip its direction from site to
// site, so a column carries within-site outcome information without any
// site-agnostic readout a pooled model could exploit.
double probe_shape(double p, double tau) { return p > tau ? 0.5 : -0.5; }

// Per-cluster gains are bounded odd functions of the embedding, so the
// probe/outcome association changes sign from cluster to cluster — the probe
// is informative inside a site but carries no site-agnostic direction — and
// no single site can dominate the column. Oddness also lets paired embeddings
// (e, -e) cancel exactly.
double probe_gain(std::size_t m, double e) {
  switch (m % 5) {
    case 0: return std::sin(e);
    case 1: return std::sin(2.0 * e);
    case 2: return e > 0.0 ? 1.0 : -1.0;
    case 3: return std::tanh(2.0 * e);
    default: return std::tanh(0.8 * e);
  }
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::stringstream ss(line);
  while (std::getline(ss, field, ',')) out.push_back(field);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

double parse_double(const std::string& s, std::size_t row, const std::string& col) {
  const char* begin = s.c_str();
  char* end = nullptr;
  const double v = std::strtod(begin, &end);
  if (end == begin || *end != '\0' || !std::isfinite(v)) {
    throw DataError("non-numeric value '" + s + "' in column '" + col + "' at data row " +
                    std::to_string(row + 1));
  }
  return v;
}

}  // namespace

std::vector<std::size_t> ClusteredDataset::seen_rows() const {
  std::vector<std::size_t> out;
  for (std::size_t r = 0; r < n_rows(); ++r) {
    if (static_cast<std::size_t>(cluster[r]) < n_seen_clusters) out.push_back(r);
  }
  return out;
}

std::vector<std::size_t> ClusteredDataset::unseen_rows() const {
  std::vector<std::size_t> out;
  for (std::size_t r = 0; r < n_rows(); ++r) {
    if (static_cast<std::size_t>(cluster[r]) >= n_seen_clusters) out.push_back(r);
  }
  return out;
}

Batch ClusteredDataset::make_batch(std::span<const std::size_t> rows) const {
  Batch b;
  b.x = features_of(rows);
  b.y = labels_of(rows);
  b.z = Matrix(rows.size(), n_seen_clusters);
  b.cluster.reserve(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const std::size_t r = rows[i];
    const auto c = static_cast<std::size_t>(cluster[r]);
    if (c >= n_seen_clusters) {
      throw DataError("row " + std::to_string(r) + " belongs to held-out cluster '" +
                      cluster_names[c] + "'; one-hot batches cover seen clusters only");
    }
    b.z(i, c) = 1.0;
    b.cluster.push_back(cluster[r]);
  }
  return b;
}

Matrix ClusteredDataset::features_of(std::span<const std::size_t> rows) const {
  Matrix out(rows.size(), x.cols);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto src = x.row(rows[i]);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

std::vector<double> ClusteredDataset::labels_of(std::span<const std::size_t> rows) const {
  std::vector<double> out;
  out.reserve(rows.size());
  for (std::size_t r : rows) out.push_back(y[r]);
  return out;
}

ArmedSpec ClusteredDataset::armed_spec(std::vector<std::size_t> fe_hidden) const {
  ArmedSpec spec;
  spec.n_features = n_features();
  spec.n_clusters = n_seen_clusters;
  spec.fe_hidden = std::move(fe_hidden);
  return spec;
}

ClusteredDataset generate(const GeneratorConfig& cfg) {
  if (cfg.n_clusters == 0 || cfg.n_seen == 0 || cfg.n_seen > cfg.n_clusters) {
    throw ConfigError("generator needs 1 <= n_seen <= n_clusters");
  }
  if (cfg.samples_per_cluster_min == 0 ||
      cfg.samples_per_cluster_min > cfg.samples_per_cluster_max) {
    throw ConfigError("generator needs 1 <= samples_per_cluster_min <= samples_per_cluster_max");
  }
  if (cfg.d_bio == 0 || cfg.k_informative == 0 || cfg.k_informative > cfg.d_bio) {
    throw ConfigError("generator needs 1 <= k_informative <= d_bio");
  }
  if (!(cfg.base_rate > 0.0 && cfg.base_rate < 1.0)) {
    throw ConfigError("generator needs base_rate strictly inside (0, 1)");
  }
  if (cfg.sigma_intercept < 0.0 || cfg.sigma_slope < 0.0 || cfg.probe_noise < 0.0) {
    throw ConfigError("generator noise scales must be non-negative");
  }

  const std::size_t C = cfg.n_clusters;
  const std::size_t d = cfg.d_bio;
  const std::size_t k = cfg.k_informative;

  Rng size_rng(derive_stream(cfg.seed, "sizes"));
  std::vector<std::size_t> sizes(C);
  const std::uint64_t span = cfg.samples_per_cluster_max - cfg.samples_per_cluster_min + 1;
  for (auto& s : sizes) s = cfg.samples_per_cluster_min + size_rng.below(span);

  // Relabel so the largest clusters come first and become the seen split.
  std::vector<std::size_t> order(C);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return sizes[a] > sizes[b];
  });
  std::vector<std::size_t> sorted_sizes(C);
  for (std::size_t j = 0; j < C; ++j) sorted_sizes[j] = sizes[order[j]];

  ClusteredDataset data;
  const std::size_t n = std::accumulate(sorted_sizes.begin(), sorted_sizes.end(), std::size_t{0});
  data.x = Matrix(n, d);
  data.y.resize(n);
  data.cluster.resize(n);
  data.true_prob.resize(n);
  data.n_seen_clusters = cfg.n_seen;
  for (std::size_t j = 0; j < C; ++j) {
    data.cluster_names.push_back(padded_name("site", j, C));
  }
  {
    std::size_t r = 0;
    for (std::size_t j = 0; j < C; ++j) {
      for (std::size_t i = 0; i < sorted_sizes[j]; ++i) data.cluster[r++] = static_cast<int>(j);
    }
  }

  Rng feat_rng(derive_stream(cfg.seed, "features"));
  for (double& v : data.x.data) v = feat_rng.normal();

  Rng eff_rng(derive_stream(cfg.seed, "cluster-effects"));
  std::vector<double> mu0(C);
  Matrix mu1(C, d);
  for (std::size_t j = 0; j < C; ++j) {
    mu0[j] = cfg.sigma_intercept * eff_rng.normal();
    for (std::size_t i = 0; i < d; ++i) mu1(j, i) = cfg.sigma_slope * eff_rng.normal();
  }

  // Fixed-effect surface: a tanh-warped main effect over the informative
  // block plus one bounded pairwise interaction between the first two
  // informative features. Warping the aggregate (rather than each feature)
  // caps the surface at a fixed range, so no draw of the design yields a
  // near-separable task: class overlap stays in the same band across seeds.
  std::vector<double> beta(k);
  double beta_norm = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    const double mag = k > 1 ? 1.2 - 0.6 * static_cast<double>(i) / static_cast<double>(k - 1)
                             : 1.2;
    beta[i] = (i % 2 == 0 ? mag : -mag);
    beta_norm += beta[i] * beta[i];
  }
  beta_norm = std::sqrt(std::max(beta_norm, 1e-12));

  std::vector<double> eta(n);
  for (std::size_t r = 0; r < n; ++r) {
    const auto j = static_cast<std::size_t>(data.cluster[r]);
    double main = 0.0;
    for (std::size_t i = 0; i < k; ++i) main += beta[i] * data.x(r, i);
    double f = 1.6 * std::tanh(main / beta_norm);
    if (k >= 2) f += 0.8 * std::tanh(data.x(r, 0) * data.x(r, 1));
    double re = mu0[j];
    for (std::size_t i = 0; i < d; ++i) re += mu1(j, i) * data.x(r, i);
    eta[r] = cfg.fe_strength * f + re;
  }

  // Calibrate a global intercept so the mean latent probability matches the
  // requested base rate (monotone in the intercept, so bisection suffices).
  double lo = -30.0, hi = 30.0;
  for (int iter = 0; iter < 100; ++iter) {
    const double mid = 0.5 * (lo + hi);
    double mean_p = 0.0;
    for (double e : eta) mean_p += stable_sigmoid(e + mid);
    mean_p /= static_cast<double>(n);
    (mean_p < cfg.base_rate ? lo : hi) = mid;
  }
  const double intercept = 0.5 * (lo + hi);

  Rng label_rng(derive_stream(cfg.seed, "labels"));
  for (std::size_t r = 0; r < n; ++r) {
    const double p = stable_sigmoid(eta[r] + intercept);
    data.true_prob[r] = p;
    data.y[r] = label_rng.uniform() < p ? 1.0 : 0.0;
  }

  data.feature_names.reserve(d);
  data.is_probe.assign(d, false);
  data.is_informative.assign(d, false);
  for (std::size_t i = 0; i < d; ++i) {
    data.feature_names.push_back(padded_name("bio", i, d));
    data.is_informative[i] = i < k;
  }

  zscore_all(data);
  if (cfg.n_probes > 0) {
    attach_probes(data, cfg.n_probes, cfg.probe_noise, derive_seed(cfg.seed, "probes"));
  }
  return data;
}

void attach_probes(ClusteredDataset& data, std::size_t n_probes, double noise,
                   std::uint64_t seed) {
  if (n_probes == 0) return;
  const std::size_t n = data.n_rows();
  const std::size_t C = data.n_clusters();
  if (n == 0 || C == 0) throw DataError("cannot attach probes to an empty dataset");

  // Outcome signal each probe reads: the latent probability when available,
  // otherwise the empirical cluster-conditional positive rate.
  std::vector<double> p(n);
  if (!data.true_prob.empty()) {
    p = data.true_prob;
  } else {
    std::vector<double> pos(C, 0.0), cnt(C, 0.0);
    for (std::size_t r = 0; r < n; ++r) {
      const auto j = static_cast<std::size_t>(data.cluster[r]);
      pos[j] += data.y[r];
      cnt[j] += 1.0;
    }
    for (std::size_t r = 0; r < n; ++r) {
      const auto j = static_cast<std::size_t>(data.cluster[r]);
      p[r] = (pos[j] + 1.0) / (cnt[j] + 2.0);
    }
  }

  const std::size_t d_old = data.x.cols;
  Matrix wide(n, d_old + n_probes);
  for (std::size_t r = 0; r < n; ++r) {
    const auto src = data.x.row(r);
    std::copy(src.begin(), src.end(), wide.row(r).begin());
  }

  Rng rng(seed);
  const auto seen = data.seen_rows();

  // Shared reference cut for every probe: the median outcome probability over
  // the seen rows. One common cut keeps probe products free of outcome
  // information, and the median keeps both probe levels populated inside
  // every typical site.
  std::vector<double> seen_p;
  seen_p.reserve(seen.size());
  for (const std::size_t r : seen) seen_p.push_back(p[r]);
  std::sort(seen_p.begin(), seen_p.end());
  const double tau =
      seen_p.empty()
          ? 0.5
          : (seen_p.size() % 2 == 1
                 ? seen_p[seen_p.size() / 2]
                 : 0.5 * (seen_p[seen_p.size() / 2 - 1] + seen_p[seen_p.size() / 2]));

  // Seen-cluster embeddings come in antithetic pairs (e, -e); with odd gain
  // maps the per-cluster gains cancel pairwise across the training sites, so
  // no seed hands the probe a net direction by luck of the draw.
  const std::size_t n_seen = std::min(data.n_seen_clusters, C);
  for (std::size_t m = 0; m < n_probes; ++m) {
    std::vector<double> embed(C);
    for (std::size_t j = 0; j < C; ++j) {
      if (j < n_seen && (j % 2 == 1)) {
        embed[j] = -embed[j - 1];
      } else {
        embed[j] = rng.normal();
      }
    }
    const std::size_t col = d_old + m;
    for (std::size_t r = 0; r < n; ++r) {
      const auto j = static_cast<std::size_t>(data.cluster[r]);
      wide(r, col) = probe_gain(m, embed[j]) * probe_shape(p[r], tau) + noise * rng.normal();
    }
    data.feature_names.push_back(padded_name("probe", m, n_probes));
    data.is_probe.push_back(true);
    if (!data.is_informative.empty()) data.is_informative.push_back(false);
  }
  data.x = std::move(wide);
  if (data.is_probe.size() != data.x.cols) {
    data.is_probe.resize(data.x.cols, false);
  }
  for (std::size_t m = 0; m < n_probes; ++m) zscore_column(data.x, d_old + m, seen);
}

FoldPlan plan_folds(const ClusteredDataset& data, std::size_t k, std::uint64_t seed) {
  if (k < 2) throw ConfigError("cross-validation needs at least 2 folds");
  FoldPlan plan;
  plan.k = k;
  plan.test_rows.assign(k, {});
  plan.train_rows.assign(k, {});
  plan.unseen_rows = data.unseen_rows();

  std::vector<std::vector<std::size_t>> by_cluster(data.n_seen_clusters);
  for (std::size_t r : data.seen_rows()) {
    by_cluster[static_cast<std::size_t>(data.cluster[r])].push_back(r);
  }
  for (std::size_t j = 0; j < by_cluster.size(); ++j) {
    auto& rows = by_cluster[j];
    if (rows.size() < k) {
      throw DataError("cluster '" + data.cluster_names[j] + "' has " +
                      std::to_string(rows.size()) + " samples; stratified " +
                      std::to_string(k) + "-fold split needs at least " + std::to_string(k));
    }
    Rng rng(derive_stream(seed, "folds", j));
    rng.shuffle(rows);
    for (std::size_t i = 0; i < rows.size(); ++i) plan.test_rows[i % k].push_back(rows[i]);
  }
  for (std::size_t f = 0; f < k; ++f) {
    auto& test = plan.test_rows[f];
    std::sort(test.begin(), test.end());
    auto& train = plan.train_rows[f];
    for (std::size_t g = 0; g < k; ++g) {
      if (g == f) continue;
      train.insert(train.end(), plan.test_rows[g].begin(), plan.test_rows[g].end());
    }
    std::sort(train.begin(), train.end());
  }
  return plan;
}

void save_csv(const ClusteredDataset& data, const std::string& csv_path,
              const std::string& sidecar_path) {
  if (data.feature_names.size() != data.x.cols) {
    throw DataError("feature name list does not match the feature matrix width");
  }
  std::ofstream out(csv_path);
  if (!out) throw DataError("cannot open '" + csv_path + "' for writing");
  out << "cluster,target";
  for (const auto& name : data.feature_names) {
    if (name.find(',') != std::string::npos || name == "cluster" || name == "target") {
      throw DataError("feature name '" + name + "' is not a valid CSV column name");
    }
    out << ',' << name;
  }
  out << '\n';
  char buf[40];
  for (std::size_t r = 0; r < data.n_rows(); ++r) {
    out << data.cluster_names[static_cast<std::size_t>(data.cluster[r])] << ','
        << static_cast<int>(data.y[r]);
    for (std::size_t c = 0; c < data.x.cols; ++c) {
      std::snprintf(buf, sizeof buf, "%.17g", data.x(r, c));
      out << ',' << buf;
    }
    out << '\n';
  }
  if (!out) throw DataError("failed while writing '" + csv_path + "'");

  json side;
  side["format_version"] = 1;
  side["standardized"] = true;
  side["probe_columns"] = json::array();
  for (std::size_t c = 0; c < data.x.cols; ++c) {
    if (c < data.is_probe.size() && data.is_probe[c]) {
      side["probe_columns"].push_back(data.feature_names[c]);
    }
  }
  side["seen_clusters"] = json::array();
  for (std::size_t j = 0; j < data.n_seen_clusters; ++j) {
    side["seen_clusters"].push_back(data.cluster_names[j]);
  }
  if (!data.is_informative.empty()) {
    side["informative_columns"] = json::array();
    for (std::size_t c = 0; c < data.x.cols; ++c) {
      if (c < data.is_informative.size() && data.is_informative[c]) {
        side["informative_columns"].push_back(data.feature_names[c]);
      }
    }
  }
  std::ofstream sout(sidecar_path);
  if (!sout) throw DataError("cannot open '" + sidecar_path + "' for writing");
  sout << side.dump(2) << '\n';
}

ClusteredDataset load_csv(const std::string& csv_path, const std::string& sidecar_path) {
  std::ifstream in(csv_path);
  if (!in) throw DataError("cannot open '" + csv_path + "'");
  std::string line;
  if (!std::getline(in, line)) throw DataError("'" + csv_path + "' is empty");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const auto header = split_csv_line(line);

  std::ptrdiff_t cluster_col = -1, target_col = -1;
  std::vector<std::size_t> feature_cols;
  std::vector<std::string> feature_names;
  for (std::size_t c = 0; c < header.size(); ++c) {
    if (header[c] == "cluster") {
      if (cluster_col >= 0) throw DataError("duplicate 'cluster' column");
      cluster_col = static_cast<std::ptrdiff_t>(c);
    } else if (header[c] == "target") {
      if (target_col >= 0) throw DataError("duplicate 'target' column");
      target_col = static_cast<std::ptrdiff_t>(c);
    } else {
      feature_cols.push_back(c);
      feature_names.push_back(header[c]);
    }
  }
  if (cluster_col < 0) throw DataError("'" + csv_path + "' is missing a 'cluster' column");
  if (target_col < 0) throw DataError("'" + csv_path + "' is missing a 'target' column");
  if (feature_cols.empty()) throw DataError("'" + csv_path + "' has no feature columns");
  {
    std::set<std::string> names(feature_names.begin(), feature_names.end());
    if (names.size() != feature_names.size()) {
      throw DataError("'" + csv_path + "' has duplicate feature columns");
    }
  }

  std::vector<std::string> row_cluster;
  std::vector<double> targets;
  std::vector<double> values;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto fields = split_csv_line(line);
    if (fields.size() != header.size()) {
      throw DataError("data row " + std::to_string(row + 1) + " has " +
                      std::to_string(fields.size()) + " fields; header has " +
                      std::to_string(header.size()));
    }
    const std::string& t = fields[static_cast<std::size_t>(target_col)];
    if (t != "0" && t != "1") {
      throw DataError("target must be 0 or 1; found '" + t + "' at data row " +
                      std::to_string(row + 1));
    }
    row_cluster.push_back(fields[static_cast<std::size_t>(cluster_col)]);
    targets.push_back(t == "1" ? 1.0 : 0.0);
    for (std::size_t i = 0; i < feature_cols.size(); ++i) {
      values.push_back(parse_double(fields[feature_cols[i]], row, feature_names[i]));
    }
    ++row;
  }
  if (row == 0) throw DataError("'" + csv_path + "' has no data rows");

  json side;
  bool standardized = false;
  if (!sidecar_path.empty()) {
    std::ifstream sin(sidecar_path);
    if (!sin) throw DataError("cannot open sidecar '" + sidecar_path + "'");
    try {
      sin >> side;
    } catch (const std::exception& e) {
      throw DataError("sidecar '" + sidecar_path + "' is not valid JSON: " + e.what());
    }
    standardized = side.value("standardized", false);
  }

  // Cluster ids: sidecar-listed seen clusters first (in sidecar order), then
  // remaining clusters by descending size. Without a sidecar every cluster is
  // seen, ordered by descending size.
  std::unordered_map<std::string, std::size_t> size_of;
  for (const auto& name : row_cluster) ++size_of[name];

  std::vector<std::string> names;
  std::unordered_map<std::string, int> id_of;
  std::size_t n_seen = 0;
  if (side.contains("seen_clusters")) {
    for (const auto& item : side["seen_clusters"]) {
      const auto name = item.get<std::string>();
      if (!size_of.count(name)) {
        throw DataError("sidecar seen cluster '" + name + "' does not appear in '" +
                        csv_path + "'");
      }
      if (id_of.count(name)) throw DataError("sidecar lists cluster '" + name + "' twice");
      id_of[name] = static_cast<int>(names.size());
      names.push_back(name);
    }
    n_seen = names.size();
  }
  std::vector<std::string> rest;
  for (const auto& [name, sz] : size_of) {
    if (!id_of.count(name)) rest.push_back(name);
  }
  std::sort(rest.begin(), rest.end(), [&](const std::string& a, const std::string& b) {
    if (size_of[a] != size_of[b]) return size_of[a] > size_of[b];
    return a < b;
  });
  for (const auto& name : rest) {
    id_of[name] = static_cast<int>(names.size());
    names.push_back(name);
  }
  if (!side.contains("seen_clusters")) n_seen = names.size();
  if (n_seen == 0) throw DataError("sidecar lists no seen clusters");

  ClusteredDataset data;
  data.x = Matrix(row, feature_cols.size());
  std::copy(values.begin(), values.end(), data.x.data.begin());
  data.y = std::move(targets);
  data.cluster.reserve(row);
  for (const auto& name : row_cluster) data.cluster.push_back(id_of[name]);
  data.cluster_names = std::move(names);
  data.n_seen_clusters = n_seen;
  data.feature_names = std::move(feature_names);
  data.is_probe.assign(data.x.cols, false);
  if (side.contains("probe_columns")) {
    for (const auto& item : side["probe_columns"]) {
      const auto name = item.get<std::string>();
      const auto it = std::find(data.feature_names.begin(), data.feature_names.end(), name);
      if (it == data.feature_names.end()) {
        throw DataError("sidecar probe column '" + name + "' does not appear in '" +
                        csv_path + "'");
      }
      data.is_probe[static_cast<std::size_t>(it - data.feature_names.begin())] = true;
    }
  }
  if (side.contains("informative_columns")) {
    data.is_informative.assign(data.x.cols, false);
    for (const auto& item : side["informative_columns"]) {
      const auto name = item.get<std::string>();
      const auto it = std::find(data.feature_names.begin(), data.feature_names.end(), name);
      if (it != data.feature_names.end()) {
        data.is_informative[static_cast<std::size_t>(it - data.feature_names.begin())] = true;
      }
    }
  }
  if (!standardized) zscore_all(data);
  return data;
}

}  // namespace medl

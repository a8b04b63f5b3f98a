#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>
#include <vector>

#include "medl/errors.hpp"
#include "medl/simdata.hpp"
#include "medl/stats.hpp"

using namespace medl;

namespace {

GeneratorConfig small_config(std::uint64_t seed) {
  GeneratorConfig g;
  g.n_clusters = 8;
  g.n_seen = 5;
  g.samples_per_cluster_min = 12;
  g.samples_per_cluster_max = 15;
  g.d_bio = 6;
  g.k_informative = 3;
  g.n_probes = 3;
  g.seed = seed;
  return g;
}

std::string temp_path(const char* name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

// Plug-in mutual information (nats) between a binary label and a feature
// discretized into equal-count bins.
double mutual_information(const std::vector<double>& feature,
                          const std::vector<double>& label, std::size_t bins) {
  const std::size_t n = feature.size();
  std::vector<double> sorted = feature;
  std::sort(sorted.begin(), sorted.end());
  auto bin_of = [&](double v) {
    const auto pos = static_cast<std::size_t>(
        std::lower_bound(sorted.begin(), sorted.end(), v) - sorted.begin());
    return std::min(bins - 1, pos * bins / n);
  };
  std::vector<double> joint(bins * 2, 0.0), pf(bins, 0.0), py(2, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t b = bin_of(feature[i]);
    const std::size_t y = label[i] > 0.5 ? 1 : 0;
    joint[b * 2 + y] += 1.0;
    pf[b] += 1.0;
    py[y] += 1.0;
  }
  double mi = 0.0;
  for (std::size_t b = 0; b < bins; ++b) {
    for (std::size_t y = 0; y < 2; ++y) {
      const double pj = joint[b * 2 + y] / static_cast<double>(n);
      if (pj <= 0.0) continue;
      mi += pj * std::log(pj / ((pf[b] / n) * (py[y] / n)));
    }
  }
  return mi;
}

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  const std::size_t n = a.size();
  double ma = 0.0, mb = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= n;
  mb /= n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa <= 0.0 || sbb <= 0.0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

// Spearman rank correlation with mid-ranks for ties.
std::vector<double> mid_ranks(const std::vector<double>& v) {
  const std::size_t n = v.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t i, std::size_t j) { return v[i] < v[j]; });
  std::vector<double> rank(n);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && v[order[j + 1]] == v[order[i]]) ++j;
    const double mid = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) rank[order[k]] = mid;
    i = j + 1;
  }
  return rank;
}

double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  return pearson(mid_ranks(a), mid_ranks(b));
}

}  // namespace

TEST_CASE("generation is deterministic in the seed") {
  const GeneratorConfig g = small_config(77);
  const ClusteredDataset a = generate(g);
  const ClusteredDataset b = generate(g);
  CHECK(a.x == b.x);
  CHECK(a.y == b.y);
  CHECK(a.cluster == b.cluster);
  CHECK(a.true_prob == b.true_prob);

  GeneratorConfig g2 = g;
  g2.seed = 78;
  const ClusteredDataset c = generate(g2);
  CHECK(a.x.data != c.x.data);
}

TEST_CASE("default configuration shape contract") {
  GeneratorConfig g;
  g.seed = 1;
  const ClusteredDataset d = generate(g);
  CHECK(d.n_clusters() == 34);
  CHECK(d.n_seen_clusters == 20);
  CHECK(d.n_features() == 25);  // 20 biological + 5 probes
  CHECK(d.n_rows() >= 34 * 18);
  CHECK(d.n_rows() <= 34 * 24);
  CHECK(d.feature_names.size() == 25);
  CHECK(d.is_probe.size() == 25);
  CHECK(d.is_informative.size() == 25);
  std::size_t probes = 0, informative = 0;
  for (std::size_t c = 0; c < 25; ++c) {
    probes += d.is_probe[c] ? 1 : 0;
    informative += d.is_informative[c] ? 1 : 0;
    if (d.is_probe[c]) {
      CHECK(c >= 20);  // probes appended after the biology block
      CHECK_FALSE(d.is_informative[c]);
    }
  }
  CHECK(probes == 5);
  CHECK(informative == 6);
  CHECK(d.true_prob.size() == d.n_rows());

  // seen clusters are the largest ones
  std::vector<std::size_t> sizes(d.n_clusters(), 0);
  for (const int c : d.cluster) sizes[static_cast<std::size_t>(c)] += 1;
  std::size_t min_seen = d.n_rows(), max_unseen = 0;
  for (std::size_t c = 0; c < d.n_clusters(); ++c) {
    if (c < d.n_seen_clusters) min_seen = std::min(min_seen, sizes[c]);
    else max_unseen = std::max(max_unseen, sizes[c]);
    CHECK(sizes[c] >= 18);
    CHECK(sizes[c] <= 24);
  }
  CHECK(min_seen >= max_unseen);
}

TEST_CASE("features are standardized on the seen rows") {
  GeneratorConfig g = small_config(5);
  const ClusteredDataset d = generate(g);
  const std::vector<std::size_t> seen = d.seen_rows();
  for (std::size_t c = 0; c < d.n_features(); ++c) {
    double mean = 0.0;
    for (const std::size_t r : seen) mean += d.x(r, c);
    mean /= static_cast<double>(seen.size());
    double var = 0.0;
    for (const std::size_t r : seen) {
      var += (d.x(r, c) - mean) * (d.x(r, c) - mean);
    }
    var /= static_cast<double>(seen.size() - 1);
    CHECK(std::fabs(mean) < 1e-9);
    CHECK(std::fabs(std::sqrt(var) - 1.0) < 1e-9);
  }
}

TEST_CASE("with all effects off the positive rate matches the target") {
  GeneratorConfig g;
  g.n_clusters = 34;
  g.n_seen = 20;
  g.samples_per_cluster_min = 147;
  g.samples_per_cluster_max = 147;
  g.sigma_intercept = 0.0;
  g.sigma_slope = 0.0;
  g.fe_strength = 0.0;
  g.base_rate = 0.30;
  g.seed = 31;
  const ClusteredDataset d = generate(g);
  // the latent probability collapses to the base rate everywhere
  for (const double p : d.true_prob) {
    CHECK(p == doctest::Approx(0.30).epsilon(1e-9));
  }
  // and the realized labels stay inside a 99% binomial interval
  double rate = 0.0;
  for (const double v : d.y) rate += v;
  rate /= static_cast<double>(d.n_rows());
  const double sd = std::sqrt(0.3 * 0.7 / static_cast<double>(d.n_rows()));
  CHECK(std::fabs(rate - 0.30) < 2.58 * sd);
}

TEST_CASE("with zero fixed-effect strength the biology is uninformative") {
  GeneratorConfig g;
  g.n_clusters = 10;
  g.n_seen = 6;
  g.samples_per_cluster_min = 400;
  g.samples_per_cluster_max = 400;
  g.fe_strength = 0.0;
  g.sigma_slope = 0.0;  // isolate: labels depend only on cluster intercepts
  g.n_probes = 0;
  g.seed = 17;
  const ClusteredDataset d = generate(g);
  for (std::size_t c = 0; c < std::min<std::size_t>(4, g.k_informative); ++c) {
    std::vector<double> score(d.n_rows());
    for (std::size_t r = 0; r < d.n_rows(); ++r) score[r] = d.x(r, c);
    CHECK(std::fabs(auroc(score, d.y) - 0.5) < 0.03);  // ~3 sigma at n=4000
  }
}

TEST_CASE("very noisy probes carry almost no label information") {
  GeneratorConfig g;
  g.n_clusters = 34;
  g.n_seen = 20;
  g.samples_per_cluster_min = 147;
  g.samples_per_cluster_max = 147;
  g.probe_noise = 1e6;
  g.n_probes = 5;
  g.seed = 13;
  const ClusteredDataset d = generate(g);
  for (std::size_t c = 0; c < d.n_features(); ++c) {
    if (!d.is_probe[c]) continue;
    std::vector<double> probe(d.n_rows());
    for (std::size_t r = 0; r < d.n_rows(); ++r) probe[r] = d.x(r, c);
    CHECK(mutual_information(probe, d.y, 8) < 0.01);
  }
}

TEST_CASE("noise-free probes track the outcome probability within clusters") {
  GeneratorConfig g;
  g.probe_noise = 0.0;
  g.seed = 19;
  const ClusteredDataset d = generate(g);
  std::size_t strong = 0, n_probes = 0;
  for (std::size_t c = 0; c < d.n_features(); ++c) {
    if (!d.is_probe[c]) continue;
    ++n_probes;
    double mean_abs_rho = 0.0;
    std::size_t used = 0;
    for (std::size_t cl = 0; cl < d.n_clusters(); ++cl) {
      std::vector<double> probe, prob;
      for (std::size_t r = 0; r < d.n_rows(); ++r) {
        if (static_cast<std::size_t>(d.cluster[r]) != cl) continue;
        probe.push_back(d.x(r, c));
        prob.push_back(d.true_prob[r]);
      }
      if (probe.size() < 3) continue;
      mean_abs_rho += std::fabs(spearman(probe, prob));
      ++used;
    }
    mean_abs_rho /= static_cast<double>(used);
    if (mean_abs_rho > 0.5) ++strong;
  }
  CHECK(n_probes == 5);
  CHECK(strong >= 4);
}

TEST_CASE("attaching probes to ingested data uses empirical cluster rates") {
  GeneratorConfig g = small_config(23);
  g.n_probes = 0;
  ClusteredDataset d = generate(g);
  d.true_prob.clear();  // simulate ingested data without latent truth
  const std::size_t before = d.n_features();
  attach_probes(d, 2, 0.1, 99);
  CHECK(d.n_features() == before + 2);
  CHECK(d.is_probe[before]);
  CHECK(d.is_probe[before + 1]);
  CHECK(d.feature_names[before] == "probe01");
  // appended columns are standardized on the seen rows
  const std::vector<std::size_t> seen = d.seen_rows();
  for (std::size_t c = before; c < d.n_features(); ++c) {
    double mean = 0.0;
    for (const std::size_t r : seen) mean += d.x(r, c);
    mean /= static_cast<double>(seen.size());
    CHECK(std::fabs(mean) < 1e-9);
  }
}

TEST_CASE("fold plan arithmetic on a uniform 20x20 design") {
  GeneratorConfig g;
  g.n_clusters = 24;
  g.n_seen = 20;
  g.samples_per_cluster_min = 20;
  g.samples_per_cluster_max = 20;
  g.seed = 3;
  const ClusteredDataset d = generate(g);
  const FoldPlan plan = plan_folds(d, 10, 555);
  CHECK(plan.k == 10);
  CHECK(plan.test_rows.size() == 10);
  CHECK(plan.train_rows.size() == 10);
  CHECK(plan.unseen_rows.size() == 4 * 20);

  std::set<std::size_t> all_test;
  for (std::size_t f = 0; f < 10; ++f) {
    CHECK(plan.test_rows[f].size() == 40);  // 20 clusters x 2 rows
    CHECK(plan.train_rows[f].size() == 360);
    // each cluster contributes exactly two test rows per fold
    std::vector<std::size_t> per_cluster(24, 0);
    for (const std::size_t r : plan.test_rows[f]) {
      per_cluster[static_cast<std::size_t>(d.cluster[r])] += 1;
      CHECK(all_test.insert(r).second);  // folds are disjoint
    }
    for (std::size_t c = 0; c < 20; ++c) CHECK(per_cluster[c] == 2);
    for (std::size_t c = 20; c < 24; ++c) CHECK(per_cluster[c] == 0);

    // train and test partition the seen rows
    std::set<std::size_t> fold_rows(plan.test_rows[f].begin(),
                                    plan.test_rows[f].end());
    for (const std::size_t r : plan.train_rows[f]) {
      CHECK(fold_rows.insert(r).second);
    }
    CHECK(fold_rows.size() == 400);
    CHECK(std::is_sorted(plan.test_rows[f].begin(), plan.test_rows[f].end()));
    CHECK(std::is_sorted(plan.train_rows[f].begin(), plan.train_rows[f].end()));
  }
  CHECK(all_test.size() == 400);  // every seen row tested exactly once

  // unseen rows never appear in any fold
  for (const std::size_t r : plan.unseen_rows) {
    CHECK(static_cast<std::size_t>(d.cluster[r]) >= 20);
    CHECK(all_test.count(r) == 0);
  }

  // deterministic in the seed
  const FoldPlan again = plan_folds(d, 10, 555);
  CHECK(again.test_rows == plan.test_rows);
  const FoldPlan other = plan_folds(d, 10, 556);
  CHECK(other.test_rows != plan.test_rows);
}

TEST_CASE("a cluster smaller than the fold count is rejected by name") {
  GeneratorConfig g = small_config(47);
  g.samples_per_cluster_min = 3;
  g.samples_per_cluster_max = 5;
  const ClusteredDataset d = generate(g);
  try {
    plan_folds(d, 8, 1);
    FAIL("expected DataError");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("site") != std::string::npos);
  }
}

TEST_CASE("csv round trip preserves every value bit for bit") {
  const GeneratorConfig g = small_config(61);
  const ClusteredDataset d = generate(g);
  const std::string csv = temp_path("medl_roundtrip.csv");
  const std::string sidecar = temp_path("medl_roundtrip.sidecar.json");
  save_csv(d, csv, sidecar);
  const ClusteredDataset r = load_csv(csv, sidecar);
  CHECK(r.x == d.x);
  CHECK(r.y == d.y);
  CHECK(r.cluster == d.cluster);
  CHECK(r.cluster_names == d.cluster_names);
  CHECK(r.n_seen_clusters == d.n_seen_clusters);
  CHECK(r.feature_names == d.feature_names);
  CHECK(r.is_probe == d.is_probe);
  CHECK(r.is_informative == d.is_informative);
  std::remove(csv.c_str());
  std::remove(sidecar.c_str());
}

TEST_CASE("csv ingestion without a sidecar treats every cluster as seen") {
  const GeneratorConfig g = small_config(67);
  const ClusteredDataset d = generate(g);
  const std::string csv = temp_path("medl_nosidecar.csv");
  const std::string sidecar = temp_path("medl_nosidecar.sidecar.json");
  save_csv(d, csv, sidecar);
  const ClusteredDataset r = load_csv(csv);
  CHECK(r.n_seen_clusters == r.n_clusters());
  CHECK(r.unseen_rows().empty());
  // without the sidecar's standardized flag the loader re-standardizes;
  // generated columns are already z-scored on different rows, so values
  // change but shapes survive
  CHECK(r.n_rows() == d.n_rows());
  CHECK(r.n_features() == d.n_features());
  std::remove(csv.c_str());
  std::remove(sidecar.c_str());
}

TEST_CASE("csv ingestion rejects malformed content with located errors") {
  const std::string path = temp_path("medl_bad.csv");
  {
    std::ofstream out(path);
    out << "cluster,target,f1\n";
    out << "a,0,1.5\n";
    out << "b,2,0.5\n";  // target out of range on data row 2
  }
  try {
    load_csv(path);
    FAIL("expected DataError");
  } catch (const DataError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("row 2") != std::string::npos);
    CHECK(msg.find("target") != std::string::npos);
  }
  {
    std::ofstream out(path);
    out << "cluster,target,f1\n";
    out << "a,0,1.5\n";
    out << "b,1,oops\n";
  }
  try {
    load_csv(path);
    FAIL("expected DataError");
  } catch (const DataError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("row 2") != std::string::npos);
    CHECK(msg.find("f1") != std::string::npos);
  }
  {
    std::ofstream out(path);
    out << "cluster,target,f1,f1\n";  // duplicate feature column
    out << "a,0,1.5,2.0\n";
  }
  CHECK_THROWS_AS(load_csv(path), DataError);
  std::remove(path.c_str());
}

TEST_CASE("batches are one-hot over seen clusters and reject unseen rows") {
  const GeneratorConfig g = small_config(83);
  const ClusteredDataset d = generate(g);
  const std::vector<std::size_t> seen = d.seen_rows();
  const Batch b = d.make_batch(seen);
  CHECK(b.size() == seen.size());
  CHECK(b.z.cols == d.n_seen_clusters);
  for (std::size_t i = 0; i < b.size(); ++i) {
    double sum = 0.0;
    for (std::size_t c = 0; c < b.z.cols; ++c) sum += b.z(i, c);
    CHECK(sum == 1.0);
    CHECK(b.z(i, static_cast<std::size_t>(b.cluster[i])) == 1.0);
    CHECK(b.y[i] == d.y[seen[i]]);
  }
  const std::vector<std::size_t> unseen = d.unseen_rows();
  REQUIRE(!unseen.empty());
  CHECK_THROWS_AS(d.make_batch(std::vector<std::size_t>{unseen[0]}), DataError);
}

TEST_CASE("generator configuration validation") {
  GeneratorConfig g = small_config(1);
  g.n_seen = 9;  // more than n_clusters
  CHECK_THROWS_AS(generate(g), ConfigError);
  g = small_config(1);
  g.samples_per_cluster_min = 20;
  g.samples_per_cluster_max = 10;
  CHECK_THROWS_AS(generate(g), ConfigError);
  g = small_config(1);
  g.k_informative = 7;  // more than d_bio
  CHECK_THROWS_AS(generate(g), ConfigError);
  g = small_config(1);
  g.base_rate = 1.0;
  CHECK_THROWS_AS(generate(g), ConfigError);
  g = small_config(1);
  g.sigma_intercept = -0.5;
  CHECK_THROWS_AS(generate(g), ConfigError);
}

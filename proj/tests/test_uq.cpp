#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "medl/armed.hpp"
#include "medl/errors.hpp"
#include "medl/network.hpp"
#include "medl/rng.hpp"
#include "medl/uq.hpp"

using namespace medl;

namespace {

Batch synthetic_batch(const ArmedSpec& spec, std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  Batch b;
  b.x = Matrix(n, spec.n_features);
  b.z = Matrix(n, spec.n_clusters);
  for (std::size_t i = 0; i < n; ++i) {
    const int c = static_cast<int>(i % spec.n_clusters);
    b.cluster.push_back(c);
    b.z(i, static_cast<std::size_t>(c)) = 1.0;
    for (std::size_t j = 0; j < spec.n_features; ++j) b.x(i, j) = rng.normal();
    const double eta = b.x(i, 0) - 0.5 * b.x(i, spec.n_features - 1);
    b.y.push_back(rng.uniform() < 1.0 / (1.0 + std::exp(-eta)) ? 1.0 : 0.0);
  }
  return b;
}

// Batch with explicit per-cluster sizes, rows grouped by cluster.
Batch sized_batch(const ArmedSpec& spec, const std::vector<std::size_t>& sizes,
                  std::uint64_t seed) {
  Rng rng(seed);
  std::size_t n = 0;
  for (const std::size_t s : sizes) n += s;
  Batch b;
  b.x = Matrix(n, spec.n_features);
  b.z = Matrix(n, spec.n_clusters);
  std::size_t r = 0;
  for (std::size_t c = 0; c < sizes.size(); ++c) {
    for (std::size_t i = 0; i < sizes[c]; ++i, ++r) {
      b.cluster.push_back(static_cast<int>(c));
      b.z(r, c) = 1.0;
      for (std::size_t j = 0; j < spec.n_features; ++j) b.x(r, j) = rng.normal();
      b.y.push_back(rng.uniform() < 0.5 ? 1.0 : 0.0);
    }
  }
  return b;
}

std::string temp_path(const char* name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

TrainConfig quick_train(std::size_t epochs = 5) {
  TrainConfig tc;
  tc.epochs = epochs;
  tc.lr = 0.01;
  tc.weights.adversary = 0.0;
  return tc;
}

}  // namespace

TEST_CASE("backend token grammar accepts the whole benchmark grid") {
  const std::vector<std::string> grid = default_backend_grid();
  CHECK(grid.size() == 20);  // 3 bnn + 5 dropout + 8 swag + 4 ensembles
  for (const std::string& token : grid) {
    const BackendSpec bk = parse_backend(token);
    CHECK(bk.name == token);
  }
  CHECK(parse_backend("bnn-first").bnn_layers == "first");
  CHECK(parse_backend("bnn-last").bnn_layers == "last");
  CHECK(parse_backend("bnn-all").kind == SamplerKind::bnn_vi);
  CHECK(parse_backend("dropout-0.3").kind == SamplerKind::mc_dropout);
  CHECK(parse_backend("dropout-0.3").dropout_rate == 0.3);
  CHECK(parse_backend("swag-diag-0.01").kind == SamplerKind::swag_diag);
  CHECK(parse_backend("swag-diag-0.01").swag_lr == 0.01);
  CHECK(parse_backend("swag-full-0.0001").kind == SamplerKind::swag_full);
  CHECK(parse_backend("ensemble-init").kind == SamplerKind::ensemble_init);
  CHECK(parse_backend("ensemble-sub-0.9").kind == SamplerKind::ensemble_subsample);
  CHECK(parse_backend("ensemble-sub-0.9").subsample_fraction == 0.9);

  for (const SamplerKind k :
       {SamplerKind::bnn_vi, SamplerKind::swag_diag, SamplerKind::swag_full,
        SamplerKind::mc_dropout, SamplerKind::ensemble_init,
        SamplerKind::ensemble_subsample}) {
    CHECK(sampler_kind_from_string(to_string(k)) == k);
  }
  CHECK_THROWS_AS(sampler_kind_from_string("bogus"), ConfigError);
}

TEST_CASE("off-grid numeric values need the custom flag") {
  for (const char* token :
       {"dropout-0.25", "swag-diag-0.05", "swag-full-0.02", "ensemble-sub-0.95"}) {
    try {
      parse_backend(token);
      FAIL("expected ConfigError for ", token);
    } catch (const ConfigError& e) {
      CHECK(std::string(e.what()).find("--allow-custom") != std::string::npos);
    }
    CHECK_NOTHROW(parse_backend(token, true));
  }
  CHECK(parse_backend("dropout-0.25", true).dropout_rate == 0.25);
  CHECK(parse_backend("ensemble-sub-0.95", true).subsample_fraction == 0.95);
}

TEST_CASE("malformed or out-of-range tokens are rejected outright") {
  CHECK_THROWS_AS(parse_backend("gibberish"), ConfigError);
  CHECK_THROWS_AS(parse_backend("dropout-"), ConfigError);
  CHECK_THROWS_AS(parse_backend("dropout-abc"), ConfigError);
  CHECK_THROWS_AS(parse_backend("dropout-0.3x"), ConfigError);
  // hard bounds hold even with the custom flag
  CHECK_THROWS_AS(parse_backend("dropout-1.0", true), ConfigError);
  CHECK_THROWS_AS(parse_backend("dropout--0.1", true), ConfigError);
  CHECK_THROWS_AS(parse_backend("swag-diag-0", true), ConfigError);
  CHECK_THROWS_AS(parse_backend("swag-full--1", true), ConfigError);
  CHECK_THROWS_AS(parse_backend("ensemble-sub-0", true), ConfigError);
  CHECK_THROWS_AS(parse_backend("ensemble-sub-1.5", true), ConfigError);
}

TEST_CASE("the moment accumulator tracks exact running statistics") {
  SwagState s;
  const std::vector<std::vector<double>> iterates = {{0.0, 0.0}, {1.0, 2.0}, {2.0, 4.0}};
  for (const auto& t : iterates) s.accumulate(t);
  CHECK(s.count == 3);
  CHECK(s.dim == 2);
  CHECK(s.mean[0] == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(s.mean[1] == doctest::Approx(2.0).epsilon(1e-15));
  CHECK(s.second[0] == doctest::Approx(5.0 / 3.0).epsilon(1e-15));
  CHECK(s.second[1] == doctest::Approx(20.0 / 3.0).epsilon(1e-15));
  const std::vector<double> var = s.diag_variance();
  CHECK(var[0] == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
  CHECK(var[1] == doctest::Approx(8.0 / 3.0).epsilon(1e-12));
  // deviations are centered on the running mean at insertion time
  REQUIRE(s.deviations.size() == 3);
  CHECK(s.deviations[0][0] == 0.0);
  CHECK(s.deviations[1][0] == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(s.deviations[2][0] == doctest::Approx(1.0).epsilon(1e-15));

  // the window keeps only the most recent max_rank deviations
  SwagState windowed;
  windowed.max_rank = 2;
  for (const auto& t : iterates) windowed.accumulate(t);
  REQUIRE(windowed.deviations.size() == 2);
  CHECK(windowed.deviations[0][0] == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(windowed.deviations[1][0] == doctest::Approx(1.0).epsilon(1e-15));

  CHECK_THROWS_AS(s.accumulate(std::vector<double>{1.0}), ConfigError);
  SwagState empty;
  Rng rng(1);
  CHECK_THROWS_AS(empty.sample(false, rng), ConfigError);
  const std::vector<double> bad = {1.0, std::nan("")};
  CHECK_THROWS_AS(empty.accumulate(bad), NumericError);
}

TEST_CASE("moment sampling follows the documented reconstruction") {
  SwagState s;
  for (const auto& t :
       {std::vector<double>{0.0, 0.0}, {1.0, 2.0}, {2.0, 4.0}}) {
    s.accumulate(t);
  }
  const std::vector<double> var = s.diag_variance();

  // diagonal draw: theta_i = mean_i + sqrt(var_i) * xi_i
  {
    Rng rng(42);
    const std::vector<double> got = s.sample(false, rng);
    Rng replay(42);
    for (std::size_t i = 0; i < 2; ++i) {
      const double expected = s.mean[i] + std::sqrt(var[i]) * replay.normal();
      CHECK(got[i] == expected);
    }
  }

  // full-rank draw adds the low-rank deviation term with a 1/2-1/2 split
  {
    Rng rng(43);
    const std::vector<double> got = s.sample(true, rng);
    Rng replay(43);
    std::vector<double> expected = s.mean;
    const double diag_scale = 1.0 / std::sqrt(2.0);
    for (std::size_t i = 0; i < 2; ++i) {
      expected[i] += diag_scale * std::sqrt(var[i]) * replay.normal();
    }
    const double coef = 1.0 / std::sqrt(2.0 * 3.0);
    for (const auto& dev : s.deviations) {
      const double xi = replay.normal();
      for (std::size_t i = 0; i < 2; ++i) expected[i] += coef * dev[i] * xi;
    }
    CHECK(got[0] == expected[0]);
    CHECK(got[1] == expected[1]);
  }
}

TEST_CASE("a frozen collection phase collapses every draw onto the point") {
  ArmedSpec spec;
  spec.n_features = 3;
  spec.n_clusters = 2;
  spec.fe_hidden = {4};
  Rng rng(9);
  const ArmedParams init = init_armed_params(spec, rng);
  const Batch b = synthetic_batch(spec, 16, 5);

  BackendSpec bk;
  bk.kind = SamplerKind::swag_diag;
  bk.name = "swag-diag-0";
  bk.swag_lr = 0.0;  // SGD never moves: every snapshot equals the optimum
  FitOptions opt;
  opt.train = quick_train(8);
  opt.draws = 4;
  opt.seed = 11;
  opt.swag_epochs = 6;

  PosteriorSampler s = fit_swag(b, init, bk, opt);
  CHECK(s.swag.count == 6);
  CHECK(s.swag.max_rank == 5);
  CHECK(s.swag.deviations.size() == 5);
  for (std::size_t d = 0; d < opt.draws; ++d) {
    CHECK(s.draw_params(d).values == s.point.values);
  }
  s.kind = SamplerKind::swag_full;  // rank term is all zeros too
  for (std::size_t d = 0; d < opt.draws; ++d) {
    CHECK(s.draw_params(d).values == s.point.values);
  }
  CHECK_THROWS_AS(s.draw_params(opt.draws), ConfigError);

  FitOptions bad = opt;
  bad.swag_epochs = 1;
  CHECK_THROWS_AS(fit_swag(b, init, bk, bad), ConfigError);
}

TEST_CASE("a live collection phase produces deterministic spread draws") {
  ArmedSpec spec;
  spec.n_features = 3;
  spec.n_clusters = 2;
  spec.fe_hidden = {4};
  Rng rng(10);
  const ArmedParams init = init_armed_params(spec, rng);
  const Batch b = synthetic_batch(spec, 24, 6);

  const BackendSpec bk = parse_backend("swag-diag-0.01");
  FitOptions opt;
  opt.train = quick_train(30);
  opt.draws = 6;
  opt.seed = 21;
  opt.swag_epochs = 10;
  const PosteriorSampler s = fit_swag(b, init, bk, opt);
  const PosteriorSampler again = fit_swag(b, init, bk, opt);
  CHECK(s.swag.mean == again.swag.mean);
  CHECK(s.swag.second == again.swag.second);
  CHECK(s.draw_params(2).values == again.draw_params(2).values);
  CHECK(s.draw_params(0).values != s.draw_params(1).values);
  // moving iterates leave genuine variance somewhere
  const std::vector<double> var = s.swag.diag_variance();
  CHECK(*std::max_element(var.begin(), var.end()) > 0.0);
}

TEST_CASE("variational fit with zero epochs keeps the initial means") {
  ArmedSpec spec;
  spec.n_features = 3;
  spec.n_clusters = 2;
  spec.fe_hidden = {4, 4};
  Rng rng(3);
  const ArmedParams init = init_armed_params(spec, rng);
  const Batch b = synthetic_batch(spec, 12, 8);
  FitOptions opt;
  opt.train = quick_train(0);
  opt.draws = 3;
  opt.seed = 5;

  const NetworkLayout fe = spec.fe_layout();
  const std::size_t fe_len = fe.param_count();
  const double rho0 = std::log(std::expm1(1e-3));

  struct Expectation {
    const char* token;
    std::size_t flagged;
  };
  const Expectation table[] = {
      {"bnn-first", fe.layers()[0].param_count()},
      {"bnn-last", fe.layers()[fe.depth() - 1].param_count()},
      {"bnn-all", fe_len},
  };
  for (const auto& [token, flagged] : table) {
    const PosteriorSampler s = fit_bnn(b, init, parse_backend(token), opt);
    CHECK(s.mu == init.values);
    CHECK(s.point.values == init.values);
    CHECK_FALSE(s.sigma_clamped);
    std::size_t on = 0, outside_fe = 0;
    for (std::size_t i = 0; i < s.bayesian.size(); ++i) {
      if (!s.bayesian[i]) continue;
      ++on;
      if (i >= spec.re_offset()) ++outside_fe;
      CHECK(s.rho[i] == rho0);
    }
    CHECK(on == flagged);
    CHECK(outside_fe == 0);
  }

  BackendSpec bad = parse_backend("bnn-all");
  bad.bnn_layers = "middle";
  CHECK_THROWS_AS(fit_bnn(b, init, bad, opt), ConfigError);
}

TEST_CASE("variational draws are deterministic and centered on the means") {
  ArmedSpec spec;
  spec.n_features = 2;
  spec.n_clusters = 2;
  spec.fe_hidden = {3};
  Rng rng(7);
  const ArmedParams init = init_armed_params(spec, rng);
  const Batch b = synthetic_batch(spec, 10, 2);
  FitOptions opt;
  opt.train = quick_train(0);
  opt.draws = 400;
  opt.seed = 77;
  PosteriorSampler s = fit_bnn(b, init, parse_backend("bnn-all"), opt);

  CHECK(s.draw_params(3).values == s.draw_params(3).values);
  CHECK(s.draw_params(0).values != s.draw_params(1).values);

  // empirical mean over draws recovers mu (sigma = 1e-3 at init)
  const std::size_t probe = 0;
  REQUIRE(s.bayesian[probe]);
  double acc = 0.0;
  for (std::size_t d = 0; d < s.draws; ++d) acc += s.draw_params(d).values[probe];
  acc /= static_cast<double>(s.draws);
  CHECK(std::fabs(acc - s.mu[probe]) < 5e-4);

  // non-bayesian coordinates never move
  const std::size_t frozen = spec.re_offset();
  CHECK_FALSE(s.bayesian[frozen]);
  CHECK(s.draw_params(0).values[frozen] == s.mu[frozen]);

  // a posterior scale driven to zero hits the floor, not zero
  s.rho.assign(s.rho.size(), -100.0);
  const ArmedParams d0 = s.draw_params(0);
  double max_dev = 0.0;
  for (std::size_t i = 0; i < d0.values.size(); ++i) {
    max_dev = std::max(max_dev, std::fabs(d0.values[i] - s.mu[i]));
  }
  CHECK(max_dev > 0.0);
  CHECK(max_dev < 1e-5);  // sigma floored at 1e-6

  // and the degenerate posterior predicts like its mean
  DrawPredictions dp = posterior_predict(s, b.x, &b.z);
  ArmedParams mean_params(spec);
  mean_params.values = s.mu;
  const MixedPrediction mp = mixed_forward(mean_params, b.x, b.z);
  for (std::size_t r = 0; r < b.size(); ++r) {
    double m = 0.0;
    for (std::size_t d = 0; d < s.draws; ++d) m += dp.y_mixed(d, r);
    m /= static_cast<double>(s.draws);
    CHECK(std::fabs(m - mp.y_mixed[r]) < 1e-4);
  }
}

TEST_CASE("variational training decreases a penalty whose terms replay exactly") {
  ArmedSpec spec;
  spec.n_features = 2;
  spec.n_clusters = 2;
  spec.fe_hidden = {};  // affine head: three parameters, all bayesian
  ArmedParams init(spec);
  init.fe()[0] = 0.3;
  init.fe()[1] = -0.2;
  init.fe()[2] = 0.1;
  const Batch b = synthetic_batch(spec, 8, 4);

  FitOptions opt;
  opt.train = quick_train(150);
  opt.train.lr = 0.05;
  opt.draws = 2;
  opt.seed = 13;
  opt.kl_scale = 0.25;

  VariationalHistory hist;
  const PosteriorSampler s = fit_bnn(b, init, parse_backend("bnn-all"), opt, &hist);
  REQUIRE(hist.loss.size() == 150);
  REQUIRE(hist.kl.size() == 150);

  // the epoch-0 KL is the closed form at the initial (mu, sigma):
  //   sum_i [ -ln(sigma) + (sigma^2 + mu_i^2 - 1)/2 ],  sigma = 1e-3
  CHECK(hist.kl[0] == doctest::Approx(19.293267336946411).epsilon(1e-12));

  // the epoch-0 penalized loss replays from the published noise stream
  const double rho0 = std::log(std::expm1(1e-3));
  const double sig = std::max(softplus(rho0), 1e-6);
  Rng noise = derive_stream(opt.seed, "vi-noise");
  ArmedParams w(spec);
  w.values = init.values;
  double kl = 0.0;
  for (std::size_t i = 0; i < 3; ++i) {
    w.values[i] = init.values[i] + sig * noise.normal();
    kl += -std::log(sig) + 0.5 * (sig * sig + init.values[i] * init.values[i] - 1.0);
  }
  const double expected =
      armed_loss(w, b, opt.train.weights).total + opt.kl_scale * kl;
  CHECK(hist.loss[0] == doctest::Approx(expected).epsilon(1e-12));

  double early = 0.0, late = 0.0;
  for (std::size_t e = 0; e < 10; ++e) {
    early += hist.loss[e];
    late += hist.loss[hist.loss.size() - 1 - e];
  }
  CHECK(late < early);
  for (const double k : hist.kl) CHECK(k >= 0.0);
  CHECK(s.mu != init.values);  // training moved the means
}

TEST_CASE("dropout sampler keeps the trained point and varies only the mask") {
  ArmedSpec spec;
  spec.n_features = 3;
  spec.n_clusters = 2;
  spec.fe_hidden = {6};
  Rng rng(15);
  const ArmedParams init = init_armed_params(spec, rng);
  const Batch b = synthetic_batch(spec, 20, 9);

  FitOptions opt;
  opt.train = quick_train(10);
  opt.draws = 5;
  opt.seed = 33;
  const PosteriorSampler s = fit_mc_dropout(b, init, parse_backend("dropout-0.3"), opt);
  CHECK(s.dropout_rate == 0.3);
  for (std::size_t d = 0; d < opt.draws; ++d) {
    CHECK(s.draw_params(d).values == s.point.values);
  }
  CHECK(s.draw_mask(0).keep != s.draw_mask(1).keep);
  CHECK(s.draw_mask(2).keep == s.draw_mask(2).keep);

  // a zero rate yields the bare forward pass on every draw
  PosteriorSampler z = s;
  z.dropout_rate = 0.0;
  const MixedPrediction mp = mixed_forward(z.point, b.x, b.z);
  for (std::size_t d = 0; d < opt.draws; ++d) {
    const MixedPrediction got = z.draw_predict(d, b.x, b.z);
    CHECK(got.y_mixed == mp.y_mixed);
    CHECK(got.y_fixed == mp.y_fixed);
  }
}

TEST_CASE("dropout predictive spread grows with the rate") {
  ArmedSpec spec;
  spec.n_features = 3;
  spec.n_clusters = 2;
  spec.fe_hidden = {8, 8};
  Rng rng(25);
  const ArmedParams init = init_armed_params(spec, rng);
  const Batch b = synthetic_batch(spec, 40, 14);
  const ArmedParams point = train_armed(b, quick_train(60), init).params;

  auto mean_spread = [&](double rate) {
    PosteriorSampler s;
    s.kind = SamplerKind::mc_dropout;
    s.spec = spec;
    s.draws = 200;
    s.seed = 101;
    s.point = point;
    s.dropout_rate = rate;
    const DrawPredictions dp = posterior_predict(s, b.x, &b.z);
    double acc = 0.0;
    for (std::size_t r = 0; r < b.size(); ++r) {
      double m = 0.0, m2 = 0.0;
      for (std::size_t d = 0; d < s.draws; ++d) {
        m += dp.y_mixed(d, r);
        m2 += dp.y_mixed(d, r) * dp.y_mixed(d, r);
      }
      m /= static_cast<double>(s.draws);
      m2 /= static_cast<double>(s.draws);
      acc += std::sqrt(std::max(m2 - m * m, 0.0));
    }
    return acc / static_cast<double>(b.size());
  };
  const double s1 = mean_spread(0.1);
  const double s3 = mean_spread(0.3);
  const double s5 = mean_spread(0.5);
  CHECK(s1 > 0.0);
  CHECK(s3 > s1);
  CHECK(s5 > s3);
}

TEST_CASE("an ensemble of one retraces a single training run") {
  ArmedSpec spec;
  spec.n_features = 3;
  spec.n_clusters = 2;
  spec.fe_hidden = {4};
  Rng rng(19);
  ArmedParams init = init_armed_params(spec, rng);
  for (double& v : init.zpred()) v = 0.25;  // pretend a trained predictor
  const Batch b = synthetic_batch(spec, 18, 3);

  FitOptions opt;
  opt.train = quick_train(12);
  opt.draws = 1;
  opt.seed = 51;
  const PosteriorSampler s = fit_ensemble(b, init, parse_backend("ensemble-init"), opt);
  REQUIRE(s.members.size() == 1);

  Rng member_rng = derive_stream(opt.seed, "member-init", 0);
  ArmedParams member_init = init_armed_params(spec, member_rng);
  const auto zp = init.zpred();
  std::copy(zp.begin(), zp.end(), member_init.zpred().begin());
  TrainConfig tc = opt.train;
  tc.seed = derive_seed(opt.seed, "member", 0);
  const std::vector<double> expected = train_armed(b, tc, member_init).params.values;
  CHECK(s.members[0] == expected);
}

TEST_CASE("fresh-start ensemble members share only the cluster predictor") {
  ArmedSpec spec;
  spec.n_features = 3;
  spec.n_clusters = 2;
  spec.fe_hidden = {4};
  Rng rng(29);
  ArmedParams init = init_armed_params(spec, rng);
  for (std::size_t i = 0; i < init.zpred().size(); ++i) {
    init.zpred()[i] = 0.1 * static_cast<double>(i + 1);
  }
  const Batch b = synthetic_batch(spec, 18, 23);

  FitOptions opt;
  opt.train = quick_train(8);
  opt.draws = 3;
  opt.seed = 61;
  const PosteriorSampler s = fit_ensemble(b, init, parse_backend("ensemble-init"), opt);
  REQUIRE(s.members.size() == 3);
  for (std::size_t m = 0; m < 3; ++m) {
    ArmedParams pm(spec);
    pm.values = s.members[m];
    const auto got = pm.zpred();
    const auto want = init.zpred();
    for (std::size_t i = 0; i < want.size(); ++i) CHECK(got[i] == want[i]);
  }
  CHECK(s.members[0] != s.members[1]);
  CHECK(s.members[1] != s.members[2]);

  // prediction row d is exactly member d's forward pass
  const DrawPredictions dp = posterior_predict(s, b.x, &b.z);
  for (std::size_t m = 0; m < 3; ++m) {
    ArmedParams pm(spec);
    pm.values = s.members[m];
    const MixedPrediction mp = mixed_forward(pm, b.x, b.z);
    for (std::size_t r = 0; r < b.size(); ++r) {
      CHECK(dp.y_mixed(m, r) == mp.y_mixed[r]);
      CHECK(dp.y_fixed(m, r) == mp.y_fixed[r]);
    }
  }
}

TEST_CASE("subsampled ensembles stratify within every cluster") {
  ArmedSpec spec;
  spec.n_features = 2;
  spec.n_clusters = 3;
  spec.fe_hidden = {3};
  Rng rng(35);
  const ArmedParams init = init_armed_params(spec, rng);
  const Batch b = sized_batch(spec, {10, 7, 5}, 41);

  FitOptions opt;
  opt.train = quick_train(4);
  opt.draws = 4;
  opt.seed = 71;
  const PosteriorSampler s =
      fit_ensemble(b, init, parse_backend("ensemble-sub-0.7"), opt);
  REQUIRE(s.member_rows.size() == 4);
  const std::size_t expected_per_cluster[3] = {7, 5, 4};  // ceil(0.7 * n_c)
  for (const auto& rows : s.member_rows) {
    CHECK(rows.size() == 16);
    std::set<std::size_t> unique(rows.begin(), rows.end());
    CHECK(unique.size() == rows.size());
    std::size_t per_cluster[3] = {0, 0, 0};
    for (const std::size_t r : rows) {
      per_cluster[static_cast<std::size_t>(b.cluster[r])] += 1;
    }
    for (std::size_t c = 0; c < 3; ++c) {
      CHECK(per_cluster[c] == expected_per_cluster[c]);
    }
  }
  // members see different rows and land on different weights
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t j = i + 1; j < 4; ++j) {
      CHECK(std::set<std::size_t>(s.member_rows[i].begin(), s.member_rows[i].end()) !=
            std::set<std::size_t>(s.member_rows[j].begin(), s.member_rows[j].end()));
    }
  }
  CHECK(s.members[0] != s.members[1]);

  // refitting reproduces the exact same ensemble
  const PosteriorSampler again =
      fit_ensemble(b, init, parse_backend("ensemble-sub-0.7"), opt);
  CHECK(again.members == s.members);
  CHECK(again.member_rows == s.member_rows);

  // a fraction too small to stratify the clusters is refused
  BackendSpec tiny;
  tiny.kind = SamplerKind::ensemble_subsample;
  tiny.name = "ensemble-sub-0.2";
  tiny.subsample_fraction = 0.2;
  try {
    fit_ensemble(b, init, tiny, opt);
    FAIL("expected DataError");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("stratify") != std::string::npos);
  }
}

TEST_CASE("coefficient vectors recover linear model weights exactly") {
  ArmedSpec spec;
  spec.n_features = 2;
  spec.n_clusters = 2;
  spec.fe_hidden = {};
  ArmedParams p(spec);
  p.fe()[0] = 1.2;   // w1
  p.fe()[1] = -0.8;  // w2
  p.fe()[2] = 0.25;  // bias

  Matrix x(5, 2);
  Rng rng(90);
  for (double& v : x.data) v = rng.normal();
  Matrix z(5, 2);
  for (std::size_t r = 0; r < 5; ++r) z(r, r % 2) = 1.0;

  for (const Averaging avg : {Averaging::per_sample_mean, Averaging::at_mean}) {
    const std::vector<double> c =
        coefficient_vector(p, x, z, EffectKind::fixed, avg, GradTarget::logit);
    CHECK(c[0] == doctest::Approx(1.2).epsilon(1e-14));
    CHECK(c[1] == doctest::Approx(-0.8).epsilon(1e-14));
  }

  // probability target at the mean: w_i * pbar (1 - pbar)
  {
    double x0 = 0.0, x1 = 0.0;
    for (std::size_t r = 0; r < 5; ++r) {
      x0 += x(r, 0);
      x1 += x(r, 1);
    }
    x0 /= 5.0;
    x1 /= 5.0;
    const double pbar = stable_sigmoid(1.2 * x0 - 0.8 * x1 + 0.25);
    const std::vector<double> c = coefficient_vector(
        p, x, z, EffectKind::fixed, Averaging::at_mean, GradTarget::probability);
    CHECK(c[0] == doctest::Approx(1.2 * pbar * (1 - pbar)).epsilon(1e-12));
    CHECK(c[1] == doctest::Approx(-0.8 * pbar * (1 - pbar)).epsilon(1e-12));
  }

  // zero random effects: mixed slope equals the fixed slope, u-diagonal is 1
  {
    const std::vector<double> cm = coefficient_vector(
        p, x, z, EffectKind::mixed, Averaging::per_sample_mean, GradTarget::logit);
    CHECK(cm[0] == doctest::Approx(1.2).epsilon(1e-14));
    CHECK(cm[1] == doctest::Approx(-0.8).epsilon(1e-14));
    const std::vector<double> cr = coefficient_vector(
        p, x, z, EffectKind::random_slope, Averaging::per_sample_mean,
        GradTarget::logit);
    CHECK(cr[0] == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(cr[1] == doctest::Approx(1.0).epsilon(1e-15));
  }

  // uniform random slopes of +0.5 scale the mixed coefficients by 1.5
  {
    const NetworkLayout re = spec.re_layout();
    for (std::size_t out = 0; out < 2; ++out) {    // u_1, u_2 rows
      for (std::size_t in = 0; in < 2; ++in) {     // both clusters
        p.re()[re.weight_offset(0) + out * 2 + in] = 0.5;
      }
    }
    for (const Averaging avg : {Averaging::per_sample_mean, Averaging::at_mean}) {
      const std::vector<double> cm =
          coefficient_vector(p, x, z, EffectKind::mixed, avg, GradTarget::logit);
      CHECK(cm[0] == doctest::Approx(1.8).epsilon(1e-12));
      CHECK(cm[1] == doctest::Approx(-1.2).epsilon(1e-12));
      const std::vector<double> cr =
          coefficient_vector(p, x, z, EffectKind::random_slope, avg, GradTarget::logit);
      CHECK(cr[0] == doctest::Approx(1.5).epsilon(1e-12));
      CHECK(cr[1] == doctest::Approx(1.5).epsilon(1e-12));
    }
  }

  // mixed effects demand per-sample membership
  Matrix short_z(1, 2);
  short_z(0, 0) = 1.0;
  CHECK_THROWS_AS(coefficient_vector(p, x, short_z, EffectKind::mixed,
                                     Averaging::per_sample_mean),
                  DataError);
}

TEST_CASE("coefficient draws line up with their samplers") {
  ArmedSpec spec;
  spec.n_features = 3;
  spec.n_clusters = 2;
  spec.fe_hidden = {4};
  Rng rng(55);
  const ArmedParams init = init_armed_params(spec, rng);
  const Batch b = synthetic_batch(spec, 14, 77);

  FitOptions opt;
  opt.train = quick_train(6);
  opt.draws = 3;
  opt.seed = 81;

  const PosteriorSampler ens =
      fit_ensemble(b, init, parse_backend("ensemble-init"), opt);
  const Matrix ens_draws = coefficient_draws(ens, b.x, b.z, EffectKind::mixed,
                                             Averaging::per_sample_mean);
  for (std::size_t d = 0; d < 3; ++d) {
    const std::vector<double> want =
        coefficient_vector(ens.draw_params(d), b.x, b.z, EffectKind::mixed,
                           Averaging::per_sample_mean);
    for (std::size_t i = 0; i < 3; ++i) CHECK(ens_draws(d, i) == want[i]);
  }

  const PosteriorSampler drop =
      fit_mc_dropout(b, init, parse_backend("dropout-0.4"), opt);
  const Matrix drop_draws = coefficient_draws(drop, b.x, b.z, EffectKind::fixed,
                                              Averaging::per_sample_mean);
  for (std::size_t d = 0; d < 3; ++d) {
    const std::vector<double> want =
        coefficient_vector(drop.point, b.x, b.z, EffectKind::fixed,
                           Averaging::per_sample_mean, GradTarget::logit,
                           drop.draw_mask(d));
    for (std::size_t i = 0; i < 3; ++i) CHECK(drop_draws(d, i) == want[i]);
  }
}

TEST_CASE("held-out clusters can fall back to the fixed head alone") {
  ArmedSpec spec;
  spec.n_features = 3;
  spec.n_clusters = 2;
  spec.fe_hidden = {4};
  Rng rng(66);
  const ArmedParams init = init_armed_params(spec, rng);
  const Batch b = synthetic_batch(spec, 12, 31);

  FitOptions opt;
  opt.train = quick_train(5);
  opt.draws = 2;
  opt.seed = 91;
  const PosteriorSampler s = fit_ensemble(b, init, parse_backend("ensemble-init"), opt);

  const DrawPredictions fe_only = posterior_predict(s, b.x, nullptr, true);
  for (std::size_t d = 0; d < 2; ++d) {
    for (std::size_t r = 0; r < b.size(); ++r) {
      CHECK(fe_only.y_mixed(d, r) == fe_only.y_fixed(d, r));
    }
  }

  const DrawPredictions soft = posterior_predict(s, b.x, nullptr, false);
  for (std::size_t d = 0; d < 2; ++d) {
    const MixedPrediction want = s.draw_predict_unseen(d, b.x, false);
    for (std::size_t r = 0; r < b.size(); ++r) {
      CHECK(soft.y_mixed(d, r) == want.y_mixed[r]);
    }
  }
}

TEST_CASE("fit preconditions are validated") {
  ArmedSpec spec;
  spec.n_features = 2;
  spec.n_clusters = 2;
  spec.fe_hidden = {3};
  Rng rng(14);
  const ArmedParams init = init_armed_params(spec, rng);
  const Batch b = synthetic_batch(spec, 8, 1);
  FitOptions opt;
  opt.train = quick_train(2);
  opt.draws = 2;
  opt.seed = 1;

  Batch empty;
  empty.x = Matrix(0, 2);
  empty.z = Matrix(0, 2);
  CHECK_THROWS_AS(fit_mc_dropout(empty, init, parse_backend("dropout-0.1"), opt),
                  ConfigError);

  ArmedParams short_init = init;
  short_init.values.pop_back();
  CHECK_THROWS_AS(fit_backend(b, short_init, parse_backend("dropout-0.1"), opt),
                  ConfigError);

  // the dispatcher routes every kind to its fitter
  for (const char* token : {"bnn-last", "swag-diag-0.001", "dropout-0.2",
                            "ensemble-init", "ensemble-sub-0.9"}) {
    FitOptions fast = opt;
    fast.swag_epochs = 3;
    const PosteriorSampler s = fit_backend(b, init, parse_backend(token), fast);
    CHECK(s.name == token);
    CHECK(s.draws == 2);
  }
}

TEST_CASE("samplers survive a save and load round trip") {
  ArmedSpec spec;
  spec.n_features = 3;
  spec.n_clusters = 2;
  spec.fe_hidden = {4};
  Rng rng(44);
  const ArmedParams init = init_armed_params(spec, rng);
  const Batch b = synthetic_batch(spec, 16, 13);

  FitOptions opt;
  opt.train = quick_train(4);
  opt.draws = 3;
  opt.seed = 17;
  opt.swag_epochs = 4;

  const std::string path = temp_path("medl_sampler.json");
  for (const char* token : {"bnn-all", "swag-diag-0.001", "swag-full-0.001",
                            "dropout-0.3", "ensemble-init", "ensemble-sub-0.8"}) {
    const PosteriorSampler s = fit_backend(b, init, parse_backend(token), opt);
    save_sampler(s, path);
    const PosteriorSampler r = load_sampler(path);
    CHECK(r.kind == s.kind);
    CHECK(r.name == s.name);
    CHECK(r.spec == s.spec);
    CHECK(r.draws == s.draws);
    CHECK(r.seed == s.seed);
    CHECK(r.point.values == s.point.values);
    CHECK(r.mu == s.mu);
    CHECK(r.rho == s.rho);
    CHECK(r.bayesian == s.bayesian);
    CHECK(r.swag.mean == s.swag.mean);
    CHECK(r.swag.second == s.swag.second);
    CHECK(r.swag.deviations == s.swag.deviations);
    CHECK(r.swag.count == s.swag.count);
    CHECK(r.swag.max_rank == s.swag.max_rank);
    CHECK(r.dropout_rate == s.dropout_rate);
    CHECK(r.subsample_fraction == s.subsample_fraction);
    CHECK(r.members == s.members);
    CHECK(r.member_rows == s.member_rows);

    // draws replay bit for bit after the round trip
    const DrawPredictions a = posterior_predict(s, b.x, &b.z);
    const DrawPredictions c = posterior_predict(r, b.x, &b.z);
    CHECK(a.y_mixed == c.y_mixed);
    CHECK(a.y_fixed == c.y_fixed);
  }
  std::remove(path.c_str());

  CHECK_THROWS_AS(load_sampler(temp_path("medl_missing_sampler.json")), DataError);
  {
    std::ofstream out(path);
    out << "not json\n";
  }
  CHECK_THROWS_AS(load_sampler(path), DataError);
  {
    std::ofstream out(path);
    out << "{\"format_version\": 99}\n";
  }
  CHECK_THROWS_AS(load_sampler(path), DataError);
  std::remove(path.c_str());
}

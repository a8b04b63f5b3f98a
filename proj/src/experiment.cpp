#include "medl/experiment.hpp"

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <future>
#include <limits>
#include <map>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "medl/errors.hpp"
#include "medl/rng.hpp"

namespace medl {

namespace {

using nlohmann::json;

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
constexpr const char* kSplitSeen = "seen-test";
constexpr const char* kSplitUnseen = "unseen";
constexpr const char* kSplitTrain = "train";

class Timer {
 public:
  Timer() : t0_(std::chrono::steady_clock::now()) {}
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0_).count();
  }

 private:
  std::chrono::steady_clock::time_point t0_;
};

void check_keys(const json& j, std::initializer_list<const char*> allowed,
                const std::string& where) {
  for (const auto& [key, value] : j.items()) {
    (void)value;
    if (std::find_if(allowed.begin(), allowed.end(), [&](const char* a) {
          return key == a;
        }) == allowed.end()) {
      throw ConfigError("unknown key '" + key + "' in " + where);
    }
  }
}

GradTarget grad_target_from_string(const std::string& s) {
  if (s == "logit") return GradTarget::logit;
  if (s == "probability") return GradTarget::probability;
  throw ConfigError("grad_target must be 'logit' or 'probability'; got '" + s + "'");
}

json generator_to_json(const GeneratorConfig& g) {
  // The generator seed is derived from the run seed, so it is not a field.
  return json{{"n_clusters", g.n_clusters},
              {"n_seen", g.n_seen},
              {"samples_per_cluster_min", g.samples_per_cluster_min},
              {"samples_per_cluster_max", g.samples_per_cluster_max},
              {"d_bio", g.d_bio},
              {"k_informative", g.k_informative},
              {"sigma_intercept", g.sigma_intercept},
              {"sigma_slope", g.sigma_slope},
              {"fe_strength", g.fe_strength},
              {"base_rate", g.base_rate},
              {"n_probes", g.n_probes},
              {"probe_noise", g.probe_noise}};
}

GeneratorConfig generator_from_json(const json& j) {
  check_keys(j,
             {"n_clusters", "n_seen", "samples_per_cluster_min",
              "samples_per_cluster_max", "d_bio", "k_informative", "sigma_intercept",
              "sigma_slope", "fe_strength", "base_rate", "n_probes", "probe_noise"},
             "dataset.generator");
  GeneratorConfig g;
  g.n_clusters = j.value("n_clusters", g.n_clusters);
  g.n_seen = j.value("n_seen", g.n_seen);
  g.samples_per_cluster_min = j.value("samples_per_cluster_min", g.samples_per_cluster_min);
  g.samples_per_cluster_max = j.value("samples_per_cluster_max", g.samples_per_cluster_max);
  g.d_bio = j.value("d_bio", g.d_bio);
  g.k_informative = j.value("k_informative", g.k_informative);
  g.sigma_intercept = j.value("sigma_intercept", g.sigma_intercept);
  g.sigma_slope = j.value("sigma_slope", g.sigma_slope);
  g.fe_strength = j.value("fe_strength", g.fe_strength);
  g.base_rate = j.value("base_rate", g.base_rate);
  g.n_probes = j.value("n_probes", g.n_probes);
  g.probe_noise = j.value("probe_noise", g.probe_noise);
  return g;
}

json config_to_json(const ExperimentConfig& cfg) {
  json j;
  j["dataset"] = {{"source", cfg.dataset.source},
                  {"csv", cfg.dataset.csv_path},
                  {"sidecar", cfg.dataset.sidecar_path},
                  {"generator", generator_to_json(cfg.dataset.generator)}};
  j["folds"] = cfg.folds;
  j["draws"] = cfg.draws;
  j["backends"] = cfg.backends;
  j["allow_custom"] = cfg.allow_custom;
  j["loss_weights"] = {{"fixed", cfg.weights.fixed},
                       {"mixed", cfg.weights.mixed},
                       {"adversary", cfg.weights.adversary}};
  j["train"] = {{"epochs", cfg.epochs},
                {"lr", cfg.lr},
                {"batch_size", cfg.batch_size},
                {"per_batch", cfg.per_batch},
                {"dropout", cfg.dropout}};
  j["zpred"] = {{"epochs", cfg.zpred_epochs}, {"lr", cfg.zpred_lr}};
  j["swag_epochs"] = cfg.swag_epochs;
  j["kl_scale"] = cfg.kl_scale;
  j["grad_target"] = cfg.grad_target;
  j["unseen_strategy"] = cfg.unseen_strategy;
  j["seed"] = cfg.seed;
  return j;
}

ExperimentConfig config_from_json(const json& j, const std::string& where) {
  check_keys(j,
             {"dataset", "folds", "draws", "backends", "allow_custom", "loss_weights",
              "train", "zpred", "swag_epochs", "kl_scale", "grad_target",
              "unseen_strategy", "seed"},
             where);
  ExperimentConfig cfg;
  if (j.contains("dataset")) {
    const json& d = j["dataset"];
    check_keys(d, {"source", "csv", "sidecar", "generator"}, "dataset");
    cfg.dataset.source = d.value("source", cfg.dataset.source);
    cfg.dataset.csv_path = d.value("csv", cfg.dataset.csv_path);
    cfg.dataset.sidecar_path = d.value("sidecar", cfg.dataset.sidecar_path);
    if (d.contains("generator")) {
      cfg.dataset.generator = generator_from_json(d["generator"]);
    }
  }
  cfg.folds = j.value("folds", cfg.folds);
  cfg.draws = j.value("draws", cfg.draws);
  cfg.backends = j.value("backends", cfg.backends);
  cfg.allow_custom = j.value("allow_custom", cfg.allow_custom);
  if (j.contains("loss_weights")) {
    const json& w = j["loss_weights"];
    check_keys(w, {"fixed", "mixed", "adversary"}, "loss_weights");
    cfg.weights.fixed = w.value("fixed", cfg.weights.fixed);
    cfg.weights.mixed = w.value("mixed", cfg.weights.mixed);
    cfg.weights.adversary = w.value("adversary", cfg.weights.adversary);
  }
  if (j.contains("train")) {
    const json& t = j["train"];
    check_keys(t, {"epochs", "lr", "batch_size", "per_batch", "dropout"}, "train");
    cfg.epochs = t.value("epochs", cfg.epochs);
    cfg.lr = t.value("lr", cfg.lr);
    cfg.batch_size = t.value("batch_size", cfg.batch_size);
    cfg.per_batch = t.value("per_batch", cfg.per_batch);
    cfg.dropout = t.value("dropout", cfg.dropout);
  }
  if (j.contains("zpred")) {
    const json& t = j["zpred"];
    check_keys(t, {"epochs", "lr"}, "zpred");
    cfg.zpred_epochs = t.value("epochs", cfg.zpred_epochs);
    cfg.zpred_lr = t.value("lr", cfg.zpred_lr);
  }
  cfg.swag_epochs = j.value("swag_epochs", cfg.swag_epochs);
  cfg.kl_scale = j.value("kl_scale", cfg.kl_scale);
  cfg.grad_target = j.value("grad_target", cfg.grad_target);
  cfg.unseen_strategy = j.value("unseen_strategy", cfg.unseen_strategy);
  if (j.contains("seed")) {
    cfg.seed = j["seed"].get<std::uint64_t>();
    cfg.seed_set = true;
  }
  return cfg;
}

std::string fmt_csv(double v) {
  if (std::isnan(v)) return "NA";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

json num_or_null(double v) {
  if (std::isnan(v) || std::isinf(v)) return nullptr;
  return v;
}

// ----------------------------------------------------------------------
// per-fold evaluation
// ----------------------------------------------------------------------

struct SplitEval {
  bool usable = false;
  // one value per draw
  std::vector<double> auroc_v, balacc_y, sens_y, spec_y, sens80, sens90, balacc05;
};

struct ModelFold {
  bool failed = false;
  std::string error;
  double train_seconds = 0.0;
  double infer_seconds = 0.0;
  SplitEval seen, unseen;
  std::vector<std::pair<std::size_t, VoteCount>> votes_train, votes_seen, votes_unseen;
  std::array<Matrix, 6> coef;  // [effect * 2 + averaging], draws x d
};

struct FoldResult {
  std::vector<ModelFold> models;
};

constexpr std::array<EffectKind, 3> kEffects = {EffectKind::fixed, EffectKind::mixed,
                                                EffectKind::random_slope};
constexpr std::array<Averaging, 2> kAveragings = {Averaging::per_sample_mean,
                                                  Averaging::at_mean};

const char* effect_name(EffectKind e) {
  switch (e) {
    case EffectKind::fixed: return "fixed";
    case EffectKind::mixed: return "mixed";
    case EffectKind::random_slope: return "random";
  }
  return "?";
}

const char* averaging_name(Averaging a) {
  return a == Averaging::per_sample_mean ? "per-sample" : "at-mean";
}

SplitEval eval_split(const Matrix& y_mixed, const std::vector<double>& labels) {
  SplitEval ev;
  bool pos = false, neg = false;
  for (const double v : labels) {
    (v > 0.5 ? pos : neg) = true;
  }
  ev.usable = pos && neg && !labels.empty();
  if (!ev.usable) return ev;
  for (std::size_t s = 0; s < y_mixed.rows; ++s) {
    const auto scores = y_mixed.row(s);
    ev.auroc_v.push_back(auroc(scores, labels));
    const OperatingPoint op = youden_operating_point(scores, labels);
    ev.balacc_y.push_back(op.balanced_accuracy);
    ev.sens_y.push_back(op.sensitivity);
    ev.spec_y.push_back(op.specificity);
    ev.sens80.push_back(sens_at_spec(scores, labels, 0.8));
    ev.sens90.push_back(sens_at_spec(scores, labels, 0.9));
    ev.balacc05.push_back(balanced_accuracy_at(scores, labels, 0.5));
  }
  return ev;
}

std::vector<std::pair<std::size_t, VoteCount>> votes_of(
    const Matrix& y_mixed, std::span<const std::size_t> rows) {
  std::vector<std::pair<std::size_t, VoteCount>> out;
  out.reserve(rows.size());
  for (std::size_t c = 0; c < rows.size(); ++c) {
    VoteCount v;
    for (std::size_t s = 0; s < y_mixed.rows; ++s) {
      (y_mixed(s, c) >= 0.5 ? v.c1 : v.c0) += 1;
    }
    out.emplace_back(rows[c], v);
  }
  return out;
}

ModelFold evaluate_sampler(const PosteriorSampler& sampler, const Batch& train,
                           std::span<const std::size_t> train_rows, const Batch& test,
                           std::span<const std::size_t> test_rows,
                           const Matrix& unseen_x,
                           const std::vector<double>& unseen_labels,
                           std::span<const std::size_t> unseen_rows,
                           const std::vector<double>& test_labels, bool fe_only,
                           GradTarget target) {
  ModelFold out;
  out.train_seconds = sampler.train_seconds;

  Timer infer;
  const DrawPredictions train_pred = posterior_predict(sampler, train.x, &train.z);
  const DrawPredictions seen_pred = posterior_predict(sampler, test.x, &test.z);
  DrawPredictions unseen_pred;
  if (unseen_x.rows > 0) {
    unseen_pred = posterior_predict(sampler, unseen_x, nullptr, fe_only);
  }
  out.infer_seconds = infer.seconds();

  out.seen = eval_split(seen_pred.y_mixed, test_labels);
  if (unseen_x.rows > 0) {
    out.unseen = eval_split(unseen_pred.y_mixed, unseen_labels);
  }
  out.votes_train = votes_of(train_pred.y_mixed, train_rows);
  out.votes_seen = votes_of(seen_pred.y_mixed, test_rows);
  if (unseen_x.rows > 0) {
    out.votes_unseen = votes_of(unseen_pred.y_mixed, unseen_rows);
  }
  for (std::size_t e = 0; e < kEffects.size(); ++e) {
    for (std::size_t a = 0; a < kAveragings.size(); ++a) {
      out.coef[e * 2 + a] = coefficient_draws(sampler, train.x, train.z, kEffects[e],
                                              kAveragings[a], target);
    }
  }
  return out;
}

FoldResult run_fold(const ClusteredDataset& data, const FoldPlan& plan, std::size_t f,
                    const ExperimentConfig& cfg,
                    const std::vector<BackendSpec>& backends, GradTarget target,
                    const std::string& models_dir) {
  FoldResult result;
  result.models.resize(backends.size() + 1);

  const bool fe_only = cfg.unseen_strategy == "fe-only";
  const Batch train = data.make_batch(plan.train_rows[f]);
  const Batch test = data.make_batch(plan.test_rows[f]);
  const Matrix unseen_x = data.features_of(plan.unseen_rows);
  const std::vector<double> unseen_labels = data.labels_of(plan.unseen_rows);
  const std::vector<double> test_labels = data.labels_of(plan.test_rows[f]);

  const ArmedSpec spec = data.armed_spec();
  TrainConfig tc;
  tc.epochs = cfg.epochs;
  tc.lr = cfg.lr;
  tc.weights = cfg.weights;
  tc.batch_size = cfg.batch_size;
  tc.per_batch = cfg.per_batch;
  tc.dropout_rate = cfg.dropout;
  tc.seed = derive_seed(cfg.seed, "train", f);

  ArmedParams init(spec);
  try {
    Rng init_rng = derive_stream(cfg.seed, "init", f);
    init = init_armed_params(spec, init_rng);
    const ZpredResult zp =
        train_zpredictor(train.x, train.z, spec, cfg.zpred_epochs, cfg.zpred_lr);
    std::copy(zp.params.begin(), zp.params.end(), init.zpred().begin());
  } catch (const std::exception& e) {
    for (std::size_t m = 0; m < result.models.size(); ++m) {
      result.models[m].failed = true;
      result.models[m].error = std::string("shared fold setup failed: ") + e.what();
    }
    return result;
  }

  auto save = [&](const PosteriorSampler& sampler) {
    if (models_dir.empty()) return;
    save_sampler(sampler, models_dir + "/" + sampler.name + "-fold" +
                              std::to_string(f) + ".json");
  };

  // Non-UQ baseline: a deterministic single-draw sampler sharing the init.
  try {
    Timer t;
    TrainResult base = train_armed(train, tc, init);
    const double train_s = t.seconds();
    PosteriorSampler bs;
    bs.kind = SamplerKind::ensemble_init;
    bs.name = "baseline";
    bs.spec = spec;
    bs.draws = 1;
    bs.seed = derive_seed(cfg.seed, "baseline", f);
    bs.train_seconds = train_s;
    bs.point = init;
    bs.members.push_back(std::move(base.params.values));
    result.models[0] =
        evaluate_sampler(bs, train, plan.train_rows[f], test, plan.test_rows[f],
                         unseen_x, unseen_labels, plan.unseen_rows, test_labels,
                         fe_only, target);
    save(bs);
  } catch (const std::exception& e) {
    result.models[0].failed = true;
    result.models[0].error = e.what();
  }

  for (std::size_t b = 0; b < backends.size(); ++b) {
    try {
      FitOptions opt;
      opt.train = tc;
      opt.draws = cfg.draws;
      opt.seed = derive_seed(cfg.seed, backends[b].name, f);
      opt.swag_epochs = cfg.swag_epochs;
      opt.kl_scale = cfg.kl_scale;
      Timer t;
      PosteriorSampler sampler = fit_backend(train, init, backends[b], opt);
      sampler.train_seconds = t.seconds();
      result.models[b + 1] =
          evaluate_sampler(sampler, train, plan.train_rows[f], test,
                           plan.test_rows[f], unseen_x, unseen_labels,
                           plan.unseen_rows, test_labels, fe_only, target);
      save(sampler);
    } catch (const std::exception& e) {
      result.models[b + 1].failed = true;
      result.models[b + 1].error = e.what();
    }
  }
  return result;
}

// ----------------------------------------------------------------------
// aggregation
// ----------------------------------------------------------------------

MetricSummary summarize_metric(const std::vector<std::vector<double>>& per_fold) {
  // per_fold: one vector of draw values per usable fold
  MetricSummary ms{kNaN, kNaN, kNaN};
  if (per_fold.empty()) return ms;
  std::vector<FoldStat> stats;
  if (per_fold.front().size() >= 2) {
    for (const auto& v : per_fold) stats.push_back(FoldStat::from(v));
  } else {
    // single-draw model: classical mean/CI across folds
    std::vector<double> fold_values;
    for (const auto& v : per_fold) fold_values.push_back(v.front());
    if (fold_values.size() < 2) {
      ms.mean = fold_values.front();
      return ms;
    }
    stats.push_back(FoldStat::from(fold_values));
  }
  const PooledStat ps = pool_fold_stats(stats, Tail::two_sided);
  return {ps.mean, ps.ci_lo, ps.ci_hi};
}

PerformanceRow performance_row(const std::string& model, const std::string& split,
                               const std::vector<const SplitEval*>& evals,
                               std::size_t draws) {
  PerformanceRow row;
  row.model = model;
  row.split = split;
  auto collect = [&](std::vector<double> SplitEval::*member) {
    std::vector<std::vector<double>> out;
    for (const SplitEval* ev : evals) {
      if (ev->usable) out.push_back(ev->*member);
    }
    return out;
  };
  row.n_folds = collect(&SplitEval::auroc_v).size();
  row.auroc = summarize_metric(collect(&SplitEval::auroc_v));
  row.bal_acc_youden = summarize_metric(collect(&SplitEval::balacc_y));
  row.sens_youden = summarize_metric(collect(&SplitEval::sens_y));
  row.spec_youden = summarize_metric(collect(&SplitEval::spec_y));
  row.sens_at_spec80 = summarize_metric(collect(&SplitEval::sens80));
  row.sens_at_spec90 = summarize_metric(collect(&SplitEval::sens90));
  row.bal_acc_05 = summarize_metric(collect(&SplitEval::balacc05));
  const auto balacc = collect(&SplitEval::balacc05);
  if (draws >= 2 && !balacc.empty()) {
    row.fit = model_fit_test(balacc);
    row.fit_applicable = true;
  }
  return row;
}

void confidence_rows(const std::string& model, const char* split,
                     const std::vector<std::vector<std::pair<std::size_t, VoteCount>>*>&
                         per_fold_votes,
                     const ClusteredDataset& data,
                     std::vector<ConfidenceRow>& out_rows) {
  std::map<std::size_t, VoteCount> merged;
  for (const auto* fold_votes : per_fold_votes) {
    for (const auto& [row, vc] : *fold_votes) {
      merged[row].c0 += vc.c0;
      merged[row].c1 += vc.c1;
    }
  }
  if (merged.empty()) return;
  std::vector<ConfidenceRecord> records;
  double conf_sum = 0.0;
  std::size_t n_correct = 0;
  for (const auto& [row, vc] : merged) {
    const Vote v = prediction_confidence(vc);
    ConfidenceRecord rec;
    rec.subject = row;
    rec.predicted = v.predicted;
    rec.label = data.y[row] > 0.5 ? 1 : 0;
    rec.confidence = v.confidence;
    rec.tie = v.tie;
    rec.correct = rec.predicted == rec.label;
    conf_sum += rec.confidence;
    n_correct += rec.correct ? 1 : 0;
    records.push_back(rec);
  }
  ConfidenceRow row;
  row.model = model;
  row.split = split;
  row.n_subjects = records.size();
  row.accuracy = static_cast<double>(n_correct) / static_cast<double>(records.size());
  row.mean_confidence = conf_sum / static_cast<double>(records.size());
  row.cmp = calibration_compare(records);
  out_rows.push_back(std::move(row));
}

ExperimentReport aggregate(const ExperimentConfig& cfg,
                           const std::vector<BackendSpec>& backends,
                           const ClusteredDataset& data,
                           const std::vector<FoldResult>& folds) {
  ExperimentReport report;
  report.config = cfg;
  report.hash = config_hash(cfg);
  report.n_rows = data.n_rows();
  report.n_features = data.n_features();
  report.n_clusters = data.n_clusters();
  report.n_seen_clusters = data.n_seen_clusters;
  for (std::size_t c = 0; c < data.n_features(); ++c) {
    if (data.is_probe[c]) report.probe_features.push_back(data.feature_names[c]);
  }

  std::vector<std::string> names = {"baseline"};
  for (const auto& bk : backends) names.push_back(bk.name);
  report.models = names;

  for (std::size_t m = 0; m < names.size(); ++m) {
    const std::size_t draws = m == 0 ? 1 : cfg.draws;

    bool failed = false;
    for (std::size_t f = 0; f < folds.size(); ++f) {
      if (folds[f].models[m].failed) {
        failed = true;
        report.failures.push_back({names[m], f, folds[f].models[m].error});
      }
    }
    if (failed) continue;

    // performance
    for (const char* split : {kSplitSeen, kSplitUnseen}) {
      std::vector<const SplitEval*> evals;
      for (const auto& fr : folds) {
        const ModelFold& mf = fr.models[m];
        evals.push_back(split == kSplitSeen ? &mf.seen : &mf.unseen);
      }
      bool any_usable = false;
      for (const SplitEval* ev : evals) any_usable |= ev->usable;
      if (!any_usable) continue;
      report.performance.push_back(performance_row(names[m], split, evals, draws));
    }

    // covariates
    for (std::size_t e = 0; e < kEffects.size(); ++e) {
      for (std::size_t a = 0; a < kAveragings.size(); ++a) {
        const std::size_t combo = e * 2 + a;
        std::vector<CovariateRow> rows;
        for (std::size_t feat = 0; feat < data.n_features(); ++feat) {
          CovariateRow row;
          row.model = names[m];
          row.effect = effect_name(kEffects[e]);
          row.averaging = averaging_name(kAveragings[a]);
          row.feature = data.feature_names[feat];
          row.is_probe = data.is_probe[feat];
          if (draws >= 2) {
            std::vector<FoldStat> stats;
            for (const auto& fr : folds) {
              const Matrix& cm = fr.models[m].coef[combo];
              std::vector<double> vals;
              vals.reserve(cm.rows);
              for (std::size_t s = 0; s < cm.rows; ++s) vals.push_back(cm(s, feat));
              stats.push_back(FoldStat::from(vals));
            }
            row.stat = pool_fold_stats(stats, Tail::two_sided);
            row.coef = row.stat.mean;
            row.stat_applicable = true;
          } else {
            double acc = 0.0;
            for (const auto& fr : folds) acc += fr.models[m].coef[combo](0, feat);
            row.coef = acc / static_cast<double>(folds.size());
            row.stat.mean = row.coef;
            row.stat.se = kNaN;
            row.stat.df = kNaN;
            row.stat.t = kNaN;
            row.stat.p = kNaN;
            row.stat.ci_lo = kNaN;
            row.stat.ci_hi = kNaN;
          }
          rows.push_back(std::move(row));
        }
        std::vector<std::size_t> order(rows.size());
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) {
          return std::fabs(rows[x].coef) > std::fabs(rows[y].coef);
        });
        for (std::size_t r = 0; r < order.size(); ++r) {
          rows[order[r]].rank = r + 1;
        }
        for (auto& row : rows) report.covariates.push_back(std::move(row));
      }
    }

    // confidence
    auto votes_view = [&](std::vector<std::pair<std::size_t, VoteCount>> ModelFold::*mem) {
      std::vector<std::vector<std::pair<std::size_t, VoteCount>>*> out;
      for (const auto& fr : folds) {
        out.push_back(const_cast<std::vector<std::pair<std::size_t, VoteCount>>*>(
            &(fr.models[m].*mem)));
      }
      return out;
    };
    confidence_rows(names[m], kSplitTrain, votes_view(&ModelFold::votes_train), data,
                    report.confidence);
    confidence_rows(names[m], kSplitSeen, votes_view(&ModelFold::votes_seen), data,
                    report.confidence);
    confidence_rows(names[m], kSplitUnseen, votes_view(&ModelFold::votes_unseen), data,
                    report.confidence);

    // timing
    TimingRow tr;
    tr.model = names[m];
    tr.folds = folds.size();
    for (const auto& fr : folds) {
      tr.train_s_total += fr.models[m].train_seconds;
      tr.infer_s_total += fr.models[m].infer_seconds;
    }
    tr.train_s_mean = tr.train_s_total / static_cast<double>(folds.size());
    tr.infer_s_mean = tr.infer_s_total / static_cast<double>(folds.size());
    report.timing.push_back(tr);
  }
  return report;
}

}  // namespace

// ----------------------------------------------------------------------
// configuration surface
// ----------------------------------------------------------------------

std::string canonical_config_string(const ExperimentConfig& cfg) {
  return config_to_json(cfg).dump();
}

std::uint64_t config_hash(const ExperimentConfig& cfg) {
  return hash_name(canonical_config_string(cfg));
}

ExperimentConfig load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) {
    throw DataError("cannot open config file '" + path + "'");
  }
  json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw ConfigError("config file '" + path + "' is not valid JSON: " + e.what());
  }
  return config_from_json(j, "config file '" + path + "'");
}

void save_config_file(const ExperimentConfig& cfg, const std::string& path) {
  std::ofstream out(path);
  if (!out) {
    throw DataError("cannot open '" + path + "' for writing");
  }
  out << config_to_json(cfg).dump(2) << '\n';
}

std::vector<BackendSpec> validate_config(const ExperimentConfig& cfg) {
  if (!cfg.seed_set) {
    throw ConfigError("a seed is required (--seed or the config 'seed' field)");
  }
  if (cfg.folds < 2) {
    throw ConfigError("cross-validation needs at least 2 folds");
  }
  if (cfg.draws < 1) {
    throw ConfigError("draw count must be at least 1");
  }
  if (!(cfg.lr > 0.0) || !(cfg.zpred_lr > 0.0)) {
    throw ConfigError("learning rates must be positive");
  }
  if (!(cfg.weights.fixed > 0.0) || !(cfg.weights.mixed > 0.0)) {
    throw ConfigError("fixed and mixed loss weights must be positive");
  }
  if (cfg.weights.adversary < 0.0) {
    throw ConfigError("the adversarial loss weight must be non-negative");
  }
  if (cfg.dropout < 0.0 || cfg.dropout >= 1.0) {
    throw ConfigError("train dropout must lie in [0, 1)");
  }
  if (cfg.swag_epochs < 2) {
    throw ConfigError("SWAG needs at least 2 collection epochs");
  }
  if (cfg.dataset.source != "generate" && cfg.dataset.source != "csv") {
    throw ConfigError("dataset source must be 'generate' or 'csv'");
  }
  if (cfg.dataset.source == "csv" && cfg.dataset.csv_path.empty()) {
    throw ConfigError("dataset source 'csv' needs a csv path");
  }
  if (cfg.unseen_strategy != "zpred-soft" && cfg.unseen_strategy != "fe-only") {
    throw ConfigError("unseen_strategy must be 'zpred-soft' or 'fe-only'");
  }
  grad_target_from_string(cfg.grad_target);

  std::vector<BackendSpec> backends;
  for (const auto& token : cfg.backends) {
    if (token == "baseline") continue;  // always present
    BackendSpec bk = parse_backend(token, cfg.allow_custom);
    for (const auto& other : backends) {
      if (other.name == bk.name) {
        throw ConfigError("backend '" + token + "' is listed twice");
      }
    }
    backends.push_back(std::move(bk));
  }
  return backends;
}

ClusteredDataset resolve_dataset(const ExperimentConfig& cfg) {
  if (cfg.dataset.source == "csv") {
    return load_csv(cfg.dataset.csv_path, cfg.dataset.sidecar_path);
  }
  GeneratorConfig g = cfg.dataset.generator;
  g.seed = derive_seed(cfg.seed, "dataset");
  return generate(g);
}

// ----------------------------------------------------------------------
// pipeline
// ----------------------------------------------------------------------

ExperimentReport run_experiment(const ExperimentConfig& cfg) {
  const std::vector<BackendSpec> backends = validate_config(cfg);
  const ClusteredDataset data = resolve_dataset(cfg);
  const FoldPlan plan = plan_folds(data, cfg.folds, derive_seed(cfg.seed, "fold-plan"));
  const GradTarget target = grad_target_from_string(cfg.grad_target);

  std::string models_dir;
  if (!cfg.out_dir.empty()) {
    std::filesystem::create_directories(cfg.out_dir);
    models_dir = cfg.out_dir + "/models";
    std::filesystem::create_directories(models_dir);
    save_csv(data, cfg.out_dir + "/dataset.csv", cfg.out_dir + "/dataset.sidecar.json");
    save_config_file(cfg, cfg.out_dir + "/config.json");
  }

  std::vector<FoldResult> folds(cfg.folds);
  if (cfg.parallel) {
    std::vector<std::future<FoldResult>> futures;
    for (std::size_t f = 0; f < cfg.folds; ++f) {
      futures.push_back(std::async(std::launch::async, [&, f] {
        return run_fold(data, plan, f, cfg, backends, target, models_dir);
      }));
    }
    for (std::size_t f = 0; f < cfg.folds; ++f) {
      folds[f] = futures[f].get();
    }
  } else {
    for (std::size_t f = 0; f < cfg.folds; ++f) {
      folds[f] = run_fold(data, plan, f, cfg, backends, target, models_dir);
    }
  }
  return aggregate(cfg, backends, data, folds);
}

ExperimentReport reemit_from_saved(const std::string& dir) {
  ExperimentConfig cfg = load_config_file(dir + "/config.json");
  cfg.out_dir = dir;
  const std::vector<BackendSpec> backends = validate_config(cfg);
  const ClusteredDataset data =
      load_csv(dir + "/dataset.csv", dir + "/dataset.sidecar.json");
  const FoldPlan plan = plan_folds(data, cfg.folds, derive_seed(cfg.seed, "fold-plan"));
  const GradTarget target = grad_target_from_string(cfg.grad_target);
  const bool fe_only = cfg.unseen_strategy == "fe-only";

  std::vector<std::string> names = {"baseline"};
  for (const auto& bk : backends) names.push_back(bk.name);

  std::vector<FoldResult> folds(cfg.folds);
  for (std::size_t f = 0; f < cfg.folds; ++f) {
    folds[f].models.resize(names.size());
    const Batch train = data.make_batch(plan.train_rows[f]);
    const Batch test = data.make_batch(plan.test_rows[f]);
    const Matrix unseen_x = data.features_of(plan.unseen_rows);
    const std::vector<double> unseen_labels = data.labels_of(plan.unseen_rows);
    const std::vector<double> test_labels = data.labels_of(plan.test_rows[f]);
    for (std::size_t m = 0; m < names.size(); ++m) {
      const std::string path =
          dir + "/models/" + names[m] + "-fold" + std::to_string(f) + ".json";
      try {
        const PosteriorSampler sampler = load_sampler(path);
        folds[f].models[m] = evaluate_sampler(
            sampler, train, plan.train_rows[f], test, plan.test_rows[f], unseen_x,
            unseen_labels, plan.unseen_rows, test_labels, fe_only, target);
      } catch (const std::exception& e) {
        folds[f].models[m].failed = true;
        folds[f].models[m].error = e.what();
      }
    }
  }
  return aggregate(cfg, backends, data, folds);
}

// ----------------------------------------------------------------------
// emission
// ----------------------------------------------------------------------

namespace {

json summary_to_json(const MetricSummary& ms) {
  return json{{"mean", num_or_null(ms.mean)},
              {"lo", num_or_null(ms.lo)},
              {"hi", num_or_null(ms.hi)}};
}

json pooled_to_json(const PooledStat& ps) {
  return json{{"mean", num_or_null(ps.mean)}, {"se", num_or_null(ps.se)},
              {"df", num_or_null(ps.df)},     {"t", num_or_null(ps.t)},
              {"p", num_or_null(ps.p)},       {"ci_lo", num_or_null(ps.ci_lo)},
              {"ci_hi", num_or_null(ps.ci_hi)}};
}

}  // namespace

std::string report_json(const ExperimentReport& report) {
  json j;
  j["format_version"] = 1;
  j["version"] = kVersion;
  j["config"] = json::parse(canonical_config_string(report.config));
  {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%016llx",
                  static_cast<unsigned long long>(report.hash));
    j["config_hash"] = buf;
  }
  j["dataset"] = {{"rows", report.n_rows},
                  {"features", report.n_features},
                  {"clusters", report.n_clusters},
                  {"seen_clusters", report.n_seen_clusters},
                  {"probe_columns", report.probe_features}};
  j["metadata"] = {{"unseen_strategy", report.config.unseen_strategy},
                   {"confidence_pooling", "vote-sum"},
                   {"grad_target", report.config.grad_target},
                   {"decision_threshold", 0.5}};
  j["models"] = report.models;
  j["failures"] = json::array();
  for (const auto& fail : report.failures) {
    j["failures"].push_back(
        {{"model", fail.model}, {"fold", fail.fold}, {"error", fail.error}});
  }
  j["performance"] = json::array();
  for (const auto& row : report.performance) {
    json r{{"model", row.model},
           {"split", row.split},
           {"n_folds", row.n_folds},
           {"auroc", summary_to_json(row.auroc)},
           {"bal_acc_youden", summary_to_json(row.bal_acc_youden)},
           {"sens_youden", summary_to_json(row.sens_youden)},
           {"spec_youden", summary_to_json(row.spec_youden)},
           {"sens_at_spec80", summary_to_json(row.sens_at_spec80)},
           {"sens_at_spec90", summary_to_json(row.sens_at_spec90)},
           {"bal_acc_05", summary_to_json(row.bal_acc_05)}};
    r["fit"] = row.fit_applicable ? pooled_to_json(row.fit) : json(nullptr);
    j["performance"].push_back(std::move(r));
  }
  j["covariates"] = json::array();
  for (const auto& row : report.covariates) {
    json r{{"model", row.model},       {"effect", row.effect},
           {"averaging", row.averaging}, {"feature", row.feature},
           {"is_probe", row.is_probe},   {"coef", num_or_null(row.coef)},
           {"rank", row.rank}};
    r["stat"] = row.stat_applicable ? pooled_to_json(row.stat) : json(nullptr);
    j["covariates"].push_back(std::move(r));
  }
  j["confidence"] = json::array();
  for (const auto& row : report.confidence) {
    json r{{"model", row.model},
           {"split", row.split},
           {"n_subjects", row.n_subjects},
           {"accuracy", num_or_null(row.accuracy)},
           {"mean_confidence", num_or_null(row.mean_confidence)},
           {"applicable", row.cmp.applicable}};
    if (row.cmp.applicable) {
      r["mean_correct"] = num_or_null(row.cmp.mean_correct);
      r["mean_incorrect"] = num_or_null(row.cmp.mean_incorrect);
      r["difference"] = num_or_null(row.cmp.difference);
      r["t"] = num_or_null(row.cmp.t);
      r["df"] = num_or_null(row.cmp.df);
      r["p"] = num_or_null(row.cmp.p);
    }
    j["confidence"].push_back(std::move(r));
  }
  return j.dump(2) + "\n";
}

void emit_reports(const ExperimentReport& report, const std::string& dir) {
  std::filesystem::create_directories(dir);
  auto open = [&](const char* name) {
    std::ofstream out(dir + "/" + name);
    if (!out) {
      throw DataError("cannot open '" + dir + "/" + name + "' for writing");
    }
    return out;
  };

  {
    auto out = open("performance.csv");
    out << "model,split,n_folds";
    for (const char* metric : {"auroc", "bal_acc_youden", "sens_youden", "spec_youden",
                               "sens_at_spec80", "sens_at_spec90", "bal_acc_05"}) {
      out << ',' << metric << ',' << metric << "_lo," << metric << "_hi";
    }
    out << ",fit_t,fit_df,fit_p\n";
    for (const auto& row : report.performance) {
      out << row.model << ',' << row.split << ',' << row.n_folds;
      for (const MetricSummary* ms :
           {&row.auroc, &row.bal_acc_youden, &row.sens_youden, &row.spec_youden,
            &row.sens_at_spec80, &row.sens_at_spec90, &row.bal_acc_05}) {
        out << ',' << fmt_csv(ms->mean) << ',' << fmt_csv(ms->lo) << ','
            << fmt_csv(ms->hi);
      }
      if (row.fit_applicable) {
        out << ',' << fmt_csv(row.fit.t) << ',' << fmt_csv(row.fit.df) << ','
            << fmt_csv(row.fit.p) << '\n';
      } else {
        out << ",NA,NA,NA\n";
      }
    }
  }
  {
    auto out = open("covariates.csv");
    out << "model,effect,averaging,feature,is_probe,coef,se,df,t,p,ci_lo,ci_hi,rank\n";
    for (const auto& row : report.covariates) {
      out << row.model << ',' << row.effect << ',' << row.averaging << ','
          << row.feature << ',' << (row.is_probe ? 1 : 0) << ',' << fmt_csv(row.coef);
      if (row.stat_applicable) {
        out << ',' << fmt_csv(row.stat.se) << ',' << fmt_csv(row.stat.df) << ','
            << fmt_csv(row.stat.t) << ',' << fmt_csv(row.stat.p) << ','
            << fmt_csv(row.stat.ci_lo) << ',' << fmt_csv(row.stat.ci_hi);
      } else {
        out << ",NA,NA,NA,NA,NA,NA";
      }
      out << ',' << row.rank << '\n';
    }
  }
  {
    auto out = open("confidence.csv");
    out << "model,split,n_subjects,accuracy,mean_confidence,mean_correct,"
           "mean_incorrect,difference,t,df,p,applicable\n";
    for (const auto& row : report.confidence) {
      out << row.model << ',' << row.split << ',' << row.n_subjects << ','
          << fmt_csv(row.accuracy) << ',' << fmt_csv(row.mean_confidence);
      if (row.cmp.applicable) {
        out << ',' << fmt_csv(row.cmp.mean_correct) << ','
            << fmt_csv(row.cmp.mean_incorrect) << ',' << fmt_csv(row.cmp.difference)
            << ',' << fmt_csv(row.cmp.t) << ',' << fmt_csv(row.cmp.df) << ','
            << fmt_csv(row.cmp.p) << ",1\n";
      } else {
        out << ",NA,NA,NA,NA,NA,NA,0\n";
      }
    }
  }
  {
    auto out = open("timing.csv");
    out << "model,folds,train_s_total,train_s_mean,infer_s_total,infer_s_mean\n";
    for (const auto& row : report.timing) {
      out << row.model << ',' << row.folds << ',' << fmt_csv(row.train_s_total) << ','
          << fmt_csv(row.train_s_mean) << ',' << fmt_csv(row.infer_s_total) << ','
          << fmt_csv(row.infer_s_mean) << '\n';
    }
  }
  {
    auto out = open("report.json");
    out << report_json(report);
    if (!out) {
      throw DataError("failed while writing '" + dir + "/report.json'");
    }
  }
}

}  // namespace medl

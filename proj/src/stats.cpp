#include "medl/stats.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "medl/errors.hpp"

namespace medl {

namespace {

constexpr double kLogitEps = 1e-6;
constexpr double kInf = std::numeric_limits<double>::infinity();

struct ClassCounts {
  std::size_t pos = 0;
  std::size_t neg = 0;
};

ClassCounts count_classes(std::span<const double> labels, const char* where) {
  ClassCounts c;
  for (const double l : labels) {
    if (l == 1.0) {
      ++c.pos;
    } else if (l == 0.0) {
      ++c.neg;
    } else {
      throw DataError(std::string(where) + ": labels must be 0 or 1");
    }
  }
  if (c.pos == 0 || c.neg == 0) {
    throw DataError(std::string(where) + ": both classes required");
  }
  return c;
}

void check_sizes(std::span<const double> scores, std::span<const double> labels,
                 const char* where) {
  if (scores.size() != labels.size()) {
    throw DataError(std::string(where) + ": scores/labels size mismatch");
  }
  if (scores.empty()) {
    throw DataError(std::string(where) + ": empty input");
  }
}

}  // namespace

double auroc(std::span<const double> scores, std::span<const double> labels) {
  check_sizes(scores, labels, "auroc");
  const ClassCounts counts = count_classes(labels, "auroc");

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  // Average ranks within tie groups give tied pairs 1/2 credit.
  double rank_sum_pos = 0.0;
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      ++j;
    }
    const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);  // 1-based
    for (std::size_t k = i; k < j; ++k) {
      if (labels[order[k]] == 1.0) {
        rank_sum_pos += avg_rank;
      }
    }
    i = j;
  }
  const double n1 = static_cast<double>(counts.pos);
  const double n0 = static_cast<double>(counts.neg);
  const double u = rank_sum_pos - n1 * (n1 + 1.0) / 2.0;
  return u / (n1 * n0);
}

namespace {

struct SweepPoint {
  double threshold = 0.0;
  double sens = 0.0;
  double spec = 0.0;
};

// Operating points for "predict positive iff score >= threshold", thresholds
// ascending through the unique scores and ending at +inf.
std::vector<SweepPoint> threshold_sweep(std::span<const double> scores,
                                        std::span<const double> labels,
                                        const ClassCounts& counts) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  std::vector<SweepPoint> points;
  const double n1 = static_cast<double>(counts.pos);
  const double n0 = static_cast<double>(counts.neg);
  std::size_t pos_below = 0;
  std::size_t neg_below = 0;
  std::size_t i = 0;
  while (i < order.size()) {
    const double threshold = scores[order[i]];
    points.push_back({threshold,
                      (n1 - static_cast<double>(pos_below)) / n1,
                      static_cast<double>(neg_below) / n0});
    while (i < order.size() && scores[order[i]] == threshold) {
      if (labels[order[i]] == 1.0) {
        ++pos_below;
      } else {
        ++neg_below;
      }
      ++i;
    }
  }
  points.push_back({kInf, 0.0, 1.0});
  return points;
}

}  // namespace

OperatingPoint youden_operating_point(std::span<const double> scores,
                                      std::span<const double> labels) {
  check_sizes(scores, labels, "youden_operating_point");
  const ClassCounts counts = count_classes(labels, "youden_operating_point");
  const auto points = threshold_sweep(scores, labels, counts);

  OperatingPoint best;
  bool first = true;
  for (const SweepPoint& pt : points) {
    const double j = pt.sens + pt.spec - 1.0;
    if (first || j > best.youden_j) {  // strict: ties keep the lower threshold
      best = {pt.threshold, pt.sens, pt.spec, 0.5 * (pt.sens + pt.spec), j};
      first = false;
    }
  }
  return best;
}

double sens_at_spec(std::span<const double> scores, std::span<const double> labels,
                    double spec_target) {
  if (spec_target < 0.0 || spec_target > 1.0) {
    throw ConfigError("sens_at_spec: target must lie in [0, 1]");
  }
  check_sizes(scores, labels, "sens_at_spec");
  const ClassCounts counts = count_classes(labels, "sens_at_spec");
  for (const SweepPoint& pt : threshold_sweep(scores, labels, counts)) {
    if (pt.spec >= spec_target) {
      return pt.sens;  // thresholds ascend, so the first hit is the smallest
    }
  }
  return 0.0;  // unreachable: the +inf point has specificity 1
}

double balanced_accuracy_at(std::span<const double> scores,
                            std::span<const double> labels, double threshold) {
  check_sizes(scores, labels, "balanced_accuracy_at");
  const ClassCounts counts = count_classes(labels, "balanced_accuracy_at");
  std::size_t tp = 0;
  std::size_t tn = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const bool predicted_pos = scores[i] >= threshold;
    if (labels[i] == 1.0 && predicted_pos) {
      ++tp;
    }
    if (labels[i] == 0.0 && !predicted_pos) {
      ++tn;
    }
  }
  const double sens = static_cast<double>(tp) / static_cast<double>(counts.pos);
  const double spec = static_cast<double>(tn) / static_cast<double>(counts.neg);
  return 0.5 * (sens + spec);
}

double logit_transform(double p, bool* clamped) {
  if (!std::isfinite(p)) {
    throw NumericError("logit_transform: non-finite input");
  }
  double q = p;
  if (q < kLogitEps) {
    q = kLogitEps;
  } else if (q > 1.0 - kLogitEps) {
    q = 1.0 - kLogitEps;
  }
  if (clamped != nullptr && q != p) {
    *clamped = true;
  }
  return std::log(q / (1.0 - q));
}

FoldStat FoldStat::from(std::span<const double> values) {
  if (values.size() < 2) {
    throw DataError("FoldStat: need at least two values per fold");
  }
  const double n = static_cast<double>(values.size());
  double mean = 0.0;
  for (const double v : values) {
    mean += v;
  }
  mean /= n;
  double ss = 0.0;
  for (const double v : values) {
    ss += (v - mean) * (v - mean);
  }
  return {mean, ss / (n - 1.0), values.size()};
}

SatterthwaiteResult satterthwaite_pool(std::span<const FoldStat> folds) {
  if (folds.empty()) {
    throw DataError("satterthwaite_pool: no folds");
  }
  double sum_ratio = 0.0;    // sum s_i^2 / n_i
  double sum_sq_term = 0.0;  // sum (s_i^2/n_i)^2 / (n_i - 1)
  double df_fallback = 0.0;
  for (const FoldStat& f : folds) {
    if (f.n < 2) {
      throw DataError("satterthwaite_pool: every fold needs n >= 2");
    }
    if (f.var < 0.0) {
      throw DataError("satterthwaite_pool: negative variance");
    }
    const double ni = static_cast<double>(f.n);
    const double ratio = f.var / ni;
    sum_ratio += ratio;
    sum_sq_term += ratio * ratio / (ni - 1.0);
    df_fallback += ni - 1.0;
  }
  SatterthwaiteResult r;
  r.se = std::sqrt(sum_ratio);
  if (sum_sq_term == 0.0) {
    r.df = df_fallback;
    r.zero_variance = true;
  } else {
    r.df = sum_ratio * sum_ratio / sum_sq_term;
  }
  return r;
}

namespace {

double tail_p(double t, double df, Tail tail) {
  switch (tail) {
    case Tail::greater:
      return student_t_sf(t, df);
    case Tail::two_sided:
      return 2.0 * student_t_sf(std::fabs(t), df);
  }
  return 1.0;
}

PooledStat finish_pooled(double mean, double se_mean, double df, Tail tail,
                         double null_value, std::size_t n_folds, bool zero_variance) {
  PooledStat out;
  out.mean = mean;
  out.se = se_mean;
  out.df = df;
  out.n_folds = n_folds;
  out.zero_variance = zero_variance;
  const double delta = mean - null_value;
  if (se_mean == 0.0) {
    out.t = delta == 0.0 ? 0.0 : (delta > 0.0 ? kInf : -kInf);
  } else {
    out.t = delta / se_mean;
  }
  out.p = tail_p(out.t, df, tail);
  const double tq = student_t_quantile(0.975, df);
  out.ci_lo = mean - tq * se_mean;
  out.ci_hi = mean + tq * se_mean;
  return out;
}

}  // namespace

PooledStat pool_fold_stats(std::span<const FoldStat> folds, Tail tail,
                           double null_value) {
  const SatterthwaiteResult sw = satterthwaite_pool(folds);
  double grand = 0.0;
  for (const FoldStat& f : folds) {
    grand += f.mean;
  }
  const double k = static_cast<double>(folds.size());
  grand /= k;
  // Equal weights 1/k: the combined SE scales by 1/k, the df is unchanged.
  return finish_pooled(grand, sw.se / k, sw.df, tail, null_value, folds.size(),
                       sw.zero_variance);
}

PooledStat welch_two_sided(std::span<const double> a, std::span<const double> b) {
  const FoldStat fa = FoldStat::from(a);
  const FoldStat fb = FoldStat::from(b);
  const FoldStat groups[2] = {fa, fb};
  const SatterthwaiteResult sw = satterthwaite_pool(groups);
  // Weights (1, -1): the raw Satterthwaite SE applies to the difference.
  return finish_pooled(fa.mean - fb.mean, sw.se, sw.df, Tail::two_sided, 0.0, 2,
                       sw.zero_variance);
}

PooledStat model_fit_test(const std::vector<std::vector<double>>& bacc_per_fold) {
  if (bacc_per_fold.empty()) {
    throw DataError("model_fit_test: no folds");
  }
  bool clamped = false;
  std::vector<FoldStat> folds;
  folds.reserve(bacc_per_fold.size());
  std::vector<double> transformed;
  for (const auto& draws : bacc_per_fold) {
    transformed.clear();
    transformed.reserve(draws.size());
    for (const double bacc : draws) {
      transformed.push_back(logit_transform(bacc, &clamped));
    }
    folds.push_back(FoldStat::from(transformed));
  }
  PooledStat out = pool_fold_stats(folds, Tail::greater, 0.0);
  out.clamped = clamped;
  return out;
}

// ----------------------------------------------------------------------
// Student-t via the regularized incomplete beta function
// ----------------------------------------------------------------------

namespace {

double betacf(double a, double b, double x) {
  constexpr int kMaxIter = 500;
  constexpr double kEps = 1e-15;
  constexpr double kFpMin = 1e-300;

  const double qab = a + b;
  const double qap = a + 1.0;
  const double qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::fabs(d) < kFpMin) {
    d = kFpMin;
  }
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= kMaxIter; ++m) {
    const int m2 = 2 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::fabs(d) < kFpMin) {
      d = kFpMin;
    }
    c = 1.0 + aa / c;
    if (std::fabs(c) < kFpMin) {
      c = kFpMin;
    }
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::fabs(d) < kFpMin) {
      d = kFpMin;
    }
    c = 1.0 + aa / c;
    if (std::fabs(c) < kFpMin) {
      c = kFpMin;
    }
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::fabs(del - 1.0) < kEps) {
      return h;
    }
  }
  throw NumericError("incomplete_beta: continued fraction did not converge");
}

}  // namespace

double incomplete_beta(double a, double b, double x) {
  if (a <= 0.0 || b <= 0.0) {
    throw ConfigError("incomplete_beta: a and b must be positive");
  }
  if (x < 0.0 || x > 1.0) {
    throw ConfigError("incomplete_beta: x must lie in [0, 1]");
  }
  if (x == 0.0) {
    return 0.0;
  }
  if (x == 1.0) {
    return 1.0;
  }
  const double ln_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) +
                          a * std::log(x) + b * std::log1p(-x);
  const double front = std::exp(ln_front);
  if (x < (a + 1.0) / (a + b + 2.0)) {
    return front * betacf(a, b, x) / a;
  }
  return 1.0 - front * betacf(b, a, 1.0 - x) / b;
}

double student_t_sf(double t, double df) {
  if (!(df > 0.0)) {
    throw ConfigError("student_t_sf: df must be positive");
  }
  if (std::isnan(t)) {
    throw NumericError("student_t_sf: t is NaN");
  }
  if (std::isinf(t)) {
    return t > 0.0 ? 0.0 : 1.0;
  }
  const double x = df / (df + t * t);
  const double half_tail = 0.5 * incomplete_beta(0.5 * df, 0.5, x);
  return t >= 0.0 ? half_tail : 1.0 - half_tail;
}

double student_t_quantile(double prob, double df) {
  if (!(df > 0.0)) {
    throw ConfigError("student_t_quantile: df must be positive");
  }
  if (prob <= 0.0 || prob >= 1.0) {
    throw ConfigError("student_t_quantile: prob must lie in (0, 1)");
  }
  if (prob == 0.5) {
    return 0.0;
  }
  if (prob < 0.5) {
    return -student_t_quantile(1.0 - prob, df);
  }
  const double target = 1.0 - prob;  // sf(t) = target, t > 0
  double lo = 0.0;
  double hi = 1.0;
  while (student_t_sf(hi, df) > target) {
    hi *= 2.0;
    if (hi > 1e300) {
      throw NumericError("student_t_quantile: bracket expansion failed");
    }
  }
  for (int iter = 0; iter < 200; ++iter) {
    const double mid = 0.5 * (lo + hi);
    if (student_t_sf(mid, df) > target) {
      lo = mid;
    } else {
      hi = mid;
    }
    if (hi - lo <= 1e-13 * std::max(1.0, hi)) {
      break;
    }
  }
  return 0.5 * (lo + hi);
}

// ----------------------------------------------------------------------
// vote-based confidence
// ----------------------------------------------------------------------

VoteCount sum_votes(std::span<const VoteCount> per_fold) {
  if (per_fold.empty()) {
    throw DataError("sum_votes: no folds");
  }
  VoteCount total;
  for (const VoteCount& v : per_fold) {
    total.c0 += v.c0;
    total.c1 += v.c1;
  }
  return total;
}

Vote prediction_confidence(VoteCount votes) {
  const std::size_t total = votes.total();
  if (total == 0) {
    throw DataError("prediction_confidence: no votes");
  }
  Vote v;
  v.tie = votes.c0 == votes.c1;
  v.predicted = votes.c1 > votes.c0 ? 1 : 0;  // ties resolve to class 0
  v.confidence =
      static_cast<double>(std::max(votes.c0, votes.c1)) / static_cast<double>(total);
  return v;
}

CalibrationComparison calibration_compare(std::span<const ConfidenceRecord> records) {
  CalibrationComparison out;
  std::vector<double> correct;
  std::vector<double> incorrect;
  for (const ConfidenceRecord& r : records) {
    (r.correct ? correct : incorrect).push_back(r.confidence);
  }
  out.n_correct = correct.size();
  out.n_incorrect = incorrect.size();
  const auto mean = [](const std::vector<double>& v) {
    if (v.empty()) {
      return 0.0;
    }
    double s = 0.0;
    for (const double x : v) {
      s += x;
    }
    return s / static_cast<double>(v.size());
  };
  out.mean_correct = mean(correct);
  out.mean_incorrect = mean(incorrect);
  out.difference = out.mean_correct - out.mean_incorrect;
  if (correct.size() < 2 || incorrect.size() < 2) {
    return out;  // not applicable: too few members in a group
  }
  const PooledStat welch = welch_two_sided(correct, incorrect);
  out.t = welch.t;
  out.df = welch.df;
  out.p = welch.p;
  out.applicable = true;
  return out;
}

}  // namespace medl

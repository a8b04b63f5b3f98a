#ifndef MEDL_STATS_HPP
#define MEDL_STATS_HPP

#include <cstddef>
#include <span>
#include <vector>

namespace medl {

// ----------------------------------------------------------------------
// threshold-free and operating-point metrics
// ----------------------------------------------------------------------

// Mann-Whitney AUROC; tied score pairs count 1/2. Labels must contain both
// classes.
double auroc(std::span<const double> scores, std::span<const double> labels);

struct OperatingPoint {
  double threshold = 0.0;  // predict positive iff score >= threshold
  double sensitivity = 0.0;
  double specificity = 0.0;
  double balanced_accuracy = 0.0;
  double youden_j = 0.0;
};

// Maximizes J = sensitivity + specificity - 1 over thresholds; exact ties go
// to the lowest threshold.
OperatingPoint youden_operating_point(std::span<const double> scores,
                                      std::span<const double> labels);

// Sensitivity at the smallest threshold whose specificity reaches the target.
// An unreachable target resolves to threshold +inf, i.e. sensitivity 0.
double sens_at_spec(std::span<const double> scores, std::span<const double> labels,
                    double spec_target);

double balanced_accuracy_at(std::span<const double> scores,
                            std::span<const double> labels, double threshold);

// log(p / (1-p)) with p clamped into [eps, 1-eps], eps = 1e-6. If clamped is
// non-null it is set when the clamp fired.
double logit_transform(double p, bool* clamped = nullptr);

// ----------------------------------------------------------------------
// pooled inference across folds
// ----------------------------------------------------------------------

struct FoldStat {
  double mean = 0.0;
  double var = 0.0;  // sample variance (n-1 denominator)
  std::size_t n = 0;

  static FoldStat from(std::span<const double> values);
};

struct SatterthwaiteResult {
  double se = 0.0;  // sqrt(sum_i s_i^2 / n_i)
  double df = 0.0;
  bool zero_variance = false;  // all folds degenerate; df fell back to sum(n_i - 1)
};

// Pooled standard error and effective degrees of freedom for a unit-weight
// combination of the fold means. Requires every fold n >= 2.
SatterthwaiteResult satterthwaite_pool(std::span<const FoldStat> folds);

enum class Tail { greater, two_sided };

struct PooledStat {
  double mean = 0.0;  // grand mean of fold means (or group difference)
  double se = 0.0;    // standard error of `mean`
  double df = 0.0;
  double t = 0.0;
  double p = 1.0;
  double ci_lo = 0.0;
  double ci_hi = 0.0;
  std::size_t n_folds = 0;
  bool zero_variance = false;
  bool clamped = false;  // a logit transform hit its clamp
};

// t-test of the grand mean against null_value. The equal-weight combination
// scales the Satterthwaite SE by 1/k so the test stays calibrated; the df
// formula is unchanged (equal weights cancel).
PooledStat pool_fold_stats(std::span<const FoldStat> folds, Tail tail,
                           double null_value = 0.0);

// Welch two-sample two-sided t-test (difference a - b).
PooledStat welch_two_sided(std::span<const double> a, std::span<const double> b);

// One-sided test that the logit-transformed balanced accuracies exceed
// chance. One inner vector of per-draw balanced accuracies per fold.
PooledStat model_fit_test(const std::vector<std::vector<double>>& bacc_per_fold);

// ----------------------------------------------------------------------
// Student-t distribution
// ----------------------------------------------------------------------

// Survival function P(T > t) via the regularized incomplete beta function.
double student_t_sf(double t, double df);

// Inverse CDF (bisection on the survival function).
double student_t_quantile(double prob, double df);

// Regularized incomplete beta I_x(a, b) (Lentz continued fraction).
double incomplete_beta(double a, double b, double x);

// ----------------------------------------------------------------------
// vote-based confidence
// ----------------------------------------------------------------------

struct VoteCount {
  std::size_t c0 = 0;
  std::size_t c1 = 0;
  std::size_t total() const { return c0 + c1; }
};

VoteCount sum_votes(std::span<const VoteCount> per_fold);

struct Vote {
  int predicted = 0;
  double confidence = 0.0;  // max vote fraction
  bool tie = false;         // exact tie, broken to class 0
};

Vote prediction_confidence(VoteCount votes);

struct ConfidenceRecord {
  std::size_t subject = 0;
  int predicted = 0;
  int label = 0;
  double confidence = 0.0;
  bool tie = false;
  bool correct = false;
};

struct CalibrationComparison {
  double mean_correct = 0.0;
  double mean_incorrect = 0.0;
  double difference = 0.0;
  double t = 0.0;
  double df = 0.0;
  double p = 1.0;
  std::size_t n_correct = 0;
  std::size_t n_incorrect = 0;
  bool applicable = false;  // both groups need >= 2 members
};

CalibrationComparison calibration_compare(std::span<const ConfidenceRecord> records);

}  // namespace medl

#endif  // MEDL_STATS_HPP

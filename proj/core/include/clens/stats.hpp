#pragma once

namespace clens {

struct BinomialCi {
  int successes = 0;
  int trials = 0;
  double fraction = 0.0;
  double lo = 0.0;
  double hi = 1.0;
  bool one_sided = false;  // set when k==0 or k==n
};

double log_beta(double a, double b);
// Regularized incomplete beta I_x(a, b).
double incomplete_beta(double a, double b, double x);
// Inverse of I_x(a, b) in x.
double beta_quantile(double a, double b, double p);
double normal_quantile(double p);

// Exact (Clopper-Pearson) interval. Two-sided in the interior; at k==0 or
// k==n the informative bound is the one-sided exact bound at `confidence`.
BinomialCi clopper_pearson(int successes, int trials, double confidence = 0.95);

// Normal-approximation (Wald) interval, clamped to [0, 1].
BinomialCi wald_interval(int successes, int trials, double confidence = 0.95);

// Reporting convention used for localization rates: exact one-sided bound at
// the boundary counts, normal approximation in the interior.
BinomialCi binomial_ci(int successes, int trials, double confidence = 0.95);

}  // namespace clens

#include "clens/stats.hpp"

#include <cmath>
#include <stdexcept>

namespace clens {

double log_beta(double a, double b) {
  return std::lgamma(a) + std::lgamma(b) - std::lgamma(a + b);
}

namespace {

// Continued fraction for the incomplete beta (modified Lentz).
double beta_cf(double a, double b, double x) {
  constexpr int kMaxIter = 300;
  constexpr double kEps = 3e-16;
  constexpr double kFpMin = 1e-300;

  double qab = a + b, qap = a + 1.0, qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::fabs(d) < kFpMin) d = kFpMin;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= kMaxIter; ++m) {
    int m2 = 2 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::fabs(d) < kFpMin) d = kFpMin;
    c = 1.0 + aa / c;
    if (std::fabs(c) < kFpMin) c = kFpMin;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::fabs(d) < kFpMin) d = kFpMin;
    c = 1.0 + aa / c;
    if (std::fabs(c) < kFpMin) c = kFpMin;
    d = 1.0 / d;
    double del = d * c;
    h *= del;
    if (std::fabs(del - 1.0) < kEps) break;
  }
  return h;
}

}  // namespace

double incomplete_beta(double a, double b, double x) {
  if (a <= 0.0 || b <= 0.0) throw std::invalid_argument("incomplete_beta: a, b must be > 0");
  if (x <= 0.0) return 0.0;
  if (x >= 1.0) return 1.0;
  double log_front = a * std::log(x) + b * std::log1p(-x) - log_beta(a, b);
  double front = std::exp(log_front);
  if (x < (a + 1.0) / (a + b + 2.0)) {
    return front * beta_cf(a, b, x) / a;
  }
  return 1.0 - std::exp(b * std::log1p(-x) + a * std::log(x) - log_beta(b, a)) *
                   beta_cf(b, a, 1.0 - x) / b;
}

double beta_quantile(double a, double b, double p) {
  if (p <= 0.0) return 0.0;
  if (p >= 1.0) return 1.0;
  double lo = 0.0, hi = 1.0;
  for (int i = 0; i < 200; ++i) {
    double mid = 0.5 * (lo + hi);
    if (incomplete_beta(a, b, mid) < p) {
      lo = mid;
    } else {
      hi = mid;
    }
    if (hi - lo < 1e-14) break;
  }
  return 0.5 * (lo + hi);
}

double normal_quantile(double p) {
  // Acklam's rational approximation, |relative error| < 1.15e-9.
  if (p <= 0.0 || p >= 1.0) throw std::invalid_argument("normal_quantile: p in (0,1)");
  static const double a[] = {-3.969683028665376e+01, 2.209460984245205e+02,
                             -2.759285104469687e+02, 1.383577518672690e+02,
                             -3.066479806614716e+01, 2.506628277459239e+00};
  static const double b[] = {-5.447609879822406e+01, 1.615858368580409e+02,
                             -1.556989798598866e+02, 6.680131188771972e+01,
                             -1.328068155288572e+01};
  static const double c[] = {-7.784894002430293e-03, -3.223964580411365e-01,
                             -2.400758277161838e+00, -2.549732539343734e+00,
                             4.374664141464968e+00,  2.938163982698783e+00};
  static const double d[] = {7.784695709041462e-03, 3.224671290700398e-01,
                             2.445134137142996e+00, 3.754408661907416e+00};
  const double p_low = 0.02425, p_high = 1.0 - p_low;
  double q, r;
  if (p < p_low) {
    q = std::sqrt(-2.0 * std::log(p));
    return (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
           ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  }
  if (p <= p_high) {
    q = p - 0.5;
    r = q * q;
    return (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
           (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
  }
  q = std::sqrt(-2.0 * std::log(1.0 - p));
  return -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
         ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
}

namespace {

void check_counts(int k, int n) {
  if (n <= 0) throw std::invalid_argument("binomial interval: trials must be > 0");
  if (k < 0 || k > n) throw std::invalid_argument("binomial interval: successes out of range");
}

}  // namespace

BinomialCi clopper_pearson(int k, int n, double confidence) {
  check_counts(k, n);
  double alpha = 1.0 - confidence;
  BinomialCi ci;
  ci.successes = k;
  ci.trials = n;
  ci.fraction = double(k) / n;
  if (k == 0) {
    ci.lo = 0.0;
    ci.hi = beta_quantile(1, n, confidence);  // one-sided exact upper bound
    ci.one_sided = true;
  } else if (k == n) {
    ci.lo = beta_quantile(n, 1, alpha);  // one-sided exact lower bound
    ci.hi = 1.0;
    ci.one_sided = true;
  } else {
    ci.lo = beta_quantile(k, n - k + 1, alpha / 2.0);
    ci.hi = beta_quantile(k + 1, n - k, 1.0 - alpha / 2.0);
  }
  return ci;
}

BinomialCi wald_interval(int k, int n, double confidence) {
  check_counts(k, n);
  double z = normal_quantile(0.5 + confidence / 2.0);
  BinomialCi ci;
  ci.successes = k;
  ci.trials = n;
  ci.fraction = double(k) / n;
  double half = z * std::sqrt(ci.fraction * (1.0 - ci.fraction) / n);
  ci.lo = std::max(0.0, ci.fraction - half);
  ci.hi = std::min(1.0, ci.fraction + half);
  return ci;
}

BinomialCi binomial_ci(int k, int n, double confidence) {
  check_counts(k, n);
  if (k == 0 || k == n) return clopper_pearson(k, n, confidence);
  return wald_interval(k, n, confidence);
}

}  // namespace clens

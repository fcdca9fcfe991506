#include <doctest.h>

#include <initializer_list>

#include "clens/stats.hpp"

using namespace clens;

// Reference values computed independently with scipy.stats.beta.

TEST_CASE("incomplete beta against reference points") {
  CHECK(incomplete_beta(2, 3, 0.5) == doctest::Approx(0.6875).epsilon(1e-10));
  CHECK(incomplete_beta(5, 5, 0.5) == doctest::Approx(0.5).epsilon(1e-10));
  CHECK(incomplete_beta(95, 42, 0.698529) == doctest::Approx(0.542072).epsilon(1e-4));
}

TEST_CASE("beta quantile inverts the cdf") {
  for (double p : {0.025, 0.5, 0.975}) {
    double x = beta_quantile(7, 4, p);
    CHECK(incomplete_beta(7, 4, x) == doctest::Approx(p).epsilon(1e-9));
  }
}

TEST_CASE("normal quantile") {
  CHECK(normal_quantile(0.975) == doctest::Approx(1.959964).epsilon(1e-6));
  CHECK(normal_quantile(0.5) == doctest::Approx(0.0).scale(1.0).epsilon(1e-8));
  CHECK(normal_quantile(0.05) == doctest::Approx(-1.644854).epsilon(1e-6));
}

TEST_CASE("clopper-pearson interior interval") {
  BinomialCi ci = clopper_pearson(95, 136);
  CHECK(ci.fraction == doctest::Approx(0.698529).epsilon(1e-6));
  CHECK(ci.lo == doctest::Approx(0.613984).epsilon(1e-4));
  CHECK(ci.hi == doctest::Approx(0.774202).epsilon(1e-4));
  CHECK_FALSE(ci.one_sided);

  BinomialCi small = clopper_pearson(7, 10);
  CHECK(small.lo == doctest::Approx(0.347547).epsilon(1e-4));
  CHECK(small.hi == doctest::Approx(0.933260).epsilon(1e-4));
}

TEST_CASE("clopper-pearson boundary counts give one-sided exact bounds") {
  BinomialCi zero = clopper_pearson(0, 10);
  CHECK(zero.lo == 0.0);
  CHECK(zero.hi == doctest::Approx(0.258866).epsilon(1e-5));
  CHECK(zero.one_sided);

  BinomialCi full = clopper_pearson(136, 136);
  CHECK(full.hi == 1.0);
  CHECK(full.lo == doctest::Approx(0.978213).epsilon(1e-5));
}

TEST_CASE("wald interval matches the published rounding") {
  BinomialCi ci = wald_interval(95, 136);
  CHECK(ci.lo == doctest::Approx(0.621403).epsilon(1e-5));
  CHECK(ci.hi == doctest::Approx(0.775656).epsilon(1e-5));
}

TEST_CASE("binomial_ci reporting convention") {
  BinomialCi interior = binomial_ci(95, 136);
  CHECK(interior.lo == doctest::Approx(0.62).epsilon(0.01));
  CHECK(interior.hi == doctest::Approx(0.78).epsilon(0.01));
  BinomialCi boundary = binomial_ci(0, 10);
  CHECK(boundary.hi == doctest::Approx(0.26).epsilon(0.05));
  CHECK(binomial_ci(10, 10).fraction == 1.0);
  CHECK_THROWS(binomial_ci(-1, 10));
  CHECK_THROWS(binomial_ci(11, 10));
}

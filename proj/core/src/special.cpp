#include "ssdiff/special.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include <boost/math/special_functions/bessel.hpp>
#include <boost/math/special_functions/digamma.hpp>
#include <boost/math/special_functions/gamma.hpp>

namespace ssdiff::special {

namespace {

// Below this argument boost evaluates I_v directly without overflow.
constexpr double kDirectBesselLimit = 500.0;

double log_bessel_i_asymptotic(double v, double x) {
  const double mu = 4.0 * v * v;
  double term = 1.0;
  double sum = 1.0;
  for (int k = 1; k <= 12; ++k) {
    const double odd = 2.0 * k - 1.0;
    term *= -(mu - odd * odd) / (k * 8.0 * x);
    sum += term;
    if (std::abs(term) < 1e-17 * std::abs(sum)) break;
  }
  return x - 0.5 * std::log(2.0 * std::numbers::pi * x) + std::log(sum);
}

}  // namespace

double digamma(double x) { return boost::math::digamma(x); }

double lgamma(double x) { return boost::math::lgamma(x); }

double lmvgamma(int p, double a) {
  double out = 0.25 * p * (p - 1) * std::log(std::numbers::pi);
  for (int j = 0; j < p; ++j) out += lgamma(a - 0.5 * j);
  return out;
}

double log_beta(double a, double b) { return lgamma(a) + lgamma(b) - lgamma(a + b); }

double log_bessel_i(double v, double x) {
  if (x == 0.0) return v == 0.0 ? 0.0 : -std::numeric_limits<double>::infinity();
  if (x < kDirectBesselLimit) return std::log(boost::math::cyl_bessel_i(v, x));
  return log_bessel_i_asymptotic(v, x);
}

double bessel_ratio(double v, double x) {
  if (x == 0.0) return 0.0;
  if (x < kDirectBesselLimit) {
    return boost::math::cyl_bessel_i(v, x) / boost::math::cyl_bessel_i(v - 1.0, x);
  }
  return std::exp(log_bessel_i_asymptotic(v, x) - log_bessel_i_asymptotic(v - 1.0, x));
}

double log_sum_exp(std::span<const double> values) {
  if (values.empty()) return -std::numeric_limits<double>::infinity();
  const double m = *std::max_element(values.begin(), values.end());
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (double v : values) s += std::exp(v - m);
  return m + std::log(s);
}

double logit(double x) { return std::log(x) - std::log1p(-x); }

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace ssdiff::special

#pragma once

#include <span>

namespace ssdiff::special {

[[nodiscard]] double digamma(double x);
[[nodiscard]] double lgamma(double x);
// log of the multivariate gamma function Gamma_p(a).
[[nodiscard]] double lmvgamma(int p, double a);
[[nodiscard]] double log_beta(double a, double b);

// log I_v(x) for x >= 0, stable for large x.
[[nodiscard]] double log_bessel_i(double v, double x);
// I_v(x) / I_{v-1}(x) by continued fraction; 0 at x = 0.
[[nodiscard]] double bessel_ratio(double v, double x);

[[nodiscard]] double log_sum_exp(std::span<const double> values);
[[nodiscard]] double logit(double x);
[[nodiscard]] double sigmoid(double x);

}  // namespace ssdiff::special

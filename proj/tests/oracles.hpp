#pragma once

// Reference computations for the tests. None of them call into the library.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>

namespace ref {

inline double phi(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

// Phi^-1 by bisection on the erfc-based CDF.
inline double phi_inv(double p) {
  double lo = -40.0, hi = 40.0;
  for (int i = 0; i < 200; ++i) {
    const double mid = 0.5 * (lo + hi);
    (phi(mid) < p ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

// P(X >= k), X ~ Binomial(n, p), by direct summation of log-space terms.
inline double binom_upper_tail(std::uint64_t k, std::uint64_t n, double p) {
  double s = 0.0;
  for (std::uint64_t j = k; j <= n; ++j) {
    const double lc = std::lgamma(n + 1.0) - std::lgamma(j + 1.0) - std::lgamma(n - j + 1.0);
    s += std::exp(lc + j * std::log(p) + (n - j) * std::log1p(-p));
  }
  return s;
}

inline double binom_lower_tail(std::uint64_t k, std::uint64_t n, double p) {
  return 1.0 - (k + 1 <= n ? binom_upper_tail(k + 1, n, p) : 0.0);
}

// Clopper-Pearson lower bound by bisection on the summed tail.
inline double cp_lower(std::uint64_t k, std::uint64_t n, double alpha) {
  if (k == 0) return 0.0;
  double lo = 0.0, hi = 1.0;
  for (int i = 0; i < 200; ++i) {
    const double mid = 0.5 * (lo + hi);
    (binom_upper_tail(k, n, mid) < alpha ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

// Composite Simpson rule on [a, b] with n (even) panels.
inline double simpson(const std::function<double(double)>& f, double a, double b, int n = 20000) {
  const double h = (b - a) / n;
  double s = f(a) + f(b);
  for (int i = 1; i < n; ++i) s += f(a + i * h) * (i % 2 ? 4.0 : 2.0);
  return s * h / 3.0;
}

inline double rel_err(double got, double want) {
  return std::abs(got - want) / std::max(std::abs(want), 1e-300);
}

}  // namespace ref

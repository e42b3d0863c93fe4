#include "aniscert/stats.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace aniscert::stats {

void CountTally::validate() const {
  if (n < 1) throw std::invalid_argument("CountTally: n must be >= 1");
  const std::uint64_t total = std::accumulate(counts.begin(), counts.end(), std::uint64_t{0});
  if (total != n) throw std::invalid_argument("CountTally: counts do not sum to n");
}

std::size_t CountTally::top_class() const {
  if (counts.empty()) throw std::invalid_argument("CountTally: no classes");
  return static_cast<std::size_t>(std::max_element(counts.begin(), counts.end()) - counts.begin());
}

CountTally& CountTally::operator+=(const CountTally& other) {
  if (other.counts.size() != counts.size()) throw std::invalid_argument("CountTally: class count mismatch");
  for (std::size_t c = 0; c < counts.size(); ++c) counts[c] += other.counts[c];
  n += other.n;
  return *this;
}

namespace {

double beta_continued_fraction(double a, double b, double x) {
  constexpr int kMaxIter = 20000;
  constexpr double kEps = 1e-16;
  constexpr double kTiny = 1e-300;
  const double qab = a + b;
  const double qap = a + 1.0;
  const double qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::abs(d) < kTiny) d = kTiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= kMaxIter; ++m) {
    const double dm = static_cast<double>(m);
    const double m2 = 2.0 * dm;
    double aa = dm * (b - dm) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + dm) * (qab + dm) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < kEps) return h;
  }
  return h;
}

}  // namespace

double incomplete_beta(double a, double b, double x) {
  if (!(a > 0.0 && b > 0.0)) throw std::domain_error("incomplete_beta: a and b must be positive");
  if (!(x >= 0.0 && x <= 1.0)) throw std::domain_error("incomplete_beta: x must lie in [0, 1]");
  if (x == 0.0) return 0.0;
  if (x == 1.0) return 1.0;
  const double log_front =
      std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log1p(-x);
  const double front = std::exp(log_front);
  if (x < (a + 1.0) / (a + b + 2.0)) return front * beta_continued_fraction(a, b, x) / a;
  return 1.0 - front * beta_continued_fraction(b, a, 1.0 - x) / b;
}

namespace {

// P(X >= k) for X ~ Binomial(n, p).
double upper_tail(std::uint64_t k, std::uint64_t n, double p) {
  if (k == 0) return 1.0;
  if (k > n) return 0.0;
  return incomplete_beta(static_cast<double>(k), static_cast<double>(n - k + 1), p);
}

}  // namespace

double lower_conf_bound(std::uint64_t k, std::uint64_t n, double confidence) {
  if (!(confidence > 0.0 && confidence < 1.0)) {
    throw std::invalid_argument("lower_conf_bound: confidence must lie in (0, 1)");
  }
  if (n == 0 || k > n) throw std::invalid_argument("lower_conf_bound: need 0 <= k <= n, n >= 1");
  if (k == 0) return 0.0;
  const double alpha = 1.0 - confidence;
  double lo = 0.0;
  double hi = 1.0;
  for (int iter = 0; iter < 200 && hi - lo > 1e-15; ++iter) {
    const double mid = 0.5 * (lo + hi);
    if (upper_tail(k, n, mid) < alpha) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  return 0.5 * (lo + hi);
}

double binomial_p_value(std::uint64_t k, std::uint64_t n, double p0, Sidedness sidedness) {
  if (!(p0 > 0.0 && p0 < 1.0)) throw std::invalid_argument("binomial_p_value: p0 must lie in (0, 1)");
  if (n == 0 || k > n) throw std::invalid_argument("binomial_p_value: need 0 <= k <= n, n >= 1");
  const double greater = upper_tail(k, n, p0);
  if (sidedness == Sidedness::Greater) return greater;
  // P(X <= k) = P(n - X >= n - k) with n - X ~ Binomial(n, 1 - p0).
  const double less = upper_tail(n - k, n, 1.0 - p0);
  return std::min(1.0, 2.0 * std::min(greater, less));
}

}  // namespace aniscert::stats

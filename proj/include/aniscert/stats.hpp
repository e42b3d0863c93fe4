#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

namespace aniscert::stats {

// Per-class Monte-Carlo counts.
struct CountTally {
  std::vector<std::uint64_t> counts;
  std::uint64_t n = 0;

  explicit CountTally(std::size_t num_classes = 0) : counts(num_classes, 0) {}

  // Throws unless sum(counts) == n and n >= 1.
  void validate() const;

  // Index of the largest count; ties break to the lowest index.
  std::size_t top_class() const;

  CountTally& operator+=(const CountTally& other);
  bool operator==(const CountTally&) const = default;
};

// Regularized incomplete beta I_x(a, b), continued fraction (modified Lentz).
double incomplete_beta(double a, double b, double x);

// One-sided Clopper-Pearson lower bound at the given confidence: the
// alpha-quantile of Beta(k, n - k + 1), alpha = 1 - confidence. Returns 0 for
// k = 0. Bisection to ~1e-15 with a 200-iteration cap.
double lower_conf_bound(std::uint64_t k, std::uint64_t n, double confidence);

enum class Sidedness { TwoSided, Greater };

// Exact binomial test p-value against success probability p0. Two-sided is
// the doubled smaller tail clamped at 1; Greater is P(X >= k).
double binomial_p_value(std::uint64_t k, std::uint64_t n, double p0,
                        Sidedness sidedness = Sidedness::TwoSided);

}  // namespace aniscert::stats

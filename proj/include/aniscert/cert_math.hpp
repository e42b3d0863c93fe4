#pragma once

#include <cstddef>
#include <limits>
#include <optional>
#include <span>
#include <string_view>

#include "aniscert/distributions.hpp"

namespace aniscert::cert {

using dist::AnisoParams;
using dist::Family;
using dist::NoiseSpec;

enum class Norm { L1, L2, Linf };

std::string_view to_string(Norm norm);
Norm parse_norm(std::string_view name);

// ||v||_p for the three threat-model norms.
double lp_norm(std::span<const double> v, Norm norm);

// Standard normal CDF through erfc.
double normal_cdf(double x);

// Phi^-1(p) for p in (0, 1): AS241 rational approximation refined by one
// Newton step on the erfc-based CDF. Throws std::domain_error outside (0, 1).
double inverse_normal_cdf(double p);

// Euler gamma for beta > 0 (Lanczos, g = 7). Overflows to +inf past ~171.6.
double gamma_function(double beta);
double log_gamma(double beta);

// Lower bound on the top-class probability, optionally with an upper bound on
// the runner-up. Without p_b_upper the binary reduction p_b = 1 - p_a applies.
struct ProbBounds {
  double p_a_lower = 0.0;
  std::optional<double> p_b_upper;

  void validate() const;
};

struct Certificate {
  double radius = 0.0;       // min(sigma) * R
  double alm = 0.0;          // geomean(sigma) * R
  double base_radius = 0.0;  // isotropic R at the anisotropic bounds
  Norm norm = Norm::L2;
};

// Binary-case isotropic radius. Returns nullopt ("not certifiable") when
// p_a_lower < 1/2; every formula evaluates to 0 at exactly 1/2. Throws for a (family, norm) pair without a known radius,
// for a power law with a <= d, or for p_a_lower outside [0, 1].
std::optional<double> radius_binary(const NoiseSpec& spec, Norm norm, std::size_t d,
                                    double p_a_lower);

// R = lambda/2 (Phi^-1(p_a) - Phi^-1(p_b)), clamped at 0.
double radius_gaussian_multiclass(double lambda, const ProbBounds& bounds);

// Exponential of the mean log; exact 1 for an all-ones vector.
double geometric_mean(std::span<const double> values);

// Anisotropic certificate. The isotropic formula is evaluated at the
// anisotropic bounds, then scaled by min(sigma) and geomean(sigma). The
// multiclass Gaussian form is used when p_b_upper is present and the family is
// Gaussian; every other family uses its binary form. Returns nullopt when the
// bounds do not certify (p_a_lower <= 1/2, or p_a_lower <= p_b_upper).
std::optional<Certificate> certificate(const NoiseSpec& spec, Norm norm, const ProbBounds& bounds,
                                       const AnisoParams& params);

// ||Sigma^-1 delta||_p <= base_radius. The general-Sigma case solves a linear
// system.
bool in_certified_region(std::span<const double> delta, const AnisoParams& params, Norm norm,
                         double base_radius);

struct Measure {
  double value = 0.0;
  double log_value = 0.0;  // -inf when the measure is zero
};

// Lebesgue measure of {delta : sum |delta_i / (sigma_i R)|^p <= 1}. Pass
// p = +inf for the box limit.
Measure lebesgue_measure(std::span<const double> sigma, double norm_p, double base_radius);

inline double norm_exponent(Norm norm) {
  switch (norm) {
    case Norm::L1: return 1.0;
    case Norm::L2: return 2.0;
    case Norm::Linf: break;
  }
  return std::numeric_limits<double>::infinity();
}

}  // namespace aniscert::cert

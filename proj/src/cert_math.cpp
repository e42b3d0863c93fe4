#include "aniscert/cert_math.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <string>

namespace aniscert::cert {
namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// Quantile that maps the endpoints to -inf / +inf instead of throwing; radius
// formulas are evaluated on the closed interval.
double normal_quantile_closed(double p) {
  if (p <= 0.0) return -kInf;
  if (p >= 1.0) return kInf;
  return inverse_normal_cdf(p);
}

void check_probability(double p, const char* what) {
  if (!(p >= 0.0 && p <= 1.0)) {
    throw std::invalid_argument(std::string(what) + " must lie in [0, 1]");
  }
}

}  // namespace

std::string_view to_string(Norm norm) {
  switch (norm) {
    case Norm::L1: return "l1";
    case Norm::L2: return "l2";
    case Norm::Linf: return "linf";
  }
  return "unknown";
}

Norm parse_norm(std::string_view name) {
  for (Norm n : {Norm::L1, Norm::L2, Norm::Linf}) {
    if (to_string(n) == name) return n;
  }
  throw std::invalid_argument("unknown norm '" + std::string(name) + "'");
}

double lp_norm(std::span<const double> v, Norm norm) {
  switch (norm) {
    case Norm::L1: {
      double s = 0.0;
      for (double x : v) s += std::abs(x);
      return s;
    }
    case Norm::L2: {
      double s = 0.0;
      for (double x : v) s += x * x;
      return std::sqrt(s);
    }
    case Norm::Linf: {
      double s = 0.0;
      for (double x : v) s = std::max(s, std::abs(x));
      return s;
    }
  }
  throw std::invalid_argument("lp_norm: unknown norm");
}

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

double inverse_normal_cdf(double p) {
  if (!(p > 0.0 && p < 1.0)) {
    throw std::domain_error("inverse_normal_cdf: p must lie in (0, 1)");
  }
  // Wichura, AS241 (PPND16).
  const double q = p - 0.5;
  double x;
  if (std::abs(q) <= 0.425) {
    const double r = 0.180625 - q * q;
    x = q *
        (((((((2.5090809287301226727e+3 * r + 3.3430575583588128105e+4) * r +
              6.7265770927008700853e+4) * r + 4.5921953931549871457e+4) * r +
            1.3731693765509461125e+4) * r + 1.9715909503065514427e+3) * r +
          1.3314166789178437745e+2) * r + 3.3871328727963666080e+0) /
        (((((((5.2264952788528545610e+3 * r + 2.8729085735721942674e+4) * r +
              3.9307895800092710610e+4) * r + 2.1213794301586595867e+4) * r +
            5.3941960214247511077e+3) * r + 6.8718700749205790830e+2) * r +
          4.2313330701600911252e+1) * r + 1.0);
  } else {
    double r = q < 0.0 ? p : 1.0 - p;
    r = std::sqrt(-std::log(r));
    if (r <= 5.0) {
      r -= 1.6;
      x = (((((((7.74545014278341407640e-4 * r + 2.27238449892691845833e-2) * r +
                2.41780725177450611770e-1) * r + 1.27045825245236838258e+0) * r +
              3.64784832476320460504e+0) * r + 5.76949722146069140550e+0) * r +
            4.63033784615654529590e+0) * r + 1.42343711074968357734e+0) /
          (((((((1.05075007164441684324e-9 * r + 5.47593808499534494600e-4) * r +
                1.51986665636164571966e-2) * r + 1.48103976427480074590e-1) * r +
              6.89767334985100004550e-1) * r + 1.67638483018380384940e+0) * r +
            2.05319162663775882187e+0) * r + 1.0);
    } else {
      r -= 5.0;
      x = (((((((2.01033439929228813265e-7 * r + 2.71155556874348757815e-5) * r +
                1.24266094738807843860e-3) * r + 2.65321895265761230930e-2) * r +
              2.96560571828504891230e-1) * r + 1.78482653991729133580e+0) * r +
            5.46378491116411436990e+0) * r + 6.65790464350110377720e+0) /
          (((((((2.04426310338993978564e-15 * r + 1.42151175831644588870e-7) * r +
                1.84631831751005468180e-5) * r + 7.86869131145613259100e-4) * r +
              1.48753612908506148525e-2) * r + 1.36929880922735805310e-1) * r +
            5.99832206555887937690e-1) * r + 1.0);
    }
    if (q < 0.0) x = -x;
  }
  // One Newton step on Phi(x) - p.
  const double density = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  if (density > 0.0) x -= (normal_cdf(x) - p) / density;
  return x;
}

namespace {

constexpr double kLanczosG = 7.0;
constexpr std::array<double, 9> kLanczosCoef = {
    0.99999999999980993,  676.5203681218851,     -1259.1392167224028,
    771.32342877765313,   -176.61502916214059,   12.507343278686905,
    -0.13857109526572012, 9.9843695780195716e-6, 1.5056327351493116e-7};

double lanczos_series(double x) {
  double a = kLanczosCoef[0];
  for (std::size_t i = 1; i < kLanczosCoef.size(); ++i) a += kLanczosCoef[i] / (x + static_cast<double>(i));
  return a;
}

}  // namespace

double gamma_function(double beta) {
  if (!(beta > 0.0)) throw std::domain_error("gamma_function: beta must be positive");
  if (beta < 0.5) {
    return std::numbers::pi / (std::sin(std::numbers::pi * beta) * gamma_function(1.0 - beta));
  }
  const double x = beta - 1.0;
  const double t = x + kLanczosG + 0.5;
  // t^(x+0.5) split in two halves to postpone overflow near beta = 171.
  const double half = std::pow(t, 0.5 * (x + 0.5));
  return std::sqrt(2.0 * std::numbers::pi) * half * (half * std::exp(-t)) * lanczos_series(x);
}

double log_gamma(double beta) {
  if (!(beta > 0.0)) throw std::domain_error("log_gamma: beta must be positive");
  if (beta < 0.5) {
    return std::log(std::numbers::pi / std::sin(std::numbers::pi * beta)) - log_gamma(1.0 - beta);
  }
  const double x = beta - 1.0;
  const double t = x + kLanczosG + 0.5;
  return 0.5 * std::log(2.0 * std::numbers::pi) + (x + 0.5) * std::log(t) - t +
         std::log(lanczos_series(x));
}

void ProbBounds::validate() const {
  check_probability(p_a_lower, "p_a_lower");
  if (p_b_upper) {
    check_probability(*p_b_upper, "p_b_upper");
  }
}

std::optional<double> radius_binary(const NoiseSpec& spec, Norm norm, std::size_t d,
                                    double p_a_lower) {
  check_probability(p_a_lower, "p_a_lower");
  if (d == 0) throw std::invalid_argument("radius_binary: dimension must be >= 1");
  const double lambda = spec.lambda();
  const double dd = static_cast<double>(d);
  auto unsupported = [&]() -> std::optional<double> {
    throw std::invalid_argument("no certified radius for " + std::string(dist::to_string(spec.family())) +
                                " noise under the " + std::string(to_string(norm)) + " norm");
  };
  if (spec.family() == Family::PowerLawLinf && norm == Norm::L1) {
    const double a = spec.power_exponent();
    if (!(a > dd)) {
      throw std::invalid_argument("powerlaw_linf radius requires exponent a > d");
    }
  }
  // The pair is checked before p so an unsupported pair always errors.
  const bool supported = [&] {
    switch (spec.family()) {
      case Family::Gaussian: return true;
      case Family::Laplace: return norm == Norm::L1;
      case Family::ExpLinf: return norm == Norm::L1 || norm == Norm::Linf;
      case Family::UniformLinf: return norm == Norm::L1 || norm == Norm::Linf;
      case Family::PowerLawLinf: return norm == Norm::L1;
    }
    return false;
  }();
  if (!supported) return unsupported();
  if (p_a_lower < 0.5) return std::nullopt;

  const double p = p_a_lower;
  switch (spec.family()) {
    case Family::Gaussian: {
      const double r = lambda * normal_quantile_closed(p);
      return norm == Norm::Linf ? r / std::sqrt(dd) : r;
    }
    case Family::Laplace:
      return -lambda * std::log(2.0 * (1.0 - p));
    case Family::ExpLinf:
      if (norm == Norm::L1) return 2.0 * dd * lambda * (p - 0.5);
      return lambda * std::log(1.0 / (2.0 * (1.0 - p)));
    case Family::UniformLinf:
      if (norm == Norm::L1) return 2.0 * lambda * (p - 0.5);
      return 2.0 * lambda * (1.0 - std::pow(1.5 - p, 1.0 / dd));
    case Family::PowerLawLinf:
      return 2.0 * dd * lambda / (spec.power_exponent() - dd) * (p - 0.5);
  }
  return unsupported();
}

double radius_gaussian_multiclass(double lambda, const ProbBounds& bounds) {
  bounds.validate();
  if (!(lambda > 0.0)) throw std::invalid_argument("lambda must be positive");
  const double p_b = bounds.p_b_upper.value_or(1.0 - bounds.p_a_lower);
  if (bounds.p_a_lower <= p_b) return 0.0;
  const double r =
      0.5 * lambda * (normal_quantile_closed(bounds.p_a_lower) - normal_quantile_closed(p_b));
  return std::max(0.0, r);
}

double geometric_mean(std::span<const double> values) {
  if (values.empty()) throw std::invalid_argument("geometric_mean of an empty vector");
  double log_sum = 0.0;
  for (double v : values) log_sum += std::log(v);
  return std::exp(log_sum / static_cast<double>(values.size()));
}

std::optional<Certificate> certificate(const NoiseSpec& spec, Norm norm, const ProbBounds& bounds,
                                       const AnisoParams& params) {
  bounds.validate();
  if (!params.is_diagonal()) {
    throw std::invalid_argument("certificate: only diagonal anisotropic parameters are supported");
  }
  const std::size_t d = params.dim();
  std::optional<double> base;
  if (bounds.p_b_upper && spec.family() == Family::Gaussian) {
    if (bounds.p_a_lower <= *bounds.p_b_upper) return std::nullopt;
    double r = radius_gaussian_multiclass(spec.lambda(), bounds);
    if (norm == Norm::Linf) r /= std::sqrt(static_cast<double>(d));
    base = r;
  } else {
    if (!(bounds.p_a_lower > 0.5)) return std::nullopt;
    base = radius_binary(spec, norm, d, bounds.p_a_lower);
  }
  if (!base) return std::nullopt;
  const auto sigma = params.sigma();
  const double min_sigma = *std::min_element(sigma.begin(), sigma.end());
  return Certificate{min_sigma * *base, geometric_mean(sigma) * *base, *base, norm};
}

bool in_certified_region(std::span<const double> delta, const AnisoParams& params, Norm norm,
                         double base_radius) {
  if (delta.size() != params.dim()) throw std::invalid_argument("in_certified_region: dimension mismatch");
  std::vector<double> scaled;
  if (params.is_diagonal()) {
    scaled.resize(delta.size());
    const auto sigma = params.sigma();
    for (std::size_t i = 0; i < delta.size(); ++i) scaled[i] = delta[i] / sigma[i];
  } else {
    scaled = dist::solve(*params.full_sigma(), delta);
  }
  return lp_norm(scaled, norm) <= base_radius;
}

Measure lebesgue_measure(std::span<const double> sigma, double norm_p, double base_radius) {
  if (sigma.empty()) throw std::invalid_argument("lebesgue_measure: dimension must be >= 1");
  if (!(norm_p > 0.0)) throw std::invalid_argument("lebesgue_measure: p must be positive");
  if (!(base_radius >= 0.0)) throw std::invalid_argument("lebesgue_measure: radius must be >= 0");
  const double d = static_cast<double>(sigma.size());
  if (base_radius == 0.0) return {0.0, -kInf};
  double log_sigma = 0.0;
  for (double s : sigma) log_sigma += std::log(s);
  double log_v = d * std::log(2.0 * base_radius) + log_sigma;
  if (std::isfinite(norm_p)) {
    log_v += d * log_gamma(1.0 + 1.0 / norm_p) - log_gamma(1.0 + d / norm_p);
  }
  return {std::exp(log_v), log_v};
}

}  // namespace aniscert::cert

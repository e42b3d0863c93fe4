#include "aniscert/distributions.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace aniscert::dist {

std::string_view to_string(Family family) {
  switch (family) {
    case Family::Gaussian: return "gaussian";
    case Family::Laplace: return "laplace";
    case Family::ExpLinf: return "exp_linf";
    case Family::UniformLinf: return "uniform_linf";
    case Family::PowerLawLinf: return "powerlaw_linf";
  }
  return "unknown";
}

Family parse_family(std::string_view name) {
  for (Family f : {Family::Gaussian, Family::Laplace, Family::ExpLinf, Family::UniformLinf,
                   Family::PowerLawLinf}) {
    if (to_string(f) == name) return f;
  }
  throw std::invalid_argument("unknown noise family '" + std::string(name) + "'");
}

NoiseSpec::NoiseSpec(Family family, double lambda, std::optional<double> power_exponent)
    : family_(family), lambda_(lambda), power_exponent_(power_exponent) {
  if (!(lambda > 0.0) || !std::isfinite(lambda)) {
    throw std::invalid_argument("noise scale lambda must be positive and finite");
  }
  const bool is_power = family == Family::PowerLawLinf;
  if (is_power != power_exponent.has_value()) {
    throw std::invalid_argument("power_exponent must be given exactly for powerlaw_linf");
  }
  if (is_power && !(*power_exponent > 0.0)) {
    throw std::invalid_argument("power_exponent must be positive");
  }
}

double NoiseSpec::power_exponent() const {
  if (!power_exponent_) throw std::logic_error("noise family has no power exponent");
  return *power_exponent_;
}

Matrix Matrix::diagonal(std::span<const double> diag) {
  Matrix m{diag.size(), diag.size(), std::vector<double>(diag.size() * diag.size(), 0.0)};
  for (std::size_t i = 0; i < diag.size(); ++i) m(i, i) = diag[i];
  return m;
}

std::vector<double> solve(const Matrix& a, std::span<const double> b) {
  const std::size_t n = a.rows;
  if (a.cols != n || b.size() != n) throw std::invalid_argument("solve: dimension mismatch");
  Matrix m = a;
  std::vector<double> x(b.begin(), b.end());
  for (std::size_t col = 0; col < n; ++col) {
    std::size_t pivot = col;
    for (std::size_t r = col + 1; r < n; ++r) {
      if (std::abs(m(r, col)) > std::abs(m(pivot, col))) pivot = r;
    }
    if (m(pivot, col) == 0.0) throw std::domain_error("solve: singular matrix");
    if (pivot != col) {
      for (std::size_t c = 0; c < n; ++c) std::swap(m(col, c), m(pivot, c));
      std::swap(x[col], x[pivot]);
    }
    for (std::size_t r = col + 1; r < n; ++r) {
      const double f = m(r, col) / m(col, col);
      if (f == 0.0) continue;
      for (std::size_t c = col; c < n; ++c) m(r, c) -= f * m(col, c);
      x[r] -= f * x[col];
    }
  }
  for (std::size_t i = n; i-- > 0;) {
    double s = x[i];
    for (std::size_t c = i + 1; c < n; ++c) s -= m(i, c) * x[c];
    x[i] = s / m(i, i);
  }
  return x;
}

double condition_number(const Matrix& a) {
  const std::size_t n = a.rows;
  auto norm1 = [n](const auto& col_abs_sum) {
    double best = 0.0;
    for (std::size_t c = 0; c < n; ++c) best = std::max(best, col_abs_sum(c));
    return best;
  };
  const double a_norm = norm1([&](std::size_t c) {
    double s = 0.0;
    for (std::size_t r = 0; r < n; ++r) s += std::abs(a(r, c));
    return s;
  });
  double inv_norm = 0.0;
  std::vector<double> e(n, 0.0);
  for (std::size_t c = 0; c < n; ++c) {
    std::fill(e.begin(), e.end(), 0.0);
    e[c] = 1.0;
    const auto col = solve(a, e);
    double s = 0.0;
    for (double v : col) s += std::abs(v);
    inv_norm = std::max(inv_norm, s);
  }
  return a_norm * inv_norm;
}

AnisoParams::AnisoParams(std::vector<double> sigma, std::vector<double> mu,
                         std::optional<Matrix> full_sigma)
    : sigma_(std::move(sigma)), mu_(std::move(mu)), full_sigma_(std::move(full_sigma)) {
  if (sigma_.empty()) throw std::invalid_argument("AnisoParams: empty sigma");
  if (mu_.size() != sigma_.size()) throw std::invalid_argument("AnisoParams: sigma/mu length mismatch");
  for (double s : sigma_) {
    if (!(s >= kMinSigma) || !std::isfinite(s)) {
      throw std::invalid_argument("AnisoParams: sigma entries must be finite and >= 1e-12");
    }
  }
  for (double m : mu_) {
    if (!std::isfinite(m)) throw std::invalid_argument("AnisoParams: non-finite mu");
  }
  if (full_sigma_) {
    const Matrix& m = *full_sigma_;
    if (m.rows != sigma_.size() || m.cols != sigma_.size() || m.data.size() != m.rows * m.cols) {
      throw std::invalid_argument("AnisoParams: full_sigma must be d x d");
    }
    if (m.rows > kMaxFullSigmaDim) {
      throw std::invalid_argument("AnisoParams: full_sigma supported only for d <= 8");
    }
    double cond = 0.0;
    try {
      cond = condition_number(m);
    } catch (const std::domain_error&) {
      throw std::invalid_argument("AnisoParams: full_sigma is singular");
    }
    if (!(cond <= kMaxConditionNumber)) {
      throw std::invalid_argument("AnisoParams: full_sigma condition number exceeds 1e12");
    }
  }
}

namespace {

// Fills out with a point uniform on the surface of the unit ell_inf sphere.
void linf_direction(Rng& rng, std::span<double> out) {
  double peak = 0.0;
  for (double& v : out) {
    v = rng.uniform(-1.0, 1.0);
    peak = std::max(peak, std::abs(v));
  }
  for (double& v : out) v /= peak;
}

}  // namespace

void sample_isotropic_into(const NoiseSpec& spec, Rng& rng, std::span<double> out) {
  const std::size_t d = out.size();
  if (d == 0) throw std::invalid_argument("sample_isotropic: dimension must be >= 1");
  const double lambda = spec.lambda();
  switch (spec.family()) {
    case Family::Gaussian:
      for (double& v : out) v = lambda * rng.normal();
      return;
    case Family::Laplace:
      for (double& v : out) {
        const double u = rng.uniform() - 0.5;
        v = (u < 0.0 ? lambda : -lambda) * std::log1p(-2.0 * std::abs(u));
      }
      return;
    case Family::UniformLinf:
      for (double& v : out) v = rng.uniform(-lambda, lambda);
      return;
    case Family::ExpLinf: {
      const double r = lambda * rng.gamma(static_cast<double>(d));
      linf_direction(rng, out);
      for (double& v : out) v *= r;
      return;
    }
    case Family::PowerLawLinf: {
      const double a = spec.power_exponent();
      const double dd = static_cast<double>(d);
      if (!(a > dd)) {
        throw std::invalid_argument("powerlaw_linf noise requires exponent a > d (a=" +
                                    std::to_string(a) + ", d=" + std::to_string(d) + ")");
      }
      // ell_inf radius / lambda ~ BetaPrime(d, a - d).
      const double r = lambda * rng.gamma(dd) / rng.gamma(a - dd);
      linf_direction(rng, out);
      for (double& v : out) v *= r;
      return;
    }
  }
  throw std::invalid_argument("sample_isotropic: unsupported noise family");
}

std::vector<double> sample_isotropic(const NoiseSpec& spec, std::size_t d, Rng& rng) {
  std::vector<double> out(d);
  sample_isotropic_into(spec, rng, out);
  return out;
}

void to_anisotropic_into(std::span<const double> eps, const AnisoParams& params,
                         std::span<double> out) {
  const std::size_t d = params.dim();
  if (eps.size() != d || out.size() != d) {
    throw std::invalid_argument("to_anisotropic: dimension mismatch (eps " +
                                std::to_string(eps.size()) + ", params " + std::to_string(d) + ")");
  }
  const auto sigma = params.sigma();
  const auto mu = params.mu();
  if (params.is_diagonal()) {
    for (std::size_t i = 0; i < d; ++i) out[i] = eps[i] * sigma[i] + mu[i];
    return;
  }
  const Matrix& m = *params.full_sigma();
  for (std::size_t i = 0; i < d; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += m(i, j) * eps[j];
    out[i] = s + mu[i];
  }
}

std::vector<double> to_anisotropic(std::span<const double> eps, const AnisoParams& params) {
  std::vector<double> out(eps.size());
  to_anisotropic_into(eps, params, out);
  return out;
}

std::vector<double> sample_anisotropic(const NoiseSpec& spec, const AnisoParams& params, Rng& rng) {
  const auto eps = sample_isotropic(spec, params.dim(), rng);
  return to_anisotropic(eps, params);
}

}  // namespace aniscert::dist

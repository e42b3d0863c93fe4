#include "aniscert/oracle.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>
#include <stdexcept>

#include "aniscert/kernels.hpp"
#include "aniscert/rng.hpp"
#include "aniscert/stats.hpp"

namespace aniscert::oracle {

namespace {

void require_diagonal(const dist::AnisoParams& params, std::size_t d) {
  if (!params.is_diagonal()) throw std::invalid_argument("oracle: diagonal parameters required");
  if (params.dim() != d) throw std::invalid_argument("oracle: dimension mismatch");
}

double smoothed_margin(const LinearModel& model, std::span<const double> x, const dist::AnisoParams& params) {
  const auto mu = params.mu();
  double m = model.b;
  for (std::size_t i = 0; i < x.size(); ++i) m += model.w[i] * (x[i] + mu[i]);
  return m;
}

double weighted_norm(const LinearModel& model, const dist::AnisoParams& params, double q) {
  const auto sigma = params.sigma();
  std::vector<double> ws(sigma.size());
  for (std::size_t i = 0; i < ws.size(); ++i) ws[i] = model.w[i] * sigma[i];
  if (std::isinf(q)) return cert::lp_norm(ws, cert::Norm::Linf);
  if (q == 1.0) return cert::lp_norm(ws, cert::Norm::L1);
  return cert::lp_norm(ws, cert::Norm::L2);
}

}  // namespace

double analytic_gaussian_pa(const LinearModel& model, std::span<const double> x, const dist::AnisoParams& params,
                            double lambda) {
  model.validate();
  require_diagonal(params, model.w.size());
  if (!(lambda > 0.0)) throw std::invalid_argument("analytic_gaussian_pa: lambda must be positive");
  if (x.size() != model.w.size()) throw std::invalid_argument("analytic_gaussian_pa: dimension mismatch");
  return cert::normal_cdf(smoothed_margin(model, x, params) / (lambda * weighted_norm(model, params, 2.0)));
}

double linear_flip_distance(const LinearModel& model, std::span<const double> x, const dist::AnisoParams& params,
                            cert::Norm norm) {
  model.validate();
  require_diagonal(params, model.w.size());
  const double dual = norm == cert::Norm::L1 ? std::numeric_limits<double>::infinity()
                      : norm == cert::Norm::L2 ? 2.0
                                               : 1.0;
  return std::abs(smoothed_margin(model, x, params)) / weighted_norm(model, params, dual);
}

std::optional<std::vector<double>> grid_flip_search(const LinearModel& model, std::span<const double> x,
                                                    const dist::AnisoParams& params, double lambda,
                                                    cert::Norm norm, double base_radius,
                                                    std::size_t grid_density) {
  model.validate();
  const std::size_t d = model.w.size();
  require_diagonal(params, d);
  if (d == 0 || d > 3) throw std::invalid_argument("grid_flip_search: d must be 1, 2 or 3");
  if (grid_density < 2) throw std::invalid_argument("grid_flip_search: grid_density must be >= 2");
  if (!(base_radius > 0.0)) return std::nullopt;

  // The smoothed prediction at x + delta (parameters fixed at the clean x) is
  // class 1 iff Phi(margin(delta) / scale) > 1/2, i.e. iff margin(delta) > 0.
  const double scale = lambda * weighted_norm(model, params, 2.0);
  const double clean = smoothed_margin(model, x, params) / scale;
  if (clean == 0.0) return std::nullopt;
  const double tol = 1e-12 * std::max(1.0, std::abs(clean));
  const auto sigma = params.sigma();
  const double p = cert::norm_exponent(norm);

  std::vector<double> u(d), delta(d);
  auto flips = [&](std::span<const double> dlt) {
    double m = 0.0;
    for (std::size_t i = 0; i < d; ++i) m += model.w[i] * dlt[i];
    const double z = clean + m / scale;
    return clean > 0.0 ? z < -tol : z > tol;
  };

  std::size_t total = 1;
  for (std::size_t i = 0; i < d; ++i) total *= grid_density;
  for (std::size_t idx = 0; idx < total; ++idx) {
    std::size_t rest = idx;
    for (std::size_t i = d; i-- > 0;) {
      const std::size_t j = rest % grid_density;
      rest /= grid_density;
      u[i] = -1.0 + 2.0 * static_cast<double>(j) / static_cast<double>(grid_density - 1);
    }
    double rho = 0.0;
    if (std::isinf(p)) {
      for (double v : u) rho = std::max(rho, std::abs(v));
    } else {
      for (double v : u) rho += std::pow(std::abs(v), p);
      rho = std::pow(rho, 1.0 / p);
    }
    if (rho == 0.0) continue;
    if (rho <= 1.0) {
      for (std::size_t i = 0; i < d; ++i) delta[i] = u[i] * sigma[i] * base_radius;
      if (flips(delta)) return delta;
    }
    for (std::size_t i = 0; i < d; ++i) delta[i] = u[i] / rho * sigma[i] * base_radius;
    if (flips(delta)) return delta;
  }
  return std::nullopt;
}

VolumeEstimate mc_volume(std::span<const double> sigma, double norm_p, double base_radius, std::size_t samples,
                         std::uint64_t seed) {
  if (sigma.empty() || sigma.size() > 3) throw std::invalid_argument("mc_volume: d must be 1, 2 or 3");
  if (samples == 0) throw std::invalid_argument("mc_volume: samples must be positive");
  if (!(base_radius >= 0.0)) throw std::invalid_argument("mc_volume: base_radius must be >= 0");
  if (base_radius == 0.0) return {};
  double box = 1.0;
  for (double s : sigma) box *= 2.0 * s * base_radius;
  const std::size_t hits = kernels::superball_hits_omp(sigma.size(), norm_p, samples, seed);
  const double q = static_cast<double>(hits) / static_cast<double>(samples);
  return {box * q, box * std::sqrt(q * (1.0 - q) / static_cast<double>(samples))};
}

smoothing::ClassifierHandle transformed_classifier(const smoothing::ClassifierHandle& f, std::span<const double> x,
                                                   const dist::AnisoParams& params, bool inject_sigma_sign_fault) {
  require_diagonal(params, x.size());
  std::vector<double> sigma(params.sigma().begin(), params.sigma().end());
  if (inject_sigma_sign_fault) {
    for (double& s : sigma) s = -s;
  }
  std::vector<double> shift(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) shift[i] = params.mu()[i] + x[i] - sigma[i] * x[i];
  return smoothing::ClassifierHandle::custom(
      [f, sigma = std::move(sigma), shift = std::move(shift)](std::span<const double> z) {
        std::vector<double> y(z.size());
        for (std::size_t i = 0; i < z.size(); ++i) y[i] = sigma[i] * z[i] + shift[i];
        return f.classify(y);
      },
      f.num_classes());
}

EquivalenceReport check_transformation_equivalence(const smoothing::ClassifierHandle& f, std::span<const double> x,
                                                   const dist::AnisoParams& params, const dist::NoiseSpec& spec,
                                                   std::uint64_t n, std::uint64_t seed,
                                                   bool inject_sigma_sign_fault) {
  const auto g = transformed_classifier(f, x, params, inject_sigma_sign_fault);
  const auto iso = dist::AnisoParams::isotropic(x.size());
  EquivalenceReport r;
  r.draws = n;
  const std::size_t d = x.size();
  Rng rng(seed);
  std::vector<double> eps(d), aniso(d), plain(d);
  for (std::uint64_t k = 0; k < n; ++k) {
    dist::sample_isotropic_into(spec, rng, eps);
    dist::to_anisotropic_into(eps, params, aniso);
    for (std::size_t i = 0; i < d; ++i) {
      aniso[i] = x[i] + aniso[i];
      plain[i] = x[i] + eps[i];
    }
    if (f.classify(aniso) != g.classify(plain)) ++r.mismatches;
  }
  r.anisotropic = smoothing::classify_samples(f, x, params, spec, n, seed);
  r.transformed = smoothing::classify_samples(g, x, iso, spec, n, seed);
  return r;
}

RandomInstance random_instance(std::size_t d, std::size_t num_classes, std::uint64_t seed) {
  if (d == 0 || d > 3 || num_classes < 2) throw std::invalid_argument("random_instance: d in 1..3, >= 2 classes");
  Rng rng(seed);
  smoothing::LookupTable table;
  table.d = d;
  table.cells_per_axis = 8;
  table.lo = -2.0;
  table.hi = 3.0;
  std::size_t cells = 1;
  for (std::size_t i = 0; i < d; ++i) cells *= table.cells_per_axis;
  table.labels.resize(cells);
  for (int& l : table.labels) l = static_cast<int>(rng.next_u64() % num_classes);
  std::vector<double> x(d), sigma(d), mu(d);
  for (std::size_t i = 0; i < d; ++i) {
    x[i] = rng.uniform();
    sigma[i] = rng.uniform(0.2, 2.0);
    mu[i] = rng.uniform(-0.5, 0.5);
  }
  return {smoothing::ClassifierHandle::lookup(std::move(table), num_classes), std::move(x),
          dist::AnisoParams(std::move(sigma), std::move(mu))};
}

namespace {

using Clock = std::chrono::steady_clock;

template <typename Fn>
CheckResult timed(std::string name, Fn fn) {
  CheckResult r;
  r.name = std::move(name);
  const auto start = Clock::now();
  try {
    fn(r);
  } catch (const std::exception& e) {
    r.passed = false;
    r.detail = std::string("exception: ") + e.what();
  }
  r.seconds = std::chrono::duration<double>(Clock::now() - start).count();
  return r;
}

// Random halfspace instance whose smoothed score |z| lies in (0.05, 4).
struct LinearInstance {
  LinearModel model;
  std::vector<double> x;
  dist::AnisoParams params;
  double lambda;
};

LinearInstance random_linear_instance(std::size_t d, Rng& rng) {
  for (;;) {
    LinearModel m;
    m.w.resize(d);
    for (double& v : m.w) v = rng.uniform(-2.0, 2.0);
    m.b = rng.uniform(-1.0, 1.0);
    std::vector<double> x(d), sigma(d), mu(d);
    for (std::size_t i = 0; i < d; ++i) {
      x[i] = rng.uniform();
      sigma[i] = rng.uniform(0.2, 2.0);
      mu[i] = rng.uniform(-0.5, 0.5);
    }
    const double lambda = rng.uniform(0.25, 1.5);
    dist::AnisoParams params(std::move(sigma), std::move(mu));
    const double z = cert::inverse_normal_cdf(analytic_gaussian_pa(m, x, params, lambda));
    if (std::abs(z) > 0.05 && std::abs(z) < 4.0) return {std::move(m), std::move(x), std::move(params), lambda};
  }
}

}  // namespace

std::vector<CheckResult> run_verification_suite(const SuiteOptions& options) {
  std::vector<CheckResult> out;
  const std::uint64_t seed = options.seed;

  out.push_back(timed("transformation_equivalence", [&](CheckResult& r) {
    std::uint64_t mismatches = 0;
    std::size_t tally_diffs = 0;
    for (std::uint64_t i = 0; i < 100; ++i) {
      const std::uint64_t s = derive_seed(seed, 100 + i);
      const auto inst = random_instance(1 + i % 3, 2 + i % 3, s);
      const dist::NoiseSpec spec = dist::NoiseSpec::gaussian(0.5 + 0.01 * static_cast<double>(i));
      const auto rep = check_transformation_equivalence(inst.f, inst.x, inst.params, spec, 2000,
                                                        derive_seed(s, 1), options.inject_sigma_sign_fault);
      mismatches += rep.mismatches;
      if (!(rep.anisotropic == rep.transformed)) ++tally_diffs;
    }
    r.passed = mismatches == 0 && tally_diffs == 0;
    r.detail = "instances=100 draw_mismatches=" + std::to_string(mismatches) +
               " tally_mismatches=" + std::to_string(tally_diffs);
  }));

  out.push_back(timed("linear_tightness", [&](CheckResult& r) {
    Rng rng(derive_seed(seed, 2));
    double worst = 0.0;
    for (int i = 0; i < 50; ++i) {
      const auto inst = random_linear_instance(2 + static_cast<std::size_t>(i % 2), rng);
      const double pa = analytic_gaussian_pa(inst.model, inst.x, inst.params, inst.lambda);
      const double top = std::max(pa, 1.0 - pa);
      const double radius = inst.lambda * cert::inverse_normal_cdf(top);
      const double flip = linear_flip_distance(inst.model, inst.x, inst.params, cert::Norm::L2);
      worst = std::max(worst, std::abs(radius - flip) / flip);
    }
    r.passed = worst <= 1e-6;
    std::ostringstream os;
    os << "instances=50 max_rel_error=" << worst;
    r.detail = os.str();
  }));

  out.push_back(timed("grid_flip_search", [&](CheckResult& r) {
    Rng rng(derive_seed(seed, 3));
    int interior = 0;
    int missed = 0;
    const int cases = 12;
    for (int i = 0; i < cases; ++i) {
      const std::size_t d = i < 2 ? 3 : 2;
      const std::size_t density = d == 3 ? options.flip_grid_3d : 401;
      const auto inst = random_linear_instance(d, rng);
      const double pa = analytic_gaussian_pa(inst.model, inst.x, inst.params, inst.lambda);
      const double radius = inst.lambda * cert::inverse_normal_cdf(std::max(pa, 1.0 - pa));
      if (grid_flip_search(inst.model, inst.x, inst.params, inst.lambda, cert::Norm::L2, radius, density)) ++interior;
      if (!grid_flip_search(inst.model, inst.x, inst.params, inst.lambda, cert::Norm::L2, 1.05 * radius, density)) {
        ++missed;
      }
    }
    r.passed = interior == 0 && missed == 0;
    r.detail = "instances=" + std::to_string(cases) + " interior_flips=" + std::to_string(interior) +
               " missed_at_1.05=" + std::to_string(missed);
  }));

  out.push_back(timed("volume_agreement", [&](CheckResult& r) {
    Rng rng(derive_seed(seed, 4));
    std::ostringstream os;
    bool ok = true;
    double worst = 0.0;
    for (std::size_t d = 1; d <= 3; ++d) {
      for (double p : {1.0, 2.0, 64.0}) {
        std::vector<double> sigma(d);
        for (double& s : sigma) s = rng.uniform(0.5, 2.0);
        const double radius = rng.uniform(0.5, 1.5);
        const auto mc = mc_volume(sigma, p, radius, options.volume_samples, rng.next_u64());
        const double exact = cert::lebesgue_measure(sigma, p, radius).value;
        const double rel = std::abs(mc.value - exact) / exact;
        worst = std::max(worst, rel);
        ok = ok && rel <= 0.02;
        os << " d" << d << "p" << p << "=" << mc.value << "+-" << mc.std_error << "/" << exact;
      }
    }
    const double disc[2] = {1.0, 1.0};
    const auto mc = mc_volume(disc, 2.0, 1.0, options.volume_samples, rng.next_u64());
    const double rel_pi = std::abs(mc.value - std::numbers::pi) / std::numbers::pi;
    ok = ok && rel_pi <= 0.02;
    os << " disc=" << mc.value << "+-" << mc.std_error;
    r.passed = ok;
    std::ostringstream head;
    head << "max_rel_error=" << std::max(worst, rel_pi);
    r.detail = head.str() + os.str();
  }));

  out.push_back(timed("clopper_pearson_closed_form", [&](CheckResult& r) {
    double worst = 0.0;
    for (std::uint64_t n : {10u, 100u, 1000u}) {
      const double alpha = 0.001;
      worst = std::max(worst, std::abs(stats::lower_conf_bound(n, n, 1.0 - alpha) -
                                       std::pow(alpha, 1.0 / static_cast<double>(n))));
    }
    r.passed = worst <= 1e-10;
    std::ostringstream os;
    os << "max_abs_error=" << worst;
    r.detail = os.str();
  }));

  return out;
}

}  // namespace aniscert::oracle

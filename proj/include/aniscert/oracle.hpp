#pragma once

// Closed-form and brute-force references used to check the engine.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "aniscert/cert_math.hpp"
#include "aniscert/distributions.hpp"
#include "aniscert/linear_model.hpp"
#include "aniscert/smoothing.hpp"

namespace aniscert::oracle {

// P(w.(x + eps*sigma + mu) + b > 0) for eps ~ N(0, lambda^2 I):
// Phi((w.(x + mu) + b) / (lambda ||w*sigma||_2)).
double analytic_gaussian_pa(const LinearModel& model, std::span<const double> x,
                            const dist::AnisoParams& params, double lambda);

// Smallest ||Sigma^-1 delta||_p that puts x + delta on the decision boundary
// of the Gaussian-smoothed halfspace: |w.(x + mu) + b| / ||w*sigma||_q with q
// the dual exponent.
double linear_flip_distance(const LinearModel& model, std::span<const double> x,
                            const dist::AnisoParams& params, cert::Norm norm);

// Scans `grid_density` points per axis over the bounding box of the region
// ||Sigma^-1 delta||_p <= base_radius (interior points plus each grid
// direction projected onto the boundary) and returns the first delta whose
// analytically smoothed prediction differs from the clean one.
std::optional<std::vector<double>> grid_flip_search(const LinearModel& model, std::span<const double> x,
                                                    const dist::AnisoParams& params, double lambda,
                                                    cert::Norm norm, double base_radius,
                                                    std::size_t grid_density);

struct VolumeEstimate {
  double value = 0.0;
  double std_error = 0.0;
};

// Rejection-sampling volume of {delta : sum |delta_i / (sigma_i R)|^p <= 1}
// inside the box prod [-sigma_i R, sigma_i R].
VolumeEstimate mc_volume(std::span<const double> sigma, double norm_p, double base_radius,
                         std::size_t samples, std::uint64_t seed);

// f'(z) = f(sigma * z + mu'), mu' = mu + x - sigma * x. With the sign fault
// injected, -sigma is used instead of sigma.
smoothing::ClassifierHandle transformed_classifier(const smoothing::ClassifierHandle& f,
                                                   std::span<const double> x, const dist::AnisoParams& params,
                                                   bool inject_sigma_sign_fault = false);

struct EquivalenceReport {
  std::uint64_t draws = 0;
  std::uint64_t mismatches = 0;   // draw-by-draw label differences
  stats::CountTally anisotropic;  // engine tally of f under (sigma, mu)
  stats::CountTally transformed;  // engine tally of f' under isotropic noise
};

// Compares f under anisotropic noise with f' under isotropic noise drawn from
// the same seed, per draw and through the engine.
EquivalenceReport check_transformation_equivalence(const smoothing::ClassifierHandle& f,
                                                   std::span<const double> x, const dist::AnisoParams& params,
                                                   const dist::NoiseSpec& spec, std::uint64_t n,
                                                   std::uint64_t seed, bool inject_sigma_sign_fault = false);

// Random small instance for the equivalence check: a lookup-table classifier
// on [-2, 3]^d, x in [0, 1]^d, sigma in [0.2, 2], mu in [-0.5, 0.5].
struct RandomInstance {
  smoothing::ClassifierHandle f;
  std::vector<double> x;
  dist::AnisoParams params;
};
RandomInstance random_instance(std::size_t d, std::size_t num_classes, std::uint64_t seed);

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
  double seconds = 0.0;
};

struct SuiteOptions {
  std::uint64_t seed = 20240601;
  bool inject_sigma_sign_fault = false;
  std::size_t volume_samples = 1000000;
  std::size_t flip_grid_3d = 200;
};

// The full verification suite: transformation equivalence, linear tightness
// and grid search, volume agreement, Clopper-Pearson closed form.
std::vector<CheckResult> run_verification_suite(const SuiteOptions& options = {});

}  // namespace aniscert::oracle

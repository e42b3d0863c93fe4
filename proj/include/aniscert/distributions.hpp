#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "aniscert/rng.hpp"

namespace aniscert::dist {

enum class Family { Gaussian, Laplace, ExpLinf, UniformLinf, PowerLawLinf };

std::string_view to_string(Family family);
Family parse_family(std::string_view name);

// Isotropic base noise: a family plus its scalar scale lambda. The power-law
// exponent is present exactly for PowerLawLinf.
class NoiseSpec {
 public:
  NoiseSpec(Family family, double lambda, std::optional<double> power_exponent = std::nullopt);

  static NoiseSpec gaussian(double lambda) { return {Family::Gaussian, lambda}; }

  Family family() const noexcept { return family_; }
  double lambda() const noexcept { return lambda_; }
  // Throws unless family() == PowerLawLinf.
  double power_exponent() const;

 private:
  Family family_;
  double lambda_;
  std::optional<double> power_exponent_;
};

// Small dense row-major matrix, only used for the general-covariance path
// (verification sizes, d <= 8).
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }

  static Matrix diagonal(std::span<const double> diag);
};

// Solves A x = b by Gaussian elimination with partial pivoting. Throws on a
// singular matrix.
std::vector<double> solve(const Matrix& a, std::span<const double> b);

// Condition number in the 1-norm, from an explicit inverse (small d only).
double condition_number(const Matrix& a);

inline constexpr double kMinSigma = 1e-12;
inline constexpr double kMaxConditionNumber = 1e12;
inline constexpr std::size_t kMaxFullSigmaDim = 8;

// Anisotropic parameters: per-dimension multipliers sigma and offsets mu, or a
// small invertible matrix Sigma. Without full_sigma the effective Sigma is
// diag(sigma).
class AnisoParams {
 public:
  AnisoParams(std::vector<double> sigma, std::vector<double> mu,
              std::optional<Matrix> full_sigma = std::nullopt);

  static AnisoParams isotropic(std::size_t d) {
    return {std::vector<double>(d, 1.0), std::vector<double>(d, 0.0)};
  }

  std::size_t dim() const noexcept { return sigma_.size(); }
  std::span<const double> sigma() const noexcept { return sigma_; }
  std::span<const double> mu() const noexcept { return mu_; }
  const std::optional<Matrix>& full_sigma() const noexcept { return full_sigma_; }
  bool is_diagonal() const noexcept { return !full_sigma_.has_value(); }

 private:
  std::vector<double> sigma_;
  std::vector<double> mu_;
  std::optional<Matrix> full_sigma_;
};

// Fills `out` with one i.i.d. isotropic draw. Advances `rng`.
void sample_isotropic_into(const NoiseSpec& spec, Rng& rng, std::span<double> out);
std::vector<double> sample_isotropic(const NoiseSpec& spec, std::size_t d, Rng& rng);

// eps' = Sigma eps + mu (diagonal case: eps * sigma + mu element-wise).
void to_anisotropic_into(std::span<const double> eps, const AnisoParams& params,
                         std::span<double> out);
std::vector<double> to_anisotropic(std::span<const double> eps, const AnisoParams& params);

std::vector<double> sample_anisotropic(const NoiseSpec& spec, const AnisoParams& params, Rng& rng);

}  // namespace aniscert::dist

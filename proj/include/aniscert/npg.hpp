#pragma once

// Noise-parameter generators: a closed-form spatial pattern, a learned global
// map (constant input), and cascaded input-dependent maps.

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "aniscert/cert_math.hpp"
#include "aniscert/distributions.hpp"
#include "aniscert/nn.hpp"

namespace aniscert::npg {

inline constexpr double kSigmaFloor = 1e-3;
inline constexpr double kSoftMinTau = 0.05;
inline constexpr std::size_t kConstantInputLength = 32;

struct PatternSpec {
  cert::Norm norm = cert::Norm::L2;
  double kappa = 0.0;
  double iota = 1.0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::optional<double> target_mean;

  void validate() const;
};

// Row-major H x W map. Pixel (r, c) has centered coordinates
// (a, b) = (r - H/2, c - W/2) using integer halves.
std::vector<double> pattern_sigma(const PatternSpec& spec);

enum class NpgKind { Pattern, DatasetWise, CertificationWise };

std::string_view to_string(NpgKind kind);
NpgKind parse_npg_kind(std::string_view name);

enum class VarianceTerm { MeanSigma, MinSigma };

std::string_view to_string(VarianceTerm term);
VarianceTerm parse_variance_term(std::string_view name);

// sigma and mu recorded on a tape, each [B, d] or [1, d] (broadcast over the batch).
struct ParamVars {
  nn::Var sigma;
  nn::Var mu;
};

class NpgModel {
 public:
  static NpgModel pattern(PatternSpec spec);
  // Two 5-layer perceptrons (hidden width `hidden`) on an all-ones input.
  static NpgModel dataset_wise(std::size_t d, double gamma, std::uint64_t seed, std::size_t hidden = 256);
  // Two densely connected 3x3 conv stacks over an H x W single-channel input;
  // sigma_net sees x + mu.
  static NpgModel certification_wise(std::size_t height, std::size_t width, double gamma,
                                     std::uint64_t seed, std::size_t channels = 16,
                                     std::size_t conv_layers = 4);
  // Rebuilds a generator from its parts (checkpoint loading).
  NpgModel(NpgKind kind, double gamma, std::size_t dim, std::optional<PatternSpec> pattern,
           std::optional<nn::Model> mu_net, std::optional<nn::Model> sigma_net);

  NpgKind kind() const noexcept { return kind_; }
  double gamma() const noexcept { return gamma_; }
  std::size_t dim() const noexcept { return dim_; }
  const std::optional<PatternSpec>& pattern_spec() const noexcept { return pattern_; }
  const std::optional<nn::Model>& mu_net() const noexcept { return mu_net_; }
  const std::optional<nn::Model>& sigma_net() const noexcept { return sigma_net_; }

  // Parameters for one clean input. x is ignored except for CertificationWise,
  // where it is required.
  dist::AnisoParams generate_params(std::optional<std::span<const double>> x = std::nullopt) const;

  // Records the generator for a batch x [B, d].
  ParamVars record(nn::Tape& t, nn::Var x, bool trainable);

  std::vector<nn::Tensor*> trainable_params();

 private:
  NpgModel() = default;

  NpgKind kind_ = NpgKind::Pattern;
  double gamma_ = 1.0;
  std::size_t dim_ = 0;
  std::optional<PatternSpec> pattern_;
  std::optional<nn::Model> mu_net_;
  std::optional<nn::Model> sigma_net_;
  nn::Tensor constant_input_;
  nn::Tensor pattern_sigma_;
  nn::Tensor pattern_mu_;
};

struct LossOptions {
  VarianceTerm variance = VarianceTerm::MeanSigma;
  double variance_weight = 1.0;
  bool train_classifier = true;
  bool train_npg = true;
  bool compute_grad = true;
};

struct LossValue {
  double loss = 0.0;
  double cross_entropy = 0.0;
  double variance_term = 0.0;
  double mean_sigma = 0.0;
  double min_sigma = 0.0;  // hard minimum over the batch
};

// -variance_weight * variance_term(sigma) + CE(classifier(x + eps*sigma + mu), y)
// with one isotropic draw per example from Rng(seed). With compute_grad the
// gradients accumulate into the trainable tensors.
LossValue npg_loss(NpgModel& npg, nn::Model& classifier, const nn::Tensor& x,
                   std::span<const int> labels, const dist::NoiseSpec& spec, std::uint64_t seed,
                   const LossOptions& options = {});

// Checkpoint in the nn text format with kind, gamma, dim and pattern fields in the header.
void save_npg(std::ostream& out, const NpgModel& model);
NpgModel load_npg(std::istream& in);

}  // namespace aniscert::npg

#pragma once

// Monte-Carlo smoothed classifier: sample tallies, certification with
// abstention, and prediction with a binomial test.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "aniscert/cert_math.hpp"
#include "aniscert/distributions.hpp"
#include "aniscert/linear_model.hpp"
#include "aniscert/nn.hpp"
#include "aniscert/npg.hpp"
#include "aniscert/stats.hpp"

namespace aniscert::smoothing {

// Axis-aligned grid of class labels over [lo, hi]^d. Points outside are
// clamped to the nearest cell.
struct LookupTable {
  std::size_t d = 0;
  std::size_t cells_per_axis = 0;
  double lo = 0.0;
  double hi = 1.0;
  std::vector<int> labels;  // cells_per_axis^d entries, first axis slowest

  int classify(std::span<const double> x) const;
};

// Deterministic base classifier.
class ClassifierHandle {
 public:
  enum class Kind { Nn, Linear, Lookup, Custom };
  using Fn = std::function<int(std::span<const double>)>;

  static ClassifierHandle neural(std::shared_ptr<const nn::Model> model, std::size_t num_classes);
  static ClassifierHandle linear(LinearModel model);
  static ClassifierHandle lookup(LookupTable table, std::size_t num_classes);
  static ClassifierHandle custom(Fn fn, std::size_t num_classes);

  Kind kind() const noexcept { return kind_; }
  std::size_t num_classes() const noexcept { return num_classes_; }

  int classify(std::span<const double> x) const;
  // `inputs` holds rows of length d; writes one label per row.
  void classify_batch(std::span<const double> inputs, std::size_t d, std::span<int> out) const;

 private:
  ClassifierHandle() = default;
  int checked(int label) const;

  Kind kind_ = Kind::Custom;
  std::size_t num_classes_ = 0;
  std::shared_ptr<const nn::Model> model_;
  std::optional<LinearModel> linear_;
  std::optional<LookupTable> table_;
  Fn fn_;
};

// Draws per chunk; each chunk has its own derived seed stream, so tallies do
// not depend on how chunks are spread over workers.
inline constexpr std::uint64_t kChunkSize = 1000;

// Tally of f(x + Sigma eps + mu) over n draws.
stats::CountTally classify_samples_serial(const ClassifierHandle& f, std::span<const double> x,
                                          const dist::AnisoParams& params, const dist::NoiseSpec& spec,
                                          std::uint64_t n, std::uint64_t seed);
// Same tally with chunks fanned out over `workers` OpenMP threads (0: default).
stats::CountTally classify_samples(const ClassifierHandle& f, std::span<const double> x,
                                   const dist::AnisoParams& params, const dist::NoiseSpec& spec,
                                   std::uint64_t n, std::uint64_t seed, int workers = 0);

struct EngineParams {
  std::uint64_t n0 = 100;
  std::uint64_t n = 100000;
  double alpha = 0.001;
  int workers = 0;

  void validate() const;
};

enum class Verdict { Certified, Abstain };

struct CertResult {
  Verdict verdict = Verdict::Abstain;
  int predicted = -1;          // -1 on abstain
  double p_a_lower = 0.0;
  std::optional<cert::Certificate> certificate;
  std::uint64_t n0 = 0;
  std::uint64_t n = 0;
  double alpha = 0.0;
};

// Seed tags for the disjoint selection / estimation / prediction streams.
inline constexpr std::uint64_t kSelectionStream = 1;
inline constexpr std::uint64_t kEstimationStream = 2;
inline constexpr std::uint64_t kPredictionStream = 3;

// Certification with parameters already generated from the clean input.
CertResult certify(const ClassifierHandle& f, const dist::AnisoParams& params, std::span<const double> x,
                   const dist::NoiseSpec& spec, cert::Norm norm, const EngineParams& engine,
                   std::uint64_t seed);
// Generates the parameters once from the clean x, then certifies.
CertResult certify(const ClassifierHandle& f, const npg::NpgModel& npg, std::span<const double> x,
                   const dist::NoiseSpec& spec, cert::Norm norm, const EngineParams& engine,
                   std::uint64_t seed);

struct Prediction {
  std::optional<int> label;  // nullopt on abstain
  std::uint64_t n_a = 0;
  double p_value = 1.0;
};

Prediction predict(const ClassifierHandle& f, const dist::AnisoParams& params, std::span<const double> x,
                   const dist::NoiseSpec& spec, std::uint64_t n, double alpha, std::uint64_t seed,
                   int workers = 0);
Prediction predict(const ClassifierHandle& f, const npg::NpgModel& npg, std::span<const double> x,
                   const dist::NoiseSpec& spec, std::uint64_t n, double alpha, std::uint64_t seed,
                   int workers = 0);

struct ExampleResult {
  std::uint64_t example_id = 0;
  int true_label = 0;
  std::uint64_t seed = 0;
  CertResult result;
};

enum class Metric { Radius, Alm };

// Fraction of examples certified with the true label and metric >= r.
double certified_accuracy(std::span<const ExampleResult> results, double r, Metric metric);

struct CurvePoint {
  double threshold = 0.0;
  double acc_radius = 0.0;
  double acc_alm = 0.0;
};

inline constexpr std::size_t kCurveGridPoints = 50;

// 50 uniform thresholds on [0, max alm] merged with the report points
// 0, 0.25, ..., 2.25 that do not exceed max alm. Empty for empty results.
std::vector<double> curve_thresholds(std::span<const ExampleResult> results);
std::vector<CurvePoint> accuracy_curve(std::span<const ExampleResult> results);
std::vector<CurvePoint> accuracy_curve(std::span<const ExampleResult> results,
                                       std::span<const double> thresholds);

struct Campaign {
  std::vector<ExampleResult> results;
  std::vector<CurvePoint> curve;
};

// Certifies every (inputs[i], labels[i]) with seed derive_seed(seed, i).
Campaign evaluate_campaign(std::span<const std::vector<double>> inputs, std::span<const int> labels,
                           const ClassifierHandle& f, const npg::NpgModel& npg, const dist::NoiseSpec& spec,
                           cert::Norm norm, const EngineParams& engine, std::uint64_t seed);

}  // namespace aniscert::smoothing

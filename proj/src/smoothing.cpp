#include "aniscert/smoothing.hpp"

#include <omp.h>

#include <algorithm>
#include <cmath>
#include <exception>
#include <stdexcept>
#include <string>

#include "aniscert/rng.hpp"

namespace aniscert {

void LinearModel::validate() const {
  double s = 0.0;
  for (double v : w) s += v * v;
  if (!(s > 0.0)) throw std::invalid_argument("LinearModel: weight vector must be nonzero");
}

double LinearModel::score(std::span<const double> x) const {
  if (x.size() != w.size()) throw std::invalid_argument("LinearModel: dimension mismatch");
  double s = b;
  for (std::size_t i = 0; i < w.size(); ++i) s += w[i] * x[i];
  return s;
}

}  // namespace aniscert

namespace aniscert::smoothing {

int LookupTable::classify(std::span<const double> x) const {
  if (x.size() != d) throw std::invalid_argument("LookupTable: dimension mismatch");
  std::size_t index = 0;
  const double width = (hi - lo) / static_cast<double>(cells_per_axis);
  for (std::size_t i = 0; i < d; ++i) {
    const double pos = std::floor((x[i] - lo) / width);
    const double clamped = std::clamp(pos, 0.0, static_cast<double>(cells_per_axis - 1));
    index = index * cells_per_axis + static_cast<std::size_t>(clamped);
  }
  return labels[index];
}

ClassifierHandle ClassifierHandle::neural(std::shared_ptr<const nn::Model> model, std::size_t num_classes) {
  if (!model) throw std::invalid_argument("ClassifierHandle: null model");
  if (num_classes < 2) throw std::invalid_argument("ClassifierHandle: need at least 2 classes");
  ClassifierHandle h;
  h.kind_ = Kind::Nn;
  h.num_classes_ = num_classes;
  h.model_ = std::move(model);
  return h;
}

ClassifierHandle ClassifierHandle::linear(LinearModel model) {
  model.validate();
  ClassifierHandle h;
  h.kind_ = Kind::Linear;
  h.num_classes_ = 2;
  h.linear_ = std::move(model);
  return h;
}

ClassifierHandle ClassifierHandle::lookup(LookupTable table, std::size_t num_classes) {
  std::size_t cells = 1;
  for (std::size_t i = 0; i < table.d; ++i) cells *= table.cells_per_axis;
  if (table.d == 0 || table.cells_per_axis == 0 || table.labels.size() != cells || !(table.hi > table.lo)) {
    throw std::invalid_argument("ClassifierHandle: malformed lookup table");
  }
  for (int label : table.labels) {
    if (label < 0 || static_cast<std::size_t>(label) >= num_classes) {
      throw std::invalid_argument("ClassifierHandle: lookup label out of range");
    }
  }
  ClassifierHandle h;
  h.kind_ = Kind::Lookup;
  h.num_classes_ = num_classes;
  h.table_ = std::move(table);
  return h;
}

ClassifierHandle ClassifierHandle::custom(Fn fn, std::size_t num_classes) {
  if (!fn) throw std::invalid_argument("ClassifierHandle: empty function");
  ClassifierHandle h;
  h.kind_ = Kind::Custom;
  h.num_classes_ = num_classes;
  h.fn_ = std::move(fn);
  return h;
}

int ClassifierHandle::checked(int label) const {
  if (label < 0 || static_cast<std::size_t>(label) >= num_classes_) {
    throw std::runtime_error("classifier returned class " + std::to_string(label) + " outside [0, " +
                             std::to_string(num_classes_) + ")");
  }
  return label;
}

int ClassifierHandle::classify(std::span<const double> x) const {
  switch (kind_) {
    case Kind::Linear: return linear_->classify(x);
    case Kind::Lookup: return table_->classify(x);
    case Kind::Custom: return checked(fn_(x));
    case Kind::Nn: {
      int out = 0;
      classify_batch(x, x.size(), std::span<int>(&out, 1));
      return out;
    }
  }
  throw std::logic_error("ClassifierHandle: unknown kind");
}

void ClassifierHandle::classify_batch(std::span<const double> inputs, std::size_t d, std::span<int> out) const {
  if (d == 0 || inputs.size() != d * out.size()) throw std::invalid_argument("classify_batch: size mismatch");
  if (kind_ == Kind::Nn) {
    const nn::Tensor batch({out.size(), d}, std::vector<double>(inputs.begin(), inputs.end()));
    const nn::Tensor logits = model_->forward(batch);
    if (logits.rank() != 2 || logits.shape[1] != num_classes_) {
      throw std::runtime_error("classifier output width does not match the class count");
    }
    const auto labels = nn::argmax_rows(logits);
    std::copy(labels.begin(), labels.end(), out.begin());
    return;
  }
  for (std::size_t r = 0; r < out.size(); ++r) out[r] = classify(inputs.subspan(r * d, d));
}

namespace {

void check_inputs(std::span<const double> x, const dist::AnisoParams& params, std::uint64_t n) {
  if (n < 1) throw std::invalid_argument("classify_samples: n must be >= 1");
  if (x.size() != params.dim()) throw std::invalid_argument("classify_samples: input and params dimension differ");
}

std::uint64_t chunk_count(std::uint64_t n) { return (n + kChunkSize - 1) / kChunkSize; }

stats::CountTally run_chunk(const ClassifierHandle& f, std::span<const double> x, const dist::AnisoParams& params,
                            const dist::NoiseSpec& spec, std::uint64_t n, std::uint64_t seed,
                            std::uint64_t chunk) {
  const std::uint64_t begin = chunk * kChunkSize;
  const auto count = static_cast<std::size_t>(std::min(kChunkSize, n - begin));
  const std::size_t d = x.size();
  Rng rng(derive_seed(seed, chunk));
  std::vector<double> eps(d);
  std::vector<double> inputs(count * d);
  for (std::size_t k = 0; k < count; ++k) {
    std::span<double> row(inputs.data() + k * d, d);
    dist::sample_isotropic_into(spec, rng, eps);
    dist::to_anisotropic_into(eps, params, row);
    for (std::size_t i = 0; i < d; ++i) row[i] = x[i] + row[i];
  }
  std::vector<int> labels(count);
  f.classify_batch(inputs, d, labels);
  stats::CountTally tally(f.num_classes());
  for (int c : labels) ++tally.counts[static_cast<std::size_t>(c)];
  tally.n = count;
  return tally;
}

}  // namespace

stats::CountTally classify_samples_serial(const ClassifierHandle& f, std::span<const double> x,
                                          const dist::AnisoParams& params, const dist::NoiseSpec& spec,
                                          std::uint64_t n, std::uint64_t seed) {
  check_inputs(x, params, n);
  stats::CountTally total(f.num_classes());
  for (std::uint64_t c = 0; c < chunk_count(n); ++c) total += run_chunk(f, x, params, spec, n, seed, c);
  return total;
}

stats::CountTally classify_samples(const ClassifierHandle& f, std::span<const double> x,
                                   const dist::AnisoParams& params, const dist::NoiseSpec& spec,
                                   std::uint64_t n, std::uint64_t seed, int workers) {
  check_inputs(x, params, n);
  const auto chunks = static_cast<std::int64_t>(chunk_count(n));
  if (workers == 1 || chunks == 1) return classify_samples_serial(f, x, params, spec, n, seed);
  const int threads = workers > 0 ? workers : omp_get_max_threads();
  std::vector<stats::CountTally> parts(static_cast<std::size_t>(chunks));
  std::exception_ptr failure;
#pragma omp parallel for num_threads(threads) schedule(dynamic)
  for (std::int64_t c = 0; c < chunks; ++c) {
    try {
      parts[static_cast<std::size_t>(c)] = run_chunk(f, x, params, spec, n, seed, static_cast<std::uint64_t>(c));
    } catch (...) {
#pragma omp critical(aniscert_classify_failure)
      if (!failure) failure = std::current_exception();
    }
  }
  if (failure) std::rethrow_exception(failure);
  stats::CountTally total(f.num_classes());
  for (const auto& p : parts) total += p;
  return total;
}

void EngineParams::validate() const {
  if (n0 < 1 || n < 1) throw std::invalid_argument("engine: n0 and n must be >= 1");
  if (!(alpha > 0.0 && alpha < 1.0)) throw std::invalid_argument("engine: alpha must lie in (0, 1)");
  if (workers < 0) throw std::invalid_argument("engine: workers must be >= 0");
}

CertResult certify(const ClassifierHandle& f, const dist::AnisoParams& params, std::span<const double> x,
                   const dist::NoiseSpec& spec, cert::Norm norm, const EngineParams& engine,
                   std::uint64_t seed) {
  engine.validate();
  CertResult out;
  out.n0 = engine.n0;
  out.n = engine.n;
  out.alpha = engine.alpha;
  const auto selection =
      classify_samples(f, x, params, spec, engine.n0, derive_seed(seed, kSelectionStream), engine.workers);
  const std::size_t top = selection.top_class();
  const auto estimation =
      classify_samples(f, x, params, spec, engine.n, derive_seed(seed, kEstimationStream), engine.workers);
  out.p_a_lower = stats::lower_conf_bound(estimation.counts[top], engine.n, 1.0 - engine.alpha);
  if (out.p_a_lower > 0.5) {
    out.certificate = cert::certificate(spec, norm, cert::ProbBounds{out.p_a_lower, std::nullopt}, params);
    if (out.certificate) {
      out.verdict = Verdict::Certified;
      out.predicted = static_cast<int>(top);
    }
  }
  return out;
}

CertResult certify(const ClassifierHandle& f, const npg::NpgModel& npg, std::span<const double> x,
                   const dist::NoiseSpec& spec, cert::Norm norm, const EngineParams& engine,
                   std::uint64_t seed) {
  const dist::AnisoParams params = npg.generate_params(x);
  return certify(f, params, x, spec, norm, engine, seed);
}

Prediction predict(const ClassifierHandle& f, const dist::AnisoParams& params, std::span<const double> x,
                   const dist::NoiseSpec& spec, std::uint64_t n, double alpha, std::uint64_t seed,
                   int workers) {
  if (n < 1) throw std::invalid_argument("predict: n must be >= 1");
  if (!(alpha > 0.0 && alpha < 1.0)) throw std::invalid_argument("predict: alpha must lie in (0, 1)");
  const auto tally = classify_samples(f, x, params, spec, n, derive_seed(seed, kPredictionStream), workers);
  const std::size_t top = tally.top_class();
  Prediction p;
  p.n_a = tally.counts[top];
  p.p_value = stats::binomial_p_value(p.n_a, n, 0.5);
  if (p.p_value <= alpha) p.label = static_cast<int>(top);
  return p;
}

Prediction predict(const ClassifierHandle& f, const npg::NpgModel& npg, std::span<const double> x,
                   const dist::NoiseSpec& spec, std::uint64_t n, double alpha, std::uint64_t seed,
                   int workers) {
  return predict(f, npg.generate_params(x), x, spec, n, alpha, seed, workers);
}

double certified_accuracy(std::span<const ExampleResult> results, double r, Metric metric) {
  if (results.empty()) return 0.0;
  std::size_t hits = 0;
  for (const auto& e : results) {
    const auto& res = e.result;
    if (res.verdict != Verdict::Certified || res.predicted != e.true_label || !res.certificate) continue;
    const double value = metric == Metric::Radius ? res.certificate->radius : res.certificate->alm;
    if (value >= r) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(results.size());
}

std::vector<double> curve_thresholds(std::span<const ExampleResult> results) {
  if (results.empty()) return {};
  double max_alm = 0.0;
  for (const auto& e : results) {
    if (e.result.verdict == Verdict::Certified && e.result.certificate) {
      max_alm = std::max(max_alm, e.result.certificate->alm);
    }
  }
  std::vector<double> grid;
  for (std::size_t i = 0; i < kCurveGridPoints; ++i) {
    grid.push_back(max_alm * static_cast<double>(i) / static_cast<double>(kCurveGridPoints - 1));
  }
  for (int k = 0; k <= 9; ++k) {
    const double r = 0.25 * k;
    if (r <= max_alm) grid.push_back(r);
  }
  std::sort(grid.begin(), grid.end());
  grid.erase(std::unique(grid.begin(), grid.end()), grid.end());
  return grid;
}

std::vector<CurvePoint> accuracy_curve(std::span<const ExampleResult> results, std::span<const double> thresholds) {
  std::vector<CurvePoint> curve;
  curve.reserve(thresholds.size());
  for (double r : thresholds) {
    curve.push_back({r, certified_accuracy(results, r, Metric::Radius), certified_accuracy(results, r, Metric::Alm)});
  }
  return curve;
}

std::vector<CurvePoint> accuracy_curve(std::span<const ExampleResult> results) {
  const auto grid = curve_thresholds(results);
  return accuracy_curve(results, grid);
}

Campaign evaluate_campaign(std::span<const std::vector<double>> inputs, std::span<const int> labels,
                           const ClassifierHandle& f, const npg::NpgModel& npg, const dist::NoiseSpec& spec,
                           cert::Norm norm, const EngineParams& engine, std::uint64_t seed) {
  if (inputs.size() != labels.size()) throw std::invalid_argument("campaign: inputs and labels differ in length");
  Campaign c;
  c.results.reserve(inputs.size());
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    ExampleResult e;
    e.example_id = i;
    e.true_label = labels[i];
    e.seed = derive_seed(seed, i);
    e.result = certify(f, npg, inputs[i], spec, norm, engine, e.seed);
    c.results.push_back(std::move(e));
  }
  c.curve = accuracy_curve(c.results);
  return c;
}

}  // namespace aniscert::smoothing

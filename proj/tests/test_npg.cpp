#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <vector>

#include "aniscert/data_io.hpp"
#include "aniscert/npg.hpp"
#include "aniscert/rng.hpp"
#include "aniscert/training.hpp"
#include "gradcheck.hpp"

using namespace aniscert;
using namespace aniscert::npg;
using cert::Norm;

namespace {

double mean_of(std::span<const double> v) { return std::accumulate(v.begin(), v.end(), 0.0) / v.size(); }

nn::Tensor batch_of(const data::Dataset& ds, std::size_t begin, std::size_t count) {
  nn::Tensor x({count, ds.d});
  for (std::size_t i = 0; i < count; ++i) std::copy(ds.inputs[begin + i].begin(), ds.inputs[begin + i].end(), x.data.begin() + i * ds.d);
  return x;
}

}  // namespace

TEST_CASE("pattern sigma examples") {
  for (Norm p : {Norm::L1, Norm::L2, Norm::Linf}) {
    PatternSpec flat{p, 0.0, 0.7, 6, 4};
    for (double s : pattern_sigma(flat)) CHECK(s == 0.7);
    PatternSpec centered{p, 2.5, 0.3, 7, 9};
    CHECK(pattern_sigma(centered)[3 * 9 + 4] == 0.3);
  }
  // Pixel (a, b) = (1, 2) of a 5x5 map sits at row 3, column 4.
  PatternSpec inf{Norm::Linf, 1.0, 1.0, 5, 5};
  CHECK(pattern_sigma(inf)[3 * 5 + 4] == 5.0);
  PatternSpec l1{Norm::L1, 1.0, 1.0, 5, 5};
  CHECK(pattern_sigma(l1)[3 * 5 + 4] == 10.0);
  PatternSpec l2{Norm::L2, 1.0, 1.0, 5, 5};
  CHECK(pattern_sigma(l2)[3 * 5 + 4] == doctest::Approx(6.0).epsilon(1e-15));

  CHECK_THROWS(pattern_sigma(PatternSpec{Norm::L2, 1.0, 0.0, 5, 5}));
  CHECK_THROWS(pattern_sigma(PatternSpec{Norm::L2, -1.0, 1.0, 5, 5}));
}

TEST_CASE("pattern sigma is monotone in the centered norm on 28x28") {
  for (Norm p : {Norm::L1, Norm::L2, Norm::Linf}) {
    const PatternSpec spec{p, 0.01, 0.5, 28, 28};
    const auto sigma = pattern_sigma(spec);
    std::vector<double> norms(784);
    for (std::size_t r = 0; r < 28; ++r) {
      for (std::size_t c = 0; c < 28; ++c) {
        const double ab[2] = {static_cast<double>(r) - 14.0, static_cast<double>(c) - 14.0};
        norms[r * 28 + c] = cert::lp_norm(ab, p);
      }
    }
    std::size_t violations = 0;
    for (std::size_t i = 0; i < 784; ++i) {
      for (std::size_t j = 0; j < 784; ++j) violations += norms[i] <= norms[j] && sigma[i] > sigma[j];
    }
    CHECK(violations == 0);
  }
}

TEST_CASE("pattern target mean rescales the map") {
  PatternSpec spec{Norm::L2, 0.05, 0.2, 28, 28, 0.8};
  const auto sigma = pattern_sigma(spec);
  CHECK(mean_of(sigma) == doctest::Approx(0.8).epsilon(1e-12));
  spec.target_mean.reset();
  const auto raw = pattern_sigma(spec);
  const double ratio = sigma[0] / raw[0];
  for (std::size_t i = 0; i < raw.size(); ++i) CHECK(sigma[i] == doctest::Approx(raw[i] * ratio).epsilon(1e-12));
}

TEST_CASE("generate_params by kind") {
  const PatternSpec spec{Norm::L2, 0.1, 0.4, 4, 5};
  const auto pat = NpgModel::pattern(spec);
  const auto pp = pat.generate_params();
  CHECK(std::vector<double>(pp.sigma().begin(), pp.sigma().end()) == pattern_sigma(spec));
  for (double m : pp.mu()) CHECK(m == 0.0);

  Rng rng(1);
  std::vector<double> x1(20), x2(20);
  for (auto& v : x1) v = rng.uniform();
  for (auto& v : x2) v = rng.uniform();

  const auto ds = NpgModel::dataset_wise(20, 0.8, 3, 32);
  const auto a = ds.generate_params(x1), b = ds.generate_params(x2), c = ds.generate_params();
  CHECK(std::equal(a.sigma().begin(), a.sigma().end(), b.sigma().begin()));
  CHECK(std::equal(a.mu().begin(), a.mu().end(), c.mu().begin()));

  const auto cw = NpgModel::certification_wise(4, 5, 1.0, 4, 4, 2);
  CHECK_THROWS(cw.generate_params());
  const auto p1 = cw.generate_params(x1), p1b = cw.generate_params(x1), p2 = cw.generate_params(x2);
  CHECK(std::equal(p1.sigma().begin(), p1.sigma().end(), p1b.sigma().begin()));
  CHECK(std::equal(p1.mu().begin(), p1.mu().end(), p1b.mu().begin()));
  CHECK_FALSE(std::equal(p1.sigma().begin(), p1.sigma().end(), p2.sigma().begin()));
  CHECK_FALSE(std::equal(p1.mu().begin(), p1.mu().end(), p2.mu().begin()));
}

TEST_CASE("generated sigma respects the floor and the gamma bound") {
  Rng rng(2);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const double gamma = 0.25 + 0.25 * static_cast<double>(seed % 4);
    const auto ds = NpgModel::dataset_wise(6, gamma, seed, 16);
    const auto cw = NpgModel::certification_wise(2, 3, gamma, seed, 3, 2);
    std::vector<double> x(6);
    for (auto& v : x) v = rng.uniform(-50.0, 50.0);
    for (const auto& params : {ds.generate_params(), cw.generate_params(x)}) {
      for (double s : params.sigma()) {
        CHECK(s >= kSigmaFloor);
        CHECK(s <= kSigmaFloor + gamma);
      }
      for (double m : params.mu()) CHECK(std::abs(m) <= gamma);
    }
  }
}

TEST_CASE("isotropic generator reduces the loss to noisy cross-entropy") {
  auto npg = NpgModel::pattern(PatternSpec{Norm::L2, 0.0, 1.0, 1, 3});
  nn::Model clf(training::two_layer_classifier(3, 8, 4), 5);
  Rng rng(6);
  nn::Tensor x({5, 3});
  for (auto& v : x.data) v = rng.uniform();
  const std::vector<int> labels{0, 3, 1, 2, 3};
  const auto spec = dist::NoiseSpec::gaussian(0.5);
  LossOptions opts;
  opts.compute_grad = false;
  const auto value = npg_loss(npg, clf, x, labels, spec, 77, opts);

  nn::Tensor noisy = x;
  std::vector<double> eps(15);
  Rng draw(77);
  dist::sample_isotropic_into(spec, draw, eps);
  for (std::size_t i = 0; i < 15; ++i) noisy.data[i] += eps[i];
  nn::Tape t;
  const auto ce = nn::softmax_cross_entropy(t, t.view(clf.forward(noisy)), labels);
  CHECK(value.cross_entropy == doctest::Approx(t.value(ce).data[0]).epsilon(1e-12));
  CHECK(value.variance_term == 1.0);
  CHECK(value.loss == doctest::Approx(value.cross_entropy - 1.0).epsilon(1e-12));
}

TEST_CASE("npg_loss generator gradients match finite differences on a 2-pixel model") {
  for (VarianceTerm term : {VarianceTerm::MeanSigma, VarianceTerm::MinSigma}) {
    CAPTURE(to_string(term));
    for (std::uint64_t seed : {2, 11}) {
      const auto r = gradcheck::npg_loss_check(term, seed);
      CHECK(r.checked > 100);
      CHECK(r.mismatches == 0);
    }
  }
}

TEST_CASE("pure variance objective never shrinks mean sigma") {
  // A zero classifier has constant logits, so the CE term contributes no gradient.
  auto npg = NpgModel::dataset_wise(4, 1.0, 12, 16);
  nn::Model clf({nn::LayerSpec::dense(4, 2)}, 13);
  for (auto& p : clf.params()) std::fill(p.data.begin(), p.data.end(), 0.0);
  const nn::Tensor x({2, 4}, {0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8});
  const std::vector<int> labels{0, 1};
  LossOptions opts;
  opts.train_classifier = false;
  std::vector<nn::Tensor*> params = npg.trainable_params();
  nn::Adam adam(params, {1e-2});
  double prev = mean_of(npg.generate_params().sigma());
  for (int step = 0; step < 10; ++step) {
    adam.zero_grad();
    npg_loss(npg, clf, x, labels, dist::NoiseSpec::gaussian(1.0), 14 + step, opts);
    adam.step();
    const double now = mean_of(npg.generate_params().sigma());
    CHECK(now >= prev);
    prev = now;
  }
}

TEST_CASE("mean-sigma training raises sigma and keeps clean accuracy") {
  const auto all = data::synth_gaussians(2, 2, 500, 6.0, 15);
  Rng shuffle(16);
  data::Dataset mixed = all;
  for (std::size_t i = mixed.size(); i > 1; --i) {
    const std::size_t j = shuffle.next_u64() % i;
    std::swap(mixed.inputs[i - 1], mixed.inputs[j]);
    std::swap(mixed.labels[i - 1], mixed.labels[j]);
  }
  const auto train_set = data::slice(mixed, 0, 800);
  const auto held_out = data::slice(mixed, 800, 200);

  auto npg = NpgModel::dataset_wise(2, 0.5, 17, 32);
  nn::Model clf(training::two_layer_classifier(2, 32, 2), 18);
  training::TrainConfig cfg;
  cfg.epochs = 8;
  cfg.batch_size = 32;
  cfg.seed = 19;
  const auto summary = training::train(npg, clf, train_set, dist::NoiseSpec::gaussian(1.0), cfg);
  CHECK(summary.steps == 200);
  CHECK(summary.mean_sigma > summary.initial_mean_sigma);
  CHECK(training::clean_accuracy(clf, held_out, &npg) >= 0.95);
}

TEST_CASE("npg checkpoints round trip") {
  Rng rng(20);
  std::vector<double> x(6);
  for (auto& v : x) v = rng.uniform();
  const std::vector<NpgModel> models = {
      NpgModel::pattern(PatternSpec{Norm::Linf, 0.3, 0.2, 2, 3, 0.9}),
      NpgModel::pattern(PatternSpec{Norm::L1, 0.3, 0.2, 2, 3}),
      NpgModel::dataset_wise(6, 0.6, 21, 8),
      NpgModel::certification_wise(2, 3, 1.0, 22, 2, 2),
  };
  for (const auto& m : models) {
    std::stringstream ss;
    save_npg(ss, m);
    const auto back = load_npg(ss);
    CHECK(back.kind() == m.kind());
    CHECK(back.gamma() == m.gamma());
    CHECK(back.dim() == m.dim());
    const auto a = m.generate_params(x), b = back.generate_params(x);
    for (std::size_t i = 0; i < 6; ++i) {
      CHECK(std::abs(a.sigma()[i] - b.sigma()[i]) <= 1e-12);
      CHECK(std::abs(a.mu()[i] - b.mu()[i]) <= 1e-12);
    }
  }
}

TEST_CASE("kind and variance names parse") {
  for (auto k : {NpgKind::Pattern, NpgKind::DatasetWise, NpgKind::CertificationWise}) CHECK(parse_npg_kind(to_string(k)) == k);
  for (auto v : {VarianceTerm::MeanSigma, VarianceTerm::MinSigma}) CHECK(parse_variance_term(to_string(v)) == v);
  CHECK_THROWS(parse_npg_kind("random"));
}

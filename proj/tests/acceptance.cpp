// Acceptance run: one PASS/FAIL line per criterion. Exit status is the number
// of failed criteria (capped at 125).
//
//   acceptance            all criteria
//   acceptance 3 7        only the listed ones

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numbers>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "aniscert/cert_math.hpp"
#include "aniscert/cli.hpp"
#include "aniscert/data_io.hpp"
#include "aniscert/npg.hpp"
#include "aniscert/oracle.hpp"
#include "aniscert/rng.hpp"
#include "aniscert/smoothing.hpp"
#include "aniscert/stats.hpp"
#include "gradcheck.hpp"
#include "oracles.hpp"

namespace fs = std::filesystem;
using namespace aniscert;
using cert::Norm;
using dist::Family;
using dist::NoiseSpec;

namespace {

struct Outcome {
  bool passed = false;
  std::string detail;
};

std::string fmt(const char* f, double a, double b = 0.0, double c = 0.0, double d = 0.0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, a, b, c, d);
  return buf;
}

// Scratch directory removed on exit.
struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("aniscert_accept_" + tag + "_" + std::to_string(::getpid()));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string operator/(const std::string& name) const { return (path / name).string(); }
};

std::string slurp(const std::string& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

int run_cli(const std::vector<std::string>& args, std::string* out = nullptr) {
  std::ostringstream o, e;
  const int code = cli::run(args, o, e);
  if (out) *out = o.str();
  if (code != cli::kOk) std::cerr << e.str();
  return code;
}

Outcome transformation_equivalence() {
  std::uint64_t mismatches = 0, tally_diffs = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const auto inst = oracle::random_instance(1 + seed % 3, 2 + seed % 3, 1000 + seed);
    const auto rep = oracle::check_transformation_equivalence(inst.f, inst.x, inst.params,
                                                              NoiseSpec::gaussian(0.5 + 0.01 * seed), 2000, seed);
    mismatches += rep.mismatches;
    tally_diffs += !(rep.anisotropic == rep.transformed);
  }
  return {mismatches == 0 && tally_diffs == 0,
          "100 instances x 2000 draws, " + std::to_string(mismatches) + " draw mismatches, " +
              std::to_string(tally_diffs) + " tally differences"};
}

Outcome linear_tightness() {
  Rng rng(2);
  double worst = 0.0;
  int instances = 0;
  while (instances < 50) {
    const std::size_t d = 1 + rng.next_u64() % 10;
    LinearModel m;
    std::vector<double> x(d), sigma(d), mu(d);
    for (std::size_t i = 0; i < d; ++i) {
      m.w.push_back(rng.normal());
      x[i] = rng.uniform();
      sigma[i] = rng.uniform(0.2, 3.0);
      mu[i] = rng.uniform(-0.3, 0.3);
    }
    m.b = rng.normal();
    const dist::AnisoParams params(sigma, mu);
    const double lambda = rng.uniform(0.2, 2.0);
    const double raw = oracle::analytic_gaussian_pa(m, x, params, lambda);
    const double pa = std::max(raw, 1.0 - raw);
    if (pa > 1.0 - 1e-12) continue;
    const auto cert = cert::certificate(NoiseSpec::gaussian(lambda), Norm::L2, {pa, std::nullopt}, params);
    if (!cert) continue;
    worst = std::max(worst, ref::rel_err(cert->base_radius, oracle::linear_flip_distance(m, x, params, Norm::L2)));
    ++instances;
  }

  int interior = 0, missed = 0, searched = 0;
  Rng grid_rng(3);
  while (searched < 10) {
    LinearModel m{{grid_rng.normal(), grid_rng.normal()}, grid_rng.normal()};
    const std::vector<double> x{grid_rng.uniform(), grid_rng.uniform()};
    const dist::AnisoParams params({grid_rng.uniform(0.3, 2.0), grid_rng.uniform(0.3, 2.0)},
                                   {grid_rng.uniform(-0.2, 0.2), grid_rng.uniform(-0.2, 0.2)});
    const double lambda = 0.5;
    const double raw = oracle::analytic_gaussian_pa(m, x, params, lambda);
    const double pa = std::max(raw, 1.0 - raw);
    if (pa > 1.0 - 1e-9) continue;
    const double R = lambda * cert::inverse_normal_cdf(pa);
    interior += oracle::grid_flip_search(m, x, params, lambda, Norm::L2, R, 301).has_value();
    missed += !oracle::grid_flip_search(m, x, params, lambda, Norm::L2, 1.05 * R, 301).has_value();
    ++searched;
  }
  return {worst < 1e-6 && interior == 0 && missed == 0,
          fmt("max rel err %.3g over 50 instances; ", worst) + "grid search on 10 instances: " +
              std::to_string(interior) + " interior flips, " + std::to_string(missed) + " missed at 1.05R"};
}

Outcome radius_formulas() {
  struct Row {
    Family family;
    Norm norm;
  };
  const std::vector<Row> rows = {{Family::Gaussian, Norm::L2},     {Family::Gaussian, Norm::Linf},
                                 {Family::Laplace, Norm::L1},      {Family::ExpLinf, Norm::L1},
                                 {Family::ExpLinf, Norm::Linf},    {Family::UniformLinf, Norm::L1},
                                 {Family::UniformLinf, Norm::Linf}, {Family::PowerLawLinf, Norm::L1}};
  const std::size_t d = 16;
  std::vector<std::string> failures;
  for (const auto& row : rows) {
    auto spec = [&](double lambda) {
      return row.family == Family::PowerLawLinf ? NoiseSpec(row.family, lambda, 40.0) : NoiseSpec(row.family, lambda);
    };
    const std::string name = std::string(dist::to_string(row.family)) + "/" + std::string(cert::to_string(row.norm));
    double prev = -1.0;
    bool monotone = true, scales = true;
    for (int i = 0; i <= 1000; ++i) {
      const double p = 0.5 + 0.4999 * i / 1000.0;
      const double r = *cert::radius_binary(spec(0.7), row.norm, d, p);
      monotone = monotone && r >= prev;
      prev = r;
      const double r2 = *cert::radius_binary(spec(1.4), row.norm, d, p);
      scales = scales && std::abs(r2 - 2.0 * r) <= 1e-12 * std::max(1.0, r2);
    }
    const bool zero_at_half = *cert::radius_binary(spec(0.7), row.norm, d, 0.5) == 0.0;
    const bool abstains = !cert::radius_binary(spec(0.7), row.norm, d, 0.4999).has_value();
    if (!monotone) failures.push_back(name + " not monotone");
    if (!scales) failures.push_back(name + " not linear in lambda");
    if (!zero_at_half) failures.push_back(name + " nonzero at p=1/2");
    if (!abstains) failures.push_back(name + " certifies below 1/2");
  }
  const double laplace = *cert::radius_binary(NoiseSpec(Family::Laplace, 1.0), Norm::L1, d, 0.75);
  const double gauss = *cert::radius_binary(NoiseSpec::gaussian(1.0), Norm::L2, d, 0.5);
  const double uniform = *cert::radius_binary(NoiseSpec(Family::UniformLinf, 0.8), Norm::L1, d, 1.0);
  if (std::abs(laplace - std::numbers::ln2) > 1e-10) failures.push_back(fmt("laplace l1 at 0.75 = %.17g", laplace));
  if (std::abs(gauss) > 1e-10) failures.push_back(fmt("gaussian l2 at 0.5 = %.17g", gauss));
  if (std::abs(uniform - 0.8) > 1e-10) failures.push_back(fmt("uniform l1 at 1 with lambda 0.8 = %.17g", uniform));
  std::string detail = std::to_string(rows.size()) + " formulas, 1001 points each; spot values " +
                       fmt("%.12f, %.3g, %.12f", laplace, gauss, uniform);
  for (const auto& f : failures) detail += "; " + f;
  return {failures.empty(), detail};
}

Outcome volume() {
  const std::vector<double> sigma_all{1.3, 0.6, 2.1};
  double worst = 0.0;
  std::uint64_t seed = 40;
  for (std::size_t d = 1; d <= 3; ++d) {
    const std::vector<double> sigma(sigma_all.begin(), sigma_all.begin() + static_cast<long>(d));
    for (double p : {1.0, 2.0, 64.0}) {
      const double exact = cert::lebesgue_measure(sigma, p, 0.9).value;
      const auto mc = oracle::mc_volume(sigma, p, 0.9, 1000000, seed++);
      worst = std::max(worst, ref::rel_err(mc.value, exact));
    }
  }
  const std::vector<double> ones{1.0, 1.0};
  const double disc = cert::lebesgue_measure(ones, 2.0, 1.0).value;
  const double disc_mc = oracle::mc_volume(ones, 2.0, 1.0, 1000000, seed).value;
  const double disc_err = std::max(ref::rel_err(disc, std::numbers::pi), ref::rel_err(disc_mc, std::numbers::pi));
  return {worst <= 0.02 && disc_err <= 0.02,
          fmt("max rel err %.4f over 9 (d,p) cases; unit disc %.6f (mc %.6f)", worst, disc, disc_mc)};
}

Outcome clopper_pearson() {
  const double alpha = 0.05;
  double worst = 0.0;
  for (std::uint64_t n : {10, 100, 1000}) {
    worst = std::max(worst, std::abs(stats::lower_conf_bound(n, n, 1.0 - alpha) - std::pow(alpha, 1.0 / n)));
  }
  const std::uint64_t trials = 100000, n = 200;
  const double p = 0.7;
  Rng rng(5);
  std::uint64_t violations = 0;
  for (std::uint64_t t = 0; t < trials; ++t) {
    std::uint64_t k = 0;
    for (std::uint64_t i = 0; i < n; ++i) k += rng.uniform() < p;
    violations += stats::lower_conf_bound(k, n, 1.0 - alpha) > p;
  }
  const double rate = static_cast<double>(violations) / trials;
  const double limit = alpha + 3.0 * std::sqrt(alpha / trials);
  return {worst <= 1e-10 && rate <= limit,
          fmt("k=n max abs err %.3g; violation rate %.5f (limit %.5f)", worst, rate, limit)};
}

Outcome gradients() {
  std::string detail;
  bool ok = true;
  for (const auto& c : gradcheck::layer_cases()) {
    const auto r = gradcheck::layer_sweep(c, 100);
    ok = ok && r.mismatches == 0 && r.skipped < 10;
    detail += std::string(c.name) + " " + std::to_string(r.mismatches) + "/" + std::to_string(r.skipped) + ", ";
  }
  for (auto term : {npg::VarianceTerm::MeanSigma, npg::VarianceTerm::MinSigma}) {
    int bad = 0, checked = 0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
      const auto r = gradcheck::npg_loss_check(term, seed);
      bad += r.mismatches;
      checked += r.checked;
    }
    ok = ok && bad == 0;
    detail += "npg_loss/" + std::string(npg::to_string(term)) + " " + std::to_string(bad) + " of " +
              std::to_string(checked) + ", ";
  }
  return {ok, "mismatches/kink skips over 100 seeds: " + detail.substr(0, detail.size() - 2)};
}

Outcome isotropic_degeneration() {
  const auto ds = data::synth_gaussians(6, 2, 40, 3.0, 8);
  const auto f = smoothing::ClassifierHandle::linear(LinearModel{{1.0, -0.5, 0.25, 0.0, 0.3, -0.2}, 0.1});
  const auto iso = npg::NpgModel::pattern(npg::PatternSpec{cert::Norm::L2, 0.0, 1.0, 1, 6, std::nullopt});
  smoothing::EngineParams engine;
  engine.n0 = 100;
  engine.n = 5000;
  const auto campaign =
      smoothing::evaluate_campaign(ds.inputs, ds.labels, f, iso, NoiseSpec::gaussian(0.8), Norm::L2, engine, 9);
  std::size_t certified = 0, unequal = 0;
  for (const auto& e : campaign.results) {
    if (!e.result.certificate) continue;
    ++certified;
    const auto& c = *e.result.certificate;
    unequal += !(c.radius == c.alm && c.alm == c.base_radius);
  }
  std::size_t curve_diffs = 0;
  for (const auto& pt : campaign.curve) curve_diffs += pt.acc_radius != pt.acc_alm;
  return {certified > 0 && unequal == 0 && curve_diffs == 0 && !campaign.curve.empty(),
          std::to_string(certified) + " of " + std::to_string(campaign.results.size()) + " certified, " +
              std::to_string(unequal) + " with radius/alm/base_radius differing, " + std::to_string(curve_diffs) +
              " of " + std::to_string(campaign.curve.size()) + " curve rows differing"};
}

double trapezoid(const std::vector<double>& x, const std::vector<double>& y) {
  double a = 0.0;
  for (std::size_t i = 1; i < x.size(); ++i) a += 0.5 * (x[i] - x[i - 1]) * (y[i] + y[i - 1]);
  return a;
}

Outcome mnist_relative() {
  const fs::path images = fs::path(ANISCERT_MNIST_DIR) / "images.idx3-ubyte";
  const fs::path labels = fs::path(ANISCERT_MNIST_DIR) / "labels.idx1-ubyte";
  if (!fs::exists(images) || !fs::exists(labels)) return {false, "MNIST files missing under " ANISCERT_MNIST_DIR};
  TempDir tmp("mnist");
  std::ofstream(tmp / "common.cfg") << "dataset = mnist\n"
                                    << "mnist_images = " << images.string() << "\n"
                                    << "mnist_labels = " << labels.string() << "\n"
                                    << "train_count = 8000\n"
                                    << "noise = gaussian\n"
                                    << "lambda = 1\n"
                                    << "norm = l2\n"
                                    << "hidden = 128\n"
                                    << "batch_size = 64\n"
                                    << "lr = 0.002\n"
                                    << "seed = 7\n"
                                    << "n0 = 100\n"
                                    << "n = 2000\n"
                                    << "alpha = 0.001\n"
                                    << "max_examples = 200\n";
  const std::string cfg = tmp / "common.cfg";
  const std::vector<std::string> iso{"--set", "npg=isotropic", "--set", "classifier=" + (tmp / "iso.txt")};
  const std::vector<std::string> cw{"--set", "npg=certification", "--set", "gamma=1", "--set", "variant=mean_sigma",
                                    "--set", "classifier=" + (tmp / "cw.txt"), "--set",
                                    "npg_checkpoint=" + (tmp / "cw_npg.txt")};
  auto args = [&](std::vector<std::string> head, const std::vector<std::string>& tail) {
    head.insert(head.end(), tail.begin(), tail.end());
    return head;
  };
  std::string iso_summary, cw_summary;
  if (run_cli(args({"train", "-c", cfg, "--set", "epochs=30"}, iso), &iso_summary) != cli::kOk ||
      run_cli(args({"train", "-c", cfg, "--set", "epochs=8"}, cw), &cw_summary) != cli::kOk ||
      run_cli(args({"certify", "-c", cfg, "--output", tmp / "iso.csv", "--curve-output", tmp / "iso_curve.csv"}, iso)) !=
          cli::kOk ||
      run_cli(args({"certify", "-c", cfg, "--output", tmp / "cw.csv", "--curve-output", tmp / "cw_curve.csv"}, cw)) !=
          cli::kOk) {
    return {false, "training or certification failed"};
  }
  const auto base = data::read_results(fs::path(tmp / "iso.csv"));
  const auto ours = data::read_results(fs::path(tmp / "cw.csv"));

  // Shared grid: 50 uniform thresholds up to the larger of the two maxima.
  double top = 0.0;
  for (const auto& e : base) if (e.result.certificate) top = std::max(top, e.result.certificate->radius);
  for (const auto& e : ours) if (e.result.certificate) top = std::max(top, e.result.certificate->alm);
  std::vector<double> grid, acc_base, acc_ours;
  std::size_t dominated = 0;
  for (std::size_t i = 0; i < smoothing::kCurveGridPoints; ++i) {
    const double r = top * static_cast<double>(i) / (smoothing::kCurveGridPoints - 1);
    grid.push_back(r);
    acc_base.push_back(smoothing::certified_accuracy(base, r, smoothing::Metric::Radius));
    acc_ours.push_back(smoothing::certified_accuracy(ours, r, smoothing::Metric::Alm));
    dominated += acc_ours.back() >= acc_base.back();
  }
  const double frac = static_cast<double>(dominated) / grid.size();
  const double auc_base = trapezoid(grid, acc_base), auc_ours = trapezoid(grid, acc_ours);
  const double gain = auc_base > 0.0 ? auc_ours / auc_base - 1.0 : 0.0;
  auto summary_of = [](const std::string& s) {
    const auto pos = s.find("summary ");
    return pos == std::string::npos ? std::string() : s.substr(pos + 8, s.find('\n', pos) - pos - 8);
  };
  std::cout << "  isotropic: " << summary_of(iso_summary) << "\n  certification-wise: " << summary_of(cw_summary)
            << "\n";
  std::cout << "  threshold  acc_isotropic  acc_alm_certification_wise\n";
  for (std::size_t i = 0; i < grid.size(); i += 7) {
    std::cout << fmt("  %9.4f  %13.3f  %26.3f\n", grid[i], acc_base[i], acc_ours[i]);
  }
  return {frac >= 0.8 && gain >= 0.05,
          fmt("dominates at %.0f%% of %g thresholds; AUC %.4f vs %.4f", 100.0 * frac,
              static_cast<double>(grid.size()), auc_ours, auc_base) +
              fmt(" (%+.1f%%)", 100.0 * gain)};
}

Outcome pattern_module() {
  std::vector<std::string> failures;
  std::size_t maps = 0;
  for (Norm norm : {Norm::L1, Norm::L2, Norm::Linf}) {
    for (auto [h, w] : {std::pair<std::size_t, std::size_t>{28, 28}, {14, 14}, {5, 8}}) {
      for (auto [kappa, iota] : {std::pair{0.0, 1.0}, {0.3, 0.25}, {2.0, 0.05}}) {
        ++maps;
        npg::PatternSpec spec{norm, kappa, iota, h, w, std::nullopt};
        const auto sigma = npg::pattern_sigma(spec);
        if (sigma[(h / 2) * w + w / 2] != iota) failures.push_back("centre differs from iota");
        std::vector<std::pair<double, double>> by_norm;
        for (std::size_t r = 0; r < h; ++r) {
          for (std::size_t c = 0; c < w; ++c) {
            const std::vector<double> ab{static_cast<double>(r) - static_cast<double>(h / 2),
                                         static_cast<double>(c) - static_cast<double>(w / 2)};
            by_norm.emplace_back(cert::lp_norm(ab, norm), sigma[r * w + c]);
          }
        }
        std::sort(by_norm.begin(), by_norm.end());
        for (std::size_t i = 1; i < by_norm.size(); ++i) {
          if (by_norm[i].first > by_norm[i - 1].first && by_norm[i].second < by_norm[i - 1].second) {
            failures.push_back("not monotone");
            break;
          }
        }
        spec.target_mean = 0.37;
        const auto scaled = npg::pattern_sigma(spec);
        double mean = 0.0;
        for (double s : scaled) mean += s;
        mean /= static_cast<double>(scaled.size());
        if (std::abs(mean - 0.37) > 1e-9) failures.push_back(fmt("mean %.17g", mean));
      }
    }
  }
  std::string detail = std::to_string(maps) + " maps checked";
  for (const auto& f : failures) detail += "; " + f;
  return {failures.empty(), detail};
}

Outcome determinism() {
  TempDir tmp("det");
  std::ofstream(tmp / "c.cfg") << "dataset = synth\nsynth_d = 8\nsynth_classes = 3\nsynth_per_class = 80\n"
                               << "synth_separation = 5\nlambda = 0.5\nnorm = l2\nhidden = 32\nepochs = 3\n"
                               << "npg = dataset\ngamma = 1\nseed = 21\nn0 = 100\nn = 4000\nmax_examples = 40\n"
                               << "classifier = " << (tmp / "clf.txt") << "\nnpg_checkpoint = " << (tmp / "npg.txt")
                               << "\n";
  if (run_cli({"train", "-c", tmp / "c.cfg"}) != cli::kOk) return {false, "training failed"};
  std::vector<std::string> files;
  for (const auto& [tag, workers] : {std::pair{"a", "1"}, {"b", "1"}, {"c", "4"}}) {
    const std::string out = tmp / (std::string(tag) + ".csv"), curve = tmp / (std::string(tag) + "_curve.csv");
    if (run_cli({"certify", "-c", tmp / "c.cfg", "--workers", workers, "--output", out, "--curve-output", curve}) !=
        cli::kOk) {
      return {false, "certify failed"};
    }
    files.push_back(slurp(out) + "\n--\n" + slurp(curve));
  }
  const bool same = files[0] == files[1] && files[0] == files[2] && !files[0].empty();
  return {same, same ? "two runs with --workers 1 and one with --workers 4 are byte-identical"
                     : "outputs differ between runs"};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria = {
      {"transformation equivalence", transformation_equivalence},
      {"linear-classifier tightness", linear_tightness},
      {"radius formulas", radius_formulas},
      {"ALM volume", volume},
      {"Clopper-Pearson", clopper_pearson},
      {"gradient correctness", gradients},
      {"isotropic degeneration", isotropic_degeneration},
      {"MNIST certification-wise vs isotropic", mnist_relative},
      {"pattern module", pattern_module},
      {"end-to-end determinism", determinism},
  };
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i + 1);
    if (!only.empty() && !only.count(id)) continue;
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    failed += !o.passed;
    std::printf("%s criterion %d (%s): %s [%.1fs]\n", o.passed ? "PASS" : "FAIL", id, criteria[i].first,
                o.detail.c_str(), secs);
    std::fflush(stdout);
  }
  return std::min(failed, 125);
}

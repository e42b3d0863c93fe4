#include "aniscert/cli.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>

#include "aniscert/data_io.hpp"
#include "aniscert/kernels.hpp"
#include "aniscert/npg.hpp"
#include "aniscert/oracle.hpp"
#include "aniscert/smoothing.hpp"
#include "aniscert/training.hpp"

namespace aniscert::cli {

namespace {

using data::Config;
using data::ConfigError;

const std::vector<std::string> kKnownKeys = {
    "dataset", "mnist_images", "mnist_labels", "downscale", "train_count", "test_offset",
    "synth_d", "synth_classes", "synth_per_class", "synth_separation", "synth_seed",
    "noise", "lambda", "power_exponent", "norm",
    "npg", "gamma", "variant", "variance_weight", "pattern_norm", "kappa", "iota", "target_mean",
    "height", "width", "hidden", "epochs", "batch_size", "lr", "checkpoint_every",
    "classifier", "npg_checkpoint", "n0", "n", "alpha", "seed", "max_examples", "output", "curve_output",
    "workers",
};

struct Splits {
  data::Dataset train;
  data::Dataset test;
};

Splits load_splits(const Config& cfg) {
  const std::string kind = cfg.get_string("dataset");
  if (kind == "mnist") {
    const std::string images = cfg.get_string("mnist_images");
    const std::string labels = cfg.get_string("mnist_labels");
    if (!std::filesystem::exists(images)) cfg.fail("mnist_images", "file not found: " + images);
    if (!std::filesystem::exists(labels)) cfg.fail("mnist_labels", "file not found: " + labels);
    data::Dataset all = data::load_idx(images, labels);
    if (cfg.get_bool("downscale", true)) all = data::downscale(all);
    const std::size_t train_count = cfg.get_uint("train_count", 8000);
    const std::size_t test_offset = cfg.get_uint("test_offset", train_count);
    return {data::slice(all, 0, train_count), data::slice(all, test_offset, all.size())};
  }
  if (kind == "synth") {
    const std::size_t d = cfg.get_uint("synth_d", 2);
    const std::size_t classes = cfg.get_uint("synth_classes", 2);
    const std::size_t per_class = cfg.get_uint("synth_per_class", 200);
    const double separation = cfg.get_double("synth_separation", 10.0);
    const std::uint64_t seed = cfg.get_uint("synth_seed", 1);
    try {
      return {data::synth_gaussians(d, classes, per_class, separation, seed),
              data::synth_gaussians(d, classes, per_class, separation, seed + 1)};
    } catch (const std::invalid_argument& e) {
      cfg.fail("synth_per_class", e.what());
    }
  }
  cfg.fail("dataset", "expected mnist or synth, got '" + kind + "'");
}

dist::NoiseSpec noise_spec(const Config& cfg) {
  try {
    const auto family = dist::parse_family(cfg.get_string("noise", "gaussian"));
    std::optional<double> a;
    if (cfg.has("power_exponent")) a = cfg.get_double("power_exponent");
    return dist::NoiseSpec(family, cfg.get_double("lambda", 1.0), a);
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    cfg.fail(cfg.has("noise") ? "noise" : "lambda", e.what());
  }
}

cert::Norm norm_of(const Config& cfg, const std::string& key) {
  try {
    return cert::parse_norm(cfg.get_string(key, "l2"));
  } catch (const std::invalid_argument& e) {
    cfg.fail(key, e.what());
  }
}

npg::PatternSpec pattern_of(const Config& cfg, std::size_t height, std::size_t width) {
  npg::PatternSpec p;
  p.norm = norm_of(cfg, "pattern_norm");
  p.kappa = cfg.get_double("kappa", 0.0);
  p.iota = cfg.get_double("iota", 1.0);
  p.height = cfg.get_uint("height", height);
  p.width = cfg.get_uint("width", width);
  if (cfg.has("target_mean")) p.target_mean = cfg.get_double("target_mean");
  try {
    p.validate();
  } catch (const std::invalid_argument& e) {
    cfg.fail(cfg.has("kappa") ? "kappa" : "iota", e.what());
  }
  return p;
}

std::string npg_kind(const Config& cfg) {
  const std::string k = cfg.get_string("npg", "isotropic");
  if (k != "isotropic" && k != "pattern" && k != "dataset" && k != "certification") {
    cfg.fail("npg", "expected isotropic, pattern, dataset or certification, got '" + k + "'");
  }
  return k;
}

// Fresh generator for training, or a closed-form one for certification.
npg::NpgModel build_npg(const Config& cfg, const data::Dataset& ds, std::uint64_t seed) {
  const std::string kind = npg_kind(cfg);
  const std::size_t height = ds.height ? ds.height : 1;
  const std::size_t width = ds.height ? ds.width : ds.d;
  if (kind == "isotropic") {
    npg::PatternSpec p;
    p.height = height;
    p.width = width;
    return npg::NpgModel::pattern(p);
  }
  if (kind == "pattern") return npg::NpgModel::pattern(pattern_of(cfg, height, width));
  const double gamma = cfg.get_double("gamma", 1.0);
  if (!(gamma > 0.0)) cfg.fail("gamma", "must be > 0");
  if (kind == "dataset") return npg::NpgModel::dataset_wise(ds.d, gamma, seed);
  return npg::NpgModel::certification_wise(height, width, gamma, seed);
}

std::uint64_t seed_of(const Config& cfg) { return cfg.get_uint("seed", 0); }

template <typename T>
void save_to(const std::string& path, const T& writer) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  writer(out);
  if (!out) throw std::runtime_error("write failed: " + path);
}

smoothing::EngineParams engine_of(const Config& cfg) {
  smoothing::EngineParams e;
  e.n0 = cfg.get_uint("n0", e.n0);
  e.n = cfg.get_uint("n", e.n);
  e.alpha = cfg.get_double("alpha", e.alpha);
  e.workers = static_cast<int>(cfg.get_uint("workers", 0));
  if (e.n0 < 1) cfg.fail("n0", "must be >= 1");
  if (e.n < 1) cfg.fail("n", "must be >= 1");
  if (!(e.alpha > 0.0 && e.alpha < 1.0)) cfg.fail("alpha", "must lie in (0, 1)");
  return e;
}

int cmd_train(const Config& cfg, std::ostream& out) {
  const auto splits = load_splits(cfg);
  const auto spec = noise_spec(cfg);
  const std::uint64_t seed = seed_of(cfg);
  const std::string classifier_path = cfg.get_string("classifier");
  const bool learned = npg_kind(cfg) == "dataset" || npg_kind(cfg) == "certification";
  const std::string npg_path = cfg.get_string("npg_checkpoint", "");
  if (learned && npg_path.empty()) throw ConfigError("missing required key 'npg_checkpoint' for a learned NPG");

  training::TrainConfig tc;
  tc.epochs = cfg.get_uint("epochs", 10);
  tc.batch_size = cfg.get_uint("batch_size", 128);
  tc.lr = cfg.get_double("lr", 1e-2);
  tc.seed = derive_seed(seed, 10);
  try {
    tc.loss.variance = npg::parse_variance_term(cfg.get_string("variant", "mean_sigma"));
  } catch (const std::invalid_argument& e) {
    cfg.fail("variant", e.what());
  }
  tc.loss.variance_weight = cfg.get_double("variance_weight", 1.0);
  tc.loss.train_npg = learned;
  if (tc.batch_size == 0) cfg.fail("batch_size", "must be positive");
  const std::size_t every = cfg.get_uint("checkpoint_every", 0);

  const std::size_t hidden = cfg.get_uint("hidden", 128);
  nn::Model classifier(training::two_layer_classifier(splits.train.d, hidden, splits.train.num_classes),
                       derive_seed(seed, 11));
  npg::NpgModel gen = build_npg(cfg, splits.train, derive_seed(seed, 12));

  auto checkpoint = [&] {
    save_to(classifier_path, [&](std::ostream& o) { nn::save_model(o, classifier); });
    if (!npg_path.empty()) save_to(npg_path, [&](std::ostream& o) { npg::save_npg(o, gen); });
  };
  const auto summary = training::train(gen, classifier, splits.train, spec, tc, [&](const training::EpochReport& r) {
    out << "epoch " << r.epoch + 1 << " loss " << std::setprecision(6) << r.mean_loss << '\n';
    if (every > 0 && (r.epoch + 1) % every == 0) checkpoint();
  });
  checkpoint();
  out << std::setprecision(10) << "summary clean_accuracy=" << summary.clean_accuracy
      << " mean_sigma=" << summary.mean_sigma << " min_sigma=" << summary.min_sigma
      << " initial_mean_sigma=" << summary.initial_mean_sigma << " final_loss=" << summary.final_loss
      << " steps=" << summary.steps << '\n';
  return kOk;
}

struct Loaded {
  std::shared_ptr<nn::Model> classifier;
  std::optional<npg::NpgModel> gen;
  data::Dataset test;
};

Loaded load_for_inference(const Config& cfg) {
  const auto splits = load_splits(cfg);
  Loaded l;
  const std::string classifier_path = cfg.get_string("classifier");
  std::ifstream cin(classifier_path);
  if (!cin) cfg.fail("classifier", "cannot open " + classifier_path);
  l.classifier = std::make_shared<nn::Model>(nn::load_model(cin));
  const std::string kind = npg_kind(cfg);
  if (kind == "dataset" || kind == "certification") {
    const std::string path = cfg.get_string("npg_checkpoint");
    std::ifstream nin(path);
    if (!nin) cfg.fail("npg_checkpoint", "cannot open " + path);
    l.gen = npg::load_npg(nin);
  } else {
    l.gen = build_npg(cfg, splits.test, 0);
  }
  l.test = data::slice(splits.test, 0, cfg.get_uint("max_examples", splits.test.size()));
  return l;
}

std::size_t output_width(const nn::Model& m) {
  for (auto it = m.layers().rbegin(); it != m.layers().rend(); ++it) {
    if (it->kind == nn::LayerKind::Dense || it->kind == nn::LayerKind::Conv2d) return it->out;
  }
  throw std::runtime_error("classifier has no output layer");
}

int cmd_certify(const Config& cfg, std::ostream& out) {
  const std::string output = cfg.get_string("output");
  const std::string curve_output = cfg.get_string("curve_output");
  const auto spec = noise_spec(cfg);
  const auto norm = norm_of(cfg, "norm");
  const auto engine = engine_of(cfg);
  auto l = load_for_inference(cfg);
  const auto f = smoothing::ClassifierHandle::neural(l.classifier, output_width(*l.classifier));
  const auto campaign =
      smoothing::evaluate_campaign(l.test.inputs, l.test.labels, f, *l.gen, spec, norm, engine, seed_of(cfg));
  data::write_results(output, campaign.results);
  data::write_curve(curve_output, campaign.curve);
  std::size_t certified = 0;
  for (const auto& e : campaign.results) certified += e.result.verdict == smoothing::Verdict::Certified;
  out << "certified " << certified << " of " << campaign.results.size() << " examples; wrote " << output << " and "
      << curve_output << '\n';
  return kOk;
}

int cmd_predict(const Config& cfg, std::ostream& out) {
  const std::string output = cfg.get_string("output");
  const auto spec = noise_spec(cfg);
  const auto engine = engine_of(cfg);
  auto l = load_for_inference(cfg);
  const auto f = smoothing::ClassifierHandle::neural(l.classifier, output_width(*l.classifier));
  std::ofstream csv(output);
  if (!csv) throw std::runtime_error("cannot write " + output);
  csv << "example_id,true_label,prediction,n_a,n,p_value,seed\n";
  std::size_t correct = 0;
  for (std::size_t i = 0; i < l.test.size(); ++i) {
    const std::uint64_t s = derive_seed(seed_of(cfg), i);
    const auto p = smoothing::predict(f, *l.gen, l.test.inputs[i], spec, engine.n, engine.alpha, s, engine.workers);
    csv << i << ',' << l.test.labels[i] << ',' << (p.label ? std::to_string(*p.label) : "ABSTAIN") << ',' << p.n_a
        << ',' << engine.n << ',' << std::setprecision(12) << p.p_value << ',' << s << '\n';
    correct += p.label && *p.label == l.test.labels[i];
  }
  out << "predicted " << correct << " of " << l.test.size() << " correctly; wrote " << output << '\n';
  return kOk;
}

int cmd_verify(bool inject_fault, std::ostream& out) {
  oracle::SuiteOptions opts;
  opts.inject_sigma_sign_fault = inject_fault;
  const auto checks = oracle::run_verification_suite(opts);
  bool ok = true;
  for (const auto& c : checks) {
    out << (c.passed ? "PASS " : "FAIL ") << c.name << " (" << std::fixed << std::setprecision(3) << c.seconds
        << " s) " << c.detail << '\n';
    ok = ok && c.passed;
  }
  out << (ok ? "verification passed" : "verification FAILED") << '\n';
  return ok ? kOk : kVerificationFailure;
}

int cmd_pattern_dump(const Config& cfg, std::ostream& out) {
  const auto p = pattern_of(cfg, cfg.get_uint("height", 28), cfg.get_uint("width", 28));
  const auto sigma = npg::pattern_sigma(p);
  const std::string output = cfg.get_string("output", "-");
  if (output == "-") {
    data::write_matrix(out, sigma, p.height, p.width);
  } else {
    save_to(output, [&](std::ostream& o) { data::write_matrix(o, sigma, p.height, p.width); });
  }
  return kOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Anisotropic randomized-smoothing certification"};
  app.require_subcommand(1);
  std::string config_path;
  std::vector<std::string> overrides;
  std::optional<int> workers;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> output, curve_output;
  std::optional<std::uint64_t> max_examples;
  bool inject_fault = false;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("-c,--config", config_path, "key=value config file");
    sub->add_option("--set", overrides, "override a config key (key=value), repeatable");
    sub->add_option("--workers", workers, "worker threads for Monte-Carlo fan-out (0: all cores)");
    sub->add_option("--seed", seed, "master seed (overrides the config and ANISCERT_SEED)");
    sub->add_option("--output", output, "output path");
  };
  auto* train = app.add_subcommand("train", "train a classifier and its noise generator");
  auto* certify = app.add_subcommand("certify", "certify a test split; write results and curve CSVs");
  auto* predict = app.add_subcommand("predict", "smoothed prediction with abstention");
  auto* verify = app.add_subcommand("verify", "run the oracle verification suite");
  auto* dump = app.add_subcommand("pattern-dump", "write a pattern sigma map as CSV");
  for (auto* sub : {train, certify, predict, dump}) add_common(sub);
  certify->add_option("--curve-output", curve_output, "accuracy curve CSV path");
  for (auto* sub : {certify, predict}) sub->add_option("--max-examples", max_examples, "limit on test examples");
  verify->add_option("--workers", workers, "worker threads");
  verify->add_flag("--inject-sigma-sign-fault", inject_fault, "test fixture: flip the sign of sigma in f'")->group("");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return kConfigError;
  }

  try {
    Config cfg;
    if (!config_path.empty()) cfg = Config::load(config_path);
    if (const char* env = std::getenv("ANISCERT_SEED"); env && *env) cfg.set("seed", env);
    for (const auto& kv : overrides) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects key=value, got '" + kv + "'");
      cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (seed) cfg.set("seed", std::to_string(*seed));
    if (workers) cfg.set("workers", std::to_string(*workers));
    if (output) cfg.set("output", *output);
    if (curve_output) cfg.set("curve_output", *curve_output);
    if (max_examples) cfg.set("max_examples", std::to_string(*max_examples));
    cfg.require_known(kKnownKeys);
    if (cfg.has("workers")) kernels::set_num_threads(static_cast<int>(cfg.get_uint("workers")));
    (void)seed_of(cfg);

    if (train->parsed()) return cmd_train(cfg, out);
    if (certify->parsed()) return cmd_certify(cfg, out);
    if (predict->parsed()) return cmd_predict(cfg, out);
    if (verify->parsed()) return cmd_verify(inject_fault, out);
    if (dump->parsed()) return cmd_pattern_dump(cfg, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kRuntimeError;
  }
  return kConfigError;
}

}  // namespace aniscert::cli

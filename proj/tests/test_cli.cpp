#include <doctest.h>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "aniscert/cli.hpp"
#include "aniscert/data_io.hpp"
#include "aniscert/rng.hpp"

using namespace aniscert;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code = -1;
  std::string out;
  std::string err;
};

Run run(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  Run r;
  r.code = cli::run(args, out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::size_t count_lines(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

// Scratch directory with a synthetic campaign config and a trained classifier.
struct Workspace {
  fs::path dir;
  fs::path cfg;

  Workspace() {
    dir = fs::temp_directory_path() / ("aniscert_cli_" + std::to_string(derive_seed(reinterpret_cast<std::uintptr_t>(this), 2)));
    fs::create_directories(dir);
    cfg = dir / "synth.cfg";
    std::ofstream(cfg) << "# small synthetic campaign\n"
                       << "dataset = synth\n"
                       << "synth_d = 4\n"
                       << "synth_classes = 3\n"
                       << "synth_per_class = 60\n"
                       << "synth_separation = 6\n"
                       << "noise = gaussian\n"
                       << "lambda = 0.25\n"
                       << "norm = l2\n"
                       << "hidden = 16\n"
                       << "epochs = 3\n"
                       << "batch_size = 32\n"
                       << "classifier = " << (dir / "clf.txt").string() << "\n"
                       << "n0 = 50\n"
                       << "n = 1500\n"
                       << "alpha = 0.001\n"
                       << "seed = 3\n"
                       << "max_examples = 12\n";
  }
  ~Workspace() { fs::remove_all(dir); }

  std::string path(const std::string& name) const { return (dir / name).string(); }
};

struct EnvSeed {
  explicit EnvSeed(const char* value) { setenv("ANISCERT_SEED", value, 1); }
  ~EnvSeed() { unsetenv("ANISCERT_SEED"); }
};

}  // namespace

TEST_CASE("argument errors exit with the config code") {
  CHECK(run({}).code == cli::kConfigError);
  CHECK(run({"frobnicate"}).code == cli::kConfigError);
  CHECK(run({"certify", "--no-such-flag"}).code == cli::kConfigError);
  CHECK(run({"--help"}).code == cli::kOk);
}

TEST_CASE("config errors name the key or the line") {
  Workspace ws;
  const auto missing = run({"train", "--set", "epochs=1"});
  CHECK(missing.code == cli::kConfigError);
  CHECK(missing.err.find("dataset") != std::string::npos);

  const auto bad_file = ws.path("bad.cfg");
  std::ofstream(bad_file) << "dataset = synth\nthis line has no equals sign\n";
  const auto bad = run({"train", "-c", bad_file});
  CHECK(bad.code == cli::kConfigError);
  CHECK(bad.err.find("bad.cfg:2") != std::string::npos);

  const auto unknown = run({"train", "-c", ws.cfg.string(), "--set", "lamda=1"});
  CHECK(unknown.code == cli::kConfigError);
  CHECK(unknown.err.find("lamda") != std::string::npos);

  const auto bad_value = run({"train", "-c", ws.cfg.string(), "--set", "epochs=many"});
  CHECK(bad_value.code == cli::kConfigError);
  CHECK(bad_value.err.find("epochs") != std::string::npos);

  const auto no_mnist = run({"train", "--set", "dataset=mnist", "--set", "mnist_images=/nonexistent/x",
                             "--set", "mnist_labels=/nonexistent/y", "--set", "classifier=" + ws.path("c")});
  CHECK(no_mnist.code == cli::kConfigError);
  CHECK(no_mnist.err.find("mnist_images") != std::string::npos);

  const auto learned = run({"train", "-c", ws.cfg.string(), "--set", "npg=dataset"});
  CHECK(learned.code == cli::kConfigError);
  CHECK(learned.err.find("npg_checkpoint") != std::string::npos);
}

TEST_CASE("runtime failures exit with the runtime code") {
  Workspace ws;
  std::ofstream(ws.path("clf.txt")) << "garbage\n";
  const auto r = run({"certify", "-c", ws.cfg.string(), "--output", ws.path("r.csv"), "--curve-output", ws.path("c.csv")});
  CHECK(r.code == cli::kRuntimeError);
}

TEST_CASE("train prints epochs and a summary line") {
  Workspace ws;
  const auto r = run({"train", "-c", ws.cfg.string()});
  REQUIRE(r.code == cli::kOk);
  CHECK(r.out.find("epoch 1 loss ") != std::string::npos);
  CHECK(r.out.find("epoch 3 loss ") != std::string::npos);
  CHECK(r.out.find("summary clean_accuracy=") != std::string::npos);
  CHECK(r.out.find(" steps=18") != std::string::npos);
  CHECK(fs::exists(ws.path("clf.txt")));

  // A dataset-wise generator trained for the mean of sigma ends above its start.
  const auto g = run({"train", "-c", ws.cfg.string(), "--set", "npg=dataset", "--set", "gamma=0.5",
                      "--set", "npg_checkpoint=" + ws.path("npg.txt"), "--set", "epochs=4"});
  REQUIRE(g.code == cli::kOk);
  const auto at = [&](const std::string& key) {
    const auto pos = g.out.find(" " + key + "=");
    return std::stod(g.out.substr(pos + key.size() + 2));
  };
  CHECK(at("mean_sigma") > at("initial_mean_sigma"));
  CHECK(fs::exists(ws.path("npg.txt")));
}

TEST_CASE("certify is deterministic and independent of workers") {
  Workspace ws;
  REQUIRE(run({"train", "-c", ws.cfg.string()}).code == cli::kOk);
  auto certify = [&](const std::string& tag, std::vector<std::string> extra) {
    std::vector<std::string> args{"certify", "-c", ws.cfg.string(), "--output", ws.path(tag + ".csv"),
                                  "--curve-output", ws.path(tag + "_curve.csv")};
    args.insert(args.end(), extra.begin(), extra.end());
    const auto r = run(args);
    REQUIRE(r.code == cli::kOk);
    return std::make_pair(slurp(ws.path(tag + ".csv")), slurp(ws.path(tag + "_curve.csv")));
  };
  const auto a = certify("a", {"--workers", "1"});
  const auto b = certify("b", {"--workers", "1"});
  const auto c = certify("c", {"--workers", "3"});
  CHECK(a == b);
  CHECK(a == c);
  CHECK(count_lines(a.first) == 13);
  CHECK(a.first.rfind(data::kResultsHeader, 0) == 0);

  // Isotropic generator: the radius and alm curves agree column-wise.
  std::istringstream curve(a.second);
  std::string line;
  std::getline(curve, line);
  CHECK(line == data::kCurveHeader);
  std::size_t rows = 0;
  while (std::getline(curve, line)) {
    const auto c1 = line.find(','), c2 = line.rfind(',');
    CHECK(line.substr(c1 + 1, c2 - c1 - 1) == line.substr(c2 + 1));
    ++rows;
  }
  CHECK(rows >= 50);

  // The environment seed overrides the file; the flag overrides both.
  {
    EnvSeed env("99");
    const auto e = certify("e", {});
    CHECK(e.first != a.first);
    CHECK(certify("f", {"--seed", "3"}) == a);
  }
  CHECK(certify("g", {"--set", "seed=99"}) != a);

  const auto empty = certify("h", {"--max-examples", "0"});
  CHECK(empty.first == std::string(data::kResultsHeader) + "\n");
  CHECK(empty.second == std::string(data::kCurveHeader) + "\n");
}

TEST_CASE("certify with a pattern generator and predict") {
  Workspace ws;
  REQUIRE(run({"train", "-c", ws.cfg.string(), "--set", "npg=pattern", "--set", "kappa=0.5", "--set", "iota=0.8"}).code ==
          cli::kOk);
  const auto r = run({"certify", "-c", ws.cfg.string(), "--set", "npg=pattern", "--set", "kappa=0.5", "--set", "iota=0.8",
                      "--output", ws.path("p.csv"), "--curve-output", ws.path("pc.csv")});
  REQUIRE(r.code == cli::kOk);
  const auto results = data::read_results(fs::path(ws.path("p.csv")));
  CHECK(results.size() == 12);
  for (const auto& e : results) {
    if (e.result.certificate) CHECK(e.result.certificate->alm >= e.result.certificate->radius);
  }

  const auto p = run({"predict", "-c", ws.cfg.string(), "--output", ws.path("pred.csv"), "--max-examples", "5"});
  REQUIRE(p.code == cli::kOk);
  const auto csv = slurp(ws.path("pred.csv"));
  CHECK(csv.rfind("example_id,true_label,prediction,n_a,n,p_value,seed\n", 0) == 0);
  CHECK(count_lines(csv) == 6);
}

TEST_CASE("pattern-dump writes the sigma map") {
  const auto r = run({"pattern-dump", "--set", "kappa=1", "--set", "iota=1", "--set", "pattern_norm=linf",
                      "--set", "height=5", "--set", "width=5"});
  REQUIRE(r.code == cli::kOk);
  std::istringstream in(r.out);
  std::vector<std::string> rows;
  for (std::string line; std::getline(in, line);) rows.push_back(line);
  REQUIRE(rows.size() == 5);
  CHECK(rows[2] == "5,2,1,2,5");
  CHECK(rows[3] == "5,2,2,2,5");
  CHECK(run({"pattern-dump", "--set", "iota=0"}).code == cli::kConfigError);
}

TEST_CASE("verify exit codes") {
  const auto ok = run({"verify"});
  CHECK(ok.code == cli::kOk);
  CHECK(ok.out.find("verification passed") != std::string::npos);
  CHECK(ok.out.find("+-") != std::string::npos);
  const auto bad = run({"verify", "--inject-sigma-sign-fault"});
  CHECK(bad.code == cli::kVerificationFailure);
  CHECK(bad.out.find("FAIL transformation_equivalence") != std::string::npos);
}

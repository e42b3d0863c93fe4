#include "aniscert/data_io.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "aniscert/rng.hpp"

namespace aniscert::data {

namespace fs = std::filesystem;

void Dataset::validate() const {
  if (inputs.size() != labels.size()) throw std::invalid_argument("dataset: inputs and labels differ in length");
  if (height * width != 0 && height * width != d) throw std::invalid_argument("dataset: image shape does not match d");
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (inputs[i].size() != d) throw std::invalid_argument("dataset: example " + std::to_string(i) + " has wrong dimension");
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= num_classes) {
      throw std::invalid_argument("dataset: label out of range at example " + std::to_string(i));
    }
    for (double v : inputs[i]) {
      if (!(v >= 0.0 && v <= 1.0)) throw std::invalid_argument("dataset: input outside [0, 1] at example " + std::to_string(i));
    }
  }
}

namespace {

std::vector<std::uint8_t> read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t read_be32(const std::vector<std::uint8_t>& bytes, std::size_t offset, const fs::path& path) {
  if (bytes.size() < offset + 4) {
    throw std::runtime_error("truncated IDX file " + path.string() + ": header needs byte offset " +
                             std::to_string(offset + 4) + ", file ends at byte offset " + std::to_string(bytes.size()));
  }
  return (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
         (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
}

void check_magic(std::uint32_t found, std::uint32_t expected, const fs::path& path, const char* what) {
  if (found != expected) {
    std::ostringstream os;
    os << "bad magic in " << path.string() << ": expected " << what << " magic 0x" << std::hex << std::setw(8)
       << std::setfill('0') << expected << ", found 0x" << std::setw(8) << found;
    throw std::runtime_error(os.str());
  }
}

void check_length(const std::vector<std::uint8_t>& bytes, std::size_t needed, const fs::path& path) {
  if (bytes.size() < needed) {
    throw std::runtime_error("truncated IDX file " + path.string() + ": expected " + std::to_string(needed) +
                             " bytes, data ends at byte offset " + std::to_string(bytes.size()));
  }
}

void write_be32(std::ostream& out, std::uint32_t v) {
  const char b[4] = {static_cast<char>(v >> 24), static_cast<char>(v >> 16), static_cast<char>(v >> 8),
                     static_cast<char>(v)};
  out.write(b, 4);
}

}  // namespace

Dataset load_idx(const fs::path& images_path, const fs::path& labels_path) {
  const auto images = read_file(images_path);
  const auto labels = read_file(labels_path);
  check_magic(read_be32(images, 0, images_path), 0x00000803u, images_path, "images");
  check_magic(read_be32(labels, 0, labels_path), 0x00000801u, labels_path, "labels");
  const std::size_t count = read_be32(images, 4, images_path);
  const std::size_t rows = read_be32(images, 8, images_path);
  const std::size_t cols = read_be32(images, 12, images_path);
  const std::size_t label_count = read_be32(labels, 4, labels_path);
  if (count != label_count) {
    throw std::runtime_error("IDX count mismatch: " + std::to_string(count) + " images but " +
                             std::to_string(label_count) + " labels");
  }
  const std::size_t d = rows * cols;
  check_length(images, 16 + count * d, images_path);
  check_length(labels, 8 + count, labels_path);

  Dataset ds;
  ds.d = d;
  ds.height = rows;
  ds.width = cols;
  ds.inputs.resize(count, std::vector<double>(d));
  ds.labels.resize(count);
  int max_label = 0;
  for (std::size_t i = 0; i < count; ++i) {
    const std::uint8_t* px = images.data() + 16 + i * d;
    for (std::size_t j = 0; j < d; ++j) ds.inputs[i][j] = px[j] / 255.0;
    ds.labels[i] = labels[8 + i];
    max_label = std::max(max_label, ds.labels[i]);
  }
  ds.num_classes = count == 0 ? 0 : static_cast<std::size_t>(max_label) + 1;
  return ds;
}

void write_idx(const fs::path& images_path, const fs::path& labels_path, std::span<const std::uint8_t> pixels,
               std::size_t rows, std::size_t cols, std::span<const std::uint8_t> labels) {
  if (rows * cols == 0 || pixels.size() != labels.size() * rows * cols) {
    throw std::invalid_argument("write_idx: pixel count does not match labels x rows x cols");
  }
  std::ofstream img(images_path, std::ios::binary);
  std::ofstream lab(labels_path, std::ios::binary);
  if (!img || !lab) throw std::runtime_error("write_idx: cannot open output files");
  write_be32(img, 0x00000803u);
  write_be32(img, static_cast<std::uint32_t>(labels.size()));
  write_be32(img, static_cast<std::uint32_t>(rows));
  write_be32(img, static_cast<std::uint32_t>(cols));
  img.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
  write_be32(lab, 0x00000801u);
  write_be32(lab, static_cast<std::uint32_t>(labels.size()));
  lab.write(reinterpret_cast<const char*>(labels.data()), static_cast<std::streamsize>(labels.size()));
  if (!img || !lab) throw std::runtime_error("write_idx: write failed");
}

Dataset downscale(const Dataset& images) {
  if (images.height == 0 || images.height % 2 != 0 || images.width % 2 != 0) {
    throw std::invalid_argument("downscale: needs an image dataset with even height and width");
  }
  Dataset out;
  out.height = images.height / 2;
  out.width = images.width / 2;
  out.d = out.height * out.width;
  out.num_classes = images.num_classes;
  out.labels = images.labels;
  out.inputs.reserve(images.size());
  const std::size_t w = images.width;
  for (const auto& img : images.inputs) {
    std::vector<double> small(out.d);
    for (std::size_t r = 0; r < out.height; ++r) {
      for (std::size_t c = 0; c < out.width; ++c) {
        const std::size_t top = 2 * r * w + 2 * c;
        small[r * out.width + c] = 0.25 * (img[top] + img[top + 1] + img[top + w] + img[top + w + 1]);
      }
    }
    out.inputs.push_back(std::move(small));
  }
  return out;
}

Dataset slice(const Dataset& source, std::size_t begin, std::size_t count) {
  Dataset out = source;
  const std::size_t b = std::min(begin, source.size());
  const std::size_t e = std::min(source.size(), b + count);
  out.inputs.assign(source.inputs.begin() + static_cast<std::ptrdiff_t>(b),
                    source.inputs.begin() + static_cast<std::ptrdiff_t>(e));
  out.labels.assign(source.labels.begin() + static_cast<std::ptrdiff_t>(b),
                    source.labels.begin() + static_cast<std::ptrdiff_t>(e));
  return out;
}

Dataset synth_gaussians(std::size_t d, std::size_t num_classes, std::size_t per_class, double separation,
                        std::uint64_t seed) {
  if (d == 0) throw std::invalid_argument("synth_gaussians: d must be positive");
  if (num_classes < 2) throw std::invalid_argument("synth_gaussians: need at least 2 classes");
  if (per_class == 0) throw std::invalid_argument("synth_gaussians: per_class must be positive");
  if (!(separation > 0.0)) throw std::invalid_argument("synth_gaussians: separation must be positive");
  const double step = 0.5 / static_cast<double>(num_classes - 1);
  const double spacing = step * std::sqrt(static_cast<double>(d));
  const double sd = spacing / separation;
  Dataset ds;
  ds.d = d;
  ds.num_classes = num_classes;
  ds.height = 1;
  ds.width = d;
  Rng rng(seed);
  for (std::size_t k = 0; k < per_class; ++k) {
    for (std::size_t c = 0; c < num_classes; ++c) {
      const double mean = 0.25 + step * static_cast<double>(c);
      std::vector<double> x(d);
      for (double& v : x) v = std::clamp(mean + sd * rng.normal(), 0.0, 1.0);
      ds.inputs.push_back(std::move(x));
      ds.labels.push_back(static_cast<int>(c));
    }
  }
  return ds;
}

// ---- results ----------------------------------------------------------------

namespace {

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.12g", v);
  return buf;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> fields;
  std::size_t start = 0;
  for (;;) {
    const std::size_t comma = line.find(',', start);
    fields.push_back(line.substr(start, comma - start));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return fields;
}

template <typename T>
T parse_number(const std::string& field, const char* column, std::size_t line) {
  T value{};
  const char* end = field.data() + field.size();
  auto [ptr, ec] = std::from_chars(field.data(), end, value);
  if (ec != std::errc() || ptr != end || field.empty()) {
    throw std::runtime_error("results line " + std::to_string(line) + ": bad " + column + " '" + field + "'");
  }
  return value;
}

std::ofstream open_out(const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  return out;
}

}  // namespace

void write_results(std::ostream& out, std::span<const smoothing::ExampleResult> results) {
  out << kResultsHeader << '\n';
  for (const auto& e : results) {
    const auto& r = e.result;
    const bool certified = r.verdict == smoothing::Verdict::Certified && r.certificate;
    out << e.example_id << ',' << e.true_label << ',' << (certified ? "CERTIFIED" : "ABSTAIN") << ',';
    if (certified) out << r.predicted;
    out << ',' << fmt(r.p_a_lower) << ',';
    if (certified) {
      out << fmt(r.certificate->base_radius) << ',' << fmt(r.certificate->radius) << ',' << fmt(r.certificate->alm);
    } else {
      out << ",,";
    }
    out << ',' << r.n0 << ',' << r.n << ',' << fmt(r.alpha) << ',' << e.seed << '\n';
  }
  if (!out) throw std::runtime_error("results: write failed");
}

void write_results(const fs::path& path, std::span<const smoothing::ExampleResult> results) {
  auto out = open_out(path);
  write_results(out, results);
}

std::vector<smoothing::ExampleResult> read_results(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != kResultsHeader) {
    throw std::runtime_error("results line 1: missing or unexpected header");
  }
  std::vector<smoothing::ExampleResult> out;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto f = split_csv(line);
    if (f.size() != 12) {
      throw std::runtime_error("results line " + std::to_string(line_no) + ": expected 12 fields, found " +
                               std::to_string(f.size()));
    }
    smoothing::ExampleResult e;
    e.example_id = parse_number<std::uint64_t>(f[0], "example_id", line_no);
    e.true_label = parse_number<int>(f[1], "true_label", line_no);
    auto& r = e.result;
    r.p_a_lower = parse_number<double>(f[4], "p_a_lower", line_no);
    r.n0 = parse_number<std::uint64_t>(f[8], "n0", line_no);
    r.n = parse_number<std::uint64_t>(f[9], "n", line_no);
    r.alpha = parse_number<double>(f[10], "alpha", line_no);
    e.seed = parse_number<std::uint64_t>(f[11], "seed", line_no);
    if (f[2] == "CERTIFIED") {
      r.verdict = smoothing::Verdict::Certified;
      r.predicted = parse_number<int>(f[3], "predicted", line_no);
      cert::Certificate c;
      c.base_radius = parse_number<double>(f[5], "base_radius", line_no);
      c.radius = parse_number<double>(f[6], "radius", line_no);
      c.alm = parse_number<double>(f[7], "alm", line_no);
      r.certificate = c;
    } else if (f[2] == "ABSTAIN") {
      if (!f[3].empty() || !f[5].empty() || !f[6].empty() || !f[7].empty()) {
        throw std::runtime_error("results line " + std::to_string(line_no) + ": ABSTAIN row with certificate fields");
      }
    } else {
      throw std::runtime_error("results line " + std::to_string(line_no) + ": unknown verdict '" + f[2] + "'");
    }
    out.push_back(std::move(e));
  }
  return out;
}

std::vector<smoothing::ExampleResult> read_results(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return read_results(in);
}

void write_curve(std::ostream& out, std::span<const smoothing::CurvePoint> curve) {
  out << kCurveHeader << '\n';
  for (const auto& p : curve) out << fmt(p.threshold) << ',' << fmt(p.acc_radius) << ',' << fmt(p.acc_alm) << '\n';
  if (!out) throw std::runtime_error("curve: write failed");
}

void write_curve(const fs::path& path, std::span<const smoothing::CurvePoint> curve) {
  auto out = open_out(path);
  write_curve(out, curve);
}

void write_matrix(std::ostream& out, std::span<const double> values, std::size_t height, std::size_t width) {
  if (values.size() != height * width) throw std::invalid_argument("write_matrix: size mismatch");
  for (std::size_t r = 0; r < height; ++r) {
    for (std::size_t c = 0; c < width; ++c) out << (c ? "," : "") << fmt(values[r * width + c]);
    out << '\n';
  }
}

// ---- config -----------------------------------------------------------------

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

Config Config::parse(std::istream& in, const std::string& source) {
  Config cfg;
  cfg.source_ = source;
  std::string raw;
  int line = 0;
  while (std::getline(in, raw)) {
    ++line;
    const std::string text = trim(raw);
    if (text.empty() || text[0] == '#') continue;
    const auto eq = text.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(source + ":" + std::to_string(line) + ": expected 'key = value'");
    }
    const std::string key = trim(text.substr(0, eq));
    const std::string value = trim(text.substr(eq + 1));
    if (key.empty()) throw ConfigError(source + ":" + std::to_string(line) + ": empty key");
    if (cfg.entries_.count(key)) {
      throw ConfigError(source + ":" + std::to_string(line) + ": duplicate key '" + key + "' (first set on line " +
                        std::to_string(cfg.entries_[key].line) + ")");
    }
    cfg.entries_[key] = {value, line};
  }
  return cfg;
}

Config Config::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  return parse(in, path.string());
}

void Config::set(const std::string& key, const std::string& value) { entries_[key] = {value, 0}; }

std::string Config::where(const std::string& key) const {
  const auto it = entries_.find(key);
  if (it == entries_.end() || it->second.line == 0) return "key '" + key + "'";
  return source_ + ":" + std::to_string(it->second.line) + ": key '" + key + "'";
}

void Config::fail(const std::string& key, const std::string& message) const {
  throw ConfigError(where(key) + ": " + message);
}

std::string Config::get_string(const std::string& key) const {
  const auto it = entries_.find(key);
  if (it == entries_.end()) throw ConfigError("missing required key '" + key + "'");
  return it->second.value;
}

std::string Config::get_string(const std::string& key, const std::string& fallback) const {
  return has(key) ? get_string(key) : fallback;
}

double Config::get_double(const std::string& key) const {
  const std::string s = get_string(key);
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size() || s.empty()) fail(key, "expected a number, got '" + s + "'");
  return v;
}

double Config::get_double(const std::string& key, double fallback) const {
  return has(key) ? get_double(key) : fallback;
}

std::uint64_t Config::get_uint(const std::string& key) const {
  const std::string s = get_string(key);
  std::uint64_t v = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size() || s.empty()) {
    fail(key, "expected a non-negative integer, got '" + s + "'");
  }
  return v;
}

std::uint64_t Config::get_uint(const std::string& key, std::uint64_t fallback) const {
  return has(key) ? get_uint(key) : fallback;
}

bool Config::get_bool(const std::string& key, bool fallback) const {
  if (!has(key)) return fallback;
  const std::string s = get_string(key);
  if (s == "true" || s == "1" || s == "yes") return true;
  if (s == "false" || s == "0" || s == "no") return false;
  fail(key, "expected true or false, got '" + s + "'");
}

void Config::require_known(std::span<const std::string> known) const {
  for (const auto& [key, entry] : entries_) {
    if (std::find(known.begin(), known.end(), key) == known.end()) fail(key, "unknown key");
  }
}

}  // namespace aniscert::data

#pragma once

// Datasets (IDX images, synthetic blobs), campaign CSVs and the flat
// key=value config format.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "aniscert/smoothing.hpp"

namespace aniscert::data {

struct Dataset {
  std::vector<std::vector<double>> inputs;  // each in [0, 1]^d
  std::vector<int> labels;
  std::size_t d = 0;
  std::size_t num_classes = 0;
  std::size_t height = 0;  // image layout when known, height * width == d
  std::size_t width = 0;

  std::size_t size() const noexcept { return inputs.size(); }
  void validate() const;
};

// Big-endian IDX pair: images magic 0x00000803, labels magic 0x00000801.
// Pixels are scaled by 1/255. Labels set num_classes to max label + 1.
Dataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path);

void write_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
               std::span<const std::uint8_t> pixels, std::size_t rows, std::size_t cols,
               std::span<const std::uint8_t> labels);

// 2x2 average pooling of an image dataset with even height and width.
Dataset downscale(const Dataset& images);

// Examples [begin, begin + count) of `source`, clamped to its size.
Dataset slice(const Dataset& source, std::size_t begin, std::size_t count);

// Class-conditional Gaussian blobs in [0, 1]^d. Means lie evenly on the
// diagonal segment from 0.25 to 0.75; the blob standard deviation is the
// neighbouring-mean distance divided by `separation`. Values are clipped.
Dataset synth_gaussians(std::size_t d, std::size_t num_classes, std::size_t per_class, double separation,
                        std::uint64_t seed);

// ---- results ----------------------------------------------------------------

inline constexpr const char* kResultsHeader =
    "example_id,true_label,verdict,predicted,p_a_lower,base_radius,radius,alm,n0,n,alpha,seed";
inline constexpr const char* kCurveHeader = "threshold,acc_radius,acc_alm";

void write_results(std::ostream& out, std::span<const smoothing::ExampleResult> results);
void write_results(const std::filesystem::path& path, std::span<const smoothing::ExampleResult> results);
// Throws std::runtime_error naming the line on a malformed row.
std::vector<smoothing::ExampleResult> read_results(std::istream& in);
std::vector<smoothing::ExampleResult> read_results(const std::filesystem::path& path);

void write_curve(std::ostream& out, std::span<const smoothing::CurvePoint> curve);
void write_curve(const std::filesystem::path& path, std::span<const smoothing::CurvePoint> curve);

// Row-major H x W map as CSV without a header.
void write_matrix(std::ostream& out, std::span<const double> values, std::size_t height, std::size_t width);

// ---- config -----------------------------------------------------------------

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Flat `key = value` text. Blank lines and lines starting with '#' are
// ignored. Values set later (flags) override file values.
class Config {
 public:
  static Config parse(std::istream& in, const std::string& source = "config");
  static Config load(const std::filesystem::path& path);

  void set(const std::string& key, const std::string& value);  // override, e.g. from a flag
  bool has(const std::string& key) const { return entries_.count(key) != 0; }
  // Errors name the key and, for file values, the line number.
  std::string get_string(const std::string& key) const;
  std::string get_string(const std::string& key, const std::string& fallback) const;
  double get_double(const std::string& key) const;
  double get_double(const std::string& key, double fallback) const;
  std::uint64_t get_uint(const std::string& key) const;
  std::uint64_t get_uint(const std::string& key, std::uint64_t fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;

  // Throws ConfigError for the first key not in `known`.
  void require_known(std::span<const std::string> known) const;
  [[noreturn]] void fail(const std::string& key, const std::string& message) const;

 private:
  struct Entry {
    std::string value;
    int line = 0;  // 0 for values not read from the file
  };
  std::string where(const std::string& key) const;

  std::string source_ = "config";
  std::map<std::string, Entry> entries_;
};

}  // namespace aniscert::data

#include "aniscert/kernels.hpp"

#include <omp.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>

#include "aniscert/rng.hpp"

namespace aniscert::kernels {
namespace {

std::atomic<int> g_threads{0};

int threads() {
  const int t = g_threads.load(std::memory_order_relaxed);
  return t > 0 ? t : omp_get_max_threads();
}

inline void dense_row(DenseShape s, const double* xb, std::span<const double> w,
                      std::span<const double> bias, double* yb) {
  for (std::size_t o = 0; o < s.out; ++o) {
    const double* wo = w.data() + o * s.in;
    double acc = bias.empty() ? 0.0 : bias[o];
    for (std::size_t i = 0; i < s.in; ++i) acc += wo[i] * xb[i];
    yb[o] = acc;
  }
}

inline void dense_dx_row(DenseShape s, std::span<const double> w, const double* dyb, double* dxb) {
  for (std::size_t o = 0; o < s.out; ++o) {
    const double g = dyb[o];
    if (g == 0.0) continue;
    const double* wo = w.data() + o * s.in;
    for (std::size_t i = 0; i < s.in; ++i) dxb[i] += g * wo[i];
  }
}

inline void dense_dw_row(DenseShape s, std::size_t o, std::span<const double> x,
                         std::span<const double> dy, std::span<double> dw, std::span<double> dbias) {
  double* dwo = dw.empty() ? nullptr : dw.data() + o * s.in;
  double db = 0.0;
  for (std::size_t b = 0; b < s.batch; ++b) {
    const double g = dy[b * s.out + o];
    db += g;
    if (dwo == nullptr || g == 0.0) continue;
    const double* xb = x.data() + b * s.in;
    for (std::size_t i = 0; i < s.in; ++i) dwo[i] += g * xb[i];
  }
  if (!dbias.empty()) dbias[o] += db;
}

// Valid output range [lo, hi) along one axis for kernel offset k.
inline void valid_range(std::size_t extent, std::size_t k, std::size_t pad, std::size_t& lo,
                        std::size_t& hi) {
  // input index = out + k - pad must lie in [0, extent)
  lo = k < pad ? pad - k : 0;
  hi = k > pad ? extent - std::min(extent, k - pad) : extent;
}

inline void conv_forward_plane(ConvShape s, std::size_t b, std::size_t o, std::span<const double> x,
                               std::span<const double> w, std::span<const double> bias,
                               std::span<double> y) {
  const std::size_t hw = s.height * s.width;
  const std::size_t pad = s.kernel / 2;
  double* yp = y.data() + (b * s.out_channels + o) * hw;
  std::fill(yp, yp + hw, bias.empty() ? 0.0 : bias[o]);
  for (std::size_t c = 0; c < s.in_channels; ++c) {
    const double* xp = x.data() + (b * s.in_channels + c) * hw;
    const double* wk = w.data() + (o * s.in_channels + c) * s.kernel * s.kernel;
    for (std::size_t ki = 0; ki < s.kernel; ++ki) {
      std::size_t i0, i1;
      valid_range(s.height, ki, pad, i0, i1);
      for (std::size_t kj = 0; kj < s.kernel; ++kj) {
        std::size_t j0, j1;
        valid_range(s.width, kj, pad, j0, j1);
        const double wv = wk[ki * s.kernel + kj];
        for (std::size_t i = i0; i < i1; ++i) {
          const double* xrow = xp + (i + ki - pad) * s.width;
          double* yrow = yp + i * s.width;
          for (std::size_t j = j0; j < j1; ++j) yrow[j] += wv * xrow[j + kj - pad];
        }
      }
    }
  }
}

inline void conv_dx_plane(ConvShape s, std::size_t b, std::size_t c, std::span<const double> w,
                          std::span<const double> dy, std::span<double> dx) {
  const std::size_t hw = s.height * s.width;
  const std::size_t pad = s.kernel / 2;
  double* dxp = dx.data() + (b * s.in_channels + c) * hw;
  for (std::size_t o = 0; o < s.out_channels; ++o) {
    const double* dyp = dy.data() + (b * s.out_channels + o) * hw;
    const double* wk = w.data() + (o * s.in_channels + c) * s.kernel * s.kernel;
    for (std::size_t ki = 0; ki < s.kernel; ++ki) {
      std::size_t i0, i1;
      valid_range(s.height, ki, pad, i0, i1);
      for (std::size_t kj = 0; kj < s.kernel; ++kj) {
        std::size_t j0, j1;
        valid_range(s.width, kj, pad, j0, j1);
        const double wv = wk[ki * s.kernel + kj];
        for (std::size_t i = i0; i < i1; ++i) {
          double* dxrow = dxp + (i + ki - pad) * s.width;
          const double* dyrow = dyp + i * s.width;
          for (std::size_t j = j0; j < j1; ++j) dxrow[j + kj - pad] += wv * dyrow[j];
        }
      }
    }
  }
}

inline void conv_dw_filter(ConvShape s, std::size_t o, std::span<const double> x,
                           std::span<const double> dy, std::span<double> dw, std::span<double> dbias) {
  const std::size_t hw = s.height * s.width;
  const std::size_t pad = s.kernel / 2;
  double db = 0.0;
  for (std::size_t b = 0; b < s.batch; ++b) {
    const double* dyp = dy.data() + (b * s.out_channels + o) * hw;
    for (std::size_t p = 0; p < hw; ++p) db += dyp[p];
    if (dw.empty()) continue;
    for (std::size_t c = 0; c < s.in_channels; ++c) {
      const double* xp = x.data() + (b * s.in_channels + c) * hw;
      double* dwk = dw.data() + (o * s.in_channels + c) * s.kernel * s.kernel;
      for (std::size_t ki = 0; ki < s.kernel; ++ki) {
        std::size_t i0, i1;
        valid_range(s.height, ki, pad, i0, i1);
        for (std::size_t kj = 0; kj < s.kernel; ++kj) {
          std::size_t j0, j1;
          valid_range(s.width, kj, pad, j0, j1);
          double acc = 0.0;
          for (std::size_t i = i0; i < i1; ++i) {
            const double* xrow = xp + (i + ki - pad) * s.width;
            const double* dyrow = dyp + i * s.width;
            for (std::size_t j = j0; j < j1; ++j) acc += dyrow[j] * xrow[j + kj - pad];
          }
          dwk[ki * s.kernel + kj] += acc;
        }
      }
    }
  }
  if (!dbias.empty()) dbias[o] += db;
}

constexpr std::size_t kHitChunk = std::size_t{1} << 14;

std::size_t superball_chunk(std::size_t d, double p, std::size_t begin, std::size_t end,
                            std::uint64_t seed, std::size_t chunk) {
  Rng rng(derive_seed(seed, chunk));
  std::size_t hits = 0;
  const bool box = std::isinf(p);
  for (std::size_t s = begin; s < end; ++s) {
    double acc = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      const double u = std::abs(rng.uniform(-1.0, 1.0));
      if (!box) acc += std::pow(u, p);
    }
    if (acc <= 1.0) ++hits;
  }
  return hits;
}

}  // namespace

void set_num_threads(int t) { g_threads.store(std::max(0, t), std::memory_order_relaxed); }
int num_threads() { return threads(); }

void dense_forward_serial(DenseShape s, std::span<const double> x, std::span<const double> w,
                          std::span<const double> bias, std::span<double> y) {
  for (std::size_t b = 0; b < s.batch; ++b) dense_row(s, x.data() + b * s.in, w, bias, y.data() + b * s.out);
}

void dense_forward_omp(DenseShape s, std::span<const double> x, std::span<const double> w,
                       std::span<const double> bias, std::span<double> y) {
  const auto batch = static_cast<std::int64_t>(s.batch);
#pragma omp parallel for num_threads(threads()) schedule(static)
  for (std::int64_t b = 0; b < batch; ++b) {
    dense_row(s, x.data() + b * s.in, w, bias, y.data() + b * s.out);
  }
}

void dense_backward_serial(DenseShape s, std::span<const double> x, std::span<const double> w,
                           std::span<const double> dy, std::span<double> dx, std::span<double> dw,
                           std::span<double> dbias) {
  if (!dx.empty()) {
    for (std::size_t b = 0; b < s.batch; ++b) dense_dx_row(s, w, dy.data() + b * s.out, dx.data() + b * s.in);
  }
  if (!dw.empty() || !dbias.empty()) {
    for (std::size_t o = 0; o < s.out; ++o) dense_dw_row(s, o, x, dy, dw, dbias);
  }
}

void dense_backward_omp(DenseShape s, std::span<const double> x, std::span<const double> w,
                        std::span<const double> dy, std::span<double> dx, std::span<double> dw,
                        std::span<double> dbias) {
  const auto batch = static_cast<std::int64_t>(s.batch);
  const auto outs = static_cast<std::int64_t>(s.out);
  const bool want_dx = !dx.empty();
  const bool want_dw = !dw.empty() || !dbias.empty();
#pragma omp parallel num_threads(threads())
  {
    if (want_dx) {
#pragma omp for schedule(static)
      for (std::int64_t b = 0; b < batch; ++b) {
        dense_dx_row(s, w, dy.data() + b * s.out, dx.data() + b * s.in);
      }
    }
    if (want_dw) {
#pragma omp for schedule(static)
      for (std::int64_t o = 0; o < outs; ++o) dense_dw_row(s, static_cast<std::size_t>(o), x, dy, dw, dbias);
    }
  }
}

void conv2d_forward_serial(ConvShape s, std::span<const double> x, std::span<const double> w,
                           std::span<const double> bias, std::span<double> y) {
  for (std::size_t b = 0; b < s.batch; ++b) {
    for (std::size_t o = 0; o < s.out_channels; ++o) conv_forward_plane(s, b, o, x, w, bias, y);
  }
}

void conv2d_forward_omp(ConvShape s, std::span<const double> x, std::span<const double> w,
                        std::span<const double> bias, std::span<double> y) {
  const auto planes = static_cast<std::int64_t>(s.batch * s.out_channels);
#pragma omp parallel for num_threads(threads()) schedule(static)
  for (std::int64_t p = 0; p < planes; ++p) {
    const auto up = static_cast<std::size_t>(p);
    conv_forward_plane(s, up / s.out_channels, up % s.out_channels, x, w, bias, y);
  }
}

void conv2d_backward_serial(ConvShape s, std::span<const double> x, std::span<const double> w,
                            std::span<const double> dy, std::span<double> dx, std::span<double> dw,
                            std::span<double> dbias) {
  if (!dx.empty()) {
    for (std::size_t b = 0; b < s.batch; ++b) {
      for (std::size_t c = 0; c < s.in_channels; ++c) conv_dx_plane(s, b, c, w, dy, dx);
    }
  }
  if (!dw.empty() || !dbias.empty()) {
    for (std::size_t o = 0; o < s.out_channels; ++o) conv_dw_filter(s, o, x, dy, dw, dbias);
  }
}

void conv2d_backward_omp(ConvShape s, std::span<const double> x, std::span<const double> w,
                         std::span<const double> dy, std::span<double> dx, std::span<double> dw,
                         std::span<double> dbias) {
  const auto planes = static_cast<std::int64_t>(s.batch * s.in_channels);
  const auto filters = static_cast<std::int64_t>(s.out_channels);
  const bool want_dx = !dx.empty();
  const bool want_dw = !dw.empty() || !dbias.empty();
#pragma omp parallel num_threads(threads())
  {
    if (want_dx) {
#pragma omp for schedule(static)
      for (std::int64_t p = 0; p < planes; ++p) {
        const auto up = static_cast<std::size_t>(p);
        conv_dx_plane(s, up / s.in_channels, up % s.in_channels, w, dy, dx);
      }
    }
    if (want_dw) {
#pragma omp for schedule(static)
      for (std::int64_t o = 0; o < filters; ++o) {
        conv_dw_filter(s, static_cast<std::size_t>(o), x, dy, dw, dbias);
      }
    }
  }
}

std::size_t superball_hits_serial(std::size_t d, double p, std::size_t samples,
                                  unsigned long long seed) {
  std::size_t hits = 0;
  const std::size_t chunks = (samples + kHitChunk - 1) / kHitChunk;
  for (std::size_t c = 0; c < chunks; ++c) {
    hits += superball_chunk(d, p, c * kHitChunk, std::min(samples, (c + 1) * kHitChunk), seed, c);
  }
  return hits;
}

std::size_t superball_hits_omp(std::size_t d, double p, std::size_t samples,
                               unsigned long long seed) {
  const auto chunks = static_cast<std::int64_t>((samples + kHitChunk - 1) / kHitChunk);
  std::size_t hits = 0;
#pragma omp parallel for num_threads(threads()) schedule(dynamic) reduction(+ : hits)
  for (std::int64_t c = 0; c < chunks; ++c) {
    const auto uc = static_cast<std::size_t>(c);
    hits += superball_chunk(d, p, uc * kHitChunk, std::min(samples, (uc + 1) * kHitChunk), seed, uc);
  }
  return hits;
}

}  // namespace aniscert::kernels

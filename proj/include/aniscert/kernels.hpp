#pragma once

// Data-parallel inner loops. Every kernel has a serial reference (kept for
// tests and the benchmark) and an OpenMP version; both produce bit-identical
// results because each output element is owned by exactly one thread and is
// accumulated in the same order.

#include <cstddef>
#include <span>

namespace aniscert::kernels {

struct DenseShape {
  std::size_t batch = 0;
  std::size_t in = 0;
  std::size_t out = 0;
};

// y[b, o] = bias[o] + sum_i w[o, i] x[b, i]
void dense_forward_serial(DenseShape s, std::span<const double> x, std::span<const double> w,
                          std::span<const double> bias, std::span<double> y);
void dense_forward_omp(DenseShape s, std::span<const double> x, std::span<const double> w,
                       std::span<const double> bias, std::span<double> y);

// Accumulates (+=) into dx, dw, dbias. Any of them may be empty to skip it.
void dense_backward_serial(DenseShape s, std::span<const double> x, std::span<const double> w,
                           std::span<const double> dy, std::span<double> dx, std::span<double> dw,
                           std::span<double> dbias);
void dense_backward_omp(DenseShape s, std::span<const double> x, std::span<const double> w,
                        std::span<const double> dy, std::span<double> dx, std::span<double> dw,
                        std::span<double> dbias);

// Stride-1 convolution with symmetric zero padding (kernel / 2), so the
// output keeps the input's spatial size. Layouts: x [B, C, H, W],
// w [O, C, K, K], y [B, O, H, W].
struct ConvShape {
  std::size_t batch = 0;
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t kernel = 3;
};

void conv2d_forward_serial(ConvShape s, std::span<const double> x, std::span<const double> w,
                           std::span<const double> bias, std::span<double> y);
void conv2d_forward_omp(ConvShape s, std::span<const double> x, std::span<const double> w,
                        std::span<const double> bias, std::span<double> y);

void conv2d_backward_serial(ConvShape s, std::span<const double> x, std::span<const double> w,
                            std::span<const double> dy, std::span<double> dx, std::span<double> dw,
                            std::span<double> dbias);
void conv2d_backward_omp(ConvShape s, std::span<const double> x, std::span<const double> w,
                         std::span<const double> dy, std::span<double> dx, std::span<double> dw,
                         std::span<double> dbias);

// Hit count of points u ~ U[-1, 1]^d with sum |u_i|^p <= 1 (p = inf: always
// inside). Draws come from per-chunk seed streams so the count is independent
// of the thread count.
std::size_t superball_hits_serial(std::size_t d, double p, std::size_t samples, unsigned long long seed);
std::size_t superball_hits_omp(std::size_t d, double p, std::size_t samples, unsigned long long seed);

// Number of threads the *_omp kernels use; 0 restores the OpenMP default.
void set_num_threads(int threads);
int num_threads();

}  // namespace aniscert::kernels

#include "aniscert/nn.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <istream>
#include <limits>
#include <numeric>
#include <ostream>
#include <sstream>
#include <stdexcept>

#include "aniscert/kernels.hpp"
#include "aniscert/rng.hpp"

namespace aniscert::nn {

std::size_t shape_size(std::span<const std::size_t> shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

namespace {

std::string shape_str(std::span<const std::size_t> shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

}  // namespace

Tensor::Tensor(std::vector<std::size_t> s, double fill)
    : shape(std::move(s)), data(shape_size(shape), fill) {}

Tensor::Tensor(std::vector<std::size_t> s, std::vector<double> d)
    : shape(std::move(s)), data(std::move(d)) {
  if (data.size() != shape_size(shape)) {
    throw std::invalid_argument("Tensor: data length " + std::to_string(data.size()) +
                                " does not match shape " + shape_str(shape));
  }
}

void Tensor::zero_grad() {
  if (grad && grad->size() == data.size()) {
    std::fill(grad->begin(), grad->end(), 0.0);
  } else {
    grad.emplace(data.size(), 0.0);
  }
}

// ---- Tape ------------------------------------------------------------------

Var Tape::constant(Tensor value, bool requires_grad) {
  Node n;
  n.own = std::move(value);
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return {nodes_.size() - 1};
}

Var Tape::view(const Tensor& value) {
  Node n;
  n.view = &value;
  nodes_.push_back(std::move(n));
  return {nodes_.size() - 1};
}

Var Tape::parameter(Tensor& param) {
  if (!param.grad || param.grad->size() != param.data.size()) param.zero_grad();
  Node n;
  n.view = &param;
  n.param = &param;
  n.requires_grad = true;
  nodes_.push_back(std::move(n));
  return {nodes_.size() - 1};
}

Var Tape::push(Tensor value, std::initializer_list<Var> parents, BackwardFn backward) {
  Node n;
  n.own = std::move(value);
  for (Var p : parents) n.requires_grad = n.requires_grad || node(p).requires_grad;
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return {nodes_.size() - 1};
}

const Tape::Node& Tape::node(Var v) const {
  if (v.id >= nodes_.size()) throw std::out_of_range("Tape: variable is not recorded on this tape");
  return nodes_[v.id];
}

const Tensor& Tape::value(Var v) const {
  const Node& n = node(v);
  return n.view ? *n.view : n.own;
}

std::span<const double> Tape::grad(Var v) const {
  const Node& n = node(v);
  if (n.grad.empty()) throw std::logic_error("Tape: no gradient recorded for this variable");
  return n.grad;
}

std::span<double> Tape::grad_mut(std::size_t id) { return nodes_.at(id).grad; }

void Tape::backward(Var out, std::span<const double> seed) {
  if (nodes_.empty()) throw std::logic_error("backward called without a recorded forward pass");
  const Node& root = node(out);
  const std::size_t root_size = (root.view ? *root.view : root.own).size();
  if (seed.size() != root_size) throw std::invalid_argument("backward: seed size mismatch");
  for (std::size_t i = 0; i <= out.id; ++i) {
    Node& n = nodes_[i];
    if (!n.requires_grad) continue;
    const std::size_t sz = (n.view ? *n.view : n.own).size();
    n.grad.assign(sz, 0.0);
  }
  if (!root.requires_grad) return;
  std::copy(seed.begin(), seed.end(), nodes_[out.id].grad.begin());
  for (std::size_t i = out.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad) continue;
    if (n.backward) n.backward(*this, i);
    if (n.param) {
      auto& g = *n.param->grad;
      for (std::size_t k = 0; k < g.size(); ++k) g[k] += n.grad[k];
    }
  }
}

void Tape::backward(Var out) {
  const double one = 1.0;
  backward(out, std::span<const double>(&one, 1));
}

// ---- ops -------------------------------------------------------------------

namespace {

std::size_t rows_of(const Tensor& t) { return t.rank() == 0 ? 1 : t.shape[0]; }
std::size_t row_size(const Tensor& t) { return t.size() / std::max<std::size_t>(1, rows_of(t)); }

template <typename Fwd, typename Deriv>
Var unary(Tape& t, Var x, Fwd fwd, Deriv deriv) {
  const Tensor& xv = t.value(x);
  Tensor y(xv.shape);
  for (std::size_t i = 0; i < xv.size(); ++i) y.data[i] = fwd(xv.data[i]);
  return t.push(std::move(y), {x}, [x, deriv](Tape& tp, std::size_t self) {
    if (!tp.requires_grad(x)) return;
    const auto& xd = tp.value(x).data;
    const auto& yd = tp.value(Var{self}).data;
    auto gy = tp.grad_mut(self);
    auto gx = tp.grad_mut(x.id);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gy[i] * deriv(xd[i], yd[i]);
  });
}

enum class Broadcast { Same, Rows };

Broadcast broadcast_kind(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape == b.shape) return Broadcast::Same;
  if (rows_of(b) == 1 && row_size(a) == b.size()) return Broadcast::Rows;
  throw std::invalid_argument(std::string(op) + ": incompatible shapes " + shape_str(a.shape) +
                              " and " + shape_str(b.shape));
}

}  // namespace

Var dense(Tape& t, Var x, Var w, Var b) {
  const Tensor& xv = t.value(x);
  const Tensor& wv = t.value(w);
  const Tensor& bv = t.value(b);
  if (wv.rank() != 2) throw std::invalid_argument("dense: weight must be rank 2");
  const kernels::DenseShape s{rows_of(xv), wv.shape[1], wv.shape[0]};
  if (row_size(xv) != s.in || bv.size() != s.out) {
    throw std::invalid_argument("dense: input " + shape_str(xv.shape) + " does not match weight " +
                                shape_str(wv.shape));
  }
  Tensor y({s.batch, s.out});
  kernels::dense_forward_omp(s, xv.data, wv.data, bv.data, y.data);
  return t.push(std::move(y), {x, w, b}, [x, w, b, s](Tape& tp, std::size_t self) {
    const auto gy = tp.grad_mut(self);
    std::span<double> gx = tp.requires_grad(x) ? tp.grad_mut(x.id) : std::span<double>{};
    std::span<double> gw = tp.requires_grad(w) ? tp.grad_mut(w.id) : std::span<double>{};
    std::span<double> gb = tp.requires_grad(b) ? tp.grad_mut(b.id) : std::span<double>{};
    kernels::dense_backward_omp(s, tp.value(x).data, tp.value(w).data, gy, gx, gw, gb);
  });
}

Var conv2d(Tape& t, Var x, Var w, Var b) {
  const Tensor& xv = t.value(x);
  const Tensor& wv = t.value(w);
  const Tensor& bv = t.value(b);
  if (xv.rank() != 4 || wv.rank() != 4 || wv.shape[2] != wv.shape[3] || wv.shape[2] % 2 == 0) {
    throw std::invalid_argument("conv2d: expects x [B,C,H,W] and an odd square kernel [O,C,K,K]");
  }
  const kernels::ConvShape s{xv.shape[0], xv.shape[1], wv.shape[0], xv.shape[2], xv.shape[3], wv.shape[2]};
  if (wv.shape[1] != s.in_channels || bv.size() != s.out_channels) {
    throw std::invalid_argument("conv2d: input " + shape_str(xv.shape) + " does not match weight " +
                                shape_str(wv.shape));
  }
  Tensor y({s.batch, s.out_channels, s.height, s.width});
  kernels::conv2d_forward_omp(s, xv.data, wv.data, bv.data, y.data);
  return t.push(std::move(y), {x, w, b}, [x, w, b, s](Tape& tp, std::size_t self) {
    const auto gy = tp.grad_mut(self);
    std::span<double> gx = tp.requires_grad(x) ? tp.grad_mut(x.id) : std::span<double>{};
    std::span<double> gw = tp.requires_grad(w) ? tp.grad_mut(w.id) : std::span<double>{};
    std::span<double> gb = tp.requires_grad(b) ? tp.grad_mut(b.id) : std::span<double>{};
    kernels::conv2d_backward_omp(s, tp.value(x).data, tp.value(w).data, gy, gx, gw, gb);
  });
}

Var leaky_relu(Tape& t, Var x, double slope) {
  return unary(
      t, x, [slope](double v) { return v > 0.0 ? v : slope * v; },
      [slope](double v, double) { return v > 0.0 ? 1.0 : slope; });
}

Var tanh(Tape& t, Var x) {
  return unary(
      t, x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

Var amplified_tanh(Tape& t, Var x, double gamma) {
  if (!(gamma > 0.0)) throw std::invalid_argument("amplified_tanh: gamma must be positive");
  return unary(
      t, x, [gamma](double v) { return gamma * std::tanh(v); },
      [gamma](double v, double) {
        const double th = std::tanh(v);
        return gamma * (1.0 - th * th);
      });
}

Var positive_tanh(Tape& t, Var x, double gamma, double floor) {
  if (!(gamma > 0.0)) throw std::invalid_argument("positive_tanh: gamma must be positive");
  const double half = 0.5 * gamma;
  return unary(
      t, x, [half, floor](double v) { return floor + half * (std::tanh(v) + 1.0); },
      [half](double v, double) {
        const double th = std::tanh(v);
        return half * (1.0 - th * th);
      });
}

Var softmax(Tape& t, Var x) {
  const Tensor& xv = t.value(x);
  if (xv.rank() != 2) throw std::invalid_argument("softmax: expects a rank-2 tensor");
  const std::size_t rows = xv.shape[0];
  const std::size_t cols = xv.shape[1];
  Tensor y(xv.shape);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xv.data.data() + r * cols;
    double* out = y.data.data() + r * cols;
    const double peak = *std::max_element(in, in + cols);
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) z += (out[c] = std::exp(in[c] - peak));
    for (std::size_t c = 0; c < cols; ++c) out[c] /= z;
  }
  return t.push(std::move(y), {x}, [x, rows, cols](Tape& tp, std::size_t self) {
    if (!tp.requires_grad(x)) return;
    const auto& yd = tp.value(Var{self}).data;
    const auto gy = tp.grad_mut(self);
    auto gx = tp.grad_mut(x.id);
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < cols; ++c) dot += gy[r * cols + c] * yd[r * cols + c];
      for (std::size_t c = 0; c < cols; ++c) {
        gx[r * cols + c] += yd[r * cols + c] * (gy[r * cols + c] - dot);
      }
    }
  });
}

Var add(Tape& t, Var a, Var b) {
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  const Broadcast kind = broadcast_kind(av, bv, "add");
  const std::size_t stride = bv.size();
  Tensor y = Tensor(av.shape, av.data);
  for (std::size_t i = 0; i < y.size(); ++i) y.data[i] += bv.data[kind == Broadcast::Same ? i : i % stride];
  return t.push(std::move(y), {a, b}, [a, b, kind, stride](Tape& tp, std::size_t self) {
    const auto gy = tp.grad_mut(self);
    if (tp.requires_grad(a)) {
      auto ga = tp.grad_mut(a.id);
      for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i];
    }
    if (tp.requires_grad(b)) {
      auto gb = tp.grad_mut(b.id);
      for (std::size_t i = 0; i < gy.size(); ++i) gb[kind == Broadcast::Same ? i : i % stride] += gy[i];
    }
  });
}

Var mul(Tape& t, Var a, Var b) {
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  const Broadcast kind = broadcast_kind(av, bv, "mul");
  const std::size_t stride = bv.size();
  Tensor y = Tensor(av.shape, av.data);
  for (std::size_t i = 0; i < y.size(); ++i) y.data[i] *= bv.data[kind == Broadcast::Same ? i : i % stride];
  return t.push(std::move(y), {a, b}, [a, b, kind, stride](Tape& tp, std::size_t self) {
    const auto gy = tp.grad_mut(self);
    const auto& ad = tp.value(a).data;
    const auto& bd = tp.value(b).data;
    if (tp.requires_grad(a)) {
      auto ga = tp.grad_mut(a.id);
      for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i] * bd[kind == Broadcast::Same ? i : i % stride];
    }
    if (tp.requires_grad(b)) {
      auto gb = tp.grad_mut(b.id);
      for (std::size_t i = 0; i < gy.size(); ++i) gb[kind == Broadcast::Same ? i : i % stride] += gy[i] * ad[i];
    }
  });
}

Var scale(Tape& t, Var x, double factor) {
  return unary(
      t, x, [factor](double v) { return factor * v; }, [factor](double, double) { return factor; });
}

Var reshape(Tape& t, Var x, std::vector<std::size_t> shape) {
  const Tensor& xv = t.value(x);
  if (shape_size(shape) != xv.size()) {
    throw std::invalid_argument("reshape: " + shape_str(xv.shape) + " -> " + shape_str(shape));
  }
  Tensor y(std::move(shape), xv.data);
  return t.push(std::move(y), {x}, [x](Tape& tp, std::size_t self) {
    if (!tp.requires_grad(x)) return;
    const auto gy = tp.grad_mut(self);
    auto gx = tp.grad_mut(x.id);
    for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i];
  });
}

Var concat(Tape& t, Var a, Var b) {
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  if (av.rank() < 2 || av.rank() != bv.rank() || av.shape[0] != bv.shape[0] ||
      !std::equal(av.shape.begin() + 2, av.shape.end(), bv.shape.begin() + 2)) {
    throw std::invalid_argument("concat: incompatible shapes " + shape_str(av.shape) + " and " +
                                shape_str(bv.shape));
  }
  const std::size_t rows = av.shape[0];
  const std::size_t a_row = row_size(av);
  const std::size_t b_row = row_size(bv);
  std::vector<std::size_t> shape = av.shape;
  shape[1] += bv.shape[1];
  Tensor y(std::move(shape));
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(av.data.begin() + r * a_row, a_row, y.data.begin() + r * (a_row + b_row));
    std::copy_n(bv.data.begin() + r * b_row, b_row, y.data.begin() + r * (a_row + b_row) + a_row);
  }
  return t.push(std::move(y), {a, b}, [a, b, rows, a_row, b_row](Tape& tp, std::size_t self) {
    const auto gy = tp.grad_mut(self);
    const bool ga_on = tp.requires_grad(a);
    const bool gb_on = tp.requires_grad(b);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* src = gy.data() + r * (a_row + b_row);
      if (ga_on) {
        auto ga = tp.grad_mut(a.id);
        for (std::size_t i = 0; i < a_row; ++i) ga[r * a_row + i] += src[i];
      }
      if (gb_on) {
        auto gb = tp.grad_mut(b.id);
        for (std::size_t i = 0; i < b_row; ++i) gb[r * b_row + i] += src[a_row + i];
      }
    }
  });
}

Var mean(Tape& t, Var x) {
  const Tensor& xv = t.value(x);
  if (xv.size() == 0) throw std::invalid_argument("mean of an empty tensor");
  double s = 0.0;
  for (double v : xv.data) s += v;
  const double inv = 1.0 / static_cast<double>(xv.size());
  return t.push(Tensor({1}, std::vector<double>{s * inv}), {x}, [x, inv](Tape& tp, std::size_t self) {
    if (!tp.requires_grad(x)) return;
    const double g = tp.grad_mut(self)[0] * inv;
    for (double& v : tp.grad_mut(x.id)) v += g;
  });
}

Var soft_min_rows(Tape& t, Var x, double tau) {
  if (!(tau > 0.0)) throw std::invalid_argument("soft_min_rows: tau must be positive");
  const Tensor& xv = t.value(x);
  const std::size_t rows = rows_of(xv);
  const std::size_t cols = row_size(xv);
  Tensor y({rows});
  std::vector<double> weights(xv.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xv.data.data() + r * cols;
    const double lo = *std::min_element(in, in + cols);
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) z += (weights[r * cols + c] = std::exp(-(in[c] - lo) / tau));
    for (std::size_t c = 0; c < cols; ++c) weights[r * cols + c] /= z;
    y.data[r] = lo - tau * std::log(z);
  }
  return t.push(std::move(y), {x}, [x, rows, cols, w = std::move(weights)](Tape& tp, std::size_t self) {
    if (!tp.requires_grad(x)) return;
    const auto gy = tp.grad_mut(self);
    auto gx = tp.grad_mut(x.id);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < cols; ++c) gx[r * cols + c] += gy[r] * w[r * cols + c];
    }
  });
}

Var softmax_cross_entropy(Tape& t, Var logits, std::span<const int> labels) {
  const Tensor& lv = t.value(logits);
  if (lv.rank() != 2 || lv.shape[0] != labels.size() || labels.empty()) {
    throw std::invalid_argument("softmax_cross_entropy: logits must be [B, C] with B labels");
  }
  const std::size_t rows = lv.shape[0];
  const std::size_t cols = lv.shape[1];
  std::vector<double> probs(lv.size());
  double loss = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    const auto label = labels[r];
    if (label < 0 || static_cast<std::size_t>(label) >= cols) {
      throw std::invalid_argument("softmax_cross_entropy: label out of range");
    }
    const double* in = lv.data.data() + r * cols;
    double* p = probs.data() + r * cols;
    const double peak = *std::max_element(in, in + cols);
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) z += (p[c] = std::exp(in[c] - peak));
    for (std::size_t c = 0; c < cols; ++c) p[c] /= z;
    loss -= in[label] - peak - std::log(z);
  }
  const double inv = 1.0 / static_cast<double>(rows);
  std::vector<int> lab(labels.begin(), labels.end());
  return t.push(Tensor({1}, std::vector<double>{loss * inv}), {logits},
                [logits, cols, inv, p = std::move(probs), lab = std::move(lab)](Tape& tp, std::size_t self) {
                  if (!tp.requires_grad(logits)) return;
                  const double g = tp.grad_mut(self)[0] * inv;
                  auto gl = tp.grad_mut(logits.id);
                  for (std::size_t r = 0; r < lab.size(); ++r) {
                    for (std::size_t c = 0; c < cols; ++c) {
                      const double onehot = static_cast<int>(c) == lab[r] ? 1.0 : 0.0;
                      gl[r * cols + c] += g * (p[r * cols + c] - onehot);
                    }
                  }
                });
}

// ---- Model -------------------------------------------------------------------

const char* to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::Dense: return "Dense";
    case LayerKind::Conv2d: return "Conv2d";
    case LayerKind::LeakyRelu: return "LeakyRelu";
    case LayerKind::Tanh: return "Tanh";
    case LayerKind::AmplifiedTanh: return "AmplifiedTanh";
    case LayerKind::Softmax: return "Softmax";
  }
  return "?";
}

namespace {

LayerKind parse_layer_kind(const std::string& s) {
  for (LayerKind k : {LayerKind::Dense, LayerKind::Conv2d, LayerKind::LeakyRelu, LayerKind::Tanh,
                      LayerKind::AmplifiedTanh, LayerKind::Softmax}) {
    if (s == to_string(k)) return k;
  }
  throw std::invalid_argument("unknown layer kind '" + s + "'");
}

bool has_params(LayerKind k) { return k == LayerKind::Dense || k == LayerKind::Conv2d; }

std::vector<int> index_params(const std::vector<LayerSpec>& layers) {
  std::vector<int> index(layers.size(), -1);
  int next = 0;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (has_params(layers[i].kind)) {
      index[i] = next;
      next += 2;
    }
  }
  return index;
}

}  // namespace

Model::Model(std::vector<LayerSpec> layers, std::uint64_t init_seed)
    : layers_(std::move(layers)), param_index_(index_params(layers_)) {
  validate();
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const LayerSpec& l = layers_[i];
    if (!has_params(l.kind)) continue;
    Rng rng(init_seed, i);
    std::vector<std::size_t> wshape;
    double fan_in, fan_out;
    if (l.kind == LayerKind::Dense) {
      wshape = {l.out, l.in};
      fan_in = static_cast<double>(l.in);
      fan_out = static_cast<double>(l.out);
    } else {
      wshape = {l.out, l.in, l.kernel, l.kernel};
      const double area = static_cast<double>(l.kernel * l.kernel);
      fan_in = static_cast<double>(l.in) * area;
      fan_out = static_cast<double>(l.out) * area;
    }
    const double limit = std::sqrt(6.0 / (fan_in + fan_out));
    Tensor w(wshape);
    for (double& v : w.data) v = rng.uniform(-limit, limit);
    params_.push_back(std::move(w));
    params_.emplace_back(std::vector<std::size_t>{l.out});
  }
}

Model::Model(std::vector<LayerSpec> layers, std::vector<Tensor> params)
    : layers_(std::move(layers)), params_(std::move(params)), param_index_(index_params(layers_)) {
  validate();
  std::size_t expected = 0;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const LayerSpec& l = layers_[i];
    if (!has_params(l.kind)) continue;
    expected += 2;
    if (params_.size() < expected) throw std::invalid_argument("Model: too few parameter tensors");
    const auto& w = params_[static_cast<std::size_t>(param_index_[i])];
    const auto& b = params_[static_cast<std::size_t>(param_index_[i]) + 1];
    const std::vector<std::size_t> wshape = l.kind == LayerKind::Dense
                                                ? std::vector<std::size_t>{l.out, l.in}
                                                : std::vector<std::size_t>{l.out, l.in, l.kernel, l.kernel};
    if (w.shape != wshape || b.shape != std::vector<std::size_t>{l.out}) {
      throw std::invalid_argument("Model: parameter shape mismatch at layer " + std::to_string(i));
    }
  }
  if (params_.size() != expected) throw std::invalid_argument("Model: too many parameter tensors");
}

void Model::validate() const {
  if (layers_.empty()) throw std::invalid_argument("Model: no layers");
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const LayerSpec& l = layers_[i];
    switch (l.kind) {
      case LayerKind::Dense:
        if (l.in == 0 || l.out == 0) throw std::invalid_argument("Dense layer needs in/out > 0");
        break;
      case LayerKind::Conv2d:
        if (l.in == 0 || l.out == 0 || l.height == 0 || l.width == 0 || l.kernel % 2 == 0) {
          throw std::invalid_argument("Conv2d layer needs channels, spatial size and an odd kernel");
        }
        break;
      case LayerKind::AmplifiedTanh:
        if (!(l.gamma > 0.0)) throw std::invalid_argument("AmplifiedTanh needs gamma > 0");
        break;
      default:
        break;
    }
    if (l.concat_from >= static_cast<int>(i)) {
      throw std::invalid_argument("Model: concat_from must refer to an earlier layer");
    }
  }

  // Per-example element count entering each layer; unknown until the first
  // Dense or Conv2d layer fixes it.
  std::vector<std::optional<std::size_t>> entering(layers_.size());
  std::optional<std::size_t> size;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const LayerSpec& l = layers_[i];
    entering[i] = size;
    std::size_t expected = 0;
    if (l.kind == LayerKind::Dense) expected = l.in;
    if (l.kind == LayerKind::Conv2d) expected = l.in * l.height * l.width;
    if (expected != 0) {
      if (size && *size != expected) {
        throw std::invalid_argument("Model: layer " + std::to_string(i) + " expects " + std::to_string(expected) +
                                    " inputs per example but receives " + std::to_string(*size));
      }
      size = l.kind == LayerKind::Dense ? l.out : l.out * l.height * l.width;
    }
    if (l.concat_from >= 0) {
      const auto& from = entering[static_cast<std::size_t>(l.concat_from)];
      size = (from && size) ? std::optional<std::size_t>(*from + *size) : std::nullopt;
    }
  }
}

std::vector<std::size_t> Model::input_shape() const {
  const LayerSpec& first = layers_.front();
  if (first.kind == LayerKind::Dense) return {first.in};
  if (first.kind == LayerKind::Conv2d) return {first.in, first.height, first.width};
  throw std::logic_error("Model: first layer does not fix the input shape");
}

std::size_t Model::num_parameters() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.size();
  return n;
}

void Model::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

namespace {

template <typename BindParam>
Var run_layers(Tape& t, Var input, const std::vector<LayerSpec>& layers,
               const std::vector<int>& param_index, BindParam bind) {
  std::vector<Var> entering;
  entering.reserve(layers.size());
  Var h = input;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const LayerSpec& l = layers[i];
    entering.push_back(h);
    const Tensor& hv = t.value(h);
    const std::size_t batch = hv.rank() == 0 ? 1 : hv.shape[0];
    switch (l.kind) {
      case LayerKind::Dense: {
        if (hv.rank() != 2) h = reshape(t, h, {batch, hv.size() / batch});
        const auto p = static_cast<std::size_t>(param_index[i]);
        h = dense(t, h, bind(p), bind(p + 1));
        break;
      }
      case LayerKind::Conv2d: {
        if (hv.size() != batch * l.in * l.height * l.width) {
          throw std::invalid_argument("Conv2d layer " + std::to_string(i) + ": input " +
                                      shape_str(hv.shape) + " does not match its spec");
        }
        if (hv.rank() != 4) h = reshape(t, h, {batch, l.in, l.height, l.width});
        const auto p = static_cast<std::size_t>(param_index[i]);
        h = conv2d(t, h, bind(p), bind(p + 1));
        break;
      }
      case LayerKind::LeakyRelu: h = leaky_relu(t, h, l.slope); break;
      case LayerKind::Tanh: h = tanh(t, h); break;
      case LayerKind::AmplifiedTanh: h = amplified_tanh(t, h, l.gamma); break;
      case LayerKind::Softmax: {
        if (hv.rank() != 2) h = reshape(t, h, {batch, hv.size() / batch});
        h = softmax(t, h);
        break;
      }
    }
    if (l.concat_from >= 0) h = concat(t, entering[static_cast<std::size_t>(l.concat_from)], h);
  }
  return h;
}

}  // namespace

Var Model::forward(Tape& t, Var input, bool trainable) {
  return run_layers(t, input, layers_, param_index_, [&](std::size_t p) {
    return trainable ? t.parameter(params_[p]) : t.view(params_[p]);
  });
}

Tensor Model::forward(const Tensor& input) const {
  Tape t;
  const Var in = t.view(input);
  const Var out = run_layers(t, in, layers_, param_index_, [&](std::size_t p) { return t.view(params_[p]); });
  const Tensor& v = t.value(out);
  return Tensor(v.shape, v.data);
}

// ---- Adam --------------------------------------------------------------------

void adam_step(std::span<double> params, std::span<const double> grads, const AdamConfig& cfg,
               AdamState& state) {
  if (params.size() != grads.size()) throw std::invalid_argument("adam_step: size mismatch");
  if (state.m.size() != params.size()) {
    state.m.assign(params.size(), 0.0);
    state.v.assign(params.size(), 0.0);
    state.step = 0;
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grads[i];
    state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
    state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
    const double mhat = state.m[i] / c1;
    const double vhat = state.v[i] / c2;
    params[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
  }
}

Adam::Adam(std::vector<Tensor*> params, AdamConfig cfg)
    : params_(std::move(params)), states_(params_.size()), cfg_(cfg) {
  for (Tensor* p : params_) {
    if (!p->grad) p->zero_grad();
  }
}

void Adam::step() {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    adam_step(params_[i]->data, *params_[i]->grad, cfg_, states_[i]);
  }
}

void Adam::zero_grad() {
  for (Tensor* p : params_) p->zero_grad();
}

// ---- serialization -------------------------------------------------------------

namespace {

constexpr const char* kMagic = "aniscert-model";

void write_model_body(std::ostream& out, const Model& model) {
  out << "layers " << model.layers().size() << '\n';
  for (const LayerSpec& l : model.layers()) {
    out << "layer " << to_string(l.kind) << " in " << l.in << " out " << l.out << " kernel "
        << l.kernel << " height " << l.height << " width " << l.width << " slope " << l.slope
        << " gamma " << l.gamma << " concat_from " << l.concat_from << '\n';
  }
  out << "tensors " << model.params().size() << '\n';
  for (const Tensor& p : model.params()) {
    out << "tensor " << p.rank();
    for (std::size_t s : p.shape) out << ' ' << s;
    out << '\n';
    for (std::size_t i = 0; i < p.size(); ++i) out << (i ? " " : "") << p.data[i];
    out << '\n';
  }
}

void expect(std::istream& in, const std::string& word) {
  std::string got;
  if (!(in >> got) || got != word) {
    throw std::runtime_error("model checkpoint: expected '" + word + "', found '" + got + "'");
  }
}

template <typename T>
T read_value(std::istream& in, const char* what) {
  T v{};
  if (!(in >> v)) throw std::runtime_error(std::string("model checkpoint: cannot read ") + what);
  return v;
}

Model read_model_body(std::istream& in) {
  expect(in, "layers");
  const auto n_layers = read_value<std::size_t>(in, "layer count");
  std::vector<LayerSpec> layers;
  for (std::size_t i = 0; i < n_layers; ++i) {
    expect(in, "layer");
    LayerSpec l;
    l.kind = parse_layer_kind(read_value<std::string>(in, "layer kind"));
    expect(in, "in");
    l.in = read_value<std::size_t>(in, "in");
    expect(in, "out");
    l.out = read_value<std::size_t>(in, "out");
    expect(in, "kernel");
    l.kernel = read_value<std::size_t>(in, "kernel");
    expect(in, "height");
    l.height = read_value<std::size_t>(in, "height");
    expect(in, "width");
    l.width = read_value<std::size_t>(in, "width");
    expect(in, "slope");
    l.slope = read_value<double>(in, "slope");
    expect(in, "gamma");
    l.gamma = read_value<double>(in, "gamma");
    expect(in, "concat_from");
    l.concat_from = read_value<int>(in, "concat_from");
    layers.push_back(l);
  }
  expect(in, "tensors");
  const auto n_tensors = read_value<std::size_t>(in, "tensor count");
  std::vector<Tensor> params;
  for (std::size_t i = 0; i < n_tensors; ++i) {
    expect(in, "tensor");
    const auto rank = read_value<std::size_t>(in, "rank");
    std::vector<std::size_t> shape(rank);
    for (auto& s : shape) s = read_value<std::size_t>(in, "dimension");
    Tensor t(shape);
    for (double& v : t.data) v = read_value<double>(in, "tensor value");
    params.push_back(std::move(t));
  }
  return Model(std::move(layers), std::move(params));
}

void write_header(std::ostream& out, std::size_t models, const std::map<std::string, std::string>& header) {
  out << kMagic << ' ' << kFormatVersion << '\n';
  out << "header " << header.size() << '\n';
  for (const auto& [k, v] : header) {
    if (k.find_first_of(" \n") != std::string::npos || v.find_first_of(" \n") != std::string::npos || v.empty()) {
      throw std::invalid_argument("model header keys/values must be non-empty single tokens");
    }
    out << k << ' ' << v << '\n';
  }
  out << "models " << models << '\n';
}

std::size_t read_header(std::istream& in, std::map<std::string, std::string>* header) {
  expect(in, kMagic);
  const int version = read_value<int>(in, "format version");
  if (version != kFormatVersion) {
    throw std::runtime_error("model checkpoint: unsupported format version " + std::to_string(version));
  }
  expect(in, "header");
  const auto n = read_value<std::size_t>(in, "header size");
  for (std::size_t i = 0; i < n; ++i) {
    const auto k = read_value<std::string>(in, "header key");
    const auto v = read_value<std::string>(in, "header value");
    if (header) (*header)[k] = v;
  }
  expect(in, "models");
  return read_value<std::size_t>(in, "model count");
}

}  // namespace

void save_models(std::ostream& out, const std::vector<const Model*>& models,
                 const std::map<std::string, std::string>& header) {
  const auto old_precision = out.precision(17);
  write_header(out, models.size(), header);
  for (const Model* m : models) write_model_body(out, *m);
  out.precision(old_precision);
  if (!out) throw std::runtime_error("model checkpoint: write failed");
}

std::vector<Model> load_models(std::istream& in, std::map<std::string, std::string>* header) {
  const std::size_t n = read_header(in, header);
  std::vector<Model> models;
  for (std::size_t i = 0; i < n; ++i) models.push_back(read_model_body(in));
  return models;
}

void save_model(std::ostream& out, const Model& model, const std::map<std::string, std::string>& header) {
  save_models(out, {&model}, header);
}

Model load_model(std::istream& in, std::map<std::string, std::string>* header) {
  auto models = load_models(in, header);
  if (models.size() != 1) throw std::runtime_error("model checkpoint: expected exactly one model");
  return std::move(models.front());
}

std::vector<int> argmax_rows(const Tensor& logits) {
  if (logits.rank() != 2) throw std::invalid_argument("argmax_rows: expects a rank-2 tensor");
  const std::size_t cols = logits.shape[1];
  std::vector<int> out(logits.shape[0]);
  for (std::size_t r = 0; r < out.size(); ++r) {
    const double* row = logits.data.data() + r * cols;
    out[r] = static_cast<int>(std::max_element(row, row + cols) - row);
  }
  return out;
}

}  // namespace aniscert::nn

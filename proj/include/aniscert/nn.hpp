#pragma once

// Minimal reverse-mode autodiff: a tape of value nodes with backward closures,
// the handful of layers needed for the base classifiers and noise-parameter
// generators, Adam, and a text checkpoint format.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace aniscert::nn {

struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<double> data;              // row-major
  std::optional<std::vector<double>> grad;  // same length as data when present

  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> shape, double fill = 0.0);
  Tensor(std::vector<std::size_t> shape, std::vector<double> data);

  std::size_t size() const noexcept { return data.size(); }
  std::size_t rank() const noexcept { return shape.size(); }
  std::size_t dim(std::size_t axis) const { return shape.at(axis); }

  // Allocates (or zeroes) the gradient buffer.
  void zero_grad();
};

std::size_t shape_size(std::span<const std::size_t> shape);

// Handle to a node on a Tape.
struct Var {
  std::size_t id = static_cast<std::size_t>(-1);
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  // Constant leaf. With requires_grad its gradient is kept by backward().
  Var constant(Tensor value, bool requires_grad = false);
  // Constant leaf read in place; `value` must outlive the tape.
  Var view(const Tensor& value);
  // Leaf bound to an external parameter. The value is read in place and
  // backward() accumulates into param.grad.
  Var parameter(Tensor& param);

  // Records an op result. It requires a gradient iff any parent does.
  Var push(Tensor value, std::initializer_list<Var> parents, BackwardFn backward);

  const Tensor& value(Var v) const;
  bool requires_grad(Var v) const { return node(v).requires_grad; }
  // Gradient of the last backward() output with respect to v.
  std::span<const double> grad(Var v) const;
  std::span<double> grad_mut(std::size_t id);

  std::size_t size() const noexcept { return nodes_.size(); }
  bool empty() const noexcept { return nodes_.empty(); }

  // Seeds d(out) with `seed` and propagates to every node and bound
  // parameter. Throws if nothing was recorded or v is not on this tape.
  void backward(Var out, std::span<const double> seed);
  // Scalar output, seed 1.
  void backward(Var out);

 private:
  struct Node {
    Tensor own;
    const Tensor* view = nullptr;
    Tensor* param = nullptr;
    bool requires_grad = false;
    std::vector<double> grad;
    BackwardFn backward;
  };
  const Node& node(Var v) const;

  std::vector<Node> nodes_;
};

// ---- ops -----------------------------------------------------------------

// x [B, in], w [out, in], b [out] -> [B, out]
Var dense(Tape& t, Var x, Var w, Var b);
// x [B, C, H, W], w [O, C, K, K], b [O] -> [B, O, H, W]
Var conv2d(Tape& t, Var x, Var w, Var b);
Var leaky_relu(Tape& t, Var x, double slope);
Var tanh(Tape& t, Var x);
Var amplified_tanh(Tape& t, Var x, double gamma);
// floor + gamma * (tanh(x) + 1) / 2: strictly positive, gamma-bounded.
Var positive_tanh(Tape& t, Var x, double gamma, double floor);
// Row-wise softmax over the last axis of a rank-2 tensor.
Var softmax(Tape& t, Var x);
// Element-wise; b may also have leading dimension 1 and broadcast over rows.
Var add(Tape& t, Var a, Var b);
Var mul(Tape& t, Var a, Var b);
Var scale(Tape& t, Var x, double factor);
Var reshape(Tape& t, Var x, std::vector<std::size_t> shape);
// Concatenates along axis 1 (features or channels).
Var concat(Tape& t, Var a, Var b);
// Mean over all elements -> shape {1}.
Var mean(Tape& t, Var x);
// Per-row soft minimum -tau log sum exp(-x / tau) of a [B, d] tensor -> [B].
Var soft_min_rows(Tape& t, Var x, double tau);
// Mean cross-entropy of row-wise softmax(logits) against integer labels.
Var softmax_cross_entropy(Tape& t, Var logits, std::span<const int> labels);

// ---- layers and models ---------------------------------------------------

enum class LayerKind { Dense, Conv2d, LeakyRelu, Tanh, AmplifiedTanh, Softmax };

const char* to_string(LayerKind kind);

struct LayerSpec {
  LayerKind kind = LayerKind::Dense;
  std::size_t in = 0;      // Dense: features; Conv2d: channels
  std::size_t out = 0;
  std::size_t kernel = 3;  // Conv2d
  std::size_t height = 0;  // Conv2d
  std::size_t width = 0;   // Conv2d
  double slope = 0.01;     // LeakyRelu
  double gamma = 1.0;      // AmplifiedTanh
  // >= 0: this layer's output is concatenated (axis 1) after the tensor that
  // entered layer `concat_from`. Builds densely connected blocks.
  int concat_from = -1;

  static LayerSpec dense(std::size_t in, std::size_t out) { return {LayerKind::Dense, in, out}; }
  static LayerSpec conv(std::size_t in, std::size_t out, std::size_t h, std::size_t w, std::size_t k = 3) {
    LayerSpec s{LayerKind::Conv2d, in, out};
    s.kernel = k;
    s.height = h;
    s.width = w;
    return s;
  }
  static LayerSpec leaky_relu(double slope = 0.01, int concat_from = -1) {
    LayerSpec s{LayerKind::LeakyRelu};
    s.slope = slope;
    s.concat_from = concat_from;
    return s;
  }
  static LayerSpec tanh() { return {LayerKind::Tanh}; }
  static LayerSpec amplified_tanh(double gamma) {
    LayerSpec s{LayerKind::AmplifiedTanh};
    s.gamma = gamma;
    return s;
  }
  static LayerSpec softmax() { return {LayerKind::Softmax}; }

  bool operator==(const LayerSpec&) const = default;
};

class Model {
 public:
  Model() = default;
  // Glorot-uniform weights, zero biases, drawn from `init_seed`.
  Model(std::vector<LayerSpec> layers, std::uint64_t init_seed);
  // Uses the given parameter tensors (checkpoint loading).
  Model(std::vector<LayerSpec> layers, std::vector<Tensor> params);

  // Records the forward pass on `t`. Trainable parameters are bound in place
  // and receive gradients; otherwise they enter the tape as constants.
  Var forward(Tape& t, Var input, bool trainable = true);
  // Inference only. Throws std::invalid_argument on a shape mismatch.
  Tensor forward(const Tensor& input) const;

  const std::vector<LayerSpec>& layers() const noexcept { return layers_; }
  std::vector<Tensor>& params() noexcept { return params_; }
  const std::vector<Tensor>& params() const noexcept { return params_; }
  std::size_t num_parameters() const;
  void zero_grad();

  // Shape of a single example at the input (without the batch axis).
  std::vector<std::size_t> input_shape() const;

 private:
  void validate() const;

  std::vector<LayerSpec> layers_;
  std::vector<Tensor> params_;          // weight, bias per Dense/Conv2d layer
  std::vector<int> param_index_;        // per layer: index into params_ or -1
};

// ---- optimisation ----------------------------------------------------------

struct AdamConfig {
  double lr = 1e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  std::uint64_t step = 0;
};

// One bias-corrected Adam update of `params` in place.
void adam_step(std::span<double> params, std::span<const double> grads, const AdamConfig& cfg,
               AdamState& state);

// Adam over a set of tensors that carry gradients.
class Adam {
 public:
  Adam(std::vector<Tensor*> params, AdamConfig cfg);
  void step();
  void zero_grad();

 private:
  std::vector<Tensor*> params_;
  std::vector<AdamState> states_;
  AdamConfig cfg_;
};

// ---- serialization ---------------------------------------------------------

inline constexpr int kFormatVersion = 1;

// Versioned text format: header key/value lines, layer specs, then each
// tensor's shape and values with 17 significant digits.
void save_model(std::ostream& out, const Model& model,
                const std::map<std::string, std::string>& header = {});
Model load_model(std::istream& in, std::map<std::string, std::string>* header = nullptr);

void save_models(std::ostream& out, const std::vector<const Model*>& models,
                 const std::map<std::string, std::string>& header);
std::vector<Model> load_models(std::istream& in, std::map<std::string, std::string>* header);

// Row-wise argmax of a [B, C] tensor.
std::vector<int> argmax_rows(const Tensor& logits);

}  // namespace aniscert::nn

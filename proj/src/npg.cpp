#include "aniscert/npg.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>

#include "aniscert/rng.hpp"

namespace aniscert::npg {

using nn::LayerSpec;
using nn::Tape;
using nn::Tensor;
using nn::Var;

void PatternSpec::validate() const {
  if (!(kappa >= 0.0) || !std::isfinite(kappa)) throw std::invalid_argument("pattern: kappa must be >= 0");
  if (!(iota > 0.0) || !std::isfinite(iota)) throw std::invalid_argument("pattern: iota must be > 0");
  if (height == 0 || width == 0) throw std::invalid_argument("pattern: height and width must be positive");
  if (target_mean && !(*target_mean > 0.0)) throw std::invalid_argument("pattern: target_mean must be > 0");
}

std::vector<double> pattern_sigma(const PatternSpec& spec) {
  spec.validate();
  std::vector<double> sigma(spec.height * spec.width);
  const auto h2 = static_cast<long>(spec.height / 2);
  const auto w2 = static_cast<long>(spec.width / 2);
  for (std::size_t r = 0; r < spec.height; ++r) {
    for (std::size_t c = 0; c < spec.width; ++c) {
      const double a = static_cast<double>(static_cast<long>(r) - h2);
      const double b = static_cast<double>(static_cast<long>(c) - w2);
      const double ab[2] = {a, b};
      const double n = cert::lp_norm(ab, spec.norm);
      sigma[r * spec.width + c] = spec.kappa * n * n + spec.iota;
    }
  }
  if (spec.target_mean) {
    double total = 0.0;
    for (double s : sigma) total += s;
    const double factor = *spec.target_mean / (total / static_cast<double>(sigma.size()));
    for (double& s : sigma) s *= factor;
  }
  return sigma;
}

std::string_view to_string(NpgKind kind) {
  switch (kind) {
    case NpgKind::Pattern: return "pattern";
    case NpgKind::DatasetWise: return "dataset";
    case NpgKind::CertificationWise: return "certification";
  }
  return "?";
}

NpgKind parse_npg_kind(std::string_view name) {
  if (name == "pattern") return NpgKind::Pattern;
  if (name == "dataset") return NpgKind::DatasetWise;
  if (name == "certification") return NpgKind::CertificationWise;
  throw std::invalid_argument("unknown NPG kind '" + std::string(name) + "' (pattern|dataset|certification)");
}

std::string_view to_string(VarianceTerm term) {
  return term == VarianceTerm::MeanSigma ? "mean_sigma" : "min_sigma";
}

VarianceTerm parse_variance_term(std::string_view name) {
  if (name == "mean_sigma") return VarianceTerm::MeanSigma;
  if (name == "min_sigma") return VarianceTerm::MinSigma;
  throw std::invalid_argument("unknown variance term '" + std::string(name) + "' (mean_sigma|min_sigma)");
}

namespace {

std::vector<LayerSpec> perceptron(std::size_t d, std::size_t hidden) {
  std::vector<LayerSpec> layers;
  std::size_t in = kConstantInputLength;
  for (int i = 0; i < 4; ++i) {
    layers.push_back(LayerSpec::dense(in, hidden));
    layers.push_back(LayerSpec::leaky_relu());
    in = hidden;
  }
  layers.push_back(LayerSpec::dense(in, d));
  return layers;
}

std::vector<LayerSpec> conv_stack(std::size_t height, std::size_t width, std::size_t channels,
                                  std::size_t conv_layers) {
  std::vector<LayerSpec> layers;
  std::size_t in = 1;
  for (std::size_t i = 0; i < conv_layers; ++i) {
    const int entry = static_cast<int>(layers.size());
    layers.push_back(LayerSpec::conv(in, channels, height, width));
    layers.push_back(LayerSpec::leaky_relu(0.01, entry));
    in += channels;
  }
  layers.push_back(LayerSpec::conv(in, 1, height, width));
  return layers;
}

void check_gamma(double gamma) {
  if (!(gamma > 0.0) || !std::isfinite(gamma)) throw std::invalid_argument("NPG: gamma must be > 0");
}

}  // namespace

NpgModel NpgModel::pattern(PatternSpec spec) {
  spec.validate();
  const std::size_t d = spec.height * spec.width;
  NpgModel m(NpgKind::Pattern, 1.0, d, spec, std::nullopt, std::nullopt);
  return m;
}

NpgModel NpgModel::dataset_wise(std::size_t d, double gamma, std::uint64_t seed, std::size_t hidden) {
  if (d == 0 || hidden == 0) throw std::invalid_argument("dataset-wise NPG: d and hidden must be positive");
  return NpgModel(NpgKind::DatasetWise, gamma, d, std::nullopt,
                  nn::Model(perceptron(d, hidden), derive_seed(seed, 1)),
                  nn::Model(perceptron(d, hidden), derive_seed(seed, 2)));
}

NpgModel NpgModel::certification_wise(std::size_t height, std::size_t width, double gamma,
                                      std::uint64_t seed, std::size_t channels, std::size_t conv_layers) {
  if (height == 0 || width == 0 || channels == 0) {
    throw std::invalid_argument("certification-wise NPG: sizes must be positive");
  }
  return NpgModel(NpgKind::CertificationWise, gamma, height * width, std::nullopt,
                  nn::Model(conv_stack(height, width, channels, conv_layers), derive_seed(seed, 1)),
                  nn::Model(conv_stack(height, width, channels, conv_layers), derive_seed(seed, 2)));
}

NpgModel::NpgModel(NpgKind kind, double gamma, std::size_t dim, std::optional<PatternSpec> pattern,
                   std::optional<nn::Model> mu_net, std::optional<nn::Model> sigma_net)
    : kind_(kind), gamma_(gamma), dim_(dim), pattern_(std::move(pattern)), mu_net_(std::move(mu_net)),
      sigma_net_(std::move(sigma_net)) {
  check_gamma(gamma_);
  if (dim_ == 0) throw std::invalid_argument("NPG: dimension must be positive");
  if (kind_ == NpgKind::Pattern) {
    if (!pattern_) throw std::invalid_argument("pattern NPG requires a pattern spec");
    if (pattern_->height * pattern_->width != dim_) throw std::invalid_argument("pattern NPG: size mismatch");
    pattern_sigma_ = Tensor({1, dim_}, pattern_sigma(*pattern_));
    pattern_mu_ = Tensor({1, dim_}, 0.0);
    return;
  }
  if (!mu_net_ || !sigma_net_) throw std::invalid_argument("learned NPG requires mu and sigma nets");
  if (kind_ == NpgKind::DatasetWise) {
    constant_input_ = Tensor({1, kConstantInputLength}, 1.0);
    for (const nn::Model* net : {&*mu_net_, &*sigma_net_}) {
      if (net->forward(constant_input_).size() != dim_) {
        throw std::invalid_argument("dataset-wise NPG: net output does not match dimension");
      }
    }
  } else {
    for (const nn::Model* net : {&*mu_net_, &*sigma_net_}) {
      const auto shape = net->input_shape();
      if (shape.size() != 3 || shape[0] != 1 || shape[1] * shape[2] != dim_) {
        throw std::invalid_argument("certification-wise NPG: nets must take a 1 x H x W input");
      }
    }
  }
}

ParamVars NpgModel::record(Tape& t, Var x, bool trainable) {
  switch (kind_) {
    case NpgKind::Pattern:
      return {t.view(pattern_sigma_), t.view(pattern_mu_)};
    case NpgKind::DatasetWise: {
      const Var in = t.view(constant_input_);
      const Var mu = nn::amplified_tanh(t, mu_net_->forward(t, in, trainable), gamma_);
      const Var sigma = nn::positive_tanh(t, sigma_net_->forward(t, in, trainable), gamma_, kSigmaFloor);
      return {sigma, mu};
    }
    case NpgKind::CertificationWise: {
      const auto& xv = t.value(x);
      const std::size_t batch = xv.rank() == 0 ? 1 : xv.shape[0];
      if (xv.size() != batch * dim_) throw std::invalid_argument("certification-wise NPG: input size mismatch");
      const auto shape = mu_net_->input_shape();
      const std::vector<std::size_t> image{batch, 1, shape[1], shape[2]};
      const std::vector<std::size_t> flat{batch, dim_};
      const Var x2 = nn::reshape(t, x, flat);
      Var mu = mu_net_->forward(t, nn::reshape(t, x2, image), trainable);
      mu = nn::reshape(t, nn::amplified_tanh(t, mu, gamma_), flat);
      Var sigma = sigma_net_->forward(t, nn::reshape(t, nn::add(t, x2, mu), image), trainable);
      sigma = nn::reshape(t, nn::positive_tanh(t, sigma, gamma_, kSigmaFloor), flat);
      return {sigma, mu};
    }
  }
  throw std::logic_error("NPG: unknown kind");
}

dist::AnisoParams NpgModel::generate_params(std::optional<std::span<const double>> x) const {
  if (kind_ == NpgKind::Pattern) {
    return {pattern_sigma_.data, pattern_mu_.data};
  }
  Tape t;
  Var xv{};
  if (kind_ == NpgKind::CertificationWise) {
    if (!x) throw std::invalid_argument("certification-wise NPG needs the clean input");
    if (x->size() != dim_) throw std::invalid_argument("certification-wise NPG: input size mismatch");
    xv = t.constant(Tensor({1, dim_}, std::vector<double>(x->begin(), x->end())));
  }
  // record() binds parameters as views when not trainable, so it does not mutate.
  const ParamVars p = const_cast<NpgModel*>(this)->record(t, xv, false);
  return {t.value(p.sigma).data, t.value(p.mu).data};
}

std::vector<Tensor*> NpgModel::trainable_params() {
  std::vector<Tensor*> out;
  for (auto* net : {&mu_net_, &sigma_net_}) {
    if (!*net) continue;
    for (Tensor& p : (*net)->params()) out.push_back(&p);
  }
  return out;
}

LossValue npg_loss(NpgModel& npg, nn::Model& classifier, const Tensor& x, std::span<const int> labels,
                   const dist::NoiseSpec& spec, std::uint64_t seed, const LossOptions& options) {
  if (x.rank() < 1 || x.shape[0] == 0 || x.shape[0] != labels.size()) {
    throw std::invalid_argument("npg_loss: batch must be nonempty with one label per example");
  }
  const std::size_t batch = x.shape[0];
  const std::size_t d = x.size() / batch;
  if (d != npg.dim()) throw std::invalid_argument("npg_loss: input dimension does not match the NPG");

  Tensor eps({batch, d});
  Rng rng(seed);
  dist::sample_isotropic_into(spec, rng, eps.data);

  Tape t;
  const Var xv = t.view(x);
  const Var x2 = nn::reshape(t, xv, {batch, d});
  const ParamVars p = npg.record(t, x2, options.train_npg);
  const Var noisy = nn::add(t, nn::add(t, x2, nn::mul(t, t.constant(std::move(eps)), p.sigma)), p.mu);
  const Var logits = classifier.forward(t, noisy, options.train_classifier);
  const Var ce = nn::softmax_cross_entropy(t, logits, labels);
  const Var var_term = options.variance == VarianceTerm::MeanSigma
                           ? nn::mean(t, p.sigma)
                           : nn::mean(t, nn::soft_min_rows(t, p.sigma, kSoftMinTau));
  const Var loss = nn::add(t, nn::scale(t, var_term, -options.variance_weight), ce);

  LossValue out;
  out.loss = t.value(loss).data[0];
  out.cross_entropy = t.value(ce).data[0];
  out.variance_term = t.value(var_term).data[0];
  const auto& sigma = t.value(p.sigma).data;
  double total = 0.0;
  for (double s : sigma) total += s;
  out.mean_sigma = total / static_cast<double>(sigma.size());
  out.min_sigma = *std::min_element(sigma.begin(), sigma.end());
  if (options.compute_grad && t.requires_grad(loss)) t.backward(loss);
  return out;
}

namespace {

std::string exact(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

double parse_double(const std::map<std::string, std::string>& h, const std::string& key) {
  const auto it = h.find(key);
  if (it == h.end()) throw std::runtime_error("NPG checkpoint: missing header key '" + key + "'");
  std::size_t used = 0;
  const double v = std::stod(it->second, &used);
  if (used != it->second.size()) throw std::runtime_error("NPG checkpoint: bad value for '" + key + "'");
  return v;
}

}  // namespace

void save_npg(std::ostream& out, const NpgModel& model) {
  std::map<std::string, std::string> header{
      {"kind", std::string(to_string(model.kind()))},
      {"gamma", exact(model.gamma())},
      {"dim", std::to_string(model.dim())},
  };
  std::vector<const nn::Model*> nets;
  if (const auto& ps = model.pattern_spec()) {
    header["pattern_norm"] = std::string(cert::to_string(ps->norm));
    header["kappa"] = exact(ps->kappa);
    header["iota"] = exact(ps->iota);
    header["height"] = std::to_string(ps->height);
    header["width"] = std::to_string(ps->width);
    header["target_mean"] = ps->target_mean ? exact(*ps->target_mean) : "none";
  } else {
    nets = {&*model.mu_net(), &*model.sigma_net()};
  }
  nn::save_models(out, nets, header);
}

NpgModel load_npg(std::istream& in) {
  std::map<std::string, std::string> header;
  auto nets = nn::load_models(in, &header);
  if (!header.count("kind")) throw std::runtime_error("NPG checkpoint: missing kind tag");
  const NpgKind kind = parse_npg_kind(header.at("kind"));
  const double gamma = parse_double(header, "gamma");
  const auto dim = static_cast<std::size_t>(parse_double(header, "dim"));
  if (kind == NpgKind::Pattern) {
    PatternSpec ps;
    ps.norm = cert::parse_norm(header.at("pattern_norm"));
    ps.kappa = parse_double(header, "kappa");
    ps.iota = parse_double(header, "iota");
    ps.height = static_cast<std::size_t>(parse_double(header, "height"));
    ps.width = static_cast<std::size_t>(parse_double(header, "width"));
    if (header.at("target_mean") != "none") ps.target_mean = parse_double(header, "target_mean");
    return NpgModel(kind, gamma, dim, ps, std::nullopt, std::nullopt);
  }
  if (nets.size() != 2) throw std::runtime_error("NPG checkpoint: expected mu and sigma nets");
  return NpgModel(kind, gamma, dim, std::nullopt, std::move(nets[0]), std::move(nets[1]));
}

}  // namespace aniscert::npg

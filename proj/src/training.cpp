#include "aniscert/training.hpp"

#include <algorithm>
#include <numeric>
#include <stdexcept>

#include "aniscert/rng.hpp"

namespace aniscert::training {

std::vector<nn::LayerSpec> two_layer_classifier(std::size_t d, std::size_t hidden, std::size_t classes) {
  return {nn::LayerSpec::dense(d, hidden), nn::LayerSpec::leaky_relu(), nn::LayerSpec::dense(hidden, classes)};
}

double clean_accuracy(const nn::Model& classifier, const data::Dataset& ds, const npg::NpgModel* npg) {
  if (ds.size() == 0) return 0.0;
  constexpr std::size_t kBatch = 512;
  std::size_t correct = 0;
  for (std::size_t begin = 0; begin < ds.size(); begin += kBatch) {
    const std::size_t count = std::min(kBatch, ds.size() - begin);
    nn::Tensor x({count, ds.d});
    for (std::size_t i = 0; i < count; ++i) {
      const auto& src = ds.inputs[begin + i];
      double* row = x.data.data() + i * ds.d;
      std::copy(src.begin(), src.end(), row);
      if (npg) {
        const auto params = npg->generate_params(src);
        for (std::size_t j = 0; j < ds.d; ++j) row[j] += params.mu()[j];
      }
    }
    const auto pred = nn::argmax_rows(classifier.forward(x));
    for (std::size_t i = 0; i < count; ++i) correct += pred[i] == ds.labels[begin + i];
  }
  return static_cast<double>(correct) / static_cast<double>(ds.size());
}

SigmaStats sigma_stats(const npg::NpgModel& npg, const data::Dataset& ds, std::size_t limit) {
  SigmaStats s;
  const std::size_t count = npg.kind() == npg::NpgKind::CertificationWise ? std::min(limit, ds.size()) : 1;
  if (count == 0) return s;
  for (std::size_t i = 0; i < count; ++i) {
    const auto params = npg.kind() == npg::NpgKind::CertificationWise ? npg.generate_params(ds.inputs[i])
                                                                       : npg.generate_params();
    const auto sigma = params.sigma();
    s.mean_sigma += std::accumulate(sigma.begin(), sigma.end(), 0.0) / static_cast<double>(sigma.size());
    s.min_sigma += *std::min_element(sigma.begin(), sigma.end());
  }
  s.mean_sigma /= static_cast<double>(count);
  s.min_sigma /= static_cast<double>(count);
  return s;
}

TrainSummary train(npg::NpgModel& npg, nn::Model& classifier, const data::Dataset& train_set,
                   const dist::NoiseSpec& spec, const TrainConfig& config,
                   const std::function<void(const EpochReport&)>& on_epoch) {
  if (train_set.size() == 0) throw std::invalid_argument("train: empty training set");
  if (config.batch_size == 0) throw std::invalid_argument("train: batch_size must be positive");
  if (train_set.d != npg.dim()) throw std::invalid_argument("train: dataset dimension does not match the NPG");

  TrainSummary summary;
  summary.initial_mean_sigma = sigma_stats(npg, train_set).mean_sigma;

  std::vector<nn::Tensor*> params;
  if (config.loss.train_classifier) {
    for (auto& p : classifier.params()) params.push_back(&p);
  }
  if (config.loss.train_npg) {
    for (auto* p : npg.trainable_params()) params.push_back(p);
  }
  nn::Adam adam(params, nn::AdamConfig{config.lr});

  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const std::size_t d = train_set.d;
  std::vector<int> labels;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    Rng shuffle(derive_seed(config.seed, epoch), 1);
    for (std::size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[static_cast<std::size_t>(shuffle.next_u64() % i)]);
    }
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t begin = 0; begin < order.size(); begin += config.batch_size) {
      const std::size_t count = std::min(config.batch_size, order.size() - begin);
      nn::Tensor x({count, d});
      labels.resize(count);
      for (std::size_t i = 0; i < count; ++i) {
        const auto& src = train_set.inputs[order[begin + i]];
        std::copy(src.begin(), src.end(), x.data.begin() + i * d);
        labels[i] = train_set.labels[order[begin + i]];
      }
      adam.zero_grad();
      const auto value = npg::npg_loss(npg, classifier, x, labels, spec,
                                       derive_seed(config.seed, (std::uint64_t{1} << 32) + summary.steps), config.loss);
      if (!params.empty()) adam.step();
      loss_sum += value.loss;
      ++batches;
      ++summary.steps;
    }
    summary.final_loss = loss_sum / static_cast<double>(batches);
    if (on_epoch) on_epoch({epoch, summary.final_loss});
  }

  summary.clean_accuracy = clean_accuracy(classifier, train_set, &npg);
  const auto s = sigma_stats(npg, train_set);
  summary.mean_sigma = s.mean_sigma;
  summary.min_sigma = s.min_sigma;
  return summary;
}

}  // namespace aniscert::training

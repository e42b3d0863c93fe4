#pragma once

// Joint training of a base classifier and its noise-parameter generator.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <vector>

#include "aniscert/data_io.hpp"
#include "aniscert/distributions.hpp"
#include "aniscert/nn.hpp"
#include "aniscert/npg.hpp"

namespace aniscert::training {

// Dense(d, hidden) -> LeakyRelu -> Dense(hidden, classes), raw logits.
std::vector<nn::LayerSpec> two_layer_classifier(std::size_t d, std::size_t hidden, std::size_t classes);

struct TrainConfig {
  std::size_t epochs = 10;
  std::size_t batch_size = 128;
  double lr = 1e-2;
  std::uint64_t seed = 0;
  npg::LossOptions loss;
};

struct EpochReport {
  std::size_t epoch = 0;
  double mean_loss = 0.0;
};

struct TrainSummary {
  double clean_accuracy = 0.0;
  double mean_sigma = 0.0;  // averaged over the evaluated examples
  double min_sigma = 0.0;   // per-example hard minimum, averaged
  double initial_mean_sigma = 0.0;
  double final_loss = 0.0;
  std::size_t steps = 0;
};

// Fraction of examples whose noise-free argmax matches the label. With an
// NPG the classifier sees x + mu(x), the centre of its smoothing distribution.
double clean_accuracy(const nn::Model& classifier, const data::Dataset& ds, const npg::NpgModel* npg = nullptr);

struct SigmaStats {
  double mean_sigma = 0.0;
  double min_sigma = 0.0;
};
// Mean and minimum of sigma, averaged over up to `limit` examples.
SigmaStats sigma_stats(const npg::NpgModel& npg, const data::Dataset& ds, std::size_t limit = 256);

// Adam on classifier and generator parameters (those enabled in
// config.loss) with shuffled minibatches. `on_epoch` runs after every epoch.
TrainSummary train(npg::NpgModel& npg, nn::Model& classifier, const data::Dataset& train_set,
                   const dist::NoiseSpec& spec, const TrainConfig& config,
                   const std::function<void(const EpochReport&)>& on_epoch = {});

}  // namespace aniscert::training

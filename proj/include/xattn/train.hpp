#pragma once

#include <cstdint>
#include <vector>

#include "xattn/model.hpp"
#include "xattn/toy_task.hpp"

namespace xattn {

struct TrainConfig {
  int epochs = 40;
  double lr = 3e-3;
  int batch_size = 8;
  std::uint64_t seed = 0;
};

struct TrainResult {
  Model model;
  double initial_loss = 0;        // dataset mean before the first update
  std::vector<double> loss_curve;  // mean minibatch loss per epoch
};

// Teacher-forced next-token cross-entropy, summed over codebooks, averaged
// over positions and examples.
double dataset_loss(const Model& model, const ToyDataset& dataset);

// Minibatch Adam on every model parameter. Throws TrainingError with the
// epoch index when the loss stops being finite.
TrainResult train_toy_model(const Model& model, const ToyDataset& dataset,
                            const TrainConfig& config);

}  // namespace xattn

#include "xattn/train.hpp"

#include <cmath>
#include <numeric>

#include "xattn/adam.hpp"
#include "xattn/errors.hpp"
#include "xattn/ops.hpp"
#include "xattn/rng.hpp"

namespace xattn {
namespace {

Var example_loss(const BoundModel& bound, const ToyExample& ex) {
  const Var u = encode_text(bound, ex.prompt);
  const std::size_t T = ex.target.length();
  ForwardOptions options;
  options.all_positions_logits = true;
  const ForwardResult r = forward_latent(bound, u, ex.target.prefix(T - 1), options);
  Var loss;
  for (std::size_t cb = 0; cb < r.all_logits.size(); ++cb) {
    const Var ce = ops::cross_entropy_rows(r.all_logits[cb], ex.target.codebooks[cb]);
    loss = loss.valid() ? ops::add(loss, ce) : ce;
  }
  return loss;
}

void check_dataset(const Model& model, const ToyDataset& dataset) {
  if (dataset.examples.empty()) throw ContractError("training dataset is empty");
  for (const ToyExample& ex : dataset.examples) {
    if (ex.target.length() == 0) throw ContractError("training example has an empty target");
    if (ex.target.n_codebooks() != static_cast<std::size_t>(model.config().n_codebooks)) {
      throw ContractError("training example codebook count differs from the model");
    }
  }
}

}  // namespace

double dataset_loss(const Model& model, const ToyDataset& dataset) {
  check_dataset(model, dataset);
  double total = 0;
  for (const ToyExample& ex : dataset.examples) {
    Tape tape;
    const BoundModel bound = BoundModel::frozen(model, tape);
    total += example_loss(bound, ex).scalar();
  }
  return total / static_cast<double>(dataset.examples.size());
}

TrainResult train_toy_model(const Model& model, const ToyDataset& dataset,
                            const TrainConfig& config) {
  if (config.epochs < 0) throw ParameterError("training epochs must be >= 0");
  if (config.batch_size < 1) throw ParameterError("training batch_size must be >= 1");
  if (!(config.lr > 0)) throw ParameterError("training lr must be > 0");
  check_dataset(model, dataset);

  TrainResult result{model, dataset_loss(model, dataset), {}};
  if (!std::isfinite(result.initial_loss)) throw TrainingError("initial loss is not finite", 0);

  AdamState adam;
  RngStream rng(config.seed);
  const std::size_t n = dataset.examples.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    for (std::size_t i = n; i-- > 1;) std::swap(order[i], order[rng.below(i + 1)]);
    double epoch_loss = 0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < n; start += config.batch_size) {
      const std::size_t stop = std::min(n, start + config.batch_size);
      Tape tape;
      const BoundModel bound = BoundModel::trainable(result.model, tape);
      Var loss;
      try {
        for (std::size_t i = start; i < stop; ++i) {
          const Var l = example_loss(bound, dataset.examples[order[i]]);
          loss = loss.valid() ? ops::add(loss, l) : l;
        }
      } catch (const NumericError& e) {
        throw TrainingError(std::string("training diverged: ") + e.what(), epoch);
      }
      loss = ops::scale(loss, 1.0 / static_cast<double>(stop - start));
      const double value = loss.scalar();
      if (!std::isfinite(value)) throw TrainingError("training loss is not finite", epoch);
      const Gradients grads = tape.backward(loss);
      std::vector<Tensor> g;
      g.reserve(bound.vars.size());
      for (const Var& v : bound.vars) g.push_back(grads[v]);
      adam_step(result.model.parameters(), g, adam, config.lr);
      epoch_loss += value;
      ++batches;
    }
    result.loss_curve.push_back(epoch_loss / static_cast<double>(batches));
  }
  return result;
}

}  // namespace xattn

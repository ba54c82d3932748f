#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "batsel/model.hpp"

namespace batsel {

struct TrainConfig {
  int steps = 400;
  double learning_rate = 0.5;
  int batch_size = 1 << 30;  // >= n means full batch
  std::uint64_t seed = 0;

  void validate() const {
    if (steps < 0) throw ConfigError("steps must be >= 0");
    if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be > 0");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  }
};

struct TrainResult {
  ModelParameters params;
  std::vector<double> loss_trace;  // mean batch loss before each update
};

/// Plain SGD with a fixed learning rate starting from `init`. Mini-batches
/// come from per-epoch shuffles; noise draws (if any) from their own stream.
inline TrainResult train_from(const ModelSpec& spec, ModelParameters init, const ExampleRefs& data,
                              const LossSpec& ls, const TrainConfig& cfg) {
  spec.validate();
  ls.validate(spec);
  cfg.validate();
  check_parameters(spec, init);
  if (data.empty()) throw InputError("cannot train on an empty dataset");
  for (const auto* e : data) check_label(spec, *e);

  TrainResult out{std::move(init), {}};
  out.loss_trace.reserve(static_cast<std::size_t>(cfg.steps));
  Rng noise_rng(derive_seed(cfg.seed, "noise"));
  Rng batch_rng(derive_seed(cfg.seed, "batches"));

  const std::size_t n = data.size();
  const std::size_t bs = std::min<std::size_t>(n, static_cast<std::size_t>(cfg.batch_size));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = n;  // forces a shuffle on the first mini-batch step

  std::vector<Eigen::VectorXd> acc(spec.num_layers());
  for (int step = 0; step < cfg.steps; ++step) {
    for (std::size_t l = 0; l < acc.size(); ++l) acc[l] = Eigen::VectorXd::Zero(spec.layer_size(l));
    double total = 0.0;
    auto add = [&](const LabeledExample& e) {
      LossAndGrad lg;
      try {
        lg = loss_and_grad(spec, out.params, e, ls, 1, noise_rng);
      } catch (const NumericalError& err) {
        throw TrainingError(step, err.what());
      }
      total += lg.loss.total();
      for (std::size_t l = 0; l < acc.size(); ++l) acc[l] += lg.grad[l];
    };
    if (bs == n) {
      for (const auto* e : data) add(*e);
    } else {
      for (std::size_t b = 0; b < bs; ++b) {
        if (cursor == n) {
          std::shuffle(order.begin(), order.end(), batch_rng);
          cursor = 0;
        }
        add(*data[order[cursor++]]);
      }
    }
    const double mean = total / static_cast<double>(bs);
    if (!std::isfinite(mean)) throw TrainingError(step, "non-finite training loss");
    out.loss_trace.push_back(mean);
    const double scale = cfg.learning_rate / static_cast<double>(bs);
    for (std::size_t l = 0; l < acc.size(); ++l) out.params.layers[l] -= scale * acc[l];
    for (const auto& v : out.params.layers)
      if (!v.allFinite()) throw TrainingError(step, "non-finite parameters after update");
  }
  return out;
}

/// Trains from the seeded initialization of `cfg.seed`.
inline TrainResult train(const ModelSpec& spec, const ExampleRefs& data, const LossSpec& ls,
                         const TrainConfig& cfg) {
  return train_from(spec, init_parameters(spec, cfg.seed), data, ls, cfg);
}

inline TrainResult train(const ModelSpec& spec, const std::vector<LabeledExample>& data,
                         const LossSpec& ls, const TrainConfig& cfg) {
  return train(spec, refs_of(data), ls, cfg);
}

}  // namespace batsel

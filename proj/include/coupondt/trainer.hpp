#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "coupondt/adt_model.hpp"
#include "coupondt/datapipe.hpp"

namespace coupondt::train {

struct TrainConfig {
  double learning_rate = 1e-3;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  int batch_size = 64;
  int n_epochs = 3;
  int window_len = 10;
  double grad_clip = 1.0;  // global-norm bound; <= 0 disables clipping
  int checkpoint_every = 0;
  std::uint64_t seed = 11;

  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  long step = 0;
};

/// One decoupled-weight-decay Adam update. Decay skips biases and layer-norm
/// parameters. Throws adt::NumericError on a non-finite gradient.
void adamw_step(adt::ModelParams& params, std::span<const double> grads, AdamState& state,
                const TrainConfig& config);

/// Start offset for a window: 0 when the whole trajectory fits, otherwise
/// uniform over every step (tails are left-padded).
int sample_start(int length, int window_len, Rng& rng);

/// Window over steps [start, start + window_len) of a trajectory whose states
/// are already normalized.
adt::TokenWindow make_training_window(const data::Trajectory& trajectory, int start, int window_len);

std::vector<adt::TokenWindow> sample_batch(std::span<const data::Trajectory> trajectories, int window_len,
                                           int batch_size, Rng& rng);

/// Copies of the trajectories with normalized states; copies that shared step
/// data still share it.
std::vector<data::Trajectory> normalize_trajectories(std::span<const data::Trajectory> trajectories,
                                                     const data::Normalizer& normalizer);

/// q-quantile (linear interpolation) of the initial return-to-go.
double initial_rtg_quantile(std::span<const data::Trajectory> trajectories, double q);

/// Greedy-decoding accuracy against the logged actions over full windows.
double action_accuracy(const adt::ModelParams& params, std::span<const data::Trajectory> normalized,
                       int window_len);

struct TrainResult {
  adt::ModelParams params;
  data::Normalizer normalizer;
  double rtg_target = 0.0;
  double ctg_max = 0.0;
  double rtg_per_cost = 0.0;
  std::vector<double> epoch_loss;
};

using EpochHook = std::function<void(int epoch, double mean_loss, const TrainResult& progress)>;

/// Fits the normalizer on `trajectories`, initializes parameters and runs
/// n_epochs of ceil(#trajectories / batch_size) AdamW steps each.
TrainResult train(std::span<const data::Trajectory> trajectories, const adt::ModelConfig& model_config,
                  const TrainConfig& config, const EpochHook& on_epoch = {});

}  // namespace coupondt::train

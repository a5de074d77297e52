#include "coupondt/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>

namespace coupondt::train {

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw std::invalid_argument("train: learning_rate must be > 0");
  if (!(weight_decay >= 0.0)) throw std::invalid_argument("train: weight_decay must be >= 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0))
    throw std::invalid_argument("train: adam betas must lie in [0, 1)");
  if (!(epsilon > 0.0)) throw std::invalid_argument("train: epsilon must be > 0");
  if (batch_size < 1) throw std::invalid_argument("train: batch_size must be >= 1");
  if (n_epochs < 0) throw std::invalid_argument("train: n_epochs must be >= 0");
  if (window_len < 1) throw std::invalid_argument("train: window_len must be >= 1");
  if (checkpoint_every < 0) throw std::invalid_argument("train: checkpoint_every must be >= 0");
}

void adamw_step(adt::ModelParams& params, std::span<const double> grads, AdamState& state,
                const TrainConfig& config) {
  if (grads.size() != params.size()) throw std::invalid_argument("adamw: gradient size mismatch");
  auto values = params.values();
  if (state.m.size() != values.size()) {
    state.m.assign(values.size(), 0.0);
    state.v.assign(values.size(), 0.0);
    state.step = 0;
  }
  for (const auto& t : params.tensors())
    for (std::size_t i = t.offset; i < t.offset + t.size(); ++i)
      if (!std::isfinite(grads[i]))
        throw adt::NumericError("adamw: non-finite gradient in tensor '" + t.name + "' at element " +
                                std::to_string(i - t.offset));

  ++state.step;
  const double b1 = config.beta1;
  const double b2 = config.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  const double lr = config.learning_rate;
  for (const auto& t : params.tensors()) {
    const double shrink = t.decay ? 1.0 - lr * config.weight_decay : 1.0;
    for (std::size_t i = t.offset; i < t.offset + t.size(); ++i) {
      const double g = grads[i];
      state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
      state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
      const double m_hat = state.m[i] / c1;
      const double v_hat = state.v[i] / c2;
      values[i] = values[i] * shrink - lr * m_hat / (std::sqrt(v_hat) + config.epsilon);
    }
  }
  adt::round_to_storage(values);
}

int sample_start(int length, int window_len, Rng& rng) {
  if (length < 1) throw std::invalid_argument("sample_start: empty trajectory");
  if (window_len >= length) return 0;
  return std::min(length - 1, static_cast<int>(uniform01(rng) * length));
}

adt::TokenWindow make_training_window(const data::Trajectory& tr, int start, int window_len) {
  const int len = static_cast<int>(tr.size());
  const int end = std::min(len, start + window_len);
  const int pad = window_len - (end - start);
  adt::TokenWindow w;
  w.lambda = tr.lambda;
  w.steps.resize(static_cast<std::size_t>(window_len));
  const std::size_t dim = tr[0].state.size();
  for (int i = 0; i < pad; ++i) {
    w.steps[i].valid = false;
    w.steps[i].state.assign(dim, 0.0);
  }
  for (int k = start; k < end; ++k) {
    const auto& s = tr[static_cast<std::size_t>(k)];
    auto& ws = w.steps[static_cast<std::size_t>(pad + k - start)];
    ws.state = s.state;
    ws.action = s.action;
    ws.rtg = s.rtg;
    ws.ctg = s.ctg;
    ws.t = s.t;
  }
  return w;
}

std::vector<adt::TokenWindow> sample_batch(std::span<const data::Trajectory> trajectories, int window_len,
                                           int batch_size, Rng& rng) {
  if (trajectories.empty()) throw std::invalid_argument("sample_batch: empty trajectory set");
  std::vector<adt::TokenWindow> batch;
  batch.reserve(static_cast<std::size_t>(batch_size));
  const auto n = trajectories.size();
  for (int b = 0; b < batch_size; ++b) {
    const auto idx = std::min(n - 1, static_cast<std::size_t>(uniform01(rng) * static_cast<double>(n)));
    const auto& tr = trajectories[idx];
    const int start = sample_start(static_cast<int>(tr.size()), window_len, rng);
    batch.push_back(make_training_window(tr, start, window_len));
  }
  return batch;
}

std::vector<data::Trajectory> normalize_trajectories(std::span<const data::Trajectory> trajectories,
                                                     const data::Normalizer& normalizer) {
  std::map<const data::StepList*, std::shared_ptr<const data::StepList>> done;
  std::vector<data::Trajectory> out;
  out.reserve(trajectories.size());
  for (const auto& tr : trajectories) {
    auto& slot = done[tr.steps.get()];
    if (!slot) {
      auto steps = std::make_shared<data::StepList>(*tr.steps);
      for (auto& s : *steps) normalizer.apply_in_place(s.state);
      slot = std::move(steps);
    }
    out.push_back({tr.user_id, slot, tr.lambda});
  }
  return out;
}

double initial_rtg_quantile(std::span<const data::Trajectory> trajectories, double q) {
  std::vector<double> v;
  v.reserve(trajectories.size());
  for (const auto& tr : trajectories)
    if (tr.size() > 0) v.push_back(tr[0].rtg);
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(v.size() - 1, lo + 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

double action_accuracy(const adt::ModelParams& params, std::span<const data::Trajectory> normalized,
                       int window_len) {
  int correct = 0;
  int total = 0;
  for (const auto& tr : normalized) {
    for (int start = 0; start < static_cast<int>(tr.size()); start += window_len) {
      const auto w = make_training_window(tr, start, window_len);
      const auto logits = adt::forward(params, w);
      const auto targets = adt::window_targets(std::span<const adt::TokenWindow>(&w, 1));
      for (int r = 0; r < logits.rows; ++r) {
        correct += adt::argmax_lowest(logits.row(r)) == targets[r];
        ++total;
      }
    }
  }
  return total ? static_cast<double>(correct) / total : 0.0;
}

TrainResult train(std::span<const data::Trajectory> trajectories, const adt::ModelConfig& model_config,
                  const TrainConfig& config, const EpochHook& on_epoch) {
  config.validate();
  if (trajectories.empty()) throw std::invalid_argument("train: empty training set");
  if (config.window_len != model_config.window_len)
    throw std::invalid_argument("train: window_len differs from the model configuration");

  TrainResult result{adt::ModelParams(model_config), data::fit_normalizer(trajectories),
                     initial_rtg_quantile(trajectories, 0.9), 0.0, 0.0, {}};
  double rtg_total = 0.0, ctg_total = 0.0;
  for (const auto& tr : trajectories)
    if (tr.size() > 0) {
      result.ctg_max = std::max(result.ctg_max, tr[0].ctg);
      rtg_total += tr[0].rtg;
      ctg_total += tr[0].ctg;
    }
  if (ctg_total > 0.0) result.rtg_per_cost = rtg_total / ctg_total;
  Rng init_rng = make_rng(config.seed, "train.init");
  adt::init_params(result.params, init_rng);
  const auto normalized = normalize_trajectories(trajectories, result.normalizer);

  Rng batch_rng = make_rng(config.seed, "train.batch");
  AdamState adam;
  std::vector<double> grad(result.params.size());
  const auto n = static_cast<long>(normalized.size());
  const long steps_per_epoch = std::max(1L, (n + config.batch_size - 1) / config.batch_size);

  for (int epoch = 1; epoch <= config.n_epochs; ++epoch) {
    double loss_sum = 0.0;
    for (long s = 0; s < steps_per_epoch; ++s) {
      const auto batch = sample_batch(normalized, config.window_len, config.batch_size, batch_rng);
      std::fill(grad.begin(), grad.end(), 0.0);
      const auto report = adt::loss_and_gradient(result.params, batch, grad);
      if (!std::isfinite(report.loss)) throw adt::NumericError("train: non-finite loss at epoch " + std::to_string(epoch));
      loss_sum += report.loss;
      if (config.grad_clip > 0.0) {
        double sq = 0.0;
        for (double g : grad) sq += g * g;
        const double norm = std::sqrt(sq);
        if (norm > config.grad_clip)
          for (double& g : grad) g *= config.grad_clip / norm;
      }
      adamw_step(result.params, grad, adam, config);
    }
    result.epoch_loss.push_back(loss_sum / static_cast<double>(steps_per_epoch));
    if (on_epoch) on_epoch(epoch, result.epoch_loss.back(), result);
  }
  return result;
}

}  // namespace coupondt::train

#include "coupondt/simenv.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace coupondt::sim {

namespace {

constexpr double kMarginLow = 1.5;
constexpr double kMarginHigh = 3.0;
constexpr double kSensitivityWeight = 2.0;
constexpr double kWeightStd = 0.4;

double standard_normal_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

}  // namespace

void EnvConfig::validate() const {
  if (n_users < 1) throw std::invalid_argument("env: n_users must be >= 1");
  if (horizon < 1) throw std::invalid_argument("env: horizon must be >= 1");
  if (feature_dim < 1) throw std::invalid_argument("env: feature_dim must be >= 1");
  if (n_actions < 1) throw std::invalid_argument("env: n_actions must be >= 1");
  if (static_cast<int>(coupon_face_values.size()) != n_actions)
    throw std::invalid_argument("env: coupon_face_values needs one entry per action");
  if (static_cast<int>(action_offsets.size()) != n_actions)
    throw std::invalid_argument("env: action_offsets needs one entry per action");
  if (coupon_face_values[0] != 0.0)
    throw std::invalid_argument("env: action 0 must have face value 0");
  for (int a = 1; a < n_actions; ++a) {
    if (!(coupon_face_values[a] >= 0.0))
      throw std::invalid_argument("env: face values must be non-negative");
    if (a > 1 && !(coupon_face_values[a] > coupon_face_values[a - 1]))
      throw std::invalid_argument("env: face values must be strictly increasing over coupons");
    if (!(action_offsets[a] >= action_offsets[a - 1]))
      throw std::invalid_argument("env: action offsets must be non-decreasing");
  }
  if (!(noise_std >= 0.0) || !std::isfinite(noise_std))
    throw std::invalid_argument("env: noise_std must be a finite non-negative number");
}

double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

std::vector<UserState> generate_population(const EnvConfig& config) {
  config.validate();
  Rng rng = make_rng(config.seed, "env.population");
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<UserState> users(static_cast<std::size_t>(config.n_users));
  const int d = config.feature_dim;
  for (int i = 0; i < config.n_users; ++i) {
    UserState& u = users[i];
    u.user_id = i;
    u.round = 0;
    u.features.resize(d);
    for (int j = 0; j + 1 < d; ++j) u.features[j] = normal(rng);
    u.features[d - 1] = uniform01(rng);
  }
  return users;
}

Environment::Environment(EnvConfig config) : config_(std::move(config)) {
  population_ = generate_population(config_);
  const int d = config_.feature_dim;

  Rng rng = make_rng(config_.seed, "env.weights");
  std::normal_distribution<double> normal(0.0, kWeightStd);
  weights_.resize(d);
  for (int j = 0; j + 1 < d; ++j) weights_[j] = normal(rng);
  weights_[d - 1] = kSensitivityWeight;

  // The margin is a monotone transform of an observed round-0 feature, so it is
  // uniform on [1.5, 3] and recoverable from the state.
  margins_.resize(population_.size());
  for (std::size_t i = 0; i < population_.size(); ++i) {
    const auto& f = population_[i].features;
    const double u = d >= 2 ? standard_normal_cdf(f[0]) : f[0];
    margins_[i] = kMarginLow + (kMarginHigh - kMarginLow) * u;
  }
}

double Environment::margin(std::int64_t user_id) const {
  if (user_id < 0 || user_id >= static_cast<std::int64_t>(margins_.size()))
    throw std::out_of_range("env: unknown user id " + std::to_string(user_id));
  return margins_[static_cast<std::size_t>(user_id)];
}

void Environment::check_action(int action) const {
  if (action < 0 || action >= config_.n_actions)
    throw std::out_of_range("env: action " + std::to_string(action) + " outside [0, " +
                            std::to_string(config_.n_actions) + ")");
}

double Environment::logit(const UserState& state, int action) const {
  check_action(action);
  if (static_cast<int>(state.features.size()) != config_.feature_dim)
    throw std::invalid_argument("env: state has wrong feature dimension");
  double z = config_.action_offsets[action];
  for (int j = 0; j < config_.feature_dim; ++j) z += weights_[j] * state.features[j];
  return z;
}

double Environment::response_probability(const UserState& state, int action) const {
  return sigmoid(logit(state, action));
}

Response Environment::respond(const UserState& state, int action, Rng& rng) const {
  const double p = response_probability(state, action);
  const double face = config_.coupon_face_values[action];
  Response r;
  r.responded = uniform01(rng) < p;
  if (r.responded) {
    r.cost = face;
    r.reward = face * margin(state.user_id);
  }
  std::normal_distribution<double> normal(0.0, 1.0);
  r.next_features = state.features;
  for (double& f : r.next_features) f += config_.noise_std * normal(rng);
  return r;
}

ExpectedResponse Environment::expected_response(const UserState& state, int action) const {
  const double p = response_probability(state, action);
  const double face = config_.coupon_face_values[action];
  return {p * face * margin(state.user_id), p * face};
}

double Environment::c_max() const {
  return static_cast<double>(config_.n_users) * config_.horizon * config_.coupon_face_values.back();
}

std::vector<InteractionRecord> log_uniform_policy(const Environment& env, std::uint64_t seed) {
  const auto& cfg = env.config();
  std::vector<InteractionRecord> out;
  out.reserve(static_cast<std::size_t>(cfg.n_users) * cfg.horizon);
  for (const UserState& start : env.population()) {
    Rng rng = make_rng(seed, "log", static_cast<std::uint64_t>(start.user_id));
    UserState s = start;
    for (int t = 0; t < cfg.horizon; ++t) {
      const int action = std::min(cfg.n_actions - 1, static_cast<int>(uniform01(rng) * cfg.n_actions));
      Response r = env.respond(s, action, rng);
      out.push_back({s.user_id, t, s.features, action, r.cost, r.reward});
      s.features = std::move(r.next_features);
      s.round = t + 1;
    }
  }
  return out;
}

CounterfactualModel::CounterfactualModel(std::vector<InteractionRecord> records)
    : records_(std::move(records)) {
  if (records_.empty()) throw std::invalid_argument("counterfactual: empty dataset");
  dim_ = records_.front().features.size();
  const double n = static_cast<double>(records_.size());
  mean_.assign(dim_, 0.0);
  scale_.assign(dim_, 0.0);
  int max_action = 0;
  for (const auto& r : records_) {
    if (r.features.size() != dim_) throw std::invalid_argument("counterfactual: ragged feature rows");
    if (r.action < 0) throw std::invalid_argument("counterfactual: negative action id");
    max_action = std::max(max_action, r.action);
    for (std::size_t j = 0; j < dim_; ++j) mean_[j] += r.features[j];
  }
  for (double& m : mean_) m /= n;
  for (const auto& r : records_)
    for (std::size_t j = 0; j < dim_; ++j) scale_[j] += (r.features[j] - mean_[j]) * (r.features[j] - mean_[j]);
  for (double& s : scale_) {
    s = std::sqrt(s / n);
    if (s < 1e-8) s = 1.0;
  }
  by_action_.resize(static_cast<std::size_t>(max_action) + 1);
  normalized_.resize(records_.size() * dim_);
  for (std::size_t i = 0; i < records_.size(); ++i) {
    by_action_[records_[i].action].push_back(i);
    for (std::size_t j = 0; j < dim_; ++j)
      normalized_[i * dim_ + j] = (records_[i].features[j] - mean_[j]) / scale_[j];
  }
}

bool CounterfactualModel::covers(int action) const {
  return action >= 0 && action < static_cast<int>(by_action_.size()) && !by_action_[action].empty();
}

std::size_t CounterfactualModel::nearest_index(std::span<const double> state, int action) const {
  if (!covers(action)) throw UncoveredActionError(action);
  if (state.size() != dim_) throw std::invalid_argument("counterfactual: query has wrong dimension");
  std::vector<double> q(dim_);
  for (std::size_t j = 0; j < dim_; ++j) q[j] = (state[j] - mean_[j]) / scale_[j];
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t idx : by_action_[action]) {
    const double* row = normalized_.data() + idx * dim_;
    double d = 0.0;
    for (std::size_t j = 0; j < dim_; ++j) {
      const double diff = row[j] - q[j];
      d += diff * diff;
    }
    if (d < best_d) {
      best_d = d;
      best = idx;
    }
  }
  return best;
}

ExpectedResponse CounterfactualModel::query(std::span<const double> state, int action) const {
  const auto& r = records_[nearest_index(state, action)];
  return {r.reward, r.cost};
}

ExpectedResponse counterfactual(std::span<const InteractionRecord> dataset,
                                std::span<const double> state, int action) {
  return CounterfactualModel({dataset.begin(), dataset.end()}).query(state, action);
}

}  // namespace coupondt::sim

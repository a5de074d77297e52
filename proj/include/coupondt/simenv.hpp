#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "coupondt/records.hpp"
#include "coupondt/rng.hpp"

namespace coupondt::sim {

/// Synthetic coupon market. Features are laid out as `feature_dim - 1`
/// standard-normal columns followed by one sensitivity column in [0, 1].
struct EnvConfig {
  int n_users = 10000;
  int horizon = 10;
  int n_actions = 5;
  int feature_dim = 5;
  std::vector<double> coupon_face_values{0.0, 1.0, 2.0, 3.0, 4.0};
  // Logit intercept per action; non-decreasing in face value.
  std::vector<double> action_offsets{-1.5, -1.0, -0.5, 0.0, 0.5};
  double noise_std = 0.1;
  std::uint64_t seed = 2024;

  void validate() const;
  bool operator==(const EnvConfig&) const = default;
};

struct UserState {
  std::int64_t user_id = 0;
  int round = 0;
  std::vector<double> features;
};

struct Response {
  double reward = 0.0;
  double cost = 0.0;
  bool responded = false;
  std::vector<double> next_features;
};

struct ExpectedResponse {
  double reward = 0.0;
  double cost = 0.0;
};

class UncoveredActionError : public std::runtime_error {
 public:
  explicit UncoveredActionError(int action)
      : std::runtime_error("uncovered action " + std::to_string(action) +
                           ": no logged record carries this action"),
        action_(action) {}
  int action() const { return action_; }

 private:
  int action_;
};

std::vector<UserState> generate_population(const EnvConfig& config);

double sigmoid(double z);

/// Ground-truth response model. Immutable after construction; `respond` takes
/// the random stream explicitly so rollouts can own per-user streams.
class Environment {
 public:
  explicit Environment(EnvConfig config);

  const EnvConfig& config() const { return config_; }
  const std::vector<UserState>& population() const { return population_; }
  std::span<const double> response_weights() const { return weights_; }

  /// Revenue per unit of coupon value for this user, uniform in [1.5, 3].
  double margin(std::int64_t user_id) const;
  double logit(const UserState& state, int action) const;
  double response_probability(const UserState& state, int action) const;

  Response respond(const UserState& state, int action, Rng& rng) const;
  ExpectedResponse expected_response(const UserState& state, int action) const;

  /// Cost of issuing the largest coupon to every user every round.
  double c_max() const;

 private:
  void check_action(int action) const;

  EnvConfig config_;
  std::vector<UserState> population_;
  std::vector<double> margins_;
  std::vector<double> weights_;
};

/// Logs the uniform-random treatment policy for every user and round.
std::vector<InteractionRecord> log_uniform_policy(const Environment& env, std::uint64_t seed);

/// Offline environment answering (state, action) queries from logged tuples
/// by 1-nearest-neighbour lookup in per-dimension standardized state space.
class CounterfactualModel {
 public:
  explicit CounterfactualModel(std::vector<InteractionRecord> records);

  /// Reward and cost of the nearest logged record with the same action.
  /// Ties go to the lowest record index.
  ExpectedResponse query(std::span<const double> state, int action) const;
  std::size_t nearest_index(std::span<const double> state, int action) const;
  bool covers(int action) const;

  const std::vector<InteractionRecord>& records() const { return records_; }
  std::span<const double> scale() const { return scale_; }

 private:
  std::vector<InteractionRecord> records_;
  std::vector<double> mean_;
  std::vector<double> scale_;
  std::vector<std::vector<std::size_t>> by_action_;
  std::vector<double> normalized_;  // row-major records x dims
  std::size_t dim_ = 0;
};

/// One-shot form of CounterfactualModel::query.
ExpectedResponse counterfactual(std::span<const InteractionRecord> dataset,
                                std::span<const double> state, int action);

}  // namespace coupondt::sim

#pragma once

#include <cstdint>
#include <memory>
#include <vector>

#include "coupondt/rng.hpp"
#include "coupondt/simenv.hpp"

namespace coupondt::sim {

/// What a rollout needs from a market: user states, per-step outcomes and an
/// analytic expectation used by oracle policies.
class Market {
 public:
  virtual ~Market() = default;

  virtual int n_users() const = 0;
  virtual int horizon() const = 0;
  virtual int n_actions() const = 0;
  virtual int feature_dim() const = 0;
  /// Largest cost a single allocation of `action` can incur.
  virtual double face_value(int action) const = 0;

  virtual UserState initial_state(int user) const = 0;
  virtual Response step(int user, const UserState& state, int action, Rng& rng) const = 0;
  virtual ExpectedResponse expected(int user, const UserState& state, int action) const = 0;

  double max_face_value() const;
  /// Cost of the largest coupon for every user every round.
  double c_max() const;
};

/// The synthetic environment, optionally restricted to its first `n_users` users.
class SimulatedMarket final : public Market {
 public:
  explicit SimulatedMarket(const Environment& env, int n_users = -1);

  int n_users() const override { return n_users_; }
  int horizon() const override { return env_->config().horizon; }
  int n_actions() const override { return env_->config().n_actions; }
  int feature_dim() const override { return env_->config().feature_dim; }
  double face_value(int action) const override;

  UserState initial_state(int user) const override;
  Response step(int user, const UserState& state, int action, Rng& rng) const override;
  ExpectedResponse expected(int user, const UserState& state, int action) const override;

  const Environment& environment() const { return *env_; }

 private:
  const Environment* env_;
  int n_users_;
};

/// Replays logged user states and answers allocations with counterfactual
/// nearest-neighbour lookups. States follow the log regardless of action.
class LoggedMarket final : public Market {
 public:
  explicit LoggedMarket(std::vector<InteractionRecord> records);

  int n_users() const override { return static_cast<int>(users_.size()); }
  int horizon() const override { return horizon_; }
  int n_actions() const override { return n_actions_; }
  int feature_dim() const override { return feature_dim_; }
  double face_value(int action) const override;

  UserState initial_state(int user) const override;
  Response step(int user, const UserState& state, int action, Rng& rng) const override;
  ExpectedResponse expected(int user, const UserState& state, int action) const override;

 private:
  CounterfactualModel model_;
  // Per user, record indices in chronological order.
  std::vector<std::vector<std::size_t>> users_;
  std::vector<std::int64_t> user_ids_;
  std::vector<double> max_cost_;
  int horizon_ = 0;
  int n_actions_ = 0;
  int feature_dim_ = 0;
};

/// Deterministic per-user, per-action outcome table; every round repeats the
/// same table. Useful for hand-checkable fixtures.
class TableMarket final : public Market {
 public:
  /// outcomes[user][action] = (reward, cost).
  TableMarket(std::vector<std::vector<ExpectedResponse>> outcomes, int horizon = 1);

  int n_users() const override { return static_cast<int>(outcomes_.size()); }
  int horizon() const override { return horizon_; }
  int n_actions() const override { return n_actions_; }
  int feature_dim() const override { return 1; }
  double face_value(int action) const override;

  UserState initial_state(int user) const override;
  Response step(int user, const UserState& state, int action, Rng& rng) const override;
  ExpectedResponse expected(int user, const UserState& state, int action) const override;

 private:
  std::vector<std::vector<ExpectedResponse>> outcomes_;
  int horizon_;
  int n_actions_;
};

}  // namespace coupondt::sim

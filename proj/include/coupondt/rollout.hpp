#pragma once

#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "coupondt/market.hpp"
#include "coupondt/rng.hpp"

namespace coupondt::dual {

/// Per-user sequential decision rule. A rollout calls begin_round once per
/// round with every user's state, then act/observe for each user in id order.
class Policy {
 public:
  virtual ~Policy() = default;
  virtual void reset(const sim::Market& market, double budget) = 0;
  virtual void begin_round(int /*round*/, std::span<const sim::UserState> /*states*/) {}
  virtual int act(int user, const sim::UserState& state, double remaining_budget, Rng& rng) = 0;
  virtual void observe(int /*user*/, int /*action*/, const sim::Response& /*response*/) {}
};

struct PolicyOutcome {
  int n_users = 0;
  int horizon = 0;
  std::vector<int> actions;  // executed action of user u at round t: actions[u * horizon + t]
  double revenue = 0.0;
  double cost = 0.0;

  int action(int user, int round) const { return actions[static_cast<std::size_t>(user) * horizon + round]; }
  bool operator==(const PolicyOutcome&) const = default;
};

struct RolloutOptions {
  double budget = std::numeric_limits<double>::infinity();
  /// Replace any allocation whose face value would take spend past the budget
  /// by the null action.
  bool hard_stop = false;
  std::uint64_t seed = 0;
};

/// Runs every user through the market for the full horizon, round by round.
/// Each user owns two random streams derived from the seed (policy and
/// environment), so outcomes for a user do not depend on other users'
/// draws. Totals are summed in a canonical order and do not depend on how
/// users are numbered.
PolicyOutcome rollout(const sim::Market& market, Policy& policy, const RolloutOptions& options);

/// Sum of the values taken in ascending order.
double canonical_sum(std::vector<double> values);

/// Always issues the null action.
class NullPolicy final : public Policy {
 public:
  void reset(const sim::Market&, double) override {}
  int act(int, const sim::UserState&, double, Rng&) override { return 0; }
};

}  // namespace coupondt::dual

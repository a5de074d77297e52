#include "coupondt/rollout.hpp"

#include <algorithm>
#include <stdexcept>

namespace coupondt::dual {

double canonical_sum(std::vector<double> values) {
  std::sort(values.begin(), values.end());
  double s = 0.0;
  for (double v : values) s += v;
  return s;
}

PolicyOutcome rollout(const sim::Market& market, Policy& policy, const RolloutOptions& options) {
  const int N = market.n_users();
  const int T = market.horizon();
  const int A = market.n_actions();
  PolicyOutcome out;
  out.n_users = N;
  out.horizon = T;
  out.actions.assign(static_cast<std::size_t>(N) * T, 0);

  std::vector<sim::UserState> states;
  states.reserve(static_cast<std::size_t>(N));
  std::vector<Rng> policy_rng;
  std::vector<Rng> env_rng;
  policy_rng.reserve(static_cast<std::size_t>(N));
  env_rng.reserve(static_cast<std::size_t>(N));
  for (int u = 0; u < N; ++u) {
    states.push_back(market.initial_state(u));
    policy_rng.push_back(make_rng(options.seed, "rollout.policy", static_cast<std::uint64_t>(u)));
    env_rng.push_back(make_rng(options.seed, "rollout.env", static_cast<std::uint64_t>(u)));
  }
  std::vector<double> revenue(static_cast<std::size_t>(N), 0.0);
  std::vector<double> cost(static_cast<std::size_t>(N), 0.0);

  policy.reset(market, options.budget);
  double spent = 0.0;
  for (int t = 0; t < T; ++t) {
    policy.begin_round(t, states);
    for (int u = 0; u < N; ++u) {
      int a = policy.act(u, states[u], options.budget - spent, policy_rng[u]);
      if (a < 0 || a >= A)
        throw std::out_of_range("rollout: policy chose action " + std::to_string(a) + " outside [0, " +
                                std::to_string(A) + ")");
      if (options.hard_stop && spent + market.face_value(a) > options.budget) a = 0;
      sim::Response r = market.step(u, states[u], a, env_rng[u]);
      spent += r.cost;
      revenue[u] += r.reward;
      cost[u] += r.cost;
      out.actions[static_cast<std::size_t>(u) * T + t] = a;
      policy.observe(u, a, r);
      states[u].features = std::move(r.next_features);
      states[u].round = t + 1;
    }
  }
  out.revenue = canonical_sum(std::move(revenue));
  out.cost = canonical_sum(std::move(cost));
  return out;
}

}  // namespace coupondt::dual

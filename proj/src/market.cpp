#include "coupondt/market.hpp"

#include <algorithm>
#include <map>
#include <stdexcept>

namespace coupondt::sim {

double Market::max_face_value() const {
  double m = 0.0;
  for (int a = 0; a < n_actions(); ++a) m = std::max(m, face_value(a));
  return m;
}

double Market::c_max() const {
  return static_cast<double>(n_users()) * horizon() * max_face_value();
}

SimulatedMarket::SimulatedMarket(const Environment& env, int n_users) : env_(&env) {
  const int total = env.config().n_users;
  n_users_ = n_users < 0 ? total : n_users;
  if (n_users_ < 1 || n_users_ > total)
    throw std::invalid_argument("market: user subset must be within the population");
}

double SimulatedMarket::face_value(int action) const {
  return env_->config().coupon_face_values.at(static_cast<std::size_t>(action));
}

UserState SimulatedMarket::initial_state(int user) const { return env_->population().at(user); }

Response SimulatedMarket::step(int, const UserState& state, int action, Rng& rng) const {
  return env_->respond(state, action, rng);
}

ExpectedResponse SimulatedMarket::expected(int, const UserState& state, int action) const {
  return env_->expected_response(state, action);
}

LoggedMarket::LoggedMarket(std::vector<InteractionRecord> records) : model_(std::move(records)) {
  const auto& recs = model_.records();
  std::map<std::int64_t, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < recs.size(); ++i) {
    if (recs[i].user_id < 0) throw std::invalid_argument("logged market: records need user ids");
    groups[recs[i].user_id].push_back(i);
    n_actions_ = std::max(n_actions_, recs[i].action + 1);
  }
  feature_dim_ = static_cast<int>(recs.front().features.size());
  horizon_ = -1;
  for (auto& [id, idx] : groups) {
    std::stable_sort(idx.begin(), idx.end(),
                     [&](std::size_t a, std::size_t b) { return recs[a].time < recs[b].time; });
    horizon_ = horizon_ < 0 ? static_cast<int>(idx.size()) : std::min(horizon_, static_cast<int>(idx.size()));
    user_ids_.push_back(id);
    users_.push_back(std::move(idx));
  }
  max_cost_.assign(static_cast<std::size_t>(n_actions_), 0.0);
  for (const auto& r : recs) max_cost_[r.action] = std::max(max_cost_[r.action], r.cost);
}

double LoggedMarket::face_value(int action) const {
  return max_cost_.at(static_cast<std::size_t>(action));
}

UserState LoggedMarket::initial_state(int user) const {
  const auto& r = model_.records()[users_.at(user).front()];
  return {user_ids_[user], 0, r.features};
}

Response LoggedMarket::step(int user, const UserState& state, int action, Rng&) const {
  const ExpectedResponse e = model_.query(state.features, action);
  Response r;
  r.reward = e.reward;
  r.cost = e.cost;
  r.responded = e.reward > 0.0 || e.cost > 0.0;
  const auto& idx = users_.at(user);
  const std::size_t next = std::min(idx.size() - 1, static_cast<std::size_t>(state.round) + 1);
  r.next_features = model_.records()[idx[next]].features;
  return r;
}

ExpectedResponse LoggedMarket::expected(int, const UserState& state, int action) const {
  return model_.query(state.features, action);
}

TableMarket::TableMarket(std::vector<std::vector<ExpectedResponse>> outcomes, int horizon)
    : outcomes_(std::move(outcomes)), horizon_(horizon) {
  if (outcomes_.empty() || outcomes_.front().empty())
    throw std::invalid_argument("table market: empty outcome table");
  n_actions_ = static_cast<int>(outcomes_.front().size());
  for (const auto& row : outcomes_)
    if (static_cast<int>(row.size()) != n_actions_)
      throw std::invalid_argument("table market: ragged outcome table");
}

double TableMarket::face_value(int action) const {
  double m = 0.0;
  for (const auto& row : outcomes_) m = std::max(m, row.at(static_cast<std::size_t>(action)).cost);
  return m;
}

UserState TableMarket::initial_state(int user) const {
  return {user, 0, {static_cast<double>(user)}};
}

Response TableMarket::step(int user, const UserState& state, int action, Rng&) const {
  const ExpectedResponse e = expected(user, state, action);
  return {e.reward, e.cost, e.reward > 0.0 || e.cost > 0.0, state.features};
}

ExpectedResponse TableMarket::expected(int user, const UserState&, int action) const {
  return outcomes_.at(static_cast<std::size_t>(user)).at(static_cast<std::size_t>(action));
}

}  // namespace coupondt::sim

#include <algorithm>
#include <cmath>

#include "coupondt/market.hpp"
#include "coupondt/simenv.hpp"
#include "doctest.h"

using namespace coupondt;
using sim::EnvConfig;
using sim::Environment;

namespace {

EnvConfig small_env(int n_users = 200) {
  EnvConfig c;
  c.n_users = n_users;
  return c;
}

InteractionRecord rec(std::int64_t user, std::vector<double> f, int action, double cost, double reward) {
  return {user, 0, std::move(f), action, cost, reward};
}

}  // namespace

TEST_CASE("population size and validation") {
  CHECK(sim::generate_population(EnvConfig{}).size() == 10000);
  auto c = small_env();
  c.n_users = 0;
  CHECK_THROWS_AS(sim::generate_population(c), std::invalid_argument);
  c = small_env();
  c.feature_dim = 0;
  CHECK_THROWS_AS(sim::generate_population(c), std::invalid_argument);
  c = small_env();
  c.coupon_face_values[0] = 0.5;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = small_env();
  c.coupon_face_values[3] = c.coupon_face_values[2];
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
}

TEST_CASE("population is reproducible and shaped as documented") {
  const auto a = sim::generate_population(small_env());
  const auto b = sim::generate_population(small_env());
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].features == b[i].features);
    CHECK(a[i].round == 0);
    CHECK(a[i].user_id == static_cast<std::int64_t>(i));
    CHECK(a[i].features.back() >= 0.0);
    CHECK(a[i].features.back() < 1.0);
  }
  auto other = small_env();
  other.seed = 7;
  CHECK(sim::generate_population(other)[0].features != a[0].features);
}

TEST_CASE("response probability, cost and monotonicity") {
  Environment env(small_env());
  CHECK(sim::sigmoid(0.0) == 0.5);
  const auto& w = env.response_weights();
  // A state that zeroes the linear part leaves only the intercept.
  sim::UserState s{0, 0, std::vector<double>(5, 0.0)};
  for (int a = 0; a < 5; ++a)
    CHECK(env.response_probability(s, a) == doctest::Approx(sim::sigmoid(env.config().action_offsets[a])));
  for (const auto& u : env.population()) {
    double z = env.config().action_offsets[1];
    for (int j = 0; j < 5; ++j) z += w[j] * u.features[j];
    CHECK(env.logit(u, 1) == doctest::Approx(z));
    for (int a = 1; a < 5; ++a) CHECK(env.response_probability(u, a) >= env.response_probability(u, a - 1));
  }
  Rng rng(3);
  for (int i = 0; i < 1000; ++i) {
    const auto r = env.respond(env.population()[i % 200], 0, rng);
    CHECK(r.cost == 0.0);
    CHECK(r.reward == 0.0);
  }
  CHECK_THROWS_AS(env.respond(s, 5, rng), std::out_of_range);
  CHECK_THROWS_AS(env.expected_response(s, -1), std::out_of_range);
}

TEST_CASE("respond outcome structure") {
  Environment env(small_env());
  Rng rng(11);
  for (int i = 0; i < 500; ++i) {
    const auto& u = env.population()[i % 200];
    const int a = 1 + i % 4;
    const auto r = env.respond(u, a, rng);
    const double face = env.config().coupon_face_values[a];
    if (r.responded) {
      CHECK(r.cost == face);
      CHECK(r.reward == face * env.margin(u.user_id));
    } else {
      CHECK(r.cost == 0.0);
      CHECK(r.reward == 0.0);
    }
    REQUIRE(r.next_features.size() == u.features.size());
  }
  for (const auto& u : env.population()) {
    CHECK(env.margin(u.user_id) >= 1.5);
    CHECK(env.margin(u.user_id) <= 3.0);
  }
}

TEST_CASE("expected_response is the exact product") {
  Environment env(small_env());
  const auto& u = env.population()[5];
  const double p = env.response_probability(u, 4);
  const auto e = env.expected_response(u, 4);
  CHECK(e.cost == p * 4.0);
  CHECK(e.reward == p * 4.0 * env.margin(5));
  CHECK(env.expected_response(u, 0).cost == 0.0);
  CHECK(env.c_max() == 200.0 * 10 * 4.0);
}

TEST_CASE("Monte-Carlo respond agrees with expected_response") {
  Environment env(small_env());
  const auto& u = env.population()[17];
  for (int a : {1, 3, 4}) {
    Rng rng(100 + a);
    const int n = 100000;
    double sum = 0.0;
    double sq = 0.0;
    for (int i = 0; i < n; ++i) {
      const double r = env.respond(u, a, rng).reward;
      sum += r;
      sq += r * r;
    }
    const double mean = sum / n;
    const double se = std::sqrt((sq / n - mean * mean) / n);
    CHECK(std::abs(mean - env.expected_response(u, a).reward) < 3.0 * se);
  }
}

TEST_CASE("respond and logging are deterministic") {
  Environment env(small_env(20));
  const auto a = sim::log_uniform_policy(env, 9);
  const auto b = sim::log_uniform_policy(env, 9);
  CHECK(a == b);
  CHECK(a.size() == 200);
  std::vector<int> counts(5, 0);
  for (const auto& r : a) {
    ++counts[r.action];
    CHECK(r.time >= 0);
    CHECK(r.time < 10);
  }
  for (int c : counts) CHECK(c > 20);
  EnvConfig one = small_env(1);
  one.horizon = 1;
  CHECK(sim::log_uniform_policy(Environment(one), 1).size() == 1);
}

TEST_CASE("counterfactual nearest neighbour") {
  std::vector<InteractionRecord> ds{rec(0, {0.0, 0.0}, 1, 1.0, 2.0), rec(1, {1.0, 0.0}, 1, 1.0, 3.0),
                                    rec(2, {0.0, 4.0}, 1, 1.0, 4.0), rec(3, {3.0, 3.0}, 0, 0.0, 0.5),
                                    rec(4, {2.0, 2.0}, 1, 1.0, 6.0)};
  // Exact match returns that record.
  auto e = sim::counterfactual(ds, std::vector<double>{1.0, 0.0}, 1);
  CHECK(e.reward == 3.0);
  e = sim::counterfactual(ds, std::vector<double>{9.0, 9.0}, 0);
  CHECK(e.reward == 0.5);
  CHECK_THROWS_AS(sim::counterfactual(ds, std::vector<double>{0.0, 0.0}, 2), sim::UncoveredActionError);

  std::vector<InteractionRecord> single{rec(0, {5.0}, 2, 3.0, 7.0)};
  CHECK(sim::counterfactual(single, std::vector<double>{-100.0}, 2).reward == 7.0);

  // Mid-point query against a brute-force scan in standardized space.
  sim::CounterfactualModel model(ds);
  const auto scale = model.scale();
  const std::vector<double> q{1.0, 1.0};
  std::size_t best = 0;
  double best_d = INFINITY;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    if (ds[i].action != 1) continue;
    double d = 0.0;
    for (int j = 0; j < 2; ++j) d += std::pow((ds[i].features[j] - q[j]) / scale[j], 2);
    if (d < best_d) best_d = d, best = i;
  }
  CHECK(model.nearest_index(q, 1) == best);
}

TEST_CASE("counterfactual ties go to the lowest index") {
  std::vector<InteractionRecord> ds{rec(0, {1.0}, 1, 1.0, 10.0), rec(1, {-1.0}, 1, 1.0, 20.0),
                                    rec(2, {1.0}, 1, 1.0, 30.0), rec(3, {-1.0}, 1, 1.0, 40.0)};
  CHECK(sim::counterfactual(ds, std::vector<double>{0.0}, 1).reward == 10.0);
  CHECK(sim::counterfactual(ds, std::vector<double>{1.0}, 1).reward == 10.0);
}

TEST_CASE("counterfactual matches exhaustive scan on random datasets") {
  Rng rng(77);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<InteractionRecord> ds;
    for (int i = 0; i < 1000; ++i)
      ds.push_back(rec(i, {normal(rng), 3.0 * normal(rng), normal(rng)}, i % 3, 1.0, static_cast<double>(i)));
    sim::CounterfactualModel model(ds);
    const auto scale = model.scale();
    for (int k = 0; k < 20; ++k) {
      const std::vector<double> q{normal(rng), normal(rng), normal(rng)};
      const int a = k % 3;
      std::size_t best = 0;
      double best_d = INFINITY;
      for (std::size_t i = 0; i < ds.size(); ++i) {
        if (ds[i].action != a) continue;
        double d = 0.0;
        for (int j = 0; j < 3; ++j) {
          // Same standardization as the model: centred, scaled by population std.
          const double diff = (ds[i].features[j] - q[j]) / scale[j];
          d += diff * diff;
        }
        if (d < best_d) best_d = d, best = i;
      }
      CHECK(model.nearest_index(q, a) == best);
    }
  }
}

TEST_CASE("markets expose consistent shapes") {
  Environment env(small_env(30));
  sim::SimulatedMarket m(env, 10);
  CHECK(m.n_users() == 10);
  CHECK(m.c_max() == 10 * 10 * 4.0);
  CHECK(m.initial_state(3).features == env.population()[3].features);

  sim::LoggedMarket logged(sim::log_uniform_policy(env, 2));
  CHECK(logged.n_users() == 30);
  CHECK(logged.horizon() == 10);
  CHECK(logged.n_actions() == 5);
  CHECK(logged.face_value(0) == 0.0);

  sim::TableMarket table({{{1.0, 0.0}, {10.0, 4.0}}, {{2.0, 0.0}, {3.0, 4.0}}});
  Rng rng(1);
  CHECK(table.step(0, table.initial_state(0), 1, rng).reward == 10.0);
  CHECK(table.expected(1, table.initial_state(1), 0).reward == 2.0);
  CHECK(table.c_max() == 8.0);
}

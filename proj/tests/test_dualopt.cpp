#include <chrono>
#include <cmath>
#include <fstream>

#include "coupondt/dualopt.hpp"
#include "coupondt/simenv.hpp"
#include "doctest.h"
#include "test_util.hpp"

using namespace coupondt;
using namespace coupondt::dual;

namespace {

sim::TableMarket fixture_market() {
  return sim::TableMarket({{{1.0, 0.0}, {10.0, 4.0}}, {{2.0, 0.0}, {3.0, 4.0}}});
}

// Best feasible revenue over every joint allocation of a one-round table.
std::pair<double, double> enumerate_best(const std::vector<std::vector<sim::ExpectedResponse>>& table, double B) {
  const int n = static_cast<int>(table.size());
  const int k = static_cast<int>(table[0].size());
  double best_r = -1.0, best_c = 0.0;
  std::vector<int> pick(n, 0);
  while (true) {
    double r = 0.0, c = 0.0;
    for (int u = 0; u < n; ++u) {
      r += table[u][pick[u]].reward;
      c += table[u][pick[u]].cost;
    }
    if (c <= B && r > best_r) best_r = r, best_c = c;
    int u = 0;
    while (u < n && ++pick[u] == k) pick[u++] = 0;
    if (u == n) break;
  }
  return {best_r, best_c};
}

class ConstantPolicy final : public Policy {
 public:
  explicit ConstantPolicy(int a) : a_(a) {}
  void reset(const sim::Market&, double) override {}
  int act(int, const sim::UserState&, double, Rng&) override { return a_; }

 private:
  int a_;
};

}  // namespace

TEST_CASE("dual objective arithmetic") {
  PolicyOutcome o;
  o.revenue = 10.0;
  o.cost = 6.0;
  CHECK(dual_objective(o, 0.5, 4.0) == -9.0);
  CHECK(dual_objective(o, 0.0, 4.0) == -10.0);
  CHECK(dual_objective(o, 0.7, 6.0) == -10.0);
  CHECK(dual_objective(o, 0.7, 100.0) == -10.0);
}

TEST_CASE("inner_minimize on smooth and monotone objectives") {
  auto quad = inner_minimize([](double x) { return (x - 0.3) * (x - 0.3); }, 0.5, 0.0, 1.0, 200);
  CHECK(std::abs(quad.x - 0.3) < 1e-3);
  auto quad2 = inner_minimize([](double x) { return (x - 0.3) * (x - 0.3); }, 0.05, 0.0, 1.0, 200);
  CHECK(std::abs(quad2.x - 0.3) < 1e-3);
  CHECK(inner_minimize([](double x) { return -x; }, 0.2, 0.0, 1.0, 200).x == 1.0);
  CHECK(inner_minimize([](double x) { return x; }, 0.7, 0.0, 1.0, 200).x == 0.0);
  auto budgeted = inner_minimize([](double x) { return -x; }, 0.2, 0.0, 1.0, 3);
  CHECK(budgeted.evaluations == 3);
  CHECK(budgeted.x > 0.2);
  CHECK(inner_minimize([](double) { return 1.0; }, 0.42).x == 0.42);  // flat: stays put
  CHECK(inner_minimize([](double x) { return x; }, 3.0).x >= 0.0);
}

TEST_CASE("inner_minimize on the fixture objective reaches the grid optimum") {
  const auto market = fixture_market();
  const auto problem = oracle_problem(market);
  auto f = [&](double l) { return dual_objective(evaluate_lambda(problem, l, 4.0, 1), l, 4.0); };
  double grid_best = INFINITY;
  for (int i = 0; i <= 10000; ++i) grid_best = std::min(grid_best, f(i / 10000.0));
  const auto r = inner_minimize(f, 0.2, 0.0, 1.0, 200);
  CHECK(r.value == grid_best);
  CHECK(f(r.x) == grid_best);
}

TEST_CASE("optimize_lambda on the two-user fixture matches enumeration") {
  const auto t0 = std::chrono::steady_clock::now();
  const std::vector<std::vector<sim::ExpectedResponse>> table{{{1.0, 0.0}, {10.0, 4.0}}, {{2.0, 0.0}, {3.0, 4.0}}};
  const auto [best_r, best_c] = enumerate_best(table, 4.0);
  CHECK(best_r == 12.0);
  CHECK(best_c == 4.0);
  const auto market = fixture_market();
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    DualOptConfig cfg;
    cfg.seed = seed;
    const auto r = optimize_lambda(oracle_problem(market), {4.0, 0.08}, cfg);
    CHECK_FALSE(r.infeasible);
    CHECK(r.outcome.revenue == 12.0);
    CHECK(r.outcome.cost == 4.0);
    CHECK(r.outcome.action(0, 0) == 1);
    CHECK(r.outcome.action(1, 0) == 0);
    CHECK(r.lambda >= 0.25);
    CHECK(r.lambda <= 1.0);
    CHECK(r.converged);
    CHECK(static_cast<int>(r.trace.size()) == r.iterations);
  }
  CHECK(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() < 1.0);
}

TEST_CASE("optimize_lambda is deterministic and keeps the incumbent feasible") {
  sim::EnvConfig ec;
  ec.n_users = 50;
  sim::Environment env(ec);
  sim::SimulatedMarket market(env);
  DualOptConfig cfg;
  cfg.max_iterations = 6;
  for (double frac : {0.05, 0.3, 0.9}) {
    const auto budget = BudgetConfig::from_fraction(frac, market.c_max());
    const auto a = optimize_lambda(oracle_problem(market), budget, cfg);
    const auto b = optimize_lambda(oracle_problem(market), budget, cfg);
    CHECK(a.lambda == b.lambda);
    CHECK(a.outcome == b.outcome);
    CHECK(a.lambda >= 0.0);
    CHECK(a.lambda <= 1.0);
    CHECK(a.outcome.cost <= budget.budget);
    for (const auto& row : a.trace) CHECK(row.feasible == (row.cost <= budget.budget));
  }
}

TEST_CASE("a loose budget recovers the unconstrained greedy revenue") {
  sim::EnvConfig ec;
  ec.n_users = 40;
  sim::Environment env(ec);
  sim::SimulatedMarket market(env);
  const auto greedy = evaluate_lambda(oracle_problem(market), 0.0, INFINITY, derive_seed(17, "dual.rollout"));
  DualOptConfig cfg;
  const auto r = optimize_lambda(oracle_problem(market), BudgetConfig::from_fraction(1.0, market.c_max()), cfg);
  CHECK(r.outcome.revenue == greedy.revenue);
  CHECK(r.lambda < 0.1);
}

TEST_CASE("zero budget yields the null outcome with a warning") {
  const auto market = fixture_market();
  const auto r = optimize_lambda(oracle_problem(market), {0.0, 0.0}, DualOptConfig{});
  CHECK(r.infeasible);
  CHECK(r.outcome.cost == 0.0);
  CHECK(r.outcome.revenue == 3.0);
}

TEST_CASE("unreachable feasibility falls back to the null policy") {
  // Every policy the family produces overspends.
  const auto market = fixture_market();
  DualProblem p;
  p.market = &market;
  p.make_policy = [](double) -> std::unique_ptr<Policy> { return std::make_unique<ConstantPolicy>(1); };
  DualOptConfig cfg;
  cfg.max_iterations = 3;
  const auto r = optimize_lambda(p, {4.0, 0.08}, cfg);
  CHECK(r.infeasible);
  CHECK(r.outcome.cost == 0.0);
  CHECK(r.iterations == 3);
}

TEST_CASE("budget validation") {
  CHECK_THROWS_AS((BudgetConfig{-1.0, 0.1}.validate()), std::invalid_argument);
  CHECK_THROWS_AS((BudgetConfig{1.0, 0.0}.validate()), std::invalid_argument);
  CHECK_THROWS_AS((BudgetConfig{1.0, 2.0}.validate()), std::invalid_argument);
  CHECK_NOTHROW((BudgetConfig{0.0, 0.0}.validate()));
  const auto b = BudgetConfig::from_fraction(0.25, 400.0);
  CHECK(b.budget == 100.0);
  CHECK(b.epsilon == 2.0);
  DualOptConfig c;
  c.lr_scale = 0.0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
}

TEST_CASE("rollout basics") {
  const auto market = fixture_market();
  NullPolicy null;
  auto o = rollout(market, null, {});
  CHECK(o.cost == 0.0);
  CHECK(o.revenue == 3.0);

  sim::TableMarket one({{{0.0, 0.0}, {7.5, 2.0}}});
  ConstantPolicy coupon(1);
  o = rollout(one, coupon, {});
  CHECK(o.revenue == 7.5);
  CHECK(o.cost == 2.0);

  // Hard stop: the second user's coupon would exceed the budget.
  RolloutOptions hs;
  hs.budget = 5.0;
  hs.hard_stop = true;
  o = rollout(market, coupon, hs);
  CHECK(o.cost == 4.0);
  CHECK(o.action(1, 0) == 0);
  ConstantPolicy bad(7);
  CHECK_THROWS_AS(rollout(market, bad, {}), std::out_of_range);
}

TEST_CASE("rollout totals do not depend on user order") {
  Rng rng(3);
  std::vector<std::vector<sim::ExpectedResponse>> rows;
  for (int u = 0; u < 200; ++u) rows.push_back({{uniform01(rng), 0.0}, {10 * uniform01(rng), uniform01(rng)}});
  auto perm = rows;
  std::reverse(perm.begin(), perm.end());
  std::swap(perm[3], perm[150]);
  GreedyOraclePolicy g(0.3);
  const auto a = rollout(sim::TableMarket(rows), g, {});
  const auto b = rollout(sim::TableMarket(perm), g, {});
  CHECK(a.revenue == b.revenue);
  CHECK(a.cost == b.cost);
}

TEST_CASE("one deterministic round equals the expected response") {
  sim::EnvConfig ec;
  ec.n_users = 1;
  ec.horizon = 1;
  sim::Environment env(ec);
  sim::SimulatedMarket m(env);
  // A market whose outcome is its expectation: the table built from it.
  const auto s = m.initial_state(0);
  std::vector<sim::ExpectedResponse> row;
  for (int a = 0; a < 5; ++a) row.push_back(m.expected(0, s, a));
  sim::TableMarket table({row});
  GreedyOraclePolicy g(0.0);
  const auto o = rollout(table, g, {});
  const int chosen = greedy_oracle_action(m, 0, s, 0.0);
  CHECK(o.revenue == row[chosen].reward);
  CHECK(o.cost == row[chosen].cost);
}

TEST_CASE("greedy oracle") {
  sim::TableMarket t({{{0.0, 0.0}, {5.0, 1.0}, {9.0, 4.0}, {9.0, 4.0}, {2.0, 0.5}}});
  const auto s = t.initial_state(0);
  CHECK(greedy_oracle_action(t, 0, s, 0.0) == 2);  // tie with 3 goes low
  CHECK(greedy_oracle_action(t, 0, s, 1e6) == 0);
  for (double lambda : {0.0, 0.5, 1.0, 1.5, 2.0, 3.0}) {
    int best = 0;
    double bv = -INFINITY;
    for (int a = 0; a < 5; ++a) {
      const auto e = t.expected(0, s, a);
      if (e.reward - lambda * e.cost > bv) bv = e.reward - lambda * e.cost, best = a;
    }
    CHECK(greedy_oracle_action(t, 0, s, lambda) == best);
  }
}

TEST_CASE("monotonicity diagnostics") {
  sim::EnvConfig ec;
  ec.n_users = 30;
  sim::Environment env(ec);
  sim::SimulatedMarket market(env);
  std::vector<double> grid;
  for (int i = 0; i <= 20; ++i) grid.push_back(i / 20.0);
  CHECK(check_monotonicity(oracle_problem(market), grid, INFINITY, 4).violations.empty());

  sim::TableMarket flat({{{1.0, 0.0}, {2.0, 1.0}}});
  DualProblem constant;
  constant.market = &flat;
  constant.make_policy = [](double) -> std::unique_ptr<Policy> { return std::make_unique<ConstantPolicy>(1); };
  CHECK(check_monotonicity(constant, grid, INFINITY, 4).violations.empty());

  // The expensive coupon earns less than the cheap one.
  sim::TableMarket adversarial({{{0.0, 0.0}, {5.0, 1.0}, {3.0, 3.0}}});
  DualProblem adv;
  adv.market = &adversarial;
  adv.make_policy = [](double l) -> std::unique_ptr<Policy> { return std::make_unique<ConstantPolicy>(l < 0.5 ? 2 : 1); };
  const auto rep = check_monotonicity(adv, std::vector<double>{0.2, 0.8}, INFINITY, 4);
  REQUIRE(rep.violations.size() == 1);
  CHECK(rep.violations[0].lambda_a == 0.8);
  CHECK(rep.violations[0].lambda_b == 0.2);
}

TEST_CASE("trace file layout") {
  std::vector<TraceRow> rows{{1, 0.5, 0.25, 12.0, 4.0, true}, {2, 0.1, 0.0, 13.0, 8.0, false}};
  const auto path = coupondt::testing::temp_path("trace.tsv");
  write_trace(path, rows);
  std::ifstream in(path);
  std::string header, l1, l2;
  std::getline(in, header);
  std::getline(in, l1);
  std::getline(in, l2);
  CHECK(header == "iter\tlambda_init\tlambda_opt\tR\tC\tfeasible");
  CHECK(l1 == "1\t0.5\t0.25\t12\t4\t1");
  CHECK(l2 == "2\t0.10000000000000001\t0\t13\t8\t0");
}

TEST_CASE("conditioning target schedule") {
  CHECK(lambda_bucket_centre(0.5, 100) == doctest::Approx(0.505));
  CHECK(initial_ctg_target(0.5, 100, 1000.0, 10, 0.0) == doctest::Approx(2 * 0.495 * 100.0));
  CHECK(initial_ctg_target(0.0, 100, 1000.0, 10, 50.0) == 50.0);
  CHECK(initial_ctg_target(0.999, 10, 1000.0, 10, 0.0) == doctest::Approx(2 * 0.05 * 100.0));
}

namespace {

// User u gets the coupon iff u < n * (1 - lambda).
class ThresholdPolicy final : public Policy {
 public:
  explicit ThresholdPolicy(double lambda) : lambda_(lambda) {}
  void reset(const sim::Market& market, double) override { n_ = market.n_users(); }
  int act(int user, const sim::UserState&, double, Rng&) override { return user < n_ * (1.0 - lambda_) ? 1 : 0; }

 private:
  double lambda_;
  int n_ = 0;
};

}  // namespace

TEST_CASE("incumbent comes from any feasible rollout when the inner minimum overspends") {
  // Margin 3 > lambda, so the dual objective always rewards overspending.
  std::vector<std::vector<sim::ExpectedResponse>> table(10, {{0.0, 0.0}, {3.0, 1.0}});
  const sim::TableMarket market(table);
  DualProblem p;
  p.market = &market;
  p.make_policy = [](double l) -> std::unique_ptr<Policy> { return std::make_unique<ThresholdPolicy>(l); };
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    DualOptConfig cfg;
    cfg.seed = seed;
    const auto r = optimize_lambda(p, {5.0, 0.5}, cfg);
    CHECK_FALSE(r.infeasible);
    CHECK(r.outcome.cost <= 5.0);
    CHECK(r.outcome.revenue == 15.0);
    CHECK(r.converged);
  }
}

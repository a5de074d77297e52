#include "coupondt/dualopt.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <stdexcept>

#include "coupondt/datapipe.hpp"

namespace coupondt::dual {

BudgetConfig BudgetConfig::from_fraction(double fraction, double c_max, double epsilon_fraction) {
  const double b = fraction * c_max;
  return {b, epsilon_fraction * b};
}

void BudgetConfig::validate() const {
  if (!(budget >= 0.0)) throw std::invalid_argument("budget: B must be non-negative");
  if (budget > 0.0 && !(epsilon > 0.0 && epsilon <= budget))
    throw std::invalid_argument("budget: epsilon must lie in (0, B]");
}

void DualOptConfig::validate() const {
  if (max_iterations < 1) throw std::invalid_argument("dual: max_iterations must be >= 1");
  if (!(noise >= 0.0)) throw std::invalid_argument("dual: noise must be >= 0");
  if (!(lr_scale > 0.0)) throw std::invalid_argument("dual: learning rate must be > 0");
  if (inner_evaluations < 1) throw std::invalid_argument("dual: inner_evaluations must be >= 1");
  if (!(epsilon_fraction > 0.0 && epsilon_fraction <= 1.0))
    throw std::invalid_argument("dual: epsilon_fraction must lie in (0, 1]");
}

double dual_objective(const PolicyOutcome& outcome, double lambda, double budget) {
  return lambda * std::max(outcome.cost - budget, 0.0) - outcome.revenue;
}

InnerResult inner_minimize(const std::function<double(double)>& objective, double init, double lo, double hi,
                           int eval_budget, double initial_step, double min_step) {
  if (!(lo <= hi)) throw std::invalid_argument("inner_minimize: empty bounds");
  InnerResult r;
  r.x = std::clamp(init, lo, hi);
  r.value = objective(r.x);
  r.evaluations = 1;
  double step = initial_step;
  int dir = 1;
  while (r.evaluations < eval_budget && step >= min_step) {
    bool moved = false;
    for (int k = 0; k < 2 && r.evaluations < eval_budget; ++k) {
      const int d = k == 0 ? dir : -dir;
      const double y = std::clamp(r.x + d * step, lo, hi);
      if (y == r.x) continue;
      const double fy = objective(y);
      ++r.evaluations;
      if (fy < r.value) {
        r.x = y;
        r.value = fy;
        dir = d;
        moved = true;
        break;
      }
    }
    step = moved ? step * 2.0 : step * 0.5;
  }
  return r;
}

PolicyOutcome evaluate_lambda(const DualProblem& problem, double lambda, double budget, std::uint64_t seed) {
  auto policy = problem.make_policy(lambda);
  RolloutOptions opt;
  opt.budget = budget;
  opt.seed = seed;
  return rollout(*problem.market, *policy, opt);
}

namespace {

PolicyOutcome null_outcome(const sim::Market& market, double budget, std::uint64_t seed) {
  NullPolicy null;
  RolloutOptions opt;
  opt.budget = budget;
  opt.seed = seed;
  return rollout(market, null, opt);
}

}  // namespace

DualResult optimize_lambda(const DualProblem& problem, const BudgetConfig& budget, const DualOptConfig& config) {
  budget.validate();
  config.validate();
  if (!problem.market || !problem.make_policy) throw std::invalid_argument("dual: incomplete problem");
  const double B = budget.budget;
  const std::uint64_t rollout_seed = derive_seed(config.seed, "dual.rollout");
  DualResult result;

  if (B <= 0.0) {
    result.outcome = null_outcome(*problem.market, B, rollout_seed);
    result.lambda = 1.0;
    result.infeasible = true;
    result.rollouts = 1;
    return result;
  }

  const double c_max = problem.market->c_max();
  const double lr = config.lr_scale / (c_max > 0.0 ? c_max : 1.0);

  // Every rollout is a candidate incumbent, including those made during the
  // inner search: with margins above any admissible lambda the inner
  // minimum itself usually overspends. Among equal revenues the smaller
  // multiplier is kept.
  bool have = false;
  auto consider = [&](double lambda, const PolicyOutcome& o) {
    if (o.cost <= B && (!have || o.revenue > result.outcome.revenue ||
                        (o.revenue == result.outcome.revenue && lambda < result.lambda))) {
      have = true;
      result.lambda = lambda;
      result.outcome = o;
    }
  };
  auto in_band = [&] { return have && result.outcome.cost > B - budget.epsilon; };

  std::map<double, PolicyOutcome> memo;
  auto outcome_at = [&](double lambda) -> const PolicyOutcome& {
    const double key = problem.outcome_key ? problem.outcome_key(lambda) : lambda;
    auto it = memo.find(key);
    if (it == memo.end()) {
      it = memo.emplace(key, evaluate_lambda(problem, lambda, B, rollout_seed)).first;
      ++result.rollouts;
      consider(lambda, it->second);
    }
    return it->second;
  };
  auto objective = [&](double lambda) { return dual_objective(outcome_at(lambda), lambda, B); };

  Rng rng = make_rng(config.seed, "dual.restarts");
  double lambda = uniform01(rng);
  for (int it = 1; it <= config.max_iterations; ++it) {
    const double init = std::clamp(lambda + config.noise * (2.0 * uniform01(rng) - 1.0), 0.0, 1.0);
    const InnerResult inner = inner_minimize(objective, init, 0.0, 1.0, config.inner_evaluations);
    lambda = inner.x;
    const PolicyOutcome& o = outcome_at(lambda);
    const bool feasible = o.cost <= B;
    result.trace.push_back({it, init, lambda, o.revenue, o.cost, feasible});
    result.iterations = it;
    if (in_band()) {
      result.converged = true;
      break;
    }
    lambda += lr * (o.cost - B);
  }
  if (!have) {
    result.outcome = null_outcome(*problem.market, B, rollout_seed);
    result.lambda = 1.0;
    result.infeasible = true;
    ++result.rollouts;
  }
  return result;
}

void write_trace(const std::filesystem::path& path, std::span<const TraceRow> trace) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write trace file " + path.string());
  out << "iter\tlambda_init\tlambda_opt\tR\tC\tfeasible\n";
  for (const auto& r : trace)
    out << r.iteration << '\t' << data::format_real(r.lambda_init) << '\t' << data::format_real(r.lambda_opt) << '\t'
        << data::format_real(r.revenue) << '\t' << data::format_real(r.cost) << '\t' << (r.feasible ? 1 : 0)
        << '\n';
  if (!out) throw std::runtime_error("failed writing trace file " + path.string());
}

MonotonicityReport check_monotonicity(const DualProblem& problem, std::span<const double> lambdas, double budget,
                                      std::uint64_t seed) {
  MonotonicityReport rep;
  for (double l : lambdas) {
    const auto o = evaluate_lambda(problem, l, budget, seed);
    rep.lambdas.push_back(l);
    rep.revenue.push_back(o.revenue);
    rep.cost.push_back(o.cost);
  }
  for (std::size_t i = 0; i < lambdas.size(); ++i)
    for (std::size_t j = 0; j < lambdas.size(); ++j)
      if (rep.cost[j] > rep.cost[i] && rep.revenue[j] < rep.revenue[i])
        rep.violations.push_back({rep.lambdas[i], rep.lambdas[j], rep.revenue[i], rep.cost[i], rep.revenue[j], rep.cost[j]});
  return rep;
}

double lambda_bucket_centre(double lambda, int lambda_buckets) {
  return (adt::lambda_bucket(lambda, lambda_buckets) + 0.5) / lambda_buckets;
}

double initial_ctg_target(double lambda, int lambda_buckets, double budget, int n_users, double ctg_max) {
  const double share = budget / std::max(1, n_users);
  double target = 2.0 * (1.0 - lambda_bucket_centre(lambda, lambda_buckets)) * share;
  if (ctg_max > 0.0) target = std::min(target, ctg_max);
  return std::max(0.0, target);
}

AdtPolicy::AdtPolicy(const adt::Checkpoint& checkpoint, double lambda) : ckpt_(&checkpoint), lambda_(lambda) {}

void AdtPolicy::reset(const sim::Market& market, double budget) {
  const auto& cfg = ckpt_->params.config();
  if (market.n_actions() != cfg.n_actions || market.feature_dim() != cfg.state_dim)
    throw std::invalid_argument("adt policy: model and market disagree on action or state dimensions");
  const int N = market.n_users();
  session_ = std::make_unique<adt::DecodeSession>(ckpt_->params, N);
  const double ctg0 = initial_ctg_target(lambda_, cfg.lambda_buckets, budget, N, ckpt_->ctg_max);
  ctg_.assign(static_cast<std::size_t>(N), ctg0);
  rtg_.assign(static_cast<std::size_t>(N), std::max(ckpt_->rtg_target, ckpt_->rtg_per_cost * ctg0));
  prev_.assign(static_cast<std::size_t>(N), 0);
  lambdas_.assign(static_cast<std::size_t>(N), lambda_);
  logits_ = nullptr;
}

void AdtPolicy::begin_round(int, std::span<const sim::UserState> states) {
  const int N = static_cast<int>(states.size());
  adt::Matrix x(N, ckpt_->params.config().state_dim);
  for (int u = 0; u < N; ++u) {
    auto row = x.row(u);
    std::copy(states[u].features.begin(), states[u].features.end(), row.begin());
    ckpt_->normalizer.apply_in_place(row);
  }
  logits_ = &session_->step(ctg_, rtg_, x, prev_, lambdas_);
}

int AdtPolicy::act(int user, const sim::UserState&, double, Rng&) {
  return adt::argmax_lowest(logits_->row(user));
}

void AdtPolicy::observe(int user, int action, const sim::Response& response) {
  ctg_[user] = std::max(0.0, ctg_[user] - response.cost);
  rtg_[user] = std::max(0.0, rtg_[user] - response.reward);
  prev_[user] = action;
}

DualProblem adt_problem(const sim::Market& market, const adt::Checkpoint& checkpoint) {
  DualProblem p;
  p.market = &market;
  p.make_policy = [&checkpoint](double lambda) -> std::unique_ptr<Policy> {
    return std::make_unique<AdtPolicy>(checkpoint, lambda);
  };
  const auto& cfg = checkpoint.params.config();
  if (cfg.uses_lambda())
    p.outcome_key = [buckets = cfg.lambda_buckets](double lambda) {
      return static_cast<double>(adt::lambda_bucket(lambda, buckets));
    };
  else
    p.outcome_key = [](double) { return 0.0; };
  return p;
}

int greedy_oracle_action(const sim::Market& market, int user, const sim::UserState& state, double lambda) {
  int best = 0;
  double best_v = -INFINITY;
  for (int a = 0; a < market.n_actions(); ++a) {
    const auto e = market.expected(user, state, a);
    const double v = e.reward - lambda * e.cost;
    if (v > best_v) {
      best_v = v;
      best = a;
    }
  }
  return best;
}

int GreedyOraclePolicy::act(int user, const sim::UserState& state, double, Rng&) {
  return greedy_oracle_action(*market_, user, state, lambda_);
}

DualProblem oracle_problem(const sim::Market& market) {
  DualProblem p;
  p.market = &market;
  p.make_policy = [](double lambda) -> std::unique_ptr<Policy> { return std::make_unique<GreedyOraclePolicy>(lambda); };
  return p;
}

}  // namespace coupondt::dual

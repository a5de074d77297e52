#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "coupondt/adt_model.hpp"
#include "coupondt/market.hpp"
#include "coupondt/rollout.hpp"

namespace coupondt::dual {

struct BudgetConfig {
  double budget = 0.0;
  double epsilon = 0.0;  // width of the acceptance band below the budget

  /// Budget as a fraction of c_max with epsilon = epsilon_fraction * budget.
  static BudgetConfig from_fraction(double fraction, double c_max, double epsilon_fraction = 0.02);
  void validate() const;
};

struct DualOptConfig {
  int max_iterations = 20;
  double noise = 0.05;
  /// Dynamic-adjustment step is lr_scale / c_max per unit of (C - B).
  double lr_scale = 1.0;
  int inner_evaluations = 12;
  double epsilon_fraction = 0.02;
  std::uint64_t seed = 17;  // rollout and restart streams

  void validate() const;
  bool operator==(const DualOptConfig&) const = default;
};

/// lambda * max(C - B, 0) - R.
double dual_objective(const PolicyOutcome& outcome, double lambda, double budget);

struct InnerResult {
  double x = 0.0;
  double value = 0.0;
  int evaluations = 0;
};

/// Bounded derivative-free local minimization from `init`: a compass search
/// whose step doubles after an improving move and halves otherwise, stopping
/// at `min_step` or after `eval_budget` evaluations (best point so far is
/// returned). Only strict improvements move the point.
InnerResult inner_minimize(const std::function<double(double)>& objective, double init, double lo = 0.0,
                           double hi = 1.0, int eval_budget = 40, double initial_step = 1e-3,
                           double min_step = 1e-4);

struct TraceRow {
  int iteration = 0;
  double lambda_init = 0.0;
  double lambda_opt = 0.0;
  double revenue = 0.0;
  double cost = 0.0;
  bool feasible = false;
};

struct DualResult {
  double lambda = 0.0;  // lambda*
  PolicyOutcome outcome;  // outcome at lambda* (or of the null policy)
  bool converged = false;
  /// No feasible outcome was found (or the budget is zero); `outcome` is the
  /// null policy's.
  bool infeasible = false;
  int iterations = 0;
  int rollouts = 0;
  std::vector<TraceRow> trace;
};

/// A family of policies indexed by lambda.
struct DualProblem {
  const sim::Market* market = nullptr;
  std::function<std::unique_ptr<Policy>(double lambda)> make_policy;
  /// Optional: lambdas with equal keys produce identical rollouts, so their
  /// outcomes are computed once.
  std::function<double(double lambda)> outcome_key;
};

PolicyOutcome evaluate_lambda(const DualProblem& problem, double lambda, double budget, std::uint64_t seed);

DualResult optimize_lambda(const DualProblem& problem, const BudgetConfig& budget, const DualOptConfig& config);

void write_trace(const std::filesystem::path& path, std::span<const TraceRow> trace);

struct MonotonicityViolation {
  double lambda_a = 0.0;
  double lambda_b = 0.0;
  double revenue_a = 0.0, cost_a = 0.0;
  double revenue_b = 0.0, cost_b = 0.0;
};

struct MonotonicityReport {
  std::vector<double> lambdas;
  std::vector<double> revenue;
  std::vector<double> cost;
  /// Pairs where cost_b > cost_a but revenue_b < revenue_a.
  std::vector<MonotonicityViolation> violations;
};

MonotonicityReport check_monotonicity(const DualProblem& problem, std::span<const double> lambdas, double budget,
                                      std::uint64_t seed);

/// Conditioning schedule for decoding: the initial cost-to-go target is
/// 2 * (1 - lambda_c) * B / N clamped to [0, ctg_max], where lambda_c is the
/// centre of lambda's embedding bucket. lambda = 0.5 asks for the per-user
/// budget share; 0 for twice that; 1 for nothing. The return target is the
/// larger of the checkpoint's rtg_target and rtg_per_cost times this.
double initial_ctg_target(double lambda, int lambda_buckets, double budget, int n_users, double ctg_max);
double lambda_bucket_centre(double lambda, int lambda_buckets);

/// Greedy decoding of a trained checkpoint for all users at once.
class AdtPolicy final : public Policy {
 public:
  AdtPolicy(const adt::Checkpoint& checkpoint, double lambda);

  void reset(const sim::Market& market, double budget) override;
  void begin_round(int round, std::span<const sim::UserState> states) override;
  int act(int user, const sim::UserState& state, double remaining_budget, Rng& rng) override;
  void observe(int user, int action, const sim::Response& response) override;

 private:
  const adt::Checkpoint* ckpt_;
  double lambda_;
  std::unique_ptr<adt::DecodeSession> session_;
  std::vector<double> ctg_;
  std::vector<double> rtg_;
  std::vector<int> prev_;
  std::vector<double> lambdas_;
  const adt::Matrix* logits_ = nullptr;
};

/// Dual problem whose policies decode `checkpoint` on `market`.
DualProblem adt_problem(const sim::Market& market, const adt::Checkpoint& checkpoint);

/// Scores every action by expected reward - lambda' * expected cost with
/// lambda' = lambda; lowest index wins ties.
class GreedyOraclePolicy final : public Policy {
 public:
  explicit GreedyOraclePolicy(double lambda) : lambda_(lambda) {}
  void reset(const sim::Market& market, double) override { market_ = &market; }
  int act(int user, const sim::UserState& state, double remaining_budget, Rng& rng) override;

 private:
  double lambda_;
  const sim::Market* market_ = nullptr;
};

int greedy_oracle_action(const sim::Market& market, int user, const sim::UserState& state, double lambda);

DualProblem oracle_problem(const sim::Market& market);

}  // namespace coupondt::dual

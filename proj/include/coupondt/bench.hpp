#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "coupondt/adt_model.hpp"
#include "coupondt/dualopt.hpp"
#include "coupondt/market.hpp"
#include "coupondt/rollout.hpp"

namespace coupondt::bench {

struct Metrics {
  double revenue = 0.0;
  double cost = 0.0;
  std::optional<double> roi;  // (R - C) / C, absent when C = 0
  double barate = 0.0;        // C / B
};

Metrics compute_metrics(double revenue, double cost, double budget);
Metrics compute_metrics(const dual::PolicyOutcome& outcome, double budget);

/// Beta-Bernoulli posterior over each arm's response probability plus running
/// means of reward (per response) and cost (per pull).
class BanditState {
 public:
  /// `face_values[k]` stands in for the mean cost of arm k until it is pulled.
  explicit BanditState(std::vector<double> face_values);

  int n_arms() const { return static_cast<int>(face_.size()); }
  double alpha(int k) const { return alpha_.at(k); }
  double beta(int k) const { return beta_.at(k); }
  long pulls(int k) const { return pulls_.at(k); }
  /// 1 before the first response, so an untried arm is scored by p alone.
  double mean_reward(int k) const;
  double mean_cost(int k) const;

  void update(int arm, bool responded, double reward, double cost);

 private:
  std::vector<double> face_;
  std::vector<double> alpha_, beta_;
  std::vector<long> pulls_, responses_;
  std::vector<double> reward_sum_, cost_sum_;
};

/// Samples p_k ~ Beta(alpha_k, beta_k) and returns the arm maximizing
/// p_k * mean_reward(k) among arms with mean_cost(k) <= remaining. Arm 0 is
/// always eligible; no other arm is once the budget is spent.
int thompson_action(const BanditState& state, double remaining_budget, Rng& rng);

double sample_beta(double a, double b, Rng& rng);

/// Context-free Thompson sampling shared across the population.
class ThompsonPolicy final : public dual::Policy {
 public:
  void reset(const sim::Market& market, double budget) override;
  int act(int user, const sim::UserState& state, double remaining_budget, Rng& rng) override;
  void observe(int user, int action, const sim::Response& response) override;
  const BanditState& state() const { return *state_; }

 private:
  std::optional<BanditState> state_;
};

int random_action(int n_actions, Rng& rng);

class RandomPolicy final : public dual::Policy {
 public:
  void reset(const sim::Market& market, double) override { n_actions_ = market.n_actions(); }
  int act(int, const sim::UserState&, double, Rng& rng) override { return random_action(n_actions_, rng); }

 private:
  int n_actions_ = 1;
};

/// Greedy oracle family for benchmarking: lambda in [0, 1) prices cost at
/// lambda / (1 - lambda), so the whole range of margins can be priced out.
dual::DualProblem priced_oracle_problem(const sim::Market& market);
double oracle_price(double lambda);

/// Smallest lambda (to bisection precision) whose rollout cost is within the
/// budget, for families whose cost does not increase with lambda. `converged`
/// reports whether that cost lies in the band (B - epsilon, B].
dual::DualResult calibrate_by_bisection(const dual::DualProblem& problem, const dual::BudgetConfig& budget,
                                       std::uint64_t seed, int iterations = 30);

struct BudgetLevel {
  std::string name;
  std::vector<double> fractions;  // of c_max
  bool operator==(const BudgetLevel&) const = default;
};

std::vector<BudgetLevel> default_levels();

struct BenchmarkPlan {
  std::vector<BudgetLevel> levels = default_levels();
  int n_seeds = 3;
  /// Any of adt, thompson, random, oracle, null.
  std::vector<std::string> policies{"adt", "thompson", "random", "oracle", "null"};
  /// Reference policy for revenue differences in plotdata.tsv.
  std::string baseline = "thompson";
  /// Users (from the front of the population) on which lambda is tuned for
  /// the adt and oracle policies; the budget is scaled to their share.
  int calibration_users = 1000;
  std::uint64_t seed = 29;

  void validate() const;
  bool operator==(const BenchmarkPlan&) const = default;
};

struct BenchmarkArtifacts {
  const adt::Checkpoint* checkpoint = nullptr;  // required when the plan has adt
  dual::DualOptConfig dual;
};

struct ReportRow {
  std::string policy;
  std::string level;
  double fraction = 0.0;
  int seed = 0;
  double budget = 0.0;
  std::optional<double> lambda;
  Metrics metrics;
};

/// One lambda search run while tuning a benchmark cell: the dual loop for adt,
/// bisection for the oracle.
struct CalibrationRow {
  std::string policy;
  std::string level;
  double fraction = 0.0;
  int seed = 0;
  double budget = 0.0;
  double lambda = 0.0;
  double revenue = 0.0;
  double cost = 0.0;
  double epsilon = 0.0;
  bool converged = false;
  bool infeasible = false;
  int iterations = 0;
};

struct BenchmarkReport {
  std::vector<ReportRow> rows;
  std::vector<CalibrationRow> calibrations;
};

/// Runs every (level, fraction, seed, policy) cell on `market` with the hard
/// budget stop.
BenchmarkReport run_benchmark(const sim::Market& market, const BenchmarkPlan& plan,
                              const BenchmarkArtifacts& artifacts);

struct SummaryRow {
  std::string policy;
  std::string level;
  double fraction = 0.0;
  int n_seeds = 0;
  double revenue = 0.0;
  double cost = 0.0;
  std::optional<double> roi;  // mean over seeds with C > 0
  double barate = 0.0;
};

/// Per-(policy, level, fraction) means, in first-appearance order.
std::vector<SummaryRow> summarize(std::span<const ReportRow> rows);

/// Mean revenue per (policy, level) over fractions and seeds.
std::map<std::pair<std::string, std::string>, double> level_revenue(std::span<const ReportRow> rows);

/// Writes report.tsv, summary.tsv, plotdata.tsv and calibration.tsv.
void write_report(const std::filesystem::path& dir, const BenchmarkReport& report, const std::string& baseline);

struct AblationPlan {
  std::vector<BudgetLevel> levels{{"Low", {0.15}}, {"Medium", {0.4}}, {"High", {0.7}}};
  int n_seeds = 3;
  int n_users = 2000;
  std::uint64_t seed = 31;

  void validate() const;
  bool operator==(const AblationPlan&) const = default;
};

struct AblationRow {
  std::string variant;
  std::string level;
  double fraction = 0.0;
  int seed = 0;
  double budget = 0.0;
  std::optional<double> lambda;  // absent for checkpoints without a lambda input
  double revenue = 0.0;
  double cost = 0.0;
  bool converged = false;
  bool infeasible = false;
};

/// For each named checkpoint, budget and seed: checkpoints that take lambda
/// are dual-optimized on the ablation population; others are rolled out once
/// without any budget stop. Rows depend only on the checkpoints, not on their
/// names.
std::vector<AblationRow> run_ablation(const sim::Environment& env, const AblationPlan& plan,
                                      const std::vector<std::pair<std::string, const adt::Checkpoint*>>& variants,
                                      const dual::DualOptConfig& dual);

void write_ablation(const std::filesystem::path& path, std::span<const AblationRow> rows);

struct LatencyStats {
  int n = 0;
  double median_ms = 0.0;
  double p95_ms = 0.0;
  double mean_ms = 0.0;
  std::vector<double> samples_ms;
};

/// Nearest-rank percentile of unsorted samples, q in (0, 1].
double percentile(std::vector<double> samples, double q);

/// Times single-user, single-step predict_action with a full context window.
LatencyStats time_inference(const adt::Checkpoint& checkpoint, int n_repeats, int warmup = 10,
                            std::uint64_t seed = 1);

void write_latency(const std::filesystem::path& path, const LatencyStats& stats);

}  // namespace coupondt::bench

#include "coupondt/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <set>
#include <stdexcept>

#include "coupondt/datapipe.hpp"

namespace coupondt::bench {

using data::format_real;

Metrics compute_metrics(double revenue, double cost, double budget) {
  if (!(budget > 0.0)) throw std::invalid_argument("metrics: budget must be > 0");
  Metrics m;
  m.revenue = revenue;
  m.cost = cost;
  if (cost > 0.0) m.roi = (revenue - cost) / cost;
  m.barate = cost / budget;
  return m;
}

Metrics compute_metrics(const dual::PolicyOutcome& outcome, double budget) {
  return compute_metrics(outcome.revenue, outcome.cost, budget);
}

BanditState::BanditState(std::vector<double> face_values) : face_(std::move(face_values)) {
  if (face_.empty()) throw std::invalid_argument("bandit: need at least one arm");
  const std::size_t k = face_.size();
  alpha_.assign(k, 1.0);
  beta_.assign(k, 1.0);
  pulls_.assign(k, 0);
  responses_.assign(k, 0);
  reward_sum_.assign(k, 0.0);
  cost_sum_.assign(k, 0.0);
}

double BanditState::mean_reward(int k) const {
  return responses_.at(k) > 0 ? reward_sum_[k] / static_cast<double>(responses_[k]) : 1.0;
}

double BanditState::mean_cost(int k) const {
  return pulls_.at(k) > 0 ? cost_sum_[k] / static_cast<double>(pulls_[k]) : face_[k];
}

void BanditState::update(int arm, bool responded, double reward, double cost) {
  if (arm < 0 || arm >= n_arms()) throw std::out_of_range("bandit: arm " + std::to_string(arm) + " out of range");
  (responded ? alpha_ : beta_)[arm] += 1.0;
  ++pulls_[arm];
  if (responded) ++responses_[arm];
  reward_sum_[arm] += reward;
  cost_sum_[arm] += cost;
}

double sample_beta(double a, double b, Rng& rng) {
  std::gamma_distribution<double> ga(a, 1.0);
  std::gamma_distribution<double> gb(b, 1.0);
  const double x = ga(rng);
  const double y = gb(rng);
  return x / (x + y);
}

int thompson_action(const BanditState& state, double remaining_budget, Rng& rng) {
  int best = 0;
  double best_score = -std::numeric_limits<double>::infinity();
  for (int k = 0; k < state.n_arms(); ++k) {
    // Draw for every arm so the stream advances the same way whatever is eligible.
    const double p = sample_beta(state.alpha(k), state.beta(k), rng);
    const bool eligible = k == 0 || (remaining_budget > 0.0 && state.mean_cost(k) <= remaining_budget);
    if (!eligible) continue;
    const double score = p * state.mean_reward(k);
    if (score > best_score) {
      best_score = score;
      best = k;
    }
  }
  return best;
}

void ThompsonPolicy::reset(const sim::Market& market, double) {
  std::vector<double> faces(static_cast<std::size_t>(market.n_actions()));
  for (int a = 0; a < market.n_actions(); ++a) faces[a] = market.face_value(a);
  state_.emplace(std::move(faces));
}

int ThompsonPolicy::act(int, const sim::UserState&, double remaining_budget, Rng& rng) {
  return thompson_action(*state_, remaining_budget, rng);
}

void ThompsonPolicy::observe(int, int action, const sim::Response& response) {
  state_->update(action, response.responded, response.reward, response.cost);
}

int random_action(int n_actions, Rng& rng) {
  return std::min(n_actions - 1, static_cast<int>(uniform01(rng) * n_actions));
}

double oracle_price(double lambda) {
  if (lambda >= 1.0) return std::numeric_limits<double>::max();
  return lambda / (1.0 - lambda);
}

dual::DualProblem priced_oracle_problem(const sim::Market& market) {
  dual::DualProblem p;
  p.market = &market;
  p.make_policy = [](double lambda) -> std::unique_ptr<dual::Policy> {
    return std::make_unique<dual::GreedyOraclePolicy>(oracle_price(lambda));
  };
  return p;
}

dual::DualResult calibrate_by_bisection(const dual::DualProblem& problem, const dual::BudgetConfig& budget,
                                       std::uint64_t seed, int iterations) {
  budget.validate();
  dual::DualResult res;
  auto eval = [&](double lambda) {
    ++res.rollouts;
    return dual::evaluate_lambda(problem, lambda, budget.budget, seed);
  };
  double lo = 0.0;
  double hi = 1.0;
  dual::PolicyOutcome best = eval(hi);
  res.lambda = hi;
  if (best.cost > budget.budget) {
    res.infeasible = true;
    res.outcome = std::move(best);
    return res;
  }
  if (auto o = eval(lo); o.cost <= budget.budget) {
    res.lambda = lo;
    best = std::move(o);
  } else {
    for (int i = 0; i < iterations; ++i, ++res.iterations) {
      const double mid = 0.5 * (lo + hi);
      auto o = eval(mid);
      if (o.cost <= budget.budget) {
        hi = mid;
        best = std::move(o);
        res.lambda = mid;
      } else {
        lo = mid;
      }
    }
  }
  res.outcome = std::move(best);
  res.converged = res.outcome.cost > budget.budget - budget.epsilon;
  return res;
}

std::vector<BudgetLevel> default_levels() {
  return {{"Low", {0.10, 0.15, 0.20}}, {"Medium", {0.30, 0.40, 0.50}}, {"High", {0.60, 0.70, 0.80}}};
}

namespace {

const std::set<std::string> kPolicies{"adt", "thompson", "random", "oracle", "null"};

void validate_levels(const std::vector<BudgetLevel>& levels, const char* who) {
  for (const auto& l : levels) {
    if (l.name.empty()) throw std::invalid_argument(std::string(who) + ": budget level needs a name");
    if (l.fractions.empty()) throw std::invalid_argument(std::string(who) + ": level " + l.name + " has no fractions");
    for (double f : l.fractions)
      if (!(f > 0.0 && f <= 1.0))
        throw std::invalid_argument(std::string(who) + ": budget fraction " + format_real(f) + " outside (0, 1]");
  }
}

/// The first n users of another market.
class SubMarket final : public sim::Market {
 public:
  SubMarket(const sim::Market& base, int n) : base_(&base), n_(std::min(n, base.n_users())) {}
  int n_users() const override { return n_; }
  int horizon() const override { return base_->horizon(); }
  int n_actions() const override { return base_->n_actions(); }
  int feature_dim() const override { return base_->feature_dim(); }
  double face_value(int a) const override { return base_->face_value(a); }
  sim::UserState initial_state(int u) const override { return base_->initial_state(u); }
  sim::Response step(int u, const sim::UserState& s, int a, Rng& rng) const override {
    return base_->step(u, s, a, rng);
  }
  sim::ExpectedResponse expected(int u, const sim::UserState& s, int a) const override {
    return base_->expected(u, s, a);
  }

 private:
  const sim::Market* base_;
  int n_;
};

std::string format_optional(const std::optional<double>& v) { return v ? format_real(*v) : "NA"; }

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
  return out;
}

}  // namespace

void BenchmarkPlan::validate() const {
  validate_levels(levels, "bench");
  if (n_seeds < 1) throw std::invalid_argument("bench: n_seeds must be >= 1");
  for (const auto& p : policies)
    if (!kPolicies.count(p)) throw std::invalid_argument("bench: unknown policy '" + p + "'");
  if (calibration_users < 1) throw std::invalid_argument("bench: calibration_users must be >= 1");
}

BenchmarkReport run_benchmark(const sim::Market& market, const BenchmarkPlan& plan,
                              const BenchmarkArtifacts& artifacts) {
  plan.validate();
  artifacts.dual.validate();
  const bool wants_adt = std::find(plan.policies.begin(), plan.policies.end(), "adt") != plan.policies.end();
  if (wants_adt && !artifacts.checkpoint) throw std::invalid_argument("bench: the adt policy needs a checkpoint");

  BenchmarkReport report;
  if (plan.policies.empty()) return report;

  const SubMarket calibration(market, plan.calibration_users);
  std::uint64_t cell = 0;
  for (const auto& level : plan.levels) {
    for (double fraction : level.fractions) {
      const double budget = fraction * market.c_max();
      const auto cal_budget =
          dual::BudgetConfig::from_fraction(fraction, calibration.c_max(), artifacts.dual.epsilon_fraction);
      for (int s = 0; s < plan.n_seeds; ++s, ++cell) {
        const std::uint64_t rollout_seed = derive_seed(plan.seed, "bench.rollout", static_cast<std::uint64_t>(s));
        dual::DualOptConfig dual_cfg = artifacts.dual;
        dual_cfg.seed = derive_seed(plan.seed, "bench.dual", cell);

        for (const auto& name : plan.policies) {
          std::unique_ptr<dual::Policy> policy;
          std::optional<double> lambda;
          if (name == "adt") {
            const auto res = dual::optimize_lambda(dual::adt_problem(calibration, *artifacts.checkpoint), cal_budget,
                                                   dual_cfg);
            report.calibrations.push_back({name, level.name, fraction, s, cal_budget.budget, res.lambda,
                                           res.outcome.revenue, res.outcome.cost, cal_budget.epsilon, res.converged,
                                           res.infeasible, res.iterations});
            lambda = res.lambda;
            policy = std::make_unique<dual::AdtPolicy>(*artifacts.checkpoint, res.lambda);
          } else if (name == "oracle") {
            const auto res = calibrate_by_bisection(priced_oracle_problem(calibration), cal_budget,
                                                    derive_seed(dual_cfg.seed, "dual.rollout"));
            report.calibrations.push_back({name, level.name, fraction, s, cal_budget.budget, res.lambda,
                                           res.outcome.revenue, res.outcome.cost, cal_budget.epsilon, res.converged,
                                           res.infeasible, res.iterations});
            lambda = res.lambda;
            policy = std::make_unique<dual::GreedyOraclePolicy>(oracle_price(res.lambda));
          } else if (name == "thompson") {
            policy = std::make_unique<ThompsonPolicy>();
          } else if (name == "random") {
            policy = std::make_unique<RandomPolicy>();
          } else {
            policy = std::make_unique<dual::NullPolicy>();
          }
          const auto outcome = dual::rollout(market, *policy, {budget, true, rollout_seed});
          report.rows.push_back({name, level.name, fraction, s, budget, lambda, compute_metrics(outcome, budget)});
        }
      }
    }
  }
  return report;
}

std::vector<SummaryRow> summarize(std::span<const ReportRow> rows) {
  struct Acc {
    SummaryRow row;
    double roi_sum = 0.0;
    int roi_n = 0;
  };
  std::vector<Acc> cells;
  for (const auto& r : rows) {
    auto it = std::find_if(cells.begin(), cells.end(), [&](const Acc& a) {
      return a.row.policy == r.policy && a.row.level == r.level && a.row.fraction == r.fraction;
    });
    if (it == cells.end()) {
      cells.push_back({});
      it = cells.end() - 1;
      it->row.policy = r.policy;
      it->row.level = r.level;
      it->row.fraction = r.fraction;
    }
    ++it->row.n_seeds;
    it->row.revenue += r.metrics.revenue;
    it->row.cost += r.metrics.cost;
    it->row.barate += r.metrics.barate;
    if (r.metrics.roi) {
      it->roi_sum += *r.metrics.roi;
      ++it->roi_n;
    }
  }
  std::vector<SummaryRow> out;
  for (auto& a : cells) {
    const double n = a.row.n_seeds;
    a.row.revenue /= n;
    a.row.cost /= n;
    a.row.barate /= n;
    if (a.roi_n > 0) a.row.roi = a.roi_sum / a.roi_n;
    out.push_back(a.row);
  }
  return out;
}

std::map<std::pair<std::string, std::string>, double> level_revenue(std::span<const ReportRow> rows) {
  std::map<std::pair<std::string, std::string>, std::pair<double, int>> acc;
  for (const auto& r : rows) {
    auto& a = acc[{r.policy, r.level}];
    a.first += r.metrics.revenue;
    ++a.second;
  }
  std::map<std::pair<std::string, std::string>, double> out;
  for (const auto& [k, v] : acc) out[k] = v.first / v.second;
  return out;
}

void write_report(const std::filesystem::path& dir, const BenchmarkReport& report, const std::string& baseline) {
  std::filesystem::create_directories(dir);
  {
    auto out = open_out(dir / "report.tsv");
    out << "policy\tlevel\tbudget_fraction\tseed\trevenue\tcost\troi\tbarate\n";
    for (const auto& r : report.rows)
      out << r.policy << '\t' << r.level << '\t' << format_real(r.fraction) << '\t' << r.seed << '\t'
          << format_real(r.metrics.revenue) << '\t' << format_real(r.metrics.cost) << '\t'
          << format_optional(r.metrics.roi) << '\t' << format_real(r.metrics.barate) << '\n';
  }
  const auto summary = summarize(report.rows);
  {
    auto out = open_out(dir / "summary.tsv");
    out << "policy\tlevel\tbudget_fraction\tn_seeds\trevenue\tcost\troi\tbarate\n";
    for (const auto& r : summary)
      out << r.policy << '\t' << r.level << '\t' << format_real(r.fraction) << '\t' << r.n_seeds << '\t'
          << format_real(r.revenue) << '\t' << format_real(r.cost) << '\t' << format_optional(r.roi) << '\t'
          << format_real(r.barate) << '\n';
  }
  {
    auto out = open_out(dir / "plotdata.tsv");
    out << "level\tbudget_fraction\tpolicy\trevenue\tbaseline\tbaseline_revenue\trevenue_diff\trevenue_diff_pct\n";
    for (const auto& r : summary) {
      auto base = std::find_if(summary.begin(), summary.end(), [&](const SummaryRow& b) {
        return b.policy == baseline && b.level == r.level && b.fraction == r.fraction;
      });
      std::optional<double> base_rev, diff, pct;
      if (base != summary.end()) {
        base_rev = base->revenue;
        diff = r.revenue - base->revenue;
        if (base->revenue != 0.0) pct = 100.0 * *diff / base->revenue;
      }
      out << r.level << '\t' << format_real(r.fraction) << '\t' << r.policy << '\t' << format_real(r.revenue) << '\t'
          << baseline << '\t' << format_optional(base_rev) << '\t' << format_optional(diff) << '\t'
          << format_optional(pct) << '\n';
    }
  }
  {
    auto out = open_out(dir / "calibration.tsv");
    out << "policy\tlevel\tbudget_fraction\tseed\tbudget\tepsilon\tlambda\trevenue\tcost\tconverged\tinfeasible\t"
           "iterations\n";
    for (const auto& c : report.calibrations)
      out << c.policy << '\t' << c.level << '\t' << format_real(c.fraction) << '\t' << c.seed << '\t'
          << format_real(c.budget) << '\t' << format_real(c.epsilon) << '\t' << format_real(c.lambda) << '\t'
          << format_real(c.revenue) << '\t' << format_real(c.cost) << '\t' << (c.converged ? 1 : 0) << '\t'
          << (c.infeasible ? 1 : 0) << '\t' << c.iterations << '\n';
  }
}

void AblationPlan::validate() const {
  validate_levels(levels, "ablation");
  if (n_seeds < 1) throw std::invalid_argument("ablation: n_seeds must be >= 1");
  if (n_users < 1) throw std::invalid_argument("ablation: n_users must be >= 1");
}

std::vector<AblationRow> run_ablation(const sim::Environment& env, const AblationPlan& plan,
                                      const std::vector<std::pair<std::string, const adt::Checkpoint*>>& variants,
                                      const dual::DualOptConfig& dual_config) {
  plan.validate();
  dual_config.validate();
  const sim::SimulatedMarket market(env, plan.n_users);
  std::vector<AblationRow> rows;
  for (const auto& [name, ckpt] : variants) {
    if (!ckpt) throw std::invalid_argument("ablation: missing checkpoint for variant " + name);
    const bool dual_optimized = ckpt->params.config().uses_lambda();
    std::uint64_t cell = 0;
    for (const auto& level : plan.levels) {
      for (double fraction : level.fractions) {
        const auto budget = dual::BudgetConfig::from_fraction(fraction, market.c_max(), dual_config.epsilon_fraction);
        for (int s = 0; s < plan.n_seeds; ++s, ++cell) {
          AblationRow row;
          row.variant = name;
          row.level = level.name;
          row.fraction = fraction;
          row.seed = s;
          row.budget = budget.budget;
          if (dual_optimized) {
            dual::DualOptConfig cfg = dual_config;
            cfg.seed = derive_seed(plan.seed, "ablation.dual", cell);
            const auto res = dual::optimize_lambda(dual::adt_problem(market, *ckpt), budget, cfg);
            row.lambda = res.lambda;
            row.revenue = res.outcome.revenue;
            row.cost = res.outcome.cost;
            row.converged = res.converged;
            row.infeasible = res.infeasible;
          } else {
            dual::AdtPolicy policy(*ckpt, 0.5);
            const auto o = dual::rollout(
                market, policy,
                {budget.budget, false, derive_seed(plan.seed, "ablation.rollout", static_cast<std::uint64_t>(s))});
            row.revenue = o.revenue;
            row.cost = o.cost;
          }
          rows.push_back(row);
        }
      }
    }
  }
  return rows;
}

void write_ablation(const std::filesystem::path& path, std::span<const AblationRow> rows) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto out = open_out(path);
  out << "variant\tlevel\tbudget_fraction\tseed\tbudget\tlambda\trevenue\tcost\tbarate\tconverged\tinfeasible\n";
  for (const auto& r : rows)
    out << r.variant << '\t' << r.level << '\t' << format_real(r.fraction) << '\t' << r.seed << '\t'
        << format_real(r.budget) << '\t' << format_optional(r.lambda) << '\t' << format_real(r.revenue) << '\t'
        << format_real(r.cost) << '\t' << format_real(r.budget > 0.0 ? r.cost / r.budget : 0.0) << '\t'
        << (r.converged ? 1 : 0) << '\t' << (r.infeasible ? 1 : 0) << '\n';
}

double percentile(std::vector<double> samples, double q) {
  if (samples.empty()) throw std::invalid_argument("percentile: no samples");
  if (!(q > 0.0 && q <= 1.0)) throw std::invalid_argument("percentile: q must lie in (0, 1]");
  std::sort(samples.begin(), samples.end());
  const auto rank = static_cast<std::size_t>(std::ceil(q * static_cast<double>(samples.size())));
  return samples[std::max<std::size_t>(rank, 1) - 1];
}

LatencyStats time_inference(const adt::Checkpoint& checkpoint, int n_repeats, int warmup, std::uint64_t seed) {
  if (n_repeats < 1) throw std::invalid_argument("time: n_repeats must be >= 1");
  const auto& cfg = checkpoint.params.config();
  Rng rng = make_rng(seed, "bench.timing");
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<adt::HistoryStep> history(static_cast<std::size_t>(std::max(0, cfg.window_len - 1)));
  for (auto& h : history) {
    h.state.resize(cfg.state_dim);
    for (double& x : h.state) x = normal(rng);
    h.action = random_action(cfg.n_actions, rng);
    h.rtg = checkpoint.rtg_target * uniform01(rng);
    h.ctg = checkpoint.ctg_max * uniform01(rng);
  }
  std::vector<double> state(static_cast<std::size_t>(cfg.state_dim));
  for (double& x : state) x = normal(rng);

  int sink = 0;
  auto once = [&] {
    sink += adt::predict_action(checkpoint.params, history, state, checkpoint.rtg_target, checkpoint.ctg_max, 0.5);
  };
  for (int i = 0; i < warmup; ++i) once();

  LatencyStats st;
  st.n = n_repeats;
  st.samples_ms.reserve(static_cast<std::size_t>(n_repeats));
  for (int i = 0; i < n_repeats; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    once();
    const auto t1 = std::chrono::steady_clock::now();
    st.samples_ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  std::vector<double> sorted = st.samples_ms;
  std::sort(sorted.begin(), sorted.end());
  const std::size_t n = sorted.size();
  st.median_ms = n % 2 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
  st.p95_ms = percentile(sorted, 0.95);
  st.mean_ms = std::accumulate(sorted.begin(), sorted.end(), 0.0) / static_cast<double>(n);
  if (sink < 0) st.mean_ms = -1.0;  // keeps the calls observable
  return st;
}

void write_latency(const std::filesystem::path& path, const LatencyStats& stats) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto out = open_out(path);
  out << "n\t" << stats.n << "\nmedian_ms\t" << format_real(stats.median_ms) << "\np95_ms\t"
      << format_real(stats.p95_ms) << "\nmean_ms\t" << format_real(stats.mean_ms) << '\n';
}

}  // namespace coupondt::bench

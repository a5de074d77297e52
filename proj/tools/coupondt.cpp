#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "coupondt/bench.hpp"
#include "coupondt/config.hpp"
#include "coupondt/datapipe.hpp"
#include "coupondt/dualopt.hpp"
#include "coupondt/market.hpp"
#include "coupondt/pipeline.hpp"
#include "coupondt/simenv.hpp"
#include "coupondt/trainer.hpp"

namespace fs = std::filesystem;
using namespace coupondt;

namespace {

struct Common {
  std::string config_path;
  std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config_path, "Config file (defaults when omitted)");
  cmd->add_option("--seed", c.seed, "Override the global seed");
}

config::RunConfig load(const Common& c) {
  config::RunConfig cfg = c.config_path.empty() ? config::default_config() : config::load_config(c.config_path);
  if (c.seed) {
    cfg.seed = *c.seed;
    config::apply_global_seed(cfg);
  }
  return cfg;
}

std::ofstream open_out(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
  return out;
}

adt::Checkpoint load_ckpt(const std::string& path) {
  if (!fs::exists(path)) throw std::runtime_error("checkpoint not found: '" + path + "'");
  return adt::load_checkpoint(path);
}

int gen_data(const config::RunConfig& cfg, const std::string& out) {
  const sim::Environment env(cfg.env);
  const auto records = sim::log_uniform_policy(env, config::logging_seed(cfg));
  if (fs::path(out).has_parent_path()) fs::create_directories(fs::path(out).parent_path());
  data::write_dataset(out, records, cfg.env.feature_dim);
  std::cerr << "wrote " << records.size() << " records to " << out << "\n";
  return 0;
}

int train_cmd(config::RunConfig cfg, const std::string& dataset, std::string out, const std::string& variant) {
  if (!variant.empty()) cfg.model.variant = adt::parse_variant(variant);
  if (out.empty()) {
    switch (cfg.model.variant) {
      case adt::Variant::full: out = cfg.paths.checkpoint; break;
      case adt::Variant::no_rtg: out = cfg.paths.checkpoint_no_rtg; break;
      case adt::Variant::no_constraint: out = cfg.paths.checkpoint_no_constraint; break;
    }
  }
  if (!fs::exists(dataset)) throw std::runtime_error("dataset not found: '" + dataset + "'");
  const auto records = data::read_dataset(dataset);
  const auto prepared = pipeline::prepare(records, cfg.pipe);
  std::cerr << "training on " << prepared.train.size() << " trajectories (" << prepared.test.size()
            << " held out)\n";

  fs::create_directories(out);
  auto log = open_out(fs::path(out) / "loss.tsv");
  log << "epoch\tloss\n";
  const auto result = train::train(prepared.train, cfg.model, cfg.train,
                                   [&](int epoch, double loss, const train::TrainResult& progress) {
                                     log << epoch << '\t' << data::format_real(loss) << '\n';
                                     log.flush();
                                     std::cerr << "epoch " << epoch << " loss " << loss << "\n";
                                     const int every = cfg.train.checkpoint_every;
                                     if (every > 0 && epoch % every == 0 && epoch < cfg.train.n_epochs)
                                       adt::save_checkpoint(pipeline::to_checkpoint(progress),
                                                            fs::path(out) / ("epoch_" + std::to_string(epoch)));
                                   });
  adt::save_checkpoint(pipeline::to_checkpoint(result), out);
  std::cerr << "checkpoint written to " << out << "\n";
  return 0;
}

int optimize_cmd(const config::RunConfig& cfg, const std::string& ckpt_path, std::optional<double> fraction,
                 const std::string& out_dir, bool logged) {
  const auto ckpt = load_ckpt(ckpt_path);
  const sim::Environment env(cfg.env);
  std::unique_ptr<sim::Market> market;
  if (logged) {
    if (!fs::exists(cfg.paths.dataset)) throw std::runtime_error("dataset not found: '" + cfg.paths.dataset + "'");
    market = std::make_unique<sim::LoggedMarket>(data::read_dataset(cfg.paths.dataset));
  } else {
    market = std::make_unique<sim::SimulatedMarket>(env);
  }
  const double f = fraction.value_or(cfg.budget_fraction);
  const auto budget = dual::BudgetConfig::from_fraction(f, market->c_max(), cfg.dual.epsilon_fraction);
  const auto res = dual::optimize_lambda(dual::adt_problem(*market, ckpt), budget, cfg.dual);

  fs::create_directories(out_dir);
  dual::write_trace(fs::path(out_dir) / "trace.tsv", res.trace);
  auto out = open_out(fs::path(out_dir) / "result.tsv");
  out << "lambda\trevenue\tcost\tbudget\tconverged\tinfeasible\titerations\n"
      << data::format_real(res.lambda) << '\t' << data::format_real(res.outcome.revenue) << '\t'
      << data::format_real(res.outcome.cost) << '\t' << data::format_real(budget.budget) << '\t'
      << (res.converged ? 1 : 0) << '\t' << (res.infeasible ? 1 : 0) << '\t' << res.iterations << '\n';
  if (res.infeasible) std::cerr << "warning: no feasible allocation found; reporting the null policy\n";
  std::cerr << "lambda* " << res.lambda << " R " << res.outcome.revenue << " C " << res.outcome.cost << " B "
            << budget.budget << "\n";
  return 0;
}

int evaluate_cmd(const config::RunConfig& cfg, const std::string& ckpt_path, const std::string& out_dir) {
  std::optional<adt::Checkpoint> ckpt;
  const bool wants_adt =
      std::find(cfg.bench.policies.begin(), cfg.bench.policies.end(), "adt") != cfg.bench.policies.end();
  if (wants_adt) ckpt = load_ckpt(ckpt_path);
  const sim::Environment env(cfg.env);
  const sim::SimulatedMarket market(env);
  const auto report = bench::run_benchmark(market, cfg.bench, {ckpt ? &*ckpt : nullptr, cfg.dual});
  bench::write_report(out_dir, report, cfg.bench.baseline);
  std::cerr << "wrote " << report.rows.size() << " rows to " << out_dir << "\n";
  return 0;
}

int ablate_cmd(const config::RunConfig& cfg, const std::string& out_path) {
  const auto full = load_ckpt(cfg.paths.checkpoint);
  const auto no_constraint = load_ckpt(cfg.paths.checkpoint_no_constraint);
  const auto no_rtg = load_ckpt(cfg.paths.checkpoint_no_rtg);
  const sim::Environment env(cfg.env);
  const auto rows = bench::run_ablation(
      env, cfg.ablation, {{"full", &full}, {"no_constraint", &no_constraint}, {"no_rtg", &no_rtg}}, cfg.dual);
  bench::write_ablation(out_path, rows);
  std::cerr << "wrote " << rows.size() << " rows to " << out_path << "\n";
  return 0;
}

int time_cmd(const config::RunConfig& cfg, const std::string& ckpt_path, std::optional<int> repeats,
             const std::string& out_path) {
  const auto ckpt = load_ckpt(ckpt_path);
  const auto st = bench::time_inference(ckpt, repeats.value_or(cfg.timing_repeats));
  bench::write_latency(out_path, st);
  std::cerr << "median " << st.median_ms << " ms, p95 " << st.p95_ms << " ms over " << st.n << " calls\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Budget-constrained coupon allocation with a constraint-conditioned decision transformer"};
  app.require_subcommand(1);

  Common common;
  std::string out, dataset, checkpoint, variant;
  std::optional<double> fraction;
  std::optional<int> repeats;
  bool logged = false;

  auto* cfg_cmd = app.add_subcommand("config", "Print the effective configuration");
  add_common(cfg_cmd, common);
  cfg_cmd->add_option("--out", out, "Write to a file instead of stdout");

  auto* gen = app.add_subcommand("gen-data", "Log the uniform policy through the simulator");
  add_common(gen, common);
  gen->add_option("--out", out, "Dataset path (default: paths.dataset)");

  auto* tr = app.add_subcommand("train", "Train a checkpoint from a logged dataset");
  add_common(tr, common);
  tr->add_option("--dataset", dataset, "Dataset path (default: paths.dataset)");
  tr->add_option("--out", out, "Checkpoint directory (default: by variant from [paths])");
  tr->add_option("--variant", variant, "Model variant")->check(CLI::IsMember({"full", "no_constraint", "no_rtg"}));

  auto* opt = app.add_subcommand("optimize", "Search the dual variable for one budget");
  add_common(opt, common);
  opt->add_option("--checkpoint", checkpoint, "Checkpoint directory (default: paths.checkpoint)");
  opt->add_option("--budget-fraction", fraction, "Budget as a fraction of C_max (default: dual.budget_fraction)");
  opt->add_option("--out", out, "Output directory (default: <paths.reports>/optimize)");
  opt->add_flag("--logged", logged, "Answer allocations from the logged dataset instead of the simulator");

  auto* ev = app.add_subcommand("evaluate", "Run the budget-level benchmark");
  add_common(ev, common);
  ev->add_option("--checkpoint", checkpoint, "Checkpoint directory (default: paths.checkpoint)");
  ev->add_option("--out", out, "Report directory (default: paths.reports)");

  auto* ab = app.add_subcommand("ablate", "Compare the full, no_constraint and no_rtg checkpoints");
  add_common(ab, common);
  ab->add_option("--out", out, "Output file (default: <paths.reports>/ablation.tsv)");

  auto* tm = app.add_subcommand("time", "Measure single-user inference latency");
  add_common(tm, common);
  tm->add_option("--checkpoint", checkpoint, "Checkpoint directory (default: paths.checkpoint)");
  tm->add_option("--repeats", repeats, "Timed calls (default: bench.timing_repeats)");
  tm->add_option("--out", out, "Output file (default: <paths.reports>/latency.tsv)");

  CLI11_PARSE(app, argc, argv);

  try {
    const auto cfg = load(common);
    const auto reports = fs::path(cfg.paths.reports);
    const std::string ckpt = checkpoint.empty() ? cfg.paths.checkpoint : checkpoint;
    if (*cfg_cmd) {
      const auto text = config::serialize_config(cfg);
      if (out.empty())
        std::cout << text;
      else
        open_out(out) << text;
      return 0;
    }
    if (*gen) return gen_data(cfg, out.empty() ? cfg.paths.dataset : out);
    if (*tr) return train_cmd(cfg, dataset.empty() ? cfg.paths.dataset : dataset, out, variant);
    if (*opt) return optimize_cmd(cfg, ckpt, fraction, out.empty() ? (reports / "optimize").string() : out, logged);
    if (*ev) return evaluate_cmd(cfg, ckpt, out.empty() ? reports.string() : out);
    if (*ab) return ablate_cmd(cfg, out.empty() ? (reports / "ablation.tsv").string() : out);
    if (*tm) return time_cmd(cfg, ckpt, repeats, out.empty() ? (reports / "latency.tsv").string() : out);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

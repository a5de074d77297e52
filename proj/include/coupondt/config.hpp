#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>

#include "coupondt/adt_model.hpp"
#include "coupondt/bench.hpp"
#include "coupondt/datapipe.hpp"
#include "coupondt/dualopt.hpp"
#include "coupondt/simenv.hpp"
#include "coupondt/trainer.hpp"

namespace coupondt::config {

inline constexpr const char* kConfigVersion = "coupondt-config-v1";

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Paths {
  std::string dataset = "data/sy.tsv";
  std::string checkpoint = "ckpt/full";
  std::string checkpoint_no_rtg = "ckpt/no_rtg";
  std::string checkpoint_no_constraint = "ckpt/no_constraint";
  std::string reports = "reports";
  bool operator==(const Paths&) const = default;
};

/// Everything a command needs. Component seeds are not configured directly:
/// they are derived from `seed` by apply_global_seed.
struct RunConfig {
  std::uint64_t seed = 2024;
  sim::EnvConfig env;
  data::PipeConfig pipe;
  adt::ModelConfig model;
  train::TrainConfig train;
  dual::DualOptConfig dual;
  double budget_fraction = 0.4;  // used by optimize
  bench::BenchmarkPlan bench;
  bench::AblationPlan ablation;
  int timing_repeats = 100;
  Paths paths;

  bool operator==(const RunConfig&) const = default;
};

/// Sets the env, pipe, train, dual, bench and ablation seeds from named
/// sub-streams of the global seed.
void apply_global_seed(RunConfig& config);
std::uint64_t logging_seed(const RunConfig& config);

RunConfig default_config();

/// Starts from the defaults; every key present overrides one field. Throws
/// ConfigError naming the line and key on unknown sections or keys, bad
/// values, or a missing version header.
RunConfig parse_config(std::string_view text);
RunConfig load_config(const std::filesystem::path& path);

/// Every field, so a file written from a config reproduces it exactly.
std::string serialize_config(const RunConfig& config);

}  // namespace coupondt::config

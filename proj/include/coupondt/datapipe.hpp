#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "coupondt/records.hpp"
#include "coupondt/rng.hpp"

namespace coupondt::data {

struct TrajectoryStep {
  std::vector<double> state;
  int action = 0;
  double reward = 0.0;
  double cost = 0.0;
  double rtg = 0.0;  // reward-to-go, this step included
  double ctg = 0.0;  // cost-to-go, this step included
  int t = 0;

  bool operator==(const TrajectoryStep&) const = default;
};

using StepList = std::vector<TrajectoryStep>;

/// A user's chronological steps plus the dual-variable tag. Copies made by
/// augment_lambda share one immutable step list.
struct Trajectory {
  std::int64_t user_id = 0;
  std::shared_ptr<const StepList> steps;
  double lambda = -1.0;  // negative until augment_lambda assigns a tag

  std::size_t size() const { return steps ? steps->size() : 0; }
  const TrajectoryStep& operator[](std::size_t i) const { return (*steps)[i]; }
};

struct PipeConfig {
  double gamma = 1.0;
  int lambda_copies = 10;
  // Column used as the grouping key for records without a user id.
  int key_feature = 0;
  double train_fraction = 0.8;
  std::uint64_t seed = 7;

  void validate() const;
  bool operator==(const PipeConfig&) const = default;
};

struct Normalizer {
  std::vector<double> mu;
  std::vector<double> sigma;

  std::vector<double> apply(std::span<const double> state) const;
  void apply_in_place(std::span<double> state) const;
  bool operator==(const Normalizer&) const = default;
};

class FormatError : public std::runtime_error {
 public:
  FormatError(const std::string& what, std::size_t line)
      : std::runtime_error(line ? "line " + std::to_string(line) + ": " + what : what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

/// Groups records by user (or by the key feature when the id is missing) and
/// sorts each group by time; equal times keep input order. Groups appear in
/// order of first occurrence.
std::vector<Trajectory> build_trajectories(std::span<const InteractionRecord> records,
                                           const PipeConfig& config = {});

/// Fills rtg/ctg with discounted suffix sums.
Trajectory annotate_to_go(const Trajectory& trajectory, double gamma);

std::vector<Trajectory> augment_lambda(std::span<const Trajectory> trajectories, int lambda_copies,
                                       Rng& rng);

Normalizer fit_normalizer(std::span<const Trajectory> trajectories);
std::vector<double> apply_normalizer(const Normalizer& normalizer, std::span<const double> state);

/// Seeded per-trajectory split; returns (train, test).
std::pair<std::vector<Trajectory>, std::vector<Trajectory>> split_train_test(
    std::span<const Trajectory> trajectories, double train_fraction, Rng& rng);

inline constexpr const char* kDatasetVersion = "coupondt-v1";
inline constexpr const char* kTrajectoryVersion = "coupondt-traj-v1";

void write_dataset(const std::filesystem::path& path, std::span<const InteractionRecord> records,
                   int feature_dim = -1);
std::vector<InteractionRecord> read_dataset(const std::filesystem::path& path);

/// Trajectory cache: dataset columns followed by rtg, ctg and lambda.
void write_trajectories(const std::filesystem::path& path, std::span<const Trajectory> trajectories);
std::vector<Trajectory> read_trajectories(const std::filesystem::path& path);

std::string format_real(double v);

}  // namespace coupondt::data

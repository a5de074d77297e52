#include "coupondt/pipeline.hpp"

namespace coupondt::pipeline {

PreparedData prepare(std::span<const InteractionRecord> records, const data::PipeConfig& config) {
  config.validate();
  auto grouped = data::build_trajectories(records, config);
  for (auto& tr : grouped) tr = data::annotate_to_go(tr, config.gamma);
  Rng aug_rng = make_rng(config.seed, "pipe.augment");
  const auto augmented = data::augment_lambda(grouped, config.lambda_copies, aug_rng);
  Rng split_rng = make_rng(config.seed, "pipe.split");
  auto [train, test] = data::split_train_test(augmented, config.train_fraction, split_rng);
  return {std::move(train), std::move(test)};
}

adt::Checkpoint to_checkpoint(const train::TrainResult& result) {
  return {result.params, result.normalizer, result.rtg_target, result.ctg_max, result.rtg_per_cost};
}

}  // namespace coupondt::pipeline

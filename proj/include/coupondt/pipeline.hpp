#pragma once

#include <span>
#include <vector>

#include "coupondt/adt_model.hpp"
#include "coupondt/datapipe.hpp"
#include "coupondt/records.hpp"
#include "coupondt/trainer.hpp"

namespace coupondt::pipeline {

struct PreparedData {
  std::vector<data::Trajectory> train;
  std::vector<data::Trajectory> test;
};

/// Groups, annotates, augments with lambda tags and splits a logged dataset.
/// Normalization happens inside training.
PreparedData prepare(std::span<const InteractionRecord> records, const data::PipeConfig& config);

adt::Checkpoint to_checkpoint(const train::TrainResult& result);

}  // namespace coupondt::pipeline

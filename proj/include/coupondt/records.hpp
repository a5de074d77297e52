#pragma once

#include <cstdint>
#include <vector>

namespace coupondt {

/// One logged interaction: the user's state when the treatment was applied,
/// the treatment, and the realized cost and reward.
struct InteractionRecord {
  std::int64_t user_id = 0;  // negative when the log carries no user id
  std::int64_t time = 0;
  std::vector<double> features;
  int action = 0;
  double cost = 0.0;
  double reward = 0.0;

  bool operator==(const InteractionRecord&) const = default;
};

}  // namespace coupondt

#pragma once

#include <cmath>
#include <cstdint>

namespace moco {

// One per-step (or per-eval) measurement row. Every mechanism emits the same
// schema; fields that do not apply stay NaN and print as empty CSV cells.
struct MetricsRecord {
  std::int64_t step = 0;
  std::size_t epoch = 0;
  double loss = 0.0;
  double pretext_acc = 0.0;
  double knn_val_acc = NAN;     // on eval cadence
  double probe_acc = NAN;       // end of run
  double param_distance = NAN;  // query/key encoder distance
  double queue_mean_age = NAN;  // MoCo only
  double bank_staleness = NAN;  // memory bank only
  double wall_ms = 0.0;         // zeroed in deterministic mode
  bool diverged = false;
};

}  // namespace moco

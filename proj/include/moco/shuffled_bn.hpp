#pragma once

#include <cstdint>
#include <vector>

#include "moco/encoder.hpp"
#include "moco/tensor.hpp"

namespace moco {

// Simulated multi-device sharding: contiguous equal slices of the batch.
struct ShardSpec {
  std::size_t num_shards = 1;
  ShardSlices slices(std::size_t batch) const;
};

struct ShufflePlan {
  std::vector<std::size_t> perm;
  std::vector<std::size_t> inv_perm;
};

ShufflePlan make_shuffle(std::size_t n, RngStream& rng);
ShufflePlan identity_plan(std::size_t n);

// Number of plans ever built; lets tests assert that mechanisms which must
// not shuffle (memory bank) really never do.
std::uint64_t shuffle_plans_created();

// Key path: permute rows, encode with per-shard train BN, restore row order.
// Output row i is the encoding of input row i, detached.
Tensor shuffled_key_forward(Encoder& f_k, const Tensor& x_k,
                            const ShufflePlan& plan, const ShardSpec& shards);

// Same pipeline but gradient-carrying, for the end-to-end mechanism where
// the key tower is updated by back-propagation.
Tensor shuffled_forward(Encoder& enc, const Tensor& x_k,
                        const ShufflePlan& plan, const ShardSpec& shards);

// Paired per-epoch curves contrasting a shuffle-on and a shuffle-off run.
struct LeakageCurves {
  std::vector<std::size_t> epochs;
  std::vector<double> pretext_acc;
  std::vector<double> knn_val_acc;
};

struct LeakageAblation {
  LeakageCurves with_shuffle;
  LeakageCurves without_shuffle;
};

}  // namespace moco

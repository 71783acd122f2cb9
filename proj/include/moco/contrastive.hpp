#pragma once

#include <cstdint>
#include <vector>

#include "moco/data.hpp"
#include "moco/encoder.hpp"
#include "moco/metrics.hpp"
#include "moco/shuffled_bn.hpp"
#include "moco/tensor.hpp"

namespace moco {

// ---- FIFO key dictionary -----------------------------------------------------

struct KeyQueue {
  std::size_t capacity = 0;     // K
  std::size_t feature_dim = 0;  // C
  Tensor buffer;                // C x K, never differentiated
  std::size_t cursor = 0;
  std::size_t filled = 0;
  std::vector<std::int64_t> written_step;  // enqueue step per column
};

// Warm start: all K columns random unit vectors, filled == K.
KeyQueue queue_init(std::size_t K, std::size_t C, RngStream& rng);
// fill_first mode: training starts with an empty queue that grows to K.
KeyQueue queue_init_empty(std::size_t K, std::size_t C);

// Writes the N keys at the cursor (mod K), overwriting the oldest columns.
void enqueue_dequeue(KeyQueue& q, const Tensor& keys, std::int64_t step);

double queue_mean_age(const KeyQueue& q, std::int64_t step);
std::int64_t queue_max_age(const KeyQueue& q, std::int64_t step);

// ---- loss ----------------------------------------------------------------------

// N x (1 + K) logits: column 0 is q . k_pos, columns 1..K are q against the
// queue, all divided by tau. k_pos and the queue must be detached.
Tensor logits_moco(const Tensor& q, const Tensor& k_pos, const KeyQueue& queue,
                   double tau);

// In-batch variant: column 0 is q_i . k_i, columns 1..N are q_i against every
// key in the batch (so each row sees its N-1 true negatives). Keys carry
// gradient. Loss values coincide with logits_moco when the queue holds
// exactly the current keys.
Tensor logits_end_to_end(const Tensor& q, const Tensor& k, double tau);

// Mean (K+1)-way cross entropy with the positive at index 0; logits must
// already be temperature-scaled.
Tensor infonce_loss(const Tensor& logits);

// Fraction of rows whose argmax logit is the positive column.
double pretext_accuracy(const Tensor& logits);

// ---- memory bank ----------------------------------------------------------------

struct MemoryBank {
  Tensor features;  // D x C, unit rows
  double feature_momentum = 0.5;
  std::vector<std::int64_t> last_update_step;
};

MemoryBank bank_init(std::size_t D, std::size_t C, double feature_momentum,
                     RngStream& rng);

Tensor bank_rows(const MemoryBank& bank, const std::vector<std::size_t>& rows);

// K rows drawn uniformly without replacement, never from `exclude`.
Tensor bank_sample_negatives(const MemoryBank& bank,
                             const std::vector<std::size_t>& exclude,
                             std::size_t K, RngStream& rng,
                             std::vector<std::size_t>* sampled = nullptr);

// row <- l2_normalize(momentum * row + (1 - momentum) * feat)
void bank_update(MemoryBank& bank, const std::vector<std::size_t>& rows,
                 const Tensor& feats, std::int64_t step);

double bank_staleness(const MemoryBank& bank,
                      const std::vector<std::size_t>& sampled,
                      std::int64_t step);

// ---- train-step state machines ----------------------------------------------------

struct TrainStepEnv {
  std::int64_t step = 0;
  std::size_t epoch = 0;
  double lr = 0.03;
  std::uint64_t step_key = 0;  // rng key for this step's shuffle plan
  bool shuffle_bn = true;
  std::size_t bn_shards = 4;
  bool deterministic = true;  // zero wall_ms in metrics
};

struct MocoState {
  Encoder f_q;
  Encoder f_k;
  KeyQueue queue;
  double m = 0.999;
  double tau = 0.07;
  SgdState opt;
};

enum class TowerMode { shared, separate };

struct EndToEndState {
  Encoder tower_q;
  Encoder tower_k;  // unused in shared mode
  TowerMode towers = TowerMode::shared;
  double tau = 0.07;
  SgdState opt;
};

struct MemoryBankState {
  Encoder f;
  MemoryBank bank;
  std::size_t num_negatives = 1024;  // K drawn per step
  double tau = 0.07;
  SgdState opt;
};

MetricsRecord train_step_moco(MocoState& st, const BatchViews& views,
                              const TrainStepEnv& env);
MetricsRecord train_step_end_to_end(EndToEndState& st, const BatchViews& views,
                                    const TrainStepEnv& env);
MetricsRecord train_step_memory_bank(MemoryBankState& st, const Tensor& batch,
                                     const std::vector<std::size_t>& sample_ids,
                                     const TrainStepEnv& env);

}  // namespace moco

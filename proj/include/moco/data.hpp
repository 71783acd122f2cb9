#pragma once

#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "moco/tensor.hpp"

namespace moco {

// In-memory dataset of uniformly shaped samples with values in [0,1].
// Labels exist for evaluation only; reads are counted so tests can prove
// pretext training never touches them.
class Dataset {
 public:
  Dataset() = default;
  Dataset(Shape sample_shape, std::vector<double> values,
          std::vector<int> labels);

  Dataset(const Dataset& other);
  Dataset& operator=(const Dataset& other);
  Dataset(Dataset&&) noexcept = default;
  Dataset& operator=(Dataset&&) noexcept = default;

  std::size_t size() const { return count_; }
  std::size_t sample_size() const { return shape_numel(sample_shape_); }
  const Shape& sample_shape() const { return sample_shape_; }
  const std::vector<std::size_t>& ids() const { return ids_; }
  const std::vector<double>& values() const { return values_; }

  const double* sample_values(std::size_t i) const {
    return values_.data() + i * sample_size();
  }

  bool has_labels() const { return !labels_.empty(); }
  int label(std::size_t i) const;  // instrumented
  std::uint64_t label_reads() const {
    return label_reads_.load(std::memory_order_relaxed);
  }

 private:
  Shape sample_shape_;
  std::vector<double> values_;
  std::vector<int> labels_;
  std::vector<std::size_t> ids_;
  std::size_t count_ = 0;
  mutable std::atomic<std::uint64_t> label_reads_{0};
};

// ---- IDX ingestion ---------------------------------------------------------

// Decodes the classic big-endian IDX pair (magic 0x00000803 images,
// 0x00000801 labels); bytes scale to [0,1]. Image/label counts must agree.
Dataset load_idx(const std::string& images_path, const std::string& labels_path);

// Inverse of load_idx; value v stores as round(v * 255).
void write_idx(const Dataset& ds, const std::string& images_path,
               const std::string& labels_path);

// ---- synthetic corpus ------------------------------------------------------

struct SynthSpec {
  std::size_t n_classes = 10;
  std::size_t n_per_class = 500;
  Shape shape = {32};
  double class_sep = 4.0;
  double noise_sigma = 1.0;
  std::uint64_t seed = 7;
  // Skips this many per-class sample streams; a val split with
  // index_offset = train n_per_class shares prototypes but no samples.
  std::size_t index_offset = 0;
};

// Class prototypes on a sphere of radius class_sep (smoothed random patterns
// for image shapes) plus gaussian noise, affinely squashed into [0,1].
Dataset synth_clusters(const SynthSpec& spec);

// ---- augmentation ----------------------------------------------------------

struct AugmentationConfig {
  int crop_pad = 4;
  double flip_prob = 0.5;
  double jitter_strength = 0.4;
  double grayscale_prob = 0.2;        // 3-channel inputs only
  double vector_noise_sigma = 0.1;    // vector inputs
  double vector_dropout_prob = 0.2;   // vector inputs
};

// One draw of the augmentation chain for the sample at `row`.
Tensor augment_view(const Dataset& ds, std::size_t row,
                    const AugmentationConfig& cfg, RngStream& rng);

// Two independent draws forming a positive pair.
std::pair<Tensor, Tensor> augment_two_views(const Dataset& ds, std::size_t row,
                                            const AugmentationConfig& cfg,
                                            RngStream& rng);

// ---- batching ----------------------------------------------------------------

// Epoch-seeded shuffled batches of dataset rows; the trailing partial batch
// is dropped so BN shard sizes never change.
std::vector<std::vector<std::size_t>> minibatches(const Dataset& ds,
                                                  std::size_t batch,
                                                  std::uint64_t epoch_seed);

struct BatchViews {
  Tensor x_q;
  Tensor x_k;
  std::vector<std::size_t> rows;  // dataset ids of the batch samples
};

// Builds both views for a batch. Each (sample, view) derives its own rng
// stream from `batch_key`, so results do not depend on assembly order.
BatchViews make_batch_views(const Dataset& ds,
                            const std::vector<std::size_t>& rows,
                            const AugmentationConfig& cfg,
                            std::uint64_t batch_key);

// Unaugmented stack of the given rows (evaluation path).
Tensor stack_samples(const Dataset& ds, const std::vector<std::size_t>& rows);

// Prepares batches up to two ahead of the consumer on a worker thread.
// Safe because every batch derives its randomness from (epoch_key, index).
class BatchPrefetcher {
 public:
  BatchPrefetcher(const Dataset& ds, std::vector<std::vector<std::size_t>> plan,
                  AugmentationConfig cfg, std::uint64_t epoch_key, bool async);
  ~BatchPrefetcher();

  BatchPrefetcher(const BatchPrefetcher&) = delete;
  BatchPrefetcher& operator=(const BatchPrefetcher&) = delete;

  // nullopt once the epoch is exhausted
  std::optional<BatchViews> next();

 private:
  void worker_loop();

  const Dataset& ds_;
  std::vector<std::vector<std::size_t>> plan_;
  AugmentationConfig cfg_;
  std::uint64_t epoch_key_;
  bool async_ = false;
  std::size_t next_index_ = 0;  // sync mode cursor

  std::thread worker_;
  std::mutex mu_;
  std::condition_variable cv_;
  std::deque<BatchViews> ready_;
  std::size_t produced_ = 0;
  bool stop_ = false;
  static constexpr std::size_t kDepth = 2;
};

}  // namespace moco

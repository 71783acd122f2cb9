#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "moco/data.hpp"
#include "moco/encoder.hpp"

namespace moco {

enum class FeatureTap { projection_output, pre_projection };

struct FeatureMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> values;  // rows x cols
  std::vector<int> labels;
  FeatureTap tap = FeatureTap::pre_projection;
};

// Frozen-feature extraction: eval-mode BN, no augmentation, no gradients.
FeatureMatrix extract_features(Encoder& enc, const Dataset& ds, FeatureTap tap,
                               std::size_t batch = 256);

// Flattened raw inputs, optionally centered on the dataset mean; the
// baseline the learned features must beat.
FeatureMatrix raw_feature_matrix(const Dataset& ds, bool center = true);

struct ProbeConfig {
  std::vector<double> lr_grid = {0.3, 3.0, 30.0};
  double weight_decay = 0.0;
  double momentum = 0.9;
  std::size_t epochs = 100;
  std::size_t batch = 256;
  std::uint64_t seed = 0;
};

struct ProbeResult {
  double accuracy = 0.0;
  double best_lr = 0.0;
  bool diverged = false;  // every grid entry hit NaN
};

// Single linear layer trained with softmax cross entropy on frozen features;
// reports the best top-1 validation accuracy over the lr grid.
ProbeResult linear_probe(const FeatureMatrix& train, const FeatureMatrix& val,
                         const ProbeConfig& cfg);

// Similarity-weighted k-nearest-neighbour vote under cosine similarity
// (rows are re-normalized internally). weights are exp(cos/temperature),
// or uniform when temperature is absent. Ties go to the smallest class id.
double knn_monitor(const FeatureMatrix& train, const FeatureMatrix& val,
                   std::size_t k, std::optional<double> temperature);

}  // namespace moco

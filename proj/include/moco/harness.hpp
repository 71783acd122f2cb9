#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "moco/contrastive.hpp"
#include "moco/data.hpp"
#include "moco/encoder.hpp"
#include "moco/eval.hpp"
#include "moco/metrics.hpp"
#include "moco/shuffled_bn.hpp"

namespace moco {

enum class Mechanism { moco, end_to_end, memory_bank };
enum class QueueInitMode { random_warm, fill_first };
enum class DataSource { synth, idx };

const char* to_string(Mechanism m);

struct OptimizerConfig {
  double lr = 0.03;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  // absolute epoch indices; empty selects 60%/80% of the run
  std::vector<std::size_t> milestones;
  double decay = 0.1;
};

struct SynthConfig {
  std::size_t classes = 10;
  std::size_t train_per_class = 500;
  std::size_t val_per_class = 100;
  Shape shape = {32};
  double class_sep = 4.0;
  double noise_sigma = 1.0;
  std::uint64_t seed = 7;
};

struct DataConfig {
  DataSource source = DataSource::synth;
  std::string train_images, train_labels;
  std::string val_images, val_labels;
  SynthConfig synth;
  AugmentationConfig augment;
  bool prefetch = true;
};

struct EvalSettings {
  std::size_t cadence_epochs = 1;  // 0: final epoch only
  std::size_t knn_k = 20;
  double knn_temperature = 0.07;
  bool probe = true;
  std::vector<double> probe_lr_grid = {0.3, 3.0, 30.0};
  std::size_t probe_epochs = 100;
  std::size_t probe_batch = 256;
  double probe_weight_decay = 0.0;
  double probe_momentum = 0.9;
};

struct E2eConfig {
  TowerMode towers = TowerMode::shared;
  bool lr_scaling = true;        // linear lr scaling once batch exceeds 256
  std::size_t max_batch = 1024;  // memory budget for K-growth sweeps
};

struct ExperimentConfig {
  int schema_version = 1;
  Mechanism mechanism = Mechanism::moco;
  std::uint64_t seed = 1;
  bool deterministic = true;
  std::size_t epochs = 30;
  std::size_t batch = 64;
  std::size_t K = 1024;
  QueueInitMode queue_init = QueueInitMode::random_warm;
  double m = 0.999;
  double tau = 0.07;
  double feature_momentum = 0.5;  // memory bank
  OptimizerConfig optimizer;
  EncoderConfig encoder;  // input_shape empty = derive from data
  bool shuffle_bn = true;
  DataConfig data;
  EvalSettings eval;
  E2eConfig e2e;
  std::size_t checkpoint_every_epochs = 0;  // 0: final checkpoint only
};

ExperimentConfig default_config();

// Strict parse: unknown keys are rejected, ranges validated.
ExperimentConfig config_from_json_text(const std::string& text);
std::string config_to_json_text(const ExperimentConfig& cfg);  // canonical
ExperimentConfig load_config_file(const std::string& path);
void validate(const ExperimentConfig& cfg);

// FNV-1a of the canonical JSON; stamped on every metrics row.
std::uint64_t config_hash(const ExperimentConfig& cfg);

struct DataBundle {
  Dataset train;
  Dataset val;
};
DataBundle build_datasets(const ExperimentConfig& cfg);

struct RunResult {
  std::vector<MetricsRecord> records;
  bool diverged = false;      // NaN/Inf loss
  double oscillation = NAN;   // std/mean of loss over the final 20% of steps
  double final_knn = NAN;
  double final_pretext = NAN;
  double probe_acc = NAN;
  double probe_lr = NAN;
  LeakageCurves curves;       // per-epoch training curve summary
  std::string metrics_path;
  std::string checkpoint_path;
  std::uint64_t cfg_hash = 0;
  int exit_code = 0;  // 0 converged, 3 diverged (NaN or oscillation > 0.5)
};

RunResult run_experiment(const ExperimentConfig& cfg, const std::string& out_dir);

// Continues a checkpointed run; epoch keys match the uninterrupted schedule.
RunResult run_experiment_resumed(const ExperimentConfig& cfg,
                                 const std::string& checkpoint_path,
                                 const std::string& out_dir);

// ---- metrics files -------------------------------------------------------------

struct MetricsFile {
  std::string header_json;
  std::vector<MetricsRecord> records;
};
MetricsFile read_metrics_csv(const std::string& path);

// Pure aggregation over a finished run's metrics file.
struct RunSummary {
  double final_knn = NAN;
  double final_pretext = NAN;
  double probe_acc = NAN;
  double final_loss = NAN;
  double oscillation = NAN;
  bool diverged = false;
};
RunSummary summarize_metrics(const MetricsFile& file);

// ---- sweeps ---------------------------------------------------------------------

struct SweepCell {
  Mechanism mechanism = Mechanism::moco;
  std::optional<std::size_t> K;
  std::optional<double> m;
  std::uint64_t seed = 0;
  std::string status;  // ok | diverged | skipped:<why> | error:<what>
  RunSummary summary;
  std::string metrics_path;
};

struct SweepTable {
  std::vector<SweepCell> cells;
  std::string csv_path;
};

SweepTable sweep_K(const ExperimentConfig& base,
                   const std::vector<std::size_t>& Ks,
                   const std::vector<Mechanism>& mechanisms,
                   const std::vector<std::uint64_t>& seeds,
                   const std::string& out_dir, std::size_t jobs);

SweepTable sweep_momentum(const ExperimentConfig& base,
                          const std::vector<double>& ms,
                          const std::vector<std::uint64_t>& seeds,
                          const std::string& out_dir, std::size_t jobs);

struct AblationResult {
  LeakageAblation curves;
  RunResult with_shuffle;
  RunResult without_shuffle;
  std::string csv_path;
};

AblationResult ablate_shuffle_bn(const ExperimentConfig& base,
                                 const std::string& out_dir);

// Rebuilds the query-path encoder stored in a checkpoint, along with the
// config embedded at save time. Used by the eval protocols.
Encoder encoder_from_checkpoint(const std::string& checkpoint_path,
                                ExperimentConfig* out_cfg = nullptr);

}  // namespace moco

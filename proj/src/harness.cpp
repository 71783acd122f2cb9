#include "moco/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>
#include <thread>

#include "moco/checkpoint.hpp"

namespace fs = std::filesystem;

namespace moco {

namespace {

void log_warn(const std::string& msg) { std::cerr << "[warn] " << msg << "\n"; }

std::string format_double(double v) {
  if (std::isnan(v)) return "";
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string hash_hex(std::uint64_t h) {
  char buf[24];
  std::snprintf(buf, sizeof(buf), "0x%016" PRIx64, h);
  return buf;
}

constexpr const char* kColumns =
    "config_hash,shuffle_bn,step,epoch,loss,pretext_acc,param_distance,"
    "queue_mean_age,bank_staleness,knn_val_acc,probe_acc,wall_ms,diverged";

class MetricsWriter {
 public:
  MetricsWriter(const std::string& path, const ExperimentConfig& cfg,
                std::uint64_t hash)
      : out_(path), path_(path), hash_(hash_hex(hash)),
        shuffle_(cfg.shuffle_bn) {
    if (!out_) throw IoError("cannot create metrics file " + path);
    out_ << "{\"config_hash\":\"" << hash_ << "\",\"mechanism\":\""
         << to_string(cfg.mechanism)
         << "\",\"schema\":\"" << kColumns << "\",\"schema_version\":1,"
         << "\"seed\":" << cfg.seed << "}\n";
    out_ << kColumns << "\n";
  }

  void row(const MetricsRecord& rec) {
    out_ << hash_ << ',' << (shuffle_ ? 1 : 0) << ',' << rec.step << ','
         << rec.epoch << ',' << format_double(rec.loss) << ','
         << format_double(rec.pretext_acc) << ','
         << format_double(rec.param_distance) << ','
         << format_double(rec.queue_mean_age) << ','
         << format_double(rec.bank_staleness) << ','
         << format_double(rec.knn_val_acc) << ','
         << format_double(rec.probe_acc) << ','
         << format_double(rec.wall_ms) << ',' << (rec.diverged ? 1 : 0)
         << '\n';
  }

  const std::string& path() const { return path_; }

 private:
  std::ofstream out_;
  std::string path_;
  std::string hash_;
  bool shuffle_;
};

double parse_cell(const std::string& s) {
  if (s.empty()) return NAN;
  return std::strtod(s.c_str(), nullptr);
}

}  // namespace

MetricsFile read_metrics_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open metrics file " + path);
  MetricsFile file;
  if (!std::getline(in, file.header_json)) {
    throw FormatError("metrics file " + path + " missing JSON header");
  }
  std::string line;
  std::getline(in, line);  // column names
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    cells.resize(13);
    MetricsRecord rec;
    rec.step = static_cast<std::int64_t>(parse_cell(cells[2]));
    rec.epoch = static_cast<std::size_t>(parse_cell(cells[3]));
    rec.loss = parse_cell(cells[4]);
    rec.pretext_acc = parse_cell(cells[5]);
    rec.param_distance = parse_cell(cells[6]);
    rec.queue_mean_age = parse_cell(cells[7]);
    rec.bank_staleness = parse_cell(cells[8]);
    rec.knn_val_acc = parse_cell(cells[9]);
    rec.probe_acc = parse_cell(cells[10]);
    rec.wall_ms = parse_cell(cells[11]);
    rec.diverged = cells[12] == "1";
    file.records.push_back(rec);
  }
  return file;
}

RunSummary summarize_metrics(const MetricsFile& file) {
  RunSummary s;
  std::vector<const MetricsRecord*> train_rows;
  for (const auto& rec : file.records) {
    if (rec.diverged) s.diverged = true;
    if (std::isfinite(rec.loss)) train_rows.push_back(&rec);
    if (std::isfinite(rec.knn_val_acc)) s.final_knn = rec.knn_val_acc;
    if (std::isfinite(rec.probe_acc)) s.probe_acc = rec.probe_acc;
  }
  if (train_rows.empty()) return s;
  s.final_loss = train_rows.back()->loss;

  const std::size_t last_epoch = train_rows.back()->epoch;
  double acc = 0.0;
  std::size_t n = 0;
  for (const auto* rec : train_rows) {
    if (rec->epoch == last_epoch) {
      acc += rec->pretext_acc;
      ++n;
    }
  }
  s.final_pretext = n > 0 ? acc / static_cast<double>(n) : NAN;

  const std::size_t window =
      std::max<std::size_t>(2, (train_rows.size() + 4) / 5);  // final 20%
  const std::size_t begin = train_rows.size() - std::min(window, train_rows.size());
  double mean = 0.0;
  for (std::size_t i = begin; i < train_rows.size(); ++i) {
    mean += train_rows[i]->loss;
  }
  mean /= static_cast<double>(train_rows.size() - begin);
  double var = 0.0;
  for (std::size_t i = begin; i < train_rows.size(); ++i) {
    const double d = train_rows[i]->loss - mean;
    var += d * d;
  }
  var /= static_cast<double>(train_rows.size() - begin);
  s.oscillation = mean > 1e-12 ? std::sqrt(var) / mean : 0.0;
  return s;
}

// ---- datasets -------------------------------------------------------------------

DataBundle build_datasets(const ExperimentConfig& cfg) {
  DataBundle out;
  if (cfg.data.source == DataSource::synth) {
    SynthSpec train_spec{cfg.data.synth.classes, cfg.data.synth.train_per_class,
                         cfg.data.synth.shape,   cfg.data.synth.class_sep,
                         cfg.data.synth.noise_sigma, cfg.data.synth.seed,
                         0};
    SynthSpec val_spec = train_spec;
    val_spec.n_per_class = cfg.data.synth.val_per_class;
    val_spec.index_offset = cfg.data.synth.train_per_class;
    out.train = synth_clusters(train_spec);
    out.val = synth_clusters(val_spec);
  } else {
    out.train = load_idx(cfg.data.train_images, cfg.data.train_labels);
    out.val = load_idx(cfg.data.val_images, cfg.data.val_labels);
  }
  return out;
}

// ---- training state ----------------------------------------------------------------

namespace {

struct TrainingState {
  Mechanism mechanism = Mechanism::moco;
  std::optional<MocoState> moco;
  std::optional<EndToEndState> e2e;
  std::optional<MemoryBankState> bank;

  Encoder& eval_encoder() {
    switch (mechanism) {
      case Mechanism::moco: return moco->f_q;
      case Mechanism::end_to_end: return e2e->tower_q;
      case Mechanism::memory_bank: return bank->f;
    }
    throw ContractError("unreachable");
  }
};

TrainingState init_state(const ExperimentConfig& cfg, std::size_t train_size) {
  TrainingState st;
  st.mechanism = cfg.mechanism;
  RngStream init_rng(derive_key(cfg.seed, "init"));
  const SgdState opt{cfg.optimizer.lr, cfg.optimizer.momentum,
                     cfg.optimizer.weight_decay, {}};
  switch (cfg.mechanism) {
    case Mechanism::moco: {
      auto [f_q, f_k] = build_pair(cfg.encoder, init_rng);
      MocoState ms;
      ms.f_q = std::move(f_q);
      ms.f_k = std::move(f_k);
      if (cfg.queue_init == QueueInitMode::random_warm) {
        RngStream queue_rng(derive_key(cfg.seed, "queue"));
        ms.queue = queue_init(cfg.K, cfg.encoder.feature_dim, queue_rng);
      } else {
        ms.queue = queue_init_empty(cfg.K, cfg.encoder.feature_dim);
      }
      ms.m = cfg.m;
      ms.tau = cfg.tau;
      ms.opt = opt;
      st.moco = std::move(ms);
      break;
    }
    case Mechanism::end_to_end: {
      auto [f_q, f_k] = build_pair(cfg.encoder, init_rng);
      EndToEndState es;
      es.tower_q = std::move(f_q);
      es.towers = cfg.e2e.towers;
      if (cfg.e2e.towers == TowerMode::separate) {
        f_k.set_learnable(true);
        f_k.role = Role::key;
        es.tower_k = std::move(f_k);
      }
      es.tau = cfg.tau;
      es.opt = opt;
      st.e2e = std::move(es);
      break;
    }
    case Mechanism::memory_bank: {
      auto [f_q, f_k] = build_pair(cfg.encoder, init_rng);
      (void)f_k;
      MemoryBankState bs;
      bs.f = std::move(f_q);
      RngStream bank_rng(derive_key(cfg.seed, "bank"));
      bs.bank = bank_init(train_size, cfg.encoder.feature_dim,
                          cfg.feature_momentum, bank_rng);
      bs.num_negatives = cfg.K;
      bs.tau = cfg.tau;
      bs.opt = opt;
      st.bank = std::move(bs);
      break;
    }
  }
  return st;
}

void append_encoder_tensors(std::vector<std::pair<std::string, Tensor>>& out,
                            const Encoder& enc, const std::string& prefix) {
  for (const auto& [name, t] : enc.parameters()) out.emplace_back(prefix + name, t);
  for (const auto& [name, t] : enc.named_buffers()) out.emplace_back(prefix + name, t);
}

void append_velocity_tensors(std::vector<std::pair<std::string, Tensor>>& out,
                             const std::vector<NamedTensor>& params,
                             const SgdState& opt) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor v = Tensor::zeros(params[i].tensor.shape());
    if (i < opt.velocity.size() &&
        opt.velocity[i].size() == v.size()) {
      v.values() = opt.velocity[i];
    }
    out.emplace_back("opt.v." + params[i].name, v);
  }
}

std::vector<NamedTensor> sgd_param_list(TrainingState& st) {
  switch (st.mechanism) {
    case Mechanism::moco: return st.moco->f_q.parameters();
    case Mechanism::end_to_end: {
      std::vector<NamedTensor> params = st.e2e->tower_q.parameters();
      if (st.e2e->towers == TowerMode::separate) {
        for (auto& [name, t] : st.e2e->tower_k.parameters()) {
          params.push_back({"tower_k." + name, t});
        }
      }
      return params;
    }
    case Mechanism::memory_bank: return st.bank->f.parameters();
  }
  throw ContractError("unreachable");
}

CheckpointData pack_state(TrainingState& st, const ExperimentConfig& cfg,
                          std::uint64_t step) {
  CheckpointData data;
  data.step = step;
  data.rng_seed = cfg.seed;
  data.config_json = config_to_json_text(cfg);
  switch (st.mechanism) {
    case Mechanism::moco: {
      append_encoder_tensors(data.tensors, st.moco->f_q, "q.");
      append_encoder_tensors(data.tensors, st.moco->f_k, "k.");
      append_velocity_tensors(data.tensors, st.moco->f_q.parameters(),
                              st.moco->opt);
      data.tensors.emplace_back("queue.buffer", st.moco->queue.buffer);
      Tensor qstate = Tensor::from_values(
          {2}, {static_cast<double>(st.moco->queue.cursor),
                static_cast<double>(st.moco->queue.filled)});
      data.tensors.emplace_back("queue.state", qstate);
      std::vector<double> ages(st.moco->queue.written_step.begin(),
                               st.moco->queue.written_step.end());
      data.tensors.emplace_back(
          "queue.written_step",
          Tensor::from_values({st.moco->queue.capacity}, std::move(ages)));
      break;
    }
    case Mechanism::end_to_end: {
      append_encoder_tensors(data.tensors, st.e2e->tower_q, "q.");
      if (st.e2e->towers == TowerMode::separate) {
        append_encoder_tensors(data.tensors, st.e2e->tower_k, "k2.");
      }
      append_velocity_tensors(data.tensors, sgd_param_list(st), st.e2e->opt);
      break;
    }
    case Mechanism::memory_bank: {
      append_encoder_tensors(data.tensors, st.bank->f, "q.");
      append_velocity_tensors(data.tensors, st.bank->f.parameters(),
                              st.bank->opt);
      data.tensors.emplace_back("bank.features", st.bank->bank.features);
      std::vector<double> steps(st.bank->bank.last_update_step.begin(),
                                st.bank->bank.last_update_step.end());
      const std::size_t rows = steps.size();
      data.tensors.emplace_back(
          "bank.last_update_step",
          Tensor::from_values({rows}, std::move(steps)));
      break;
    }
  }
  return data;
}

void restore_tensor(const std::pair<std::string, Tensor>& loaded,
                    const std::string& expect_name, Tensor target) {
  if (loaded.first != expect_name || loaded.second.shape() != target.shape()) {
    throw ConsistencyError("checkpoint tensor '" + loaded.first +
                           "' does not match expected '" + expect_name + "' " +
                           shape_str(target.shape()));
  }
  target.values() = loaded.second.values();
}

void unpack_state(TrainingState& st, const ExperimentConfig& cfg,
                  const CheckpointData& data) {
  std::size_t i = 0;
  auto take = [&](const std::string& name, Tensor target) {
    if (i >= data.tensors.size()) {
      throw ConsistencyError("checkpoint missing tensor '" + name + "'");
    }
    restore_tensor(data.tensors[i++], name, target);
  };
  auto take_encoder = [&](Encoder& enc, const std::string& prefix) {
    for (auto& [name, t] : enc.parameters()) take(prefix + name, t);
    for (auto& [name, t] : enc.named_buffers()) take(prefix + name, t);
  };
  auto take_velocity = [&](const std::vector<NamedTensor>& params,
                           SgdState& opt) {
    opt.velocity.assign(params.size(), {});
    for (std::size_t p = 0; p < params.size(); ++p) {
      Tensor v = Tensor::zeros(params[p].tensor.shape());
      take("opt.v." + params[p].name, v);
      opt.velocity[p] = v.values();
    }
  };
  switch (st.mechanism) {
    case Mechanism::moco: {
      take_encoder(st.moco->f_q, "q.");
      take_encoder(st.moco->f_k, "k.");
      take_velocity(st.moco->f_q.parameters(), st.moco->opt);
      take("queue.buffer", st.moco->queue.buffer);
      Tensor qstate = Tensor::zeros({2});
      take("queue.state", qstate);
      st.moco->queue.cursor = static_cast<std::size_t>(qstate.values()[0]);
      st.moco->queue.filled = static_cast<std::size_t>(qstate.values()[1]);
      Tensor ages = Tensor::zeros({st.moco->queue.capacity});
      take("queue.written_step", ages);
      for (std::size_t c = 0; c < st.moco->queue.capacity; ++c) {
        st.moco->queue.written_step[c] =
            static_cast<std::int64_t>(ages.values()[c]);
      }
      break;
    }
    case Mechanism::end_to_end: {
      take_encoder(st.e2e->tower_q, "q.");
      if (st.e2e->towers == TowerMode::separate) {
        take_encoder(st.e2e->tower_k, "k2.");
      }
      take_velocity(sgd_param_list(st), st.e2e->opt);
      break;
    }
    case Mechanism::memory_bank: {
      take_encoder(st.bank->f, "q.");
      take_velocity(st.bank->f.parameters(), st.bank->opt);
      take("bank.features", st.bank->bank.features);
      Tensor steps = Tensor::zeros({st.bank->bank.last_update_step.size()});
      take("bank.last_update_step", steps);
      for (std::size_t r = 0; r < steps.size(); ++r) {
        st.bank->bank.last_update_step[r] =
            static_cast<std::int64_t>(steps.values()[r]);
      }
      break;
    }
  }
  if (i != data.tensors.size()) {
    throw ConsistencyError("checkpoint has " +
                           std::to_string(data.tensors.size()) +
                           " tensors, expected " + std::to_string(i));
  }
  (void)cfg;
}

double lr_for_epoch(const ExperimentConfig& cfg, std::size_t epoch,
                    double initial_lr) {
  std::vector<std::size_t> milestones = cfg.optimizer.milestones;
  if (milestones.empty()) {
    milestones = {(cfg.epochs * 6) / 10, (cfg.epochs * 8) / 10};
  }
  double lr = initial_lr;
  for (std::size_t ms : milestones) {
    if (epoch >= ms) lr *= cfg.optimizer.decay;
  }
  return lr;
}

RunResult run_loop(const ExperimentConfig& cfg, const std::string& out_dir,
                   const std::string& resume_checkpoint) {
  validate(cfg);
  fs::create_directories(out_dir);
  DataBundle data = build_datasets(cfg);

  ExperimentConfig effective = cfg;
  if (effective.encoder.input_shape.empty()) {
    effective.encoder.input_shape = data.train.sample_shape();
  } else if (effective.encoder.input_shape != data.train.sample_shape()) {
    throw ConfigError("encoder.input_shape " +
                      shape_str(effective.encoder.input_shape) +
                      " does not match data sample shape " +
                      shape_str(data.train.sample_shape()));
  }
  if (effective.encoder.arch == Arch::mlp &&
      effective.encoder.input_shape.size() != 1) {
    throw ConfigError("mlp encoder needs vector data");
  }
  if (effective.encoder.arch == Arch::small_conv &&
      effective.encoder.input_shape.size() != 3) {
    throw ConfigError("small_conv encoder needs image data");
  }

  double initial_lr = effective.optimizer.lr;
  if (effective.mechanism == Mechanism::end_to_end) {
    log_warn("end_to_end ignores K; the dictionary is the batch (K_eff = N-1 = " +
             std::to_string(effective.batch - 1) + ")");
    if (effective.e2e.lr_scaling && effective.batch > 256) {
      initial_lr *= static_cast<double>(effective.batch) / 256.0;
      log_warn("linear lr scaling for batch " + std::to_string(effective.batch) +
               ": lr -> " + std::to_string(initial_lr));
    }
  }
  if (effective.mechanism == Mechanism::memory_bank &&
      effective.K + effective.batch > data.train.size()) {
    throw ConfigError("memory bank needs K <= train size - batch (" +
                      std::to_string(data.train.size()) + " - " +
                      std::to_string(effective.batch) + ")");
  }
  const std::size_t steps_per_epoch = data.train.size() / effective.batch;
  if (steps_per_epoch == 0) throw ConfigError("batch larger than dataset");

  TrainingState state = init_state(effective, data.train.size());

  std::size_t start_epoch = 0;
  if (!resume_checkpoint.empty()) {
    const CheckpointData loaded = checkpoint_load(resume_checkpoint);
    if (loaded.rng_seed != effective.seed) {
      throw ConsistencyError("checkpoint seed " +
                             std::to_string(loaded.rng_seed) +
                             " does not match config seed " +
                             std::to_string(effective.seed));
    }
    unpack_state(state, effective, loaded);
    if (loaded.step % steps_per_epoch != 0) {
      throw ConsistencyError("checkpoint step not at an epoch boundary");
    }
    start_epoch = loaded.step / steps_per_epoch;
    if (start_epoch > effective.epochs) {
      throw ConsistencyError("checkpoint is past the configured epochs");
    }
  }

  RunResult result;
  result.cfg_hash = config_hash(effective);
  MetricsWriter writer(out_dir + "/metrics.csv", effective, result.cfg_hash);
  result.metrics_path = writer.path();
  const std::string ckpt_path = out_dir + "/checkpoint.dlck";

  const std::size_t bn_shards =
      effective.encoder.use_bn ? effective.encoder.bn_shards : 1;
  std::int64_t step_counter =
      static_cast<std::int64_t>(start_epoch * steps_per_epoch);

  auto eval_knn = [&]() {
    FeatureMatrix ftr = extract_features(state.eval_encoder(), data.train,
                                         FeatureTap::projection_output);
    FeatureMatrix fva = extract_features(state.eval_encoder(), data.val,
                                         FeatureTap::projection_output);
    return knn_monitor(ftr, fva, effective.eval.knn_k,
                       effective.eval.knn_temperature);
  };

  for (std::size_t epoch = start_epoch;
       epoch < effective.epochs && !result.diverged; ++epoch) {
    const double lr = lr_for_epoch(effective, epoch, initial_lr);
    const std::uint64_t epoch_key =
        derive_key(derive_key(effective.seed, "epoch"), epoch);
    auto plan = minibatches(data.train, effective.batch, epoch_key);
    BatchPrefetcher prefetcher(data.train, std::move(plan),
                               effective.data.augment,
                               derive_key(epoch_key, "aug"),
                               effective.data.prefetch);

    double epoch_pretext = 0.0;
    std::size_t epoch_steps = 0;
    while (auto views = prefetcher.next()) {
      TrainStepEnv env;
      env.step = step_counter;
      env.epoch = epoch;
      env.lr = lr;
      env.step_key = derive_key(derive_key(effective.seed, "step"),
                                static_cast<std::uint64_t>(step_counter));
      env.shuffle_bn = effective.shuffle_bn && effective.encoder.use_bn;
      env.bn_shards = bn_shards;
      env.deterministic = effective.deterministic;

      const std::uint64_t label_reads_before = data.train.label_reads();
      MetricsRecord rec;
      try {
        switch (effective.mechanism) {
          case Mechanism::moco:
            rec = train_step_moco(*state.moco, *views, env);
            break;
          case Mechanism::end_to_end:
            rec = train_step_end_to_end(*state.e2e, *views, env);
            break;
          case Mechanism::memory_bank:
            rec = train_step_memory_bank(*state.bank, views->x_q, views->rows,
                                         env);
            break;
        }
      } catch (const DivergenceError& e) {
        log_warn(std::string("diverged: ") + e.what());
        MetricsRecord dead;
        dead.step = step_counter;
        dead.epoch = epoch;
        dead.loss = NAN;
        dead.pretext_acc = NAN;
        dead.diverged = true;
        writer.row(dead);
        result.records.push_back(dead);
        result.diverged = true;
        break;
      }
      if (data.train.label_reads() != label_reads_before) {
        throw ContractError("pretext training read dataset labels");
      }
      writer.row(rec);
      result.records.push_back(rec);
      epoch_pretext += rec.pretext_acc;
      ++epoch_steps;
      ++step_counter;
    }
    if (result.diverged) break;

    result.curves.epochs.push_back(epoch);
    result.curves.pretext_acc.push_back(
        epoch_steps > 0 ? epoch_pretext / static_cast<double>(epoch_steps)
                        : NAN);

    const bool last_epoch = epoch + 1 == effective.epochs;
    const bool cadence_hit =
        effective.eval.cadence_epochs > 0 &&
        (epoch + 1) % effective.eval.cadence_epochs == 0;
    double knn = NAN;
    if (cadence_hit || last_epoch) {
      knn = eval_knn();
      MetricsRecord eval_rec;
      eval_rec.step = step_counter - 1;
      eval_rec.epoch = epoch;
      eval_rec.loss = NAN;
      eval_rec.pretext_acc = NAN;
      eval_rec.knn_val_acc = knn;
      if (last_epoch && effective.eval.probe) {
        FeatureMatrix ptr = extract_features(state.eval_encoder(), data.train,
                                             FeatureTap::pre_projection);
        FeatureMatrix pva = extract_features(state.eval_encoder(), data.val,
                                             FeatureTap::pre_projection);
        ProbeConfig pc;
        pc.lr_grid = effective.eval.probe_lr_grid;
        pc.weight_decay = effective.eval.probe_weight_decay;
        pc.momentum = effective.eval.probe_momentum;
        pc.epochs = effective.eval.probe_epochs;
        pc.batch = effective.eval.probe_batch;
        pc.seed = derive_key(effective.seed, "probe");
        const ProbeResult probe = linear_probe(ptr, pva, pc);
        if (!probe.diverged) {
          eval_rec.probe_acc = probe.accuracy;
          result.probe_acc = probe.accuracy;
          result.probe_lr = probe.best_lr;
        } else {
          log_warn("linear probe diverged on every lr in the grid");
        }
      }
      writer.row(eval_rec);
      result.records.push_back(eval_rec);
      result.final_knn = knn;
    }
    result.curves.knn_val_acc.push_back(knn);

    const bool ckpt_cadence =
        effective.checkpoint_every_epochs > 0 &&
        (epoch + 1) % effective.checkpoint_every_epochs == 0;
    if (ckpt_cadence && !last_epoch) {
      checkpoint_save(out_dir + "/checkpoint_epoch" + std::to_string(epoch + 1) +
                          ".dlck",
                      pack_state(state, effective,
                                 static_cast<std::uint64_t>(step_counter)));
    }
    if (last_epoch) {
      checkpoint_save(ckpt_path,
                      pack_state(state, effective,
                                 static_cast<std::uint64_t>(step_counter)));
      result.checkpoint_path = ckpt_path;
    }
  }

  // summary fields mirror what summarize_metrics derives from the file
  MetricsFile as_file;
  as_file.records = result.records;
  const RunSummary s = summarize_metrics(as_file);
  result.oscillation = s.oscillation;
  result.final_pretext = s.final_pretext;
  result.exit_code =
      result.diverged || (std::isfinite(s.oscillation) && s.oscillation > 0.5)
          ? 3
          : 0;
  return result;
}

}  // namespace

RunResult run_experiment(const ExperimentConfig& cfg,
                         const std::string& out_dir) {
  return run_loop(cfg, out_dir, "");
}

Encoder encoder_from_checkpoint(const std::string& checkpoint_path,
                                ExperimentConfig* out_cfg) {
  const CheckpointData data = checkpoint_load(checkpoint_path);
  ExperimentConfig cfg = config_from_json_text(data.config_json);
  if (out_cfg != nullptr) *out_cfg = cfg;
  RngStream rng(derive_key(cfg.seed, "init"));
  auto [f_q, f_k] = build_pair(cfg.encoder, rng);
  (void)f_k;

  std::size_t i = 0;
  auto take = [&](const std::string& name, Tensor target) {
    if (i >= data.tensors.size() || data.tensors[i].first != name ||
        data.tensors[i].second.shape() != target.shape()) {
      throw ConsistencyError("checkpoint does not contain expected tensor '" +
                             name + "'");
    }
    target.values() = data.tensors[i++].second.values();
  };
  for (auto& [name, t] : f_q.parameters()) take("q." + name, t);
  for (auto& [name, t] : f_q.named_buffers()) take("q." + name, t);
  return std::move(f_q);
}

RunResult run_experiment_resumed(const ExperimentConfig& cfg,
                                 const std::string& checkpoint_path,
                                 const std::string& out_dir) {
  return run_loop(cfg, out_dir, checkpoint_path);
}

// ---- sweeps -------------------------------------------------------------------------

namespace {

void run_cells(std::size_t count, std::size_t jobs,
               const std::function<void(std::size_t)>& fn) {
  jobs = std::max<std::size_t>(1, std::min(jobs, count));
  if (jobs <= 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  pool.reserve(jobs);
  for (std::size_t j = 0; j < jobs; ++j) {
    pool.emplace_back([&]() {
      for (std::size_t i = next.fetch_add(1); i < count; i = next.fetch_add(1)) {
        fn(i);
      }
    });
  }
  for (auto& t : pool) t.join();
}

void execute_cell(SweepCell& cell, const ExperimentConfig& cfg,
                  const std::string& cell_dir) {
  try {
    const RunResult res = run_experiment(cfg, cell_dir);
    cell.metrics_path = res.metrics_path;
    cell.status = res.exit_code == 0 ? "ok" : "diverged";
  } catch (const Error& e) {
    cell.status = std::string("error:") + e.what();
  }
}

void finalize_cells(SweepTable& table) {
  // tables are recomputed from the metrics files alone
  for (auto& cell : table.cells) {
    if (cell.metrics_path.empty()) continue;
    cell.summary = summarize_metrics(read_metrics_csv(cell.metrics_path));
  }
}

std::string opt_to_string(const std::optional<std::size_t>& v) {
  return v ? std::to_string(*v) : "";
}

std::string opt_to_string(const std::optional<double>& v) {
  return v ? format_double(*v) : "";
}

void write_table_csv(SweepTable& table, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot create sweep table " + path);
  out << "mechanism,K,m,seed,status,final_knn,probe_acc,oscillation,"
         "final_loss,final_pretext,metrics_path\n";
  for (const auto& c : table.cells) {
    out << to_string(c.mechanism) << ',' << opt_to_string(c.K) << ','
        << opt_to_string(c.m) << ',' << c.seed << ',' << c.status << ','
        << format_double(c.summary.final_knn) << ','
        << format_double(c.summary.probe_acc) << ','
        << format_double(c.summary.oscillation) << ','
        << format_double(c.summary.final_loss) << ','
        << format_double(c.summary.final_pretext) << ',' << c.metrics_path
        << '\n';
  }
  table.csv_path = path;
}

}  // namespace

SweepTable sweep_K(const ExperimentConfig& base,
                   const std::vector<std::size_t>& Ks,
                   const std::vector<Mechanism>& mechanisms,
                   const std::vector<std::uint64_t>& seeds,
                   const std::string& out_dir, std::size_t jobs) {
  if (Ks.empty()) throw ConfigError("sweep_K: no K values");
  for (std::size_t i = 1; i < Ks.size(); ++i) {
    if (Ks[i] <= Ks[i - 1]) throw ConfigError("sweep_K: Ks must be ascending");
  }
  fs::create_directories(out_dir);

  SweepTable table;
  std::vector<ExperimentConfig> cfgs;
  std::vector<std::string> dirs;
  for (Mechanism mech : mechanisms) {
    for (std::size_t K : Ks) {
      for (std::uint64_t seed : seeds) {
        SweepCell cell;
        cell.mechanism = mech;
        cell.K = K;
        cell.seed = seed;
        ExperimentConfig cfg = base;
        cfg.mechanism = mech;
        cfg.seed = seed;
        if (mech == Mechanism::end_to_end) {
          // dictionary size rides on the batch; stop at the memory budget
          if (K > base.e2e.max_batch) {
            cell.status = "skipped:memory_budget";
            table.cells.push_back(cell);
            cfgs.emplace_back();
            dirs.emplace_back();
            continue;
          }
          if (base.encoder.use_bn &&
              (K % base.encoder.bn_shards != 0 ||
               K / base.encoder.bn_shards < 2)) {
            cell.status = "skipped:bn_shards";
            table.cells.push_back(cell);
            cfgs.emplace_back();
            dirs.emplace_back();
            continue;
          }
          cfg.batch = K;
        } else {
          cfg.K = K;
        }
        table.cells.push_back(cell);
        cfgs.push_back(cfg);
        dirs.push_back(out_dir + "/" + to_string(mech) + "_K" +
                       std::to_string(K) + "_s" + std::to_string(seed));
      }
    }
  }
  run_cells(table.cells.size(), jobs, [&](std::size_t i) {
    if (!table.cells[i].status.empty()) return;  // skipped pre-flight
    execute_cell(table.cells[i], cfgs[i], dirs[i]);
  });
  finalize_cells(table);
  write_table_csv(table, out_dir + "/sweep_k.csv");
  return table;
}

SweepTable sweep_momentum(const ExperimentConfig& base,
                          const std::vector<double>& ms,
                          const std::vector<std::uint64_t>& seeds,
                          const std::string& out_dir, std::size_t jobs) {
  if (ms.empty()) throw ConfigError("sweep_momentum: no m values");
  for (double m : ms) {
    if (m < 0.0 || m >= 1.0) {
      throw ConfigError("sweep_momentum: m = " + std::to_string(m) +
                        " outside [0, 1)");
    }
  }
  fs::create_directories(out_dir);

  SweepTable table;
  std::vector<ExperimentConfig> cfgs;
  std::vector<std::string> dirs;
  for (double m : ms) {
    for (std::uint64_t seed : seeds) {
      SweepCell cell;
      cell.mechanism = Mechanism::moco;
      cell.m = m;
      cell.seed = seed;
      table.cells.push_back(cell);
      ExperimentConfig cfg = base;
      cfg.mechanism = Mechanism::moco;
      cfg.m = m;
      cfg.seed = seed;
      cfgs.push_back(cfg);
      std::ostringstream dir;
      dir << out_dir << "/m" << m << "_s" << seed;
      dirs.push_back(dir.str());
    }
  }
  run_cells(table.cells.size(), jobs, [&](std::size_t i) {
    execute_cell(table.cells[i], cfgs[i], dirs[i]);
  });
  finalize_cells(table);
  write_table_csv(table, out_dir + "/sweep_m.csv");
  return table;
}

AblationResult ablate_shuffle_bn(const ExperimentConfig& base,
                                 const std::string& out_dir) {
  if (!base.encoder.use_bn) {
    throw ConfigError("ablate_shuffle_bn: encoder must use BN");
  }
  if (base.encoder.bn_shards < 2) {
    throw ConfigError("ablate_shuffle_bn: need bn_shards >= 2");
  }
  fs::create_directories(out_dir);

  ExperimentConfig on = base;
  on.shuffle_bn = true;
  if (on.eval.cadence_epochs == 0) on.eval.cadence_epochs = 1;
  ExperimentConfig off = on;
  off.shuffle_bn = false;

  AblationResult result;
  std::vector<std::function<void()>> runs = {
      [&]() { result.with_shuffle = run_experiment(on, out_dir + "/shuffle_on"); },
      [&]() {
        result.without_shuffle = run_experiment(off, out_dir + "/shuffle_off");
      }};
  run_cells(runs.size(), 2, [&](std::size_t i) { runs[i](); });

  result.curves.with_shuffle = result.with_shuffle.curves;
  result.curves.without_shuffle = result.without_shuffle.curves;

  const std::string csv = out_dir + "/ablate_bn.csv";
  std::ofstream out(csv);
  if (!out) throw IoError("cannot create " + csv);
  out << "epoch,pretext_acc_shuffle_on,knn_val_shuffle_on,"
         "pretext_acc_shuffle_off,knn_val_shuffle_off\n";
  const auto& a = result.curves.with_shuffle;
  const auto& b = result.curves.without_shuffle;
  const std::size_t rows = std::max(a.epochs.size(), b.epochs.size());
  for (std::size_t i = 0; i < rows; ++i) {
    out << (i < a.epochs.size() ? std::to_string(a.epochs[i])
                                : std::to_string(b.epochs[i]))
        << ',' << (i < a.pretext_acc.size() ? format_double(a.pretext_acc[i]) : "")
        << ',' << (i < a.knn_val_acc.size() ? format_double(a.knn_val_acc[i]) : "")
        << ',' << (i < b.pretext_acc.size() ? format_double(b.pretext_acc[i]) : "")
        << ',' << (i < b.knn_val_acc.size() ? format_double(b.knn_val_acc[i]) : "")
        << '\n';
  }
  result.csv_path = csv;
  return result;
}

}  // namespace moco

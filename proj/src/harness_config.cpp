#include <fstream>

#include <json.hpp>

#include "moco/harness.hpp"

namespace moco {

using nlohmann::json;

namespace {

void expect_keys(const json& j, std::initializer_list<const char*> keys,
                 const std::string& where) {
  for (const auto& [key, value] : j.items()) {
    bool known = false;
    for (const char* k : keys) {
      if (key == k) {
        known = true;
        break;
      }
    }
    if (!known) {
      throw ConfigError("unknown config key '" + where + "." + key + "'");
    }
  }
}

template <typename T>
T get_or(const json& j, const char* key, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config key '") + key + "': " + e.what());
  }
}

Mechanism parse_mechanism(const std::string& s) {
  if (s == "moco") return Mechanism::moco;
  if (s == "end_to_end") return Mechanism::end_to_end;
  if (s == "memory_bank") return Mechanism::memory_bank;
  throw ConfigError("mechanism must be moco|end_to_end|memory_bank, got '" + s +
                    "'");
}

QueueInitMode parse_queue_init(const std::string& s) {
  if (s == "random_warm") return QueueInitMode::random_warm;
  if (s == "fill_first") return QueueInitMode::fill_first;
  throw ConfigError("queue_init must be random_warm|fill_first, got '" + s +
                    "'");
}

Arch parse_arch(const std::string& s) {
  if (s == "mlp") return Arch::mlp;
  if (s == "small_conv") return Arch::small_conv;
  throw ConfigError("encoder.arch must be mlp|small_conv, got '" + s + "'");
}

BnBufferUpdate parse_bn_buffers(const std::string& s) {
  if (s == "copy") return BnBufferUpdate::copy;
  if (s == "momentum") return BnBufferUpdate::momentum;
  throw ConfigError("encoder.bn_buffers must be copy|momentum, got '" + s + "'");
}

TowerMode parse_towers(const std::string& s) {
  if (s == "shared") return TowerMode::shared;
  if (s == "separate") return TowerMode::separate;
  throw ConfigError("e2e.towers must be shared|separate, got '" + s + "'");
}

DataSource parse_source(const std::string& s) {
  if (s == "synth") return DataSource::synth;
  if (s == "idx") return DataSource::idx;
  throw ConfigError("data.source must be synth|idx, got '" + s + "'");
}

const char* arch_str(Arch a) { return a == Arch::mlp ? "mlp" : "small_conv"; }

}  // namespace

const char* to_string(Mechanism m) {
  switch (m) {
    case Mechanism::moco: return "moco";
    case Mechanism::end_to_end: return "end_to_end";
    case Mechanism::memory_bank: return "memory_bank";
  }
  return "?";
}

ExperimentConfig default_config() { return ExperimentConfig{}; }

ExperimentConfig config_from_json_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("config root must be a JSON object");
  expect_keys(j,
              {"schema_version", "mechanism", "seed", "deterministic", "epochs",
               "batch", "K", "queue_init", "m", "tau", "feature_momentum",
               "optimizer", "encoder", "shuffle_bn", "data", "eval", "e2e",
               "checkpoint_every_epochs"},
              "config");

  ExperimentConfig cfg;
  cfg.schema_version = get_or<int>(j, "schema_version", 1);
  if (cfg.schema_version != 1) {
    throw ConfigError("unsupported schema_version " +
                      std::to_string(cfg.schema_version));
  }
  cfg.mechanism =
      parse_mechanism(get_or<std::string>(j, "mechanism", "moco"));
  cfg.seed = get_or<std::uint64_t>(j, "seed", 1);
  cfg.deterministic = get_or<bool>(j, "deterministic", true);
  cfg.epochs = get_or<std::size_t>(j, "epochs", 30);
  cfg.batch = get_or<std::size_t>(j, "batch", 64);
  cfg.K = get_or<std::size_t>(j, "K", 1024);
  cfg.queue_init =
      parse_queue_init(get_or<std::string>(j, "queue_init", "random_warm"));
  cfg.m = get_or<double>(j, "m", 0.999);
  cfg.tau = get_or<double>(j, "tau", 0.07);
  cfg.feature_momentum = get_or<double>(j, "feature_momentum", 0.5);
  cfg.checkpoint_every_epochs =
      get_or<std::size_t>(j, "checkpoint_every_epochs", 0);
  cfg.shuffle_bn = get_or<bool>(j, "shuffle_bn", true);

  if (j.contains("optimizer")) {
    const json& o = j.at("optimizer");
    expect_keys(o, {"lr", "momentum", "weight_decay", "milestones", "decay"},
                "optimizer");
    cfg.optimizer.lr = get_or<double>(o, "lr", 0.03);
    cfg.optimizer.momentum = get_or<double>(o, "momentum", 0.9);
    cfg.optimizer.weight_decay = get_or<double>(o, "weight_decay", 1e-4);
    cfg.optimizer.milestones =
        get_or<std::vector<std::size_t>>(o, "milestones", {});
    cfg.optimizer.decay = get_or<double>(o, "decay", 0.1);
  }

  if (j.contains("encoder")) {
    const json& e = j.at("encoder");
    expect_keys(e,
                {"arch", "widths", "input_shape", "feature_dim", "use_bn",
                 "bn_shards", "bn_buffers"},
                "encoder");
    cfg.encoder.arch = parse_arch(get_or<std::string>(e, "arch", "mlp"));
    const std::vector<std::size_t> default_widths =
        cfg.encoder.arch == Arch::mlp ? std::vector<std::size_t>{256, 128}
                                      : std::vector<std::size_t>{16, 32};
    cfg.encoder.widths =
        get_or<std::vector<std::size_t>>(e, "widths", default_widths);
    cfg.encoder.input_shape = get_or<Shape>(e, "input_shape", {});
    cfg.encoder.feature_dim = get_or<std::size_t>(e, "feature_dim", 128);
    cfg.encoder.use_bn = get_or<bool>(e, "use_bn", true);
    cfg.encoder.bn_shards = get_or<std::size_t>(e, "bn_shards", 4);
    cfg.encoder.bn_buffers =
        parse_bn_buffers(get_or<std::string>(e, "bn_buffers", "copy"));
  } else {
    cfg.encoder.input_shape = {};
  }

  if (j.contains("data")) {
    const json& d = j.at("data");
    expect_keys(d,
                {"source", "train_images", "train_labels", "val_images",
                 "val_labels", "synth", "augment", "prefetch"},
                "data");
    cfg.data.source = parse_source(get_or<std::string>(d, "source", "synth"));
    cfg.data.train_images = get_or<std::string>(d, "train_images", "");
    cfg.data.train_labels = get_or<std::string>(d, "train_labels", "");
    cfg.data.val_images = get_or<std::string>(d, "val_images", "");
    cfg.data.val_labels = get_or<std::string>(d, "val_labels", "");
    cfg.data.prefetch = get_or<bool>(d, "prefetch", true);
    if (d.contains("synth")) {
      const json& s = d.at("synth");
      expect_keys(s,
                  {"classes", "train_per_class", "val_per_class", "shape",
                   "class_sep", "noise_sigma", "seed"},
                  "data.synth");
      cfg.data.synth.classes = get_or<std::size_t>(s, "classes", 10);
      cfg.data.synth.train_per_class =
          get_or<std::size_t>(s, "train_per_class", 500);
      cfg.data.synth.val_per_class =
          get_or<std::size_t>(s, "val_per_class", 100);
      cfg.data.synth.shape = get_or<Shape>(s, "shape", {32});
      cfg.data.synth.class_sep = get_or<double>(s, "class_sep", 4.0);
      cfg.data.synth.noise_sigma = get_or<double>(s, "noise_sigma", 1.0);
      cfg.data.synth.seed = get_or<std::uint64_t>(s, "seed", 7);
    }
    if (d.contains("augment")) {
      const json& a = d.at("augment");
      expect_keys(a,
                  {"crop_pad", "flip_prob", "jitter_strength", "grayscale_prob",
                   "vector_noise_sigma", "vector_dropout_prob"},
                  "data.augment");
      cfg.data.augment.crop_pad = get_or<int>(a, "crop_pad", 4);
      cfg.data.augment.flip_prob = get_or<double>(a, "flip_prob", 0.5);
      cfg.data.augment.jitter_strength =
          get_or<double>(a, "jitter_strength", 0.4);
      cfg.data.augment.grayscale_prob =
          get_or<double>(a, "grayscale_prob", 0.2);
      cfg.data.augment.vector_noise_sigma =
          get_or<double>(a, "vector_noise_sigma", 0.1);
      cfg.data.augment.vector_dropout_prob =
          get_or<double>(a, "vector_dropout_prob", 0.2);
    }
  }

  if (j.contains("eval")) {
    const json& e = j.at("eval");
    expect_keys(e,
                {"cadence_epochs", "knn_k", "knn_temperature", "probe",
                 "probe_lr_grid", "probe_epochs", "probe_batch",
                 "probe_weight_decay", "probe_momentum"},
                "eval");
    cfg.eval.cadence_epochs = get_or<std::size_t>(e, "cadence_epochs", 1);
    cfg.eval.knn_k = get_or<std::size_t>(e, "knn_k", 20);
    cfg.eval.knn_temperature = get_or<double>(e, "knn_temperature", 0.07);
    cfg.eval.probe = get_or<bool>(e, "probe", true);
    cfg.eval.probe_lr_grid =
        get_or<std::vector<double>>(e, "probe_lr_grid", {0.3, 3.0, 30.0});
    cfg.eval.probe_epochs = get_or<std::size_t>(e, "probe_epochs", 100);
    cfg.eval.probe_batch = get_or<std::size_t>(e, "probe_batch", 256);
    cfg.eval.probe_weight_decay = get_or<double>(e, "probe_weight_decay", 0.0);
    cfg.eval.probe_momentum = get_or<double>(e, "probe_momentum", 0.9);
  }

  if (j.contains("e2e")) {
    const json& e = j.at("e2e");
    expect_keys(e, {"towers", "lr_scaling", "max_batch"}, "e2e");
    cfg.e2e.towers = parse_towers(get_or<std::string>(e, "towers", "shared"));
    cfg.e2e.lr_scaling = get_or<bool>(e, "lr_scaling", true);
    cfg.e2e.max_batch = get_or<std::size_t>(e, "max_batch", 1024);
  }

  validate(cfg);
  return cfg;
}

std::string config_to_json_text(const ExperimentConfig& cfg) {
  json j;
  j["schema_version"] = cfg.schema_version;
  j["mechanism"] = to_string(cfg.mechanism);
  j["seed"] = cfg.seed;
  j["deterministic"] = cfg.deterministic;
  j["epochs"] = cfg.epochs;
  j["batch"] = cfg.batch;
  j["K"] = cfg.K;
  j["queue_init"] = cfg.queue_init == QueueInitMode::random_warm
                        ? "random_warm"
                        : "fill_first";
  j["m"] = cfg.m;
  j["tau"] = cfg.tau;
  j["feature_momentum"] = cfg.feature_momentum;
  j["checkpoint_every_epochs"] = cfg.checkpoint_every_epochs;
  j["shuffle_bn"] = cfg.shuffle_bn;
  j["optimizer"] = {{"lr", cfg.optimizer.lr},
                    {"momentum", cfg.optimizer.momentum},
                    {"weight_decay", cfg.optimizer.weight_decay},
                    {"milestones", cfg.optimizer.milestones},
                    {"decay", cfg.optimizer.decay}};
  j["encoder"] = {{"arch", arch_str(cfg.encoder.arch)},
                  {"widths", cfg.encoder.widths},
                  {"input_shape", cfg.encoder.input_shape},
                  {"feature_dim", cfg.encoder.feature_dim},
                  {"use_bn", cfg.encoder.use_bn},
                  {"bn_shards", cfg.encoder.bn_shards},
                  {"bn_buffers", cfg.encoder.bn_buffers == BnBufferUpdate::copy
                                     ? "copy"
                                     : "momentum"}};
  j["data"] = {
      {"source", cfg.data.source == DataSource::synth ? "synth" : "idx"},
      {"train_images", cfg.data.train_images},
      {"train_labels", cfg.data.train_labels},
      {"val_images", cfg.data.val_images},
      {"val_labels", cfg.data.val_labels},
      {"prefetch", cfg.data.prefetch},
      {"synth",
       {{"classes", cfg.data.synth.classes},
        {"train_per_class", cfg.data.synth.train_per_class},
        {"val_per_class", cfg.data.synth.val_per_class},
        {"shape", cfg.data.synth.shape},
        {"class_sep", cfg.data.synth.class_sep},
        {"noise_sigma", cfg.data.synth.noise_sigma},
        {"seed", cfg.data.synth.seed}}},
      {"augment",
       {{"crop_pad", cfg.data.augment.crop_pad},
        {"flip_prob", cfg.data.augment.flip_prob},
        {"jitter_strength", cfg.data.augment.jitter_strength},
        {"grayscale_prob", cfg.data.augment.grayscale_prob},
        {"vector_noise_sigma", cfg.data.augment.vector_noise_sigma},
        {"vector_dropout_prob", cfg.data.augment.vector_dropout_prob}}}};
  j["eval"] = {{"cadence_epochs", cfg.eval.cadence_epochs},
               {"knn_k", cfg.eval.knn_k},
               {"knn_temperature", cfg.eval.knn_temperature},
               {"probe", cfg.eval.probe},
               {"probe_lr_grid", cfg.eval.probe_lr_grid},
               {"probe_epochs", cfg.eval.probe_epochs},
               {"probe_batch", cfg.eval.probe_batch},
               {"probe_weight_decay", cfg.eval.probe_weight_decay},
               {"probe_momentum", cfg.eval.probe_momentum}};
  j["e2e"] = {{"towers",
               cfg.e2e.towers == TowerMode::shared ? "shared" : "separate"},
              {"lr_scaling", cfg.e2e.lr_scaling},
              {"max_batch", cfg.e2e.max_batch}};
  return j.dump();
}

ExperimentConfig load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  std::string text((std::istreambuf_iterator<char>(in)),
                   std::istreambuf_iterator<char>());
  return config_from_json_text(text);
}

void validate(const ExperimentConfig& cfg) {
  if (cfg.epochs == 0) throw ConfigError("epochs must be >= 1");
  if (cfg.batch < 2) throw ConfigError("batch must be >= 2");
  if (cfg.K < 1) throw ConfigError("K must be >= 1");
  if (cfg.m < 0.0 || cfg.m >= 1.0) {
    throw ConfigError("m must lie in [0, 1), got " + std::to_string(cfg.m));
  }
  if (cfg.tau <= 0.0) throw ConfigError("tau must be positive");
  if (cfg.feature_momentum < 0.0 || cfg.feature_momentum >= 1.0) {
    throw ConfigError("feature_momentum must lie in [0, 1)");
  }
  if (cfg.optimizer.lr <= 0.0) throw ConfigError("optimizer.lr must be positive");
  if (cfg.optimizer.momentum < 0.0 || cfg.optimizer.momentum >= 1.0) {
    throw ConfigError("optimizer.momentum must lie in [0, 1)");
  }
  if (cfg.optimizer.weight_decay < 0.0) {
    throw ConfigError("optimizer.weight_decay must be >= 0");
  }
  for (std::size_t ms : cfg.optimizer.milestones) {
    if (ms >= cfg.epochs) {
      throw ConfigError("lr milestone " + std::to_string(ms) +
                        " beyond last epoch");
    }
  }
  if (cfg.encoder.use_bn && cfg.batch % cfg.encoder.bn_shards != 0) {
    throw ConfigError("batch " + std::to_string(cfg.batch) +
                      " must divide into bn_shards " +
                      std::to_string(cfg.encoder.bn_shards));
  }
  if (cfg.encoder.use_bn && cfg.batch / cfg.encoder.bn_shards < 2) {
    throw ConfigError("bn shards need >= 2 samples each");
  }
  if (cfg.encoder.feature_dim < 2) throw ConfigError("feature_dim must be >= 2");
  if (cfg.encoder.widths.empty()) throw ConfigError("encoder.widths empty");
  if (cfg.data.source == DataSource::idx) {
    if (cfg.data.train_images.empty() || cfg.data.train_labels.empty() ||
        cfg.data.val_images.empty() || cfg.data.val_labels.empty()) {
      throw ConfigError("idx data source requires all four file paths");
    }
  } else {
    if (cfg.data.synth.classes < 2) throw ConfigError("synth.classes >= 2");
    if (cfg.data.synth.train_per_class == 0 ||
        cfg.data.synth.val_per_class == 0) {
      throw ConfigError("synth per-class counts must be positive");
    }
  }
  if (cfg.eval.probe && cfg.eval.probe_lr_grid.empty()) {
    throw ConfigError("probe_lr_grid must not be empty");
  }
  if (cfg.eval.knn_k < 1) throw ConfigError("knn_k must be >= 1");
}

std::uint64_t config_hash(const ExperimentConfig& cfg) {
  return fnv1a64(config_to_json_text(cfg));
}

}  // namespace moco

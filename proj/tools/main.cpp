#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "moco/gradcheck.hpp"
#include "moco/harness.hpp"

using namespace moco;

namespace {

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::vector<std::size_t> parse_size_list(const std::string& s,
                                         const char* what) {
  std::vector<std::size_t> out;
  for (const auto& item : split_list(s)) {
    try {
      out.push_back(std::stoull(item));
    } catch (const std::exception&) {
      throw ConfigError(std::string("bad ") + what + " value '" + item + "'");
    }
  }
  return out;
}

std::vector<double> parse_double_list(const std::string& s, const char* what) {
  std::vector<double> out;
  for (const auto& item : split_list(s)) {
    try {
      out.push_back(std::stod(item));
    } catch (const std::exception&) {
      throw ConfigError(std::string("bad ") + what + " value '" + item + "'");
    }
  }
  return out;
}

std::vector<std::uint64_t> seeds_for(const std::string& list,
                                     std::uint64_t base_seed,
                                     std::size_t count) {
  if (!list.empty()) {
    std::vector<std::uint64_t> out;
    for (std::size_t v : parse_size_list(list, "seed")) out.push_back(v);
    return out;
  }
  std::vector<std::uint64_t> out;
  for (std::size_t i = 0; i < count; ++i) out.push_back(base_seed + i);
  return out;
}

ExperimentConfig load_with_overrides(const std::string& config_path,
                                     std::optional<std::uint64_t> seed,
                                     bool deterministic_flag) {
  ExperimentConfig cfg = load_config_file(config_path);
  if (seed) cfg.seed = *seed;
  if (deterministic_flag) cfg.deterministic = true;
  return cfg;
}

void print_summary(const RunResult& res) {
  std::printf("metrics: %s\n", res.metrics_path.c_str());
  if (!res.checkpoint_path.empty()) {
    std::printf("checkpoint: %s\n", res.checkpoint_path.c_str());
  }
  if (res.diverged) {
    std::printf("status: diverged (NaN loss)\n");
    return;
  }
  std::printf("status: %s\n", res.exit_code == 0 ? "converged" : "diverged");
  if (std::isfinite(res.final_knn)) {
    std::printf("final knn_val_acc: %.4f\n", res.final_knn);
  }
  if (std::isfinite(res.probe_acc)) {
    std::printf("probe_acc: %.4f (lr %.3g)\n", res.probe_acc, res.probe_lr);
  }
  std::printf("oscillation: %.4f\n", res.oscillation);
}

void print_table(const SweepTable& table) {
  std::printf("table: %s\n", table.csv_path.c_str());
  for (const auto& c : table.cells) {
    std::printf("  %-12s", to_string(c.mechanism));
    if (c.K) std::printf(" K=%-6zu", *c.K);
    if (c.m) std::printf(" m=%-7.4f", *c.m);
    std::printf(" seed=%-4llu %-12s",
                static_cast<unsigned long long>(c.seed), c.status.c_str());
    if (std::isfinite(c.summary.final_knn)) {
      std::printf(" knn=%.4f", c.summary.final_knn);
    }
    if (std::isfinite(c.summary.oscillation)) {
      std::printf(" osc=%.4f", c.summary.oscillation);
    }
    std::printf("\n");
  }
}

int dispatch(int argc, char** argv) {
  CLI::App app{"contrastive dictionary-learning experiments"};
  app.require_subcommand(1);

  auto* train = app.add_subcommand("train", "run one experiment");
  std::string train_config, train_out = "runs/train", train_resume;
  std::optional<std::uint64_t> train_seed;
  bool train_det = false;
  train->add_option("--config", train_config)->required();
  train->add_option("--seed", train_seed);
  train->add_option("--out", train_out);
  train->add_option("--resume", train_resume);
  train->add_flag("--deterministic", train_det);

  auto* sweepk = app.add_subcommand("sweep-k", "dictionary-size sweep");
  std::string sk_config, sk_ks = "16,64,256,1024", sk_mechs = "moco",
              sk_seeds, sk_out = "runs/sweep_k";
  std::size_t sk_jobs = 2;
  sweepk->add_option("--config", sk_config)->required();
  sweepk->add_option("--ks", sk_ks);
  sweepk->add_option("--mechanisms", sk_mechs);
  sweepk->add_option("--seeds", sk_seeds);
  sweepk->add_option("--out", sk_out);
  sweepk->add_option("--jobs", sk_jobs);

  auto* sweepm = app.add_subcommand("sweep-m", "key-encoder momentum sweep");
  std::string sm_config, sm_ms = "0,0.9,0.99,0.999", sm_seeds,
              sm_out = "runs/sweep_m";
  std::size_t sm_jobs = 2;
  sweepm->add_option("--config", sm_config)->required();
  sweepm->add_option("--ms", sm_ms);
  sweepm->add_option("--seeds", sm_seeds);
  sweepm->add_option("--out", sm_out);
  sweepm->add_option("--jobs", sm_jobs);

  auto* ablate = app.add_subcommand("ablate-bn", "shuffled-BN ablation pair");
  std::string ab_config, ab_out = "runs/ablate_bn";
  ablate->add_option("--config", ab_config)->required();
  ablate->add_option("--out", ab_out);

  auto* evalc = app.add_subcommand("eval", "evaluate a checkpoint");
  std::string ev_ckpt, ev_data;
  bool ev_probe = false, ev_knn = false;
  evalc->add_option("--checkpoint", ev_ckpt)->required();
  evalc->add_option("--data", ev_data)->description("override source: synth|idx");
  evalc->add_flag("--probe", ev_probe);
  evalc->add_flag("--knn", ev_knn);

  auto* gc = app.add_subcommand("gradcheck", "finite-difference oracle suite");
  std::size_t gc_instances = 20;
  std::uint64_t gc_seed = 1;
  gc->add_option("--instances", gc_instances);
  gc->add_option("--seed", gc_seed);

  auto* gen = app.add_subcommand("gen-data", "write a synthetic IDX corpus");
  std::string gen_spec, gen_out = "data";
  gen->add_option("--spec", gen_spec)->required();
  gen->add_option("--out", gen_out);

  CLI11_PARSE(app, argc, argv);

  if (train->parsed()) {
    ExperimentConfig cfg =
        load_with_overrides(train_config, train_seed, train_det);
    const RunResult res =
        train_resume.empty()
            ? run_experiment(cfg, train_out)
            : run_experiment_resumed(cfg, train_resume, train_out);
    print_summary(res);
    return res.exit_code;
  }

  if (sweepk->parsed()) {
    ExperimentConfig cfg = load_with_overrides(sk_config, std::nullopt, false);
    std::vector<Mechanism> mechs;
    for (const auto& name : split_list(sk_mechs)) {
      if (name == "moco") mechs.push_back(Mechanism::moco);
      else if (name == "end_to_end") mechs.push_back(Mechanism::end_to_end);
      else if (name == "memory_bank") mechs.push_back(Mechanism::memory_bank);
      else throw ConfigError("unknown mechanism '" + name + "'");
    }
    const SweepTable table =
        sweep_K(cfg, parse_size_list(sk_ks, "K"), mechs,
                seeds_for(sk_seeds, cfg.seed, 3), sk_out, sk_jobs);
    print_table(table);
    return 0;
  }

  if (sweepm->parsed()) {
    ExperimentConfig cfg = load_with_overrides(sm_config, std::nullopt, false);
    const SweepTable table =
        sweep_momentum(cfg, parse_double_list(sm_ms, "m"),
                       seeds_for(sm_seeds, cfg.seed, 3), sm_out, sm_jobs);
    print_table(table);
    return 0;
  }

  if (ablate->parsed()) {
    ExperimentConfig cfg = load_with_overrides(ab_config, std::nullopt, false);
    const AblationResult res = ablate_shuffle_bn(cfg, ab_out);
    std::printf("curves: %s\n", res.csv_path.c_str());
    const auto& on = res.curves.with_shuffle;
    const auto& off = res.curves.without_shuffle;
    if (!on.knn_val_acc.empty() && !off.knn_val_acc.empty()) {
      std::printf("final knn: shuffle_on=%.4f shuffle_off=%.4f\n",
                  on.knn_val_acc.back(), off.knn_val_acc.back());
    }
    if (!on.pretext_acc.empty() && !off.pretext_acc.empty()) {
      std::printf("final pretext: shuffle_on=%.4f shuffle_off=%.4f\n",
                  on.pretext_acc.back(), off.pretext_acc.back());
    }
    return 0;
  }

  if (evalc->parsed()) {
    ExperimentConfig cfg;
    Encoder enc = encoder_from_checkpoint(ev_ckpt, &cfg);
    if (ev_data == "synth") cfg.data.source = DataSource::synth;
    else if (ev_data == "idx") cfg.data.source = DataSource::idx;
    else if (!ev_data.empty()) throw ConfigError("--data must be synth|idx");
    DataBundle data = build_datasets(cfg);
    if (!ev_probe && !ev_knn) ev_probe = ev_knn = true;
    if (ev_knn) {
      FeatureMatrix tr =
          extract_features(enc, data.train, FeatureTap::projection_output);
      FeatureMatrix va =
          extract_features(enc, data.val, FeatureTap::projection_output);
      const double acc =
          knn_monitor(tr, va, cfg.eval.knn_k, cfg.eval.knn_temperature);
      std::printf("knn_val_acc: %.4f\n", acc);
    }
    if (ev_probe) {
      FeatureMatrix tr =
          extract_features(enc, data.train, FeatureTap::pre_projection);
      FeatureMatrix va =
          extract_features(enc, data.val, FeatureTap::pre_projection);
      ProbeConfig pc;
      pc.lr_grid = cfg.eval.probe_lr_grid;
      pc.weight_decay = cfg.eval.probe_weight_decay;
      pc.momentum = cfg.eval.probe_momentum;
      pc.epochs = cfg.eval.probe_epochs;
      pc.batch = cfg.eval.probe_batch;
      pc.seed = derive_key(cfg.seed, "probe");
      const ProbeResult res = linear_probe(tr, va, pc);
      if (res.diverged) {
        std::printf("probe: diverged on every lr in the grid\n");
        return 3;
      }
      std::printf("probe_acc: %.4f (lr %.3g)\n", res.accuracy, res.best_lr);
    }
    return 0;
  }

  if (gc->parsed()) {
    const GradCheckReport report = run_gradcheck(gc_seed, gc_instances);
    std::printf("%-24s %-10s %s\n", "op", "instances", "max_rel_err");
    for (const auto& c : report.cases) {
      std::printf("%-24s %-10zu %.3e\n", c.op.c_str(), c.instances,
                  c.max_rel_err);
    }
    const bool ok = report.pass(1e-4);
    std::printf("gradcheck %s (overall max %.3e, tolerance 1e-4)\n",
                ok ? "PASS" : "FAIL", report.overall_max);
    return ok ? 0 : 1;
  }

  if (gen->parsed()) {
    std::ifstream in(gen_spec);
    if (!in) throw ConfigError("cannot open spec file " + gen_spec);
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("bad spec JSON: ") + e.what());
    }
    for (const auto& [key, value] : j.items()) {
      static const std::vector<std::string> known = {
          "classes", "per_class", "shape", "class_sep", "noise_sigma", "seed"};
      if (std::find(known.begin(), known.end(), key) == known.end()) {
        throw ConfigError("unknown spec key '" + key + "'");
      }
    }
    SynthSpec spec;
    spec.n_classes = j.value("classes", std::size_t{10});
    spec.n_per_class = j.value("per_class", std::size_t{100});
    spec.shape = j.value("shape", Shape{1, 28, 28});
    spec.class_sep = j.value("class_sep", 4.0);
    spec.noise_sigma = j.value("noise_sigma", 1.0);
    spec.seed = j.value("seed", std::uint64_t{7});
    if (spec.shape.size() != 3 || spec.shape[0] != 1) {
      throw ConfigError(
          "gen-data writes IDX image files and needs shape [1,H,W]; vector "
          "corpora are generated in-memory by the synth data source");
    }
    const Dataset ds = synth_clusters(spec);
    std::filesystem::create_directories(gen_out);
    const std::string images = gen_out + "/images.idx";
    const std::string labels = gen_out + "/labels.idx";
    write_idx(ds, images, labels);
    std::printf("wrote %zu samples to %s / %s\n", ds.size(), images.c_str(),
                labels.c_str());
    return 0;
  }

  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return dispatch(argc, argv);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const DivergenceError& e) {
    std::cerr << "divergence: " << e.what() << "\n";
    return 3;
  } catch (const FormatError& e) {
    std::cerr << "format error: " << e.what() << "\n";
    return 4;
  } catch (const IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return 4;
  } catch (const ConsistencyError& e) {
    std::cerr << "consistency error: " << e.what() << "\n";
    return 4;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

// retro: command-line driver for teacher pretraining, distillation and evaluation.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <random>

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include "retro/checkpoint.hpp"
#include "retro/config.hpp"
#include "retro/errors.hpp"
#include "retro/eval.hpp"
#include "retro/logging.hpp"
#include "retro/metrics.hpp"
#include "retro/ops.hpp"
#include "retro/report.hpp"
#include "retro/train.hpp"

namespace fs = std::filesystem;
using namespace retro;

namespace {

struct CommonOptions {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<int> threads;
};

void add_common(CLI::App* cmd, CommonOptions& opts) {
  cmd->add_option("--config", opts.config, "Experiment config file (key = value lines)")
      ->required()
      ->check(CLI::ExistingFile);
  cmd->add_option("--seed", opts.seed, "Override the config seed");
  cmd->add_option("--out", opts.out, "Override the output directory");
  cmd->add_option("--threads", opts.threads,
                  "BLAS threads; more than 1 gives up bitwise reproducibility");
}

ExperimentConfig prepare(const CommonOptions& opts) {
  ExperimentConfig cfg = load_config(opts.config);
  if (opts.seed) cfg.set_seed(*opts.seed);
  if (opts.out) cfg.out_dir = *opts.out;
  if (opts.threads) cfg.threads = *opts.threads;
  cfg.validate();
  set_compute_threads(cfg.threads);
  if (cfg.threads > 1) spdlog::warn("threads = {}: results are not bitwise reproducible", cfg.threads);
  return cfg;
}

// Creates the run directory and records the resolved config beside the outputs.
void open_run_dir(const ExperimentConfig& cfg) {
  fs::create_directories(cfg.out_dir);
  std::ofstream(fs::path(cfg.out_dir) / "config.txt") << serialize_config(cfg);
  std::ofstream(fs::path(cfg.out_dir) / "fingerprint.txt") << config_fingerprint(cfg) << '\n';
}

struct RunSinks {
  MetricsWriter steps;
  MetricsWriter epochs;
  explicit RunSinks(const fs::path& dir) : steps(dir / "metrics.csv"), epochs(dir / "epochs.csv") {}

  train::TrainHooks hooks(const ExperimentConfig& cfg) {
    train::TrainHooks h;
    h.run_id = cfg.run_id;
    h.on_step = steps.sink();
    h.on_epoch = epochs.sink();
    h.record_wall_time = cfg.wall_time;
    return h;
  }
};

int cmd_pretrain(const CommonOptions& opts) {
  ExperimentConfig cfg = prepare(opts);
  if (cfg.train.mode != train::TrainMode::kBaselineMoco) {
    throw ConfigError("pretrain-teacher needs mode = baseline_moco (config has mode = " +
                      train::to_string(cfg.train.mode) + ")");
  }
  open_run_dir(cfg);
  const data::Dataset ds = load_train_split(cfg);
  RunSinks sinks(cfg.out_dir);
  auto result = train::pretrain_teacher(ds, cfg.train, cfg.trained_encoder(), cfg.moco_head(),
                                        cfg.aug, sinks.hooks(cfg));
  const fs::path ckpt = fs::path(cfg.out_dir) / "model.ckpt";
  ckpt::save(ckpt, ckpt::moco_tensors(result.state));
  spdlog::info("wrote {}", ckpt.string());
  return 0;
}

nn::Network load_teacher(const ExperimentConfig& cfg) {
  if (cfg.teacher_checkpoint.empty() || !fs::exists(cfg.teacher_checkpoint)) {
    throw ConfigError("teacher checkpoint '" + cfg.teacher_checkpoint +
                      "' not found: run pretrain-teacher first and set train.teacher_checkpoint");
  }
  nn::Network teacher = nn::Network::build(cfg.teacher, std::nullopt, cfg.teacher_head(), cfg.seed);
  ckpt::restore_network(ckpt::load(cfg.teacher_checkpoint, "query."), "query.", teacher);
  return teacher;
}

int cmd_distill(const CommonOptions& opts) {
  ExperimentConfig cfg = prepare(opts);
  if (cfg.train.mode == train::TrainMode::kBaselineMoco) {
    throw ConfigError("distill needs mode = retro or disco; use pretrain-teacher for baseline_moco");
  }
  nn::Network teacher = load_teacher(cfg);
  open_run_dir(cfg);
  const data::Dataset ds = load_train_split(cfg);
  RunSinks sinks(cfg.out_dir);
  auto state = train::init_distill(std::move(teacher), cfg.student, cfg.train, cfg.disco_head_hidden);
  train::run_distillation(state, ds, cfg.train, cfg.aug, sinks.hooks(cfg));
  const fs::path ckpt = fs::path(cfg.out_dir) / "model.ckpt";
  ckpt::save(ckpt, ckpt::distill_tensors(state));
  spdlog::info("wrote {}", ckpt.string());
  return 0;
}

nn::Encoder load_encoder(const ExperimentConfig& cfg) {
  const fs::path path = cfg.probe_checkpoint.empty() ? fs::path(cfg.out_dir) / "model.ckpt"
                                                     : fs::path(cfg.probe_checkpoint);
  if (!fs::exists(path)) {
    throw ConfigError("checkpoint '" + path.string() +
                      "' not found: run pretrain-teacher or distill with this config first");
  }
  std::mt19937_64 rng(cfg.seed);
  nn::Encoder encoder(cfg.trained_encoder(), rng);
  const std::string prefix = cfg.network_prefix();
  ckpt::restore_encoder(ckpt::load(path, prefix + "encoder."), prefix, encoder);
  return encoder;
}

void finish_eval(const ExperimentConfig& cfg, eval::EvalReport report, const std::string& stem) {
  report.fingerprint = config_fingerprint(cfg);
  fs::create_directories(cfg.out_dir);
  eval::write_eval_report(report, cfg.out_dir, stem);
  std::printf("%s top1=%.4f top5=%.4f n=%zu\n", report.kind.c_str(), report.top1, report.top5,
              report.test_size);
}

int cmd_probe(const CommonOptions& opts) {
  const ExperimentConfig cfg = prepare(opts);
  const nn::Encoder encoder = load_encoder(cfg);
  finish_eval(cfg, eval::linear_probe(encoder, load_train_split(cfg), load_test_split(cfg), cfg.probe),
              "eval");
  return 0;
}

int cmd_knn(const CommonOptions& opts) {
  const ExperimentConfig cfg = prepare(opts);
  const nn::Encoder encoder = load_encoder(cfg);
  finish_eval(cfg, eval::knn_eval(encoder, load_train_split(cfg), load_test_split(cfg), cfg.knn_k),
              "knn");
  return 0;
}

int cmd_finetune(const CommonOptions& opts) {
  const ExperimentConfig cfg = prepare(opts);
  const nn::Encoder encoder = load_encoder(cfg);
  finish_eval(cfg,
              eval::semi_supervised_finetune(encoder, load_train_split(cfg), load_test_split(cfg),
                                             cfg.label_fraction, cfg.finetune),
              "finetune");
  return 0;
}

int cmd_report(const std::string& dir) {
  const auto rows = export_report(dir);
  std::printf("%-16s %-14s %8s %8s\n", "run_id", "mode", "loss", "top1");
  for (const auto& r : rows) {
    std::printf("%-16s %-14s %8.4f %8s\n", r.run_id.c_str(), r.mode.c_str(), r.final_loss,
                r.top1 ? fmt::format("{:.4f}", *r.top1).c_str() : "n/a");
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  init_logging();
  CLI::App app{"RETRO: self-supervised distillation with a reused teacher projection head"};
  app.require_subcommand(1);

  CommonOptions pretrain_opts, distill_opts, probe_opts, knn_opts, finetune_opts;
  auto* pretrain = app.add_subcommand("pretrain-teacher",
                                      "Contrastive (MoCo-style) pretraining; mode = baseline_moco");
  add_common(pretrain, pretrain_opts);
  auto* distill = app.add_subcommand("distill", "Distill a student from a pretrained teacher");
  add_common(distill, distill_opts);
  auto* probe = app.add_subcommand("linear-probe", "Linear classifier on frozen encoder features");
  add_common(probe, probe_opts);
  auto* knn = app.add_subcommand("knn", "Cosine k-nearest-neighbour evaluation");
  add_common(knn, knn_opts);
  auto* finetune =
      app.add_subcommand("finetune", "Fine-tune the encoder on a labeled fraction of the train set");
  add_common(finetune, finetune_opts);
  std::string report_dir;
  auto* report = app.add_subcommand("report", "Summarize run directories into CSV tables");
  report->add_option("--dir", report_dir, "Directory holding run directories")
      ->required()
      ->check(CLI::ExistingDirectory);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*pretrain) return cmd_pretrain(pretrain_opts);
    if (*distill) return cmd_distill(distill_opts);
    if (*probe) return cmd_probe(probe_opts);
    if (*knn) return cmd_knn(knn_opts);
    if (*finetune) return cmd_finetune(finetune_opts);
    if (*report) return cmd_report(report_dir);
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 1;
}

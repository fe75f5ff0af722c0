#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "retro/data.hpp"
#include "retro/eval.hpp"
#include "retro/nn.hpp"
#include "retro/train.hpp"

namespace retro {

struct DataConfig {
  std::string source = "synthetic";  // synthetic | cifar
  std::size_t classes = 10;
  std::size_t train_per_class = 500;
  std::size_t test_per_class = 100;
  std::size_t image_size = 32;
  std::uint64_t seed = 1;  // test split uses seed + 1
  std::string cifar_train;
  std::string cifar_test;
};

/// Everything a CLI stage needs. Text form is `key = value` per line with
/// `#` comments; `mode` and `seed` are required, other keys default.
struct ExperimentConfig {
  std::string run_id = "run";
  std::uint64_t seed = 0;
  std::string out_dir = "runs/run";
  int threads = 1;

  DataConfig data;
  data::AugmentationConfig aug;

  nn::EncoderConfig teacher = nn::EncoderConfig::desk_teacher();
  nn::EncoderConfig student = nn::EncoderConfig::desk_student();
  std::size_t embedding_dim = 128;
  std::size_t teacher_head_hidden = 128;
  std::size_t student_head_hidden = 64;  // baseline MoCo student
  std::size_t disco_head_hidden = 128;
  std::string moco_network = "teacher";  // teacher | student, for mode baseline_moco

  train::TrainConfig train;
  std::string teacher_checkpoint;

  eval::ProbeConfig probe;
  std::string probe_checkpoint;  // empty: <out_dir>/model.ckpt
  std::size_t knn_k = 20;
  eval::FinetuneConfig finetune;
  double label_fraction = 0.1;

  bool wall_time = false;

  void validate() const;
  // Seeds of the training, augmentation and evaluation streams follow `seed`.
  void set_seed(std::uint64_t value);

  // Encoder trained by this config's stage and the checkpoint prefix of its network.
  const nn::EncoderConfig& trained_encoder() const;
  std::string network_prefix() const;
  nn::HeadConfig teacher_head() const;
  nn::HeadConfig moco_head() const;
};

ExperimentConfig parse_config(const std::string& text);
ExperimentConfig load_config(const std::filesystem::path& path);
// Canonical form: every key, sorted, one per line.
std::string serialize_config(const ExperimentConfig& cfg);
// FNV-1a 64 of the canonical form, hex.
std::string config_fingerprint(const ExperimentConfig& cfg);

data::Dataset load_train_split(const ExperimentConfig& cfg);
data::Dataset load_test_split(const ExperimentConfig& cfg);

}  // namespace retro

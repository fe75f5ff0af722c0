#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "retro/data.hpp"
#include "retro/nn.hpp"

namespace retro::eval {

struct ProbeConfig {
  int epochs = 30;
  double lr = 3.0;
  std::vector<double> milestones{0.6, 0.8};  // fractions of epochs
  double drop_factor = 10.0;
  std::size_t batch_size = 256;
  double momentum = 0.9;
  double weight_decay = 0.0;
  std::uint64_t seed = 0;

  void validate() const;
  // lr divided by drop_factor once per milestone reached.
  double lr_at_epoch(int epoch) const;
};

/// Settings for full-network fine-tuning on a labeled subset.
struct FinetuneConfig {
  int epochs = 30;
  double lr = 0.05;
  std::vector<double> milestones{0.6, 0.8};
  double drop_factor = 10.0;
  std::size_t batch_size = 64;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::uint64_t seed = 0;

  void validate() const;
  ProbeConfig schedule() const;
};

struct EvalReport {
  std::string kind;  // linear_probe, knn, finetune
  double top1 = 0.0;
  double top5 = 0.0;
  std::vector<double> per_class;
  std::size_t test_size = 0;
  std::string fingerprint;
  std::string subset_hash;  // finetune only
  double label_fraction = 1.0;
};

// Pooled encoder features in eval mode (running batchnorm statistics), [N,D].
// The encoder is copied; the caller's weights and buffers are left untouched.
Tensor extract_features(const nn::Encoder& encoder, const data::Dataset& ds,
                        std::size_t batch_size = 256);

// Top-1/top-5 and per-class accuracy of logits[N,C].
EvalReport score_logits(const Tensor& logits, const std::vector<int>& labels,
                        std::size_t class_count);

// Softmax regression on fixed features with milestone SGD; returns test logits.
Tensor train_linear_classifier(const Tensor& train_features, const std::vector<int>& train_labels,
                               const Tensor& test_features, std::size_t class_count,
                               const ProbeConfig& cfg);

EvalReport linear_probe(const nn::Encoder& encoder, const data::Dataset& train,
                        const data::Dataset& test, const ProbeConfig& cfg);

// Cosine-similarity k-nearest-neighbour vote. Equal similarities prefer the
// lower train index; equal vote counts prefer the smaller class index.
std::vector<int> knn_predict(const Tensor& train_features, const std::vector<int>& train_labels,
                             const Tensor& query_features, std::size_t class_count, std::size_t k);

EvalReport knn_eval(const nn::Encoder& encoder, const data::Dataset& train,
                    const data::Dataset& test, std::size_t k);

// Fine-tunes a copy of the encoder plus a linear classifier on a stratified
// `fraction` of train, then scores on test.
EvalReport semi_supervised_finetune(const nn::Encoder& encoder, const data::Dataset& train,
                                    const data::Dataset& test, double fraction,
                                    const FinetuneConfig& cfg);

// FNV-1a over the selected indices, hex.
std::string subset_hash(const std::vector<std::size_t>& indices);

std::string eval_csv_header();
std::string format_eval_row(const EvalReport& report);
EvalReport parse_eval_csv(const std::filesystem::path& path);

// Writes <stem>.csv (header + one row) and <stem>.json (full detail).
void write_eval_report(const EvalReport& report, const std::filesystem::path& dir,
                       const std::string& stem);

}  // namespace retro::eval

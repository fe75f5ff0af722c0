#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "retro/data.hpp"
#include "retro/memory_bank.hpp"
#include "retro/metrics.hpp"
#include "retro/nn.hpp"

namespace retro::train {

enum class TrainMode { kBaselineMoco, kDisco, kRetro };

std::string to_string(TrainMode mode);
TrainMode parse_train_mode(std::string_view text);

/// Head frozen for epochs [0, frozen_epochs), trainable afterwards.
struct FreezeSchedule {
  int frozen_epochs = 0;
  int unfrozen_epochs = 0;
  bool head_frozen(int epoch) const { return epoch < frozen_epochs; }
};

enum class LrSchedule { kCosine, kConstant };

struct TrainConfig {
  TrainMode mode = TrainMode::kRetro;
  int epochs = 10;
  std::size_t batch_size = 64;
  double lr = 0.06;  // per 256 samples, scaled linearly with batch_size
  double momentum = 0.9;
  double weight_decay = 1e-4;
  double temperature = 0.2;
  double gamma = 1.0;
  double consistency_weight = 1.0;
  double ema_momentum = 0.999;
  std::size_t bank_size = 1024;
  FreezeSchedule freeze{10, 0};
  LrSchedule lr_schedule = LrSchedule::kCosine;
  std::uint64_t seed = 0;

  void validate() const;
  double base_lr() const { return lr * static_cast<double>(batch_size) / 256.0; }
  double lr_at(std::size_t step, std::size_t total_steps) const;
};

struct StepTrace {
  Tensor e_s, e_s_prime, e_t, e_t_prime, e_m, e_m_prime;
  Tensor negatives_v, negatives_v_prime;
};

struct StepMetrics {
  double loss_total = 0.0;
  double loss_dis = 0.0;
  double loss_con = 0.0;
  double lr = 0.0;
  bool head_frozen = false;
  std::size_t forward_passes = 0;
  std::optional<StepTrace> trace;
};

struct TrainHooks {
  std::string run_id = "run";
  MetricsSink on_step;
  MetricsSink on_epoch;
  bool record_wall_time = false;
};

// theta_k <- m * theta_k + (1 - m) * theta_q for every mean parameter and
// buffer, matched by name, accumulated with a per-parameter rounding residual.
// Throws ContractError listing any name difference.
void ema_update(const ConstParameterList& student, const ParameterList& mean, double m);
void ema_update(const nn::Network& student, nn::Network& mean, double m);

// ---- MoCo-style contrastive pretraining (teacher, or baseline student) ----

struct MocoState {
  nn::Network query;
  nn::Network key;
  MemoryBank bank;
  int epoch = 0;
  std::size_t step = 0;
};

MocoState make_moco_state(nn::Network query, const TrainConfig& cfg);
MocoState init_moco(const nn::EncoderConfig& encoder, const nn::HeadConfig& head,
                    const TrainConfig& cfg);

// q = query(v), k = key(v'), loss = info_nce(q, k, bank); SGD on the query,
// EMA into the key, enqueue k.
StepMetrics moco_step(MocoState& state, const data::ViewPair& views, const TrainConfig& cfg,
                      double lr);

// Runs the remaining epochs; returns the mean loss of each epoch run.
std::vector<double> run_moco(MocoState& state, const data::Dataset& ds, const TrainConfig& cfg,
                             const data::AugmentationConfig& aug, const TrainHooks& hooks = {});

struct PretrainResult {
  MocoState state;
  std::vector<double> epoch_losses;
};

PretrainResult pretrain_teacher(const data::Dataset& ds, const TrainConfig& cfg,
                                const nn::EncoderConfig& encoder, const nn::HeadConfig& head,
                                const data::AugmentationConfig& aug, const TrainHooks& hooks = {});

// ---- Distillation ----

struct DistillState {
  nn::ModelAssembly assembly;
  MemoryBank bank_v;
  MemoryBank bank_v_prime;
  int epoch = 0;
  std::size_t step = 0;
};

DistillState init_distill(nn::Network teacher, const nn::EncoderConfig& student,
                          const TrainConfig& cfg, std::size_t disco_head_hidden);

StepMetrics distill_step_retro(DistillState& state, const data::ViewPair& views,
                               const TrainConfig& cfg, double lr, bool capture = false);
StepMetrics distill_step_disco(DistillState& state, const data::ViewPair& views,
                               const TrainConfig& cfg, double lr, bool capture = false);
StepMetrics distill_step(DistillState& state, const data::ViewPair& views, const TrainConfig& cfg,
                         double lr, bool capture = false);

// Sets the student head's trainable flag for `epoch`. Returns true when the
// flag changed. No-op for DisCo, whose head is always trainable.
bool apply_freeze_schedule(DistillState& state, const FreezeSchedule& schedule, int epoch);

std::vector<double> run_distillation(DistillState& state, const data::Dataset& ds,
                                     const TrainConfig& cfg, const data::AugmentationConfig& aug,
                                     const TrainHooks& hooks = {});

}  // namespace retro::train

#include "retro/train.hpp"

#include <chrono>
#include <cmath>
#include <map>
#include <numbers>
#include <sstream>

#include <spdlog/spdlog.h>

#include "retro/errors.hpp"
#include "retro/losses.hpp"
#include "retro/random.hpp"

namespace retro::train {

namespace {

constexpr std::uint64_t kQueryStream = 0x9e11;
constexpr std::uint64_t kStudentStream = 0x57d7;
constexpr std::uint64_t kBankStream = 0xba4c;

using Clock = std::chrono::steady_clock;

double elapsed_ms(Clock::time_point start) {
  return std::chrono::duration<double, std::milli>(Clock::now() - start).count();
}

void check_finite(double value, const char* what, int epoch, std::size_t step) {
  if (!std::isfinite(value)) {
    std::ostringstream os;
    os << what << " became non-finite (" << value << ") at epoch " << epoch << ", step " << step
       << "; lower the learning rate or check the input data";
    throw DivergenceError(os.str());
  }
}

SgdOptions sgd_options(const TrainConfig& cfg, double lr) {
  return SgdOptions{lr, cfg.momentum, cfg.weight_decay};
}

void emit(const TrainHooks& hooks, const MetricsSink& sink, TrainMode mode, int epoch, long step,
          const StepMetrics& m, double wall_ms) {
  if (!sink) return;
  MetricsRecord r;
  r.run_id = hooks.run_id;
  r.mode = to_string(mode);
  r.epoch = epoch;
  r.step = step;
  r.loss_total = m.loss_total;
  r.loss_dis = m.loss_dis;
  r.loss_con = m.loss_con;
  r.lr = m.lr;
  r.head_frozen = m.head_frozen;
  r.wall_ms = hooks.record_wall_time ? wall_ms : 0.0;
  sink(r);
}

struct EpochAccumulator {
  double total = 0.0, dis = 0.0, con = 0.0;
  std::size_t count = 0;
  StepMetrics last;

  void add(const StepMetrics& m) {
    total += m.loss_total;
    dis += m.loss_dis;
    con += m.loss_con;
    ++count;
    last = m;
  }
  StepMetrics mean() const {
    StepMetrics m = last;
    m.trace.reset();
    const double n = static_cast<double>(count == 0 ? 1 : count);
    m.loss_total = total / n;
    m.loss_dis = dis / n;
    m.loss_con = con / n;
    return m;
  }
};

// Shared epoch/batch loop. `step_fn(views, lr)` performs one update and
// advances step_counter.
template <typename StepFn>
std::vector<double> run_epochs(int& epoch_counter, const std::size_t& step_counter, std::size_t n,
                               const TrainConfig& cfg, const data::Dataset& ds,
                               const data::AugmentationConfig& aug, const TrainHooks& hooks,
                               TrainMode mode, StepFn&& step_fn,
                               const std::function<void(int)>& on_epoch_start) {
  const std::size_t per_epoch = data::epoch_batches(n, cfg.batch_size, cfg.seed, 0).size();
  const std::size_t total_steps = per_epoch * static_cast<std::size_t>(cfg.epochs);
  std::vector<double> epoch_losses;
  for (; epoch_counter < cfg.epochs; ++epoch_counter) {
    const int epoch = epoch_counter;
    if (on_epoch_start) on_epoch_start(epoch);
    const auto epoch_start = Clock::now();
    EpochAccumulator acc;
    for (const auto& batch_idx : data::epoch_batches(n, cfg.batch_size, cfg.seed,
                                                     static_cast<std::uint64_t>(epoch))) {
      const auto step_start = Clock::now();
      const Tensor batch = ds.gather(batch_idx);
      const data::ViewPair views =
          data::two_views(batch, aug, static_cast<std::uint64_t>(epoch), step_counter);
      const double lr = cfg.lr_at(step_counter, total_steps);
      StepMetrics m = step_fn(views, lr);
      check_finite(m.loss_total, "training loss", epoch, step_counter);
      emit(hooks, hooks.on_step, mode, epoch, static_cast<long>(step_counter) - 1, m,
           elapsed_ms(step_start));
      acc.add(m);
    }
    const StepMetrics summary = acc.mean();
    emit(hooks, hooks.on_epoch, mode, epoch, static_cast<long>(step_counter) - 1, summary,
         elapsed_ms(epoch_start));
    spdlog::info("[{}] {} epoch {}/{}: loss {:.4f} (dis {:.4f}, con {:.4f})", hooks.run_id,
                 to_string(mode), epoch + 1, cfg.epochs, summary.loss_total, summary.loss_dis,
                 summary.loss_con);
    epoch_losses.push_back(summary.loss_total);
  }
  return epoch_losses;
}

}  // namespace

std::string to_string(TrainMode mode) {
  switch (mode) {
    case TrainMode::kBaselineMoco: return "baseline_moco";
    case TrainMode::kDisco: return "disco";
    case TrainMode::kRetro: return "retro";
  }
  return "unknown";
}

TrainMode parse_train_mode(std::string_view text) {
  if (text == "baseline_moco") return TrainMode::kBaselineMoco;
  if (text == "disco") return TrainMode::kDisco;
  if (text == "retro") return TrainMode::kRetro;
  throw ConfigError("unknown mode '" + std::string(text) +
                    "' (expected baseline_moco, disco or retro)");
}

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("epochs must be at least 1");
  if (batch_size < 2) throw ConfigError("batch_size must be at least 2 (batchnorm)");
  if (!(lr > 0.0)) throw ConfigError("lr must be positive");
  if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("SGD momentum must be in [0,1)");
  if (weight_decay < 0.0) throw ConfigError("weight_decay must be non-negative");
  if (!(temperature > 0.0)) throw ConfigError("temperature must be positive");
  if (gamma < 0.0) throw ConfigError("gamma must be non-negative");
  if (consistency_weight < 0.0) throw ConfigError("consistency_weight must be non-negative");
  if (ema_momentum < 0.0 || ema_momentum >= 1.0) throw ConfigError("ema momentum m must be in [0,1)");
  if (bank_size < 1) throw ConfigError("bank_size must be at least 1");
  if (freeze.frozen_epochs < 0 || freeze.unfrozen_epochs < 0 ||
      freeze.frozen_epochs + freeze.unfrozen_epochs != epochs) {
    throw ConfigError("freeze schedule " + std::to_string(freeze.frozen_epochs) + "/" +
                      std::to_string(freeze.unfrozen_epochs) + " does not add up to " +
                      std::to_string(epochs) + " epochs");
  }
}

double TrainConfig::lr_at(std::size_t step, std::size_t total_steps) const {
  const double base = base_lr();
  if (lr_schedule == LrSchedule::kConstant || total_steps == 0) return base;
  const double progress = static_cast<double>(step) / static_cast<double>(total_steps);
  return base * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

void ema_update(const ConstParameterList& student, const ParameterList& mean, double m) {
  if (m < 0.0 || m >= 1.0) throw ConfigError("ema momentum m must be in [0,1)");
  std::map<std::string, const Parameter*> source;
  for (const Parameter* p : student) source.emplace(p->name(), p);
  std::map<std::string, Parameter*> target;
  for (Parameter* p : mean) target.emplace(p->name(), p);
  std::string missing, extra;
  for (const auto& [name, p] : source) {
    if (!target.count(name)) missing += " " + name;
  }
  for (const auto& [name, p] : target) {
    if (!source.count(name)) extra += " " + name;
  }
  if (!missing.empty() || !extra.empty()) {
    throw ContractError("ema_update: parameter name-sets differ; only in student:" +
                        (missing.empty() ? std::string(" -") : missing) +
                        "; only in mean:" + (extra.empty() ? std::string(" -") : extra));
  }
  const double keep = 1.0 - m;
  for (auto& [name, dst] : target) {
    const Parameter* src = source.at(name);
    if (src->numel() != dst->numel()) {
      throw ContractError("ema_update: '" + name + "' has mismatched sizes");
    }
    auto q = src->values();
    auto k = dst->mutable_values();
    auto& residual = dst->ema_residual();
    if (m == 0.0) {
      std::copy(q.begin(), q.end(), k.begin());
      residual.reset();
      continue;
    }
    if (!residual) residual.emplace(k.size(), 0.0f);
    auto& r = *residual;
    // Increment form on the compensated value; identical inputs with no
    // residual leave the target bit-exact.
    for (std::size_t i = 0; i < k.size(); ++i) {
      const double theta_k = static_cast<double>(k[i]) + r[i];
      const double next = theta_k + keep * (static_cast<double>(q[i]) - theta_k);
      k[i] = static_cast<float>(next);
      r[i] = static_cast<float>(next - k[i]);
    }
  }
}

void ema_update(const nn::Network& student, nn::Network& mean, double m) {
  ema_update(student.parameters(), mean.parameters(), m);
}

MocoState make_moco_state(nn::Network query, const TrainConfig& cfg) {
  nn::Network key = query;
  key.set_all_trainable(false);
  MemoryBank bank = MemoryBank::init(cfg.bank_size, query.head().out_dim(),
                                     mix_seed({cfg.seed, kBankStream, 1}), BankView::kVPrime);
  return MocoState{std::move(query), std::move(key), std::move(bank), 0, 0};
}

MocoState init_moco(const nn::EncoderConfig& encoder, const nn::HeadConfig& head,
                    const TrainConfig& cfg) {
  return make_moco_state(
      nn::Network::build(encoder, std::nullopt, head, mix_seed({cfg.seed, kQueryStream})), cfg);
}

StepMetrics moco_step(MocoState& state, const data::ViewPair& views, const TrainConfig& cfg,
                      double lr) {
  Tape tape;
  const Tensor q = state.query.embed(tape, views.v, nn::BnMode::kTrain);
  Tensor k;
  {
    Tape no_grad = Tape::no_grad();
    k = state.key.embed(no_grad, views.v_prime, nn::BnMode::kTrainNoUpdate);
  }
  const Tensor loss = losses::info_nce(tape, q, k, state.bank.negatives(), cfg.temperature);
  check_finite(loss.item(), "contrastive loss", state.epoch, state.step);
  tape.backward(loss);
  const ParameterList params = state.query.parameters();
  sgd_step(params, sgd_options(cfg, lr));
  zero_grad(params);
  ema_update(state.query, state.key, cfg.ema_momentum);
  state.bank.enqueue(k);
  ++state.step;

  StepMetrics m;
  m.loss_total = loss.item();
  m.loss_con = loss.item();
  m.lr = lr;
  m.forward_passes = 2;
  return m;
}

std::vector<double> run_moco(MocoState& state, const data::Dataset& ds, const TrainConfig& cfg,
                             const data::AugmentationConfig& aug, const TrainHooks& hooks) {
  cfg.validate();
  return run_epochs(
      state.epoch, state.step, ds.size(), cfg, ds, aug, hooks, TrainMode::kBaselineMoco,
      [&](const data::ViewPair& views, double lr) { return moco_step(state, views, cfg, lr); },
      nullptr);
}

PretrainResult pretrain_teacher(const data::Dataset& ds, const TrainConfig& cfg,
                                const nn::EncoderConfig& encoder, const nn::HeadConfig& head,
                                const data::AugmentationConfig& aug, const TrainHooks& hooks) {
  if (cfg.mode != TrainMode::kBaselineMoco) {
    throw ConfigError("teacher pretraining requires mode = baseline_moco");
  }
  MocoState state = init_moco(encoder, head, cfg);
  std::vector<double> losses = run_moco(state, ds, cfg, aug, hooks);
  return PretrainResult{std::move(state), std::move(losses)};
}

DistillState init_distill(nn::Network teacher, const nn::EncoderConfig& student,
                          const TrainConfig& cfg, std::size_t disco_head_hidden) {
  const std::uint64_t student_seed = mix_seed({cfg.seed, kStudentStream});
  const std::size_t dim = teacher.head().out_dim();
  nn::ModelAssembly assembly =
      cfg.mode == TrainMode::kRetro
          ? nn::ModelAssembly::retro(std::move(teacher), student, student_seed)
      : cfg.mode == TrainMode::kDisco
          ? nn::ModelAssembly::disco(std::move(teacher), student, disco_head_hidden, student_seed)
          : throw ConfigError("distillation requires mode = retro or disco");
  return DistillState{
      std::move(assembly),
      MemoryBank::init(cfg.bank_size, dim, mix_seed({cfg.seed, kBankStream, 0}), BankView::kV),
      MemoryBank::init(cfg.bank_size, dim, mix_seed({cfg.seed, kBankStream, 1}),
                       BankView::kVPrime),
      0, 0};
}

namespace {

void finish_student_update(DistillState& state, const Tape& tape, const TrainConfig& cfg, double lr) {
  auto& a = state.assembly;
  if (a.head_frozen()) {
    ParameterList head;
    a.student().head().collect(head);
    for (const Parameter* p : head) {
      if (p->tensor().has_grad()) {
        throw ContractError("frozen head parameter '" + p->name() + "' received a gradient");
      }
    }
  }
  const ParameterList params = a.student().parameters();
  sgd_step(params, sgd_options(cfg, lr));
  zero_grad(params);
  ema_update(a.student(), a.mean_student(), cfg.ema_momentum);
}

}  // namespace

StepMetrics distill_step_retro(DistillState& state, const data::ViewPair& views,
                               const TrainConfig& cfg, double lr, bool capture) {
  auto& a = state.assembly;
  if (a.mode() != nn::DistillMode::kRetro) throw ContractError("assembly is not in RETRO mode");
  const std::size_t forwards_before = a.counters().total();

  Tape tape;
  const Tensor e_s = a.forward_student(tape, views.v);
  const Tensor e_s_prime = a.forward_student(tape, views.v_prime);
  const Tensor e_t = a.forward_teacher(views.v);
  const Tensor e_t_prime = a.forward_teacher(views.v_prime);
  const Tensor e_m = a.forward_mean(views.v);
  const Tensor e_m_prime = a.forward_mean(views.v_prime);

  const Tensor l_dis = losses::consistency_loss(tape, e_s, e_t, e_s_prime, e_t_prime);
  const Tensor l_con = losses::symmetric_info_nce(tape, e_s, e_s_prime, e_m, e_m_prime,
                                                  state.bank_v, state.bank_v_prime, cfg.temperature);
  const Tensor loss = losses::total_loss(tape, l_dis, l_con, cfg.gamma, cfg.consistency_weight);
  check_finite(loss.item(), "distillation loss", state.epoch, state.step);

  StepMetrics m;
  if (capture) {
    m.trace = StepTrace{e_s.detach(),  e_s_prime.detach(), e_t,
                        e_t_prime,     e_m,                e_m_prime,
                        state.bank_v.negatives(), state.bank_v_prime.negatives()};
  }
  tape.backward(loss);
  finish_student_update(state, tape, cfg, lr);
  state.bank_v.enqueue(e_m);
  state.bank_v_prime.enqueue(e_m_prime);
  ++state.step;

  m.loss_total = loss.item();
  m.loss_dis = l_dis.item();
  m.loss_con = l_con.item();
  m.lr = lr;
  m.head_frozen = a.head_frozen();
  m.forward_passes = a.counters().total() - forwards_before;
  return m;
}

StepMetrics distill_step_disco(DistillState& state, const data::ViewPair& views,
                               const TrainConfig& cfg, double lr, bool capture) {
  auto& a = state.assembly;
  if (a.mode() != nn::DistillMode::kDisco) throw ContractError("assembly is not in DisCo mode");
  const std::size_t forwards_before = a.counters().total();

  Tape tape;
  const Tensor e_s = a.forward_student(tape, views.v);
  const Tensor e_s_prime = a.forward_student(tape, views.v_prime);
  const Tensor e_t = a.forward_teacher(views.v);
  const Tensor e_t_prime = a.forward_teacher(views.v_prime);
  const Tensor e_m_prime = a.forward_mean(views.v_prime);

  const Tensor l_dis = losses::consistency_loss(tape, e_s, e_t, e_s_prime, e_t_prime);
  const Tensor l_con = losses::info_nce(tape, e_s, e_m_prime, state.bank_v_prime.negatives(),
                                        cfg.temperature);
  const Tensor loss = losses::total_loss(tape, l_dis, l_con, cfg.gamma, cfg.consistency_weight);
  check_finite(loss.item(), "distillation loss", state.epoch, state.step);

  StepMetrics m;
  if (capture) {
    m.trace = StepTrace{e_s.detach(), e_s_prime.detach(), e_t, e_t_prime, Tensor(), e_m_prime,
                        state.bank_v.negatives(), state.bank_v_prime.negatives()};
  }
  tape.backward(loss);
  finish_student_update(state, tape, cfg, lr);
  state.bank_v_prime.enqueue(e_m_prime);
  ++state.step;

  m.loss_total = loss.item();
  m.loss_dis = l_dis.item();
  m.loss_con = l_con.item();
  m.lr = lr;
  m.head_frozen = a.head_frozen();
  m.forward_passes = a.counters().total() - forwards_before;
  return m;
}

StepMetrics distill_step(DistillState& state, const data::ViewPair& views, const TrainConfig& cfg,
                         double lr, bool capture) {
  return state.assembly.mode() == nn::DistillMode::kRetro
             ? distill_step_retro(state, views, cfg, lr, capture)
             : distill_step_disco(state, views, cfg, lr, capture);
}

bool apply_freeze_schedule(DistillState& state, const FreezeSchedule& schedule, int epoch) {
  auto& a = state.assembly;
  if (a.mode() != nn::DistillMode::kRetro) return false;
  const bool frozen = schedule.head_frozen(epoch);
  if (frozen == a.head_frozen()) return false;
  a.set_head_frozen(frozen);
  spdlog::info("epoch {}: projection head {}", epoch, frozen ? "frozen" : "unfrozen");
  return true;
}

std::vector<double> run_distillation(DistillState& state, const data::Dataset& ds,
                                     const TrainConfig& cfg, const data::AugmentationConfig& aug,
                                     const TrainHooks& hooks) {
  cfg.validate();
  const TrainMode mode =
      state.assembly.mode() == nn::DistillMode::kRetro ? TrainMode::kRetro : TrainMode::kDisco;
  return run_epochs(
      state.epoch, state.step, ds.size(), cfg, ds, aug, hooks, mode,
      [&](const data::ViewPair& views, double lr) { return distill_step(state, views, cfg, lr); },
      [&](int epoch) { apply_freeze_schedule(state, cfg.freeze, epoch); });
}

}  // namespace retro::train

#include "retro/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <fmt/format.h>
#include <json.hpp>

#include "retro/errors.hpp"
#include "retro/ops.hpp"
#include "retro/optim.hpp"

namespace retro::eval {

namespace {

void validate_schedule(int epochs, double lr, const std::vector<double>& milestones,
                       double drop_factor, std::size_t batch_size, const char* what) {
  const std::string w(what);
  if (epochs < 1) throw ConfigError(w + " epochs must be at least 1");
  if (!(lr > 0.0)) throw ConfigError(w + " lr must be positive");
  if (!(drop_factor >= 1.0)) throw ConfigError(w + " drop factor must be >= 1");
  if (batch_size < 2) throw ConfigError(w + " batch size must be at least 2");
  double prev = 0.0;
  for (double m : milestones) {
    if (!(m > prev && m < 1.0)) {
      throw ConfigError(w + " milestones must be strictly increasing inside (0,1)");
    }
    prev = m;
  }
}

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows) {
  const std::size_t d = x.dim(1);
  std::vector<float> out(rows.size() * d);
  const auto src = x.data();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(rows[i] * d), d,
                out.begin() + static_cast<std::ptrdiff_t>(i * d));
  }
  return Tensor({rows.size(), d}, std::move(out));
}

void check_labels(const std::vector<int>& labels, std::size_t class_count, const char* what) {
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= class_count) {
      throw ContractError(std::string(what) + " label " + std::to_string(y) + " outside [0," +
                          std::to_string(class_count) + ")");
    }
  }
}

void check_class_counts(const data::Dataset& train, const data::Dataset& test) {
  if (train.class_count != test.class_count) {
    throw ConfigError("class-count mismatch: train has " + std::to_string(train.class_count) +
                      " classes, test has " + std::to_string(test.class_count));
  }
}

}  // namespace

void ProbeConfig::validate() const {
  validate_schedule(epochs, lr, milestones, drop_factor, batch_size, "probe");
  if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("probe momentum must be in [0,1)");
  if (weight_decay < 0.0) throw ConfigError("probe weight decay must be non-negative");
}

double ProbeConfig::lr_at_epoch(int epoch) const {
  double value = lr;
  for (double m : milestones) {
    if (static_cast<double>(epoch) >= m * static_cast<double>(epochs)) value /= drop_factor;
  }
  return value;
}

void FinetuneConfig::validate() const {
  validate_schedule(epochs, lr, milestones, drop_factor, batch_size, "finetune");
  if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("finetune momentum must be in [0,1)");
  if (weight_decay < 0.0) throw ConfigError("finetune weight decay must be non-negative");
}

ProbeConfig FinetuneConfig::schedule() const {
  return ProbeConfig{epochs, lr, milestones, drop_factor, batch_size, momentum, weight_decay, seed};
}

Tensor extract_features(const nn::Encoder& encoder, const data::Dataset& ds,
                        std::size_t batch_size) {
  nn::Encoder copy = encoder;
  const std::size_t n = ds.size();
  const std::size_t d = copy.config().representation_dim();
  std::vector<float> out(n * d);
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < n; start += batch_size) {
    const std::size_t end = std::min(n, start + batch_size);
    idx.clear();
    for (std::size_t i = start; i < end; ++i) idx.push_back(i);
    Tape tape = Tape::no_grad();
    const Tensor pooled =
        ops::global_avg_pool(tape, copy.forward(tape, ds.gather(idx), nn::BnMode::kEval));
    std::copy(pooled.data().begin(), pooled.data().end(),
              out.begin() + static_cast<std::ptrdiff_t>(start * d));
  }
  return Tensor({n, d}, std::move(out));
}

EvalReport score_logits(const Tensor& logits, const std::vector<int>& labels,
                        std::size_t class_count) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size() || logits.dim(1) != class_count) {
    throw DimensionError("score_logits: logits " + shape_str(logits.shape()) + " vs " +
                         std::to_string(labels.size()) + " labels and " +
                         std::to_string(class_count) + " classes");
  }
  check_labels(labels, class_count, "test");
  EvalReport r;
  r.test_size = labels.size();
  std::vector<std::size_t> hits(class_count, 0), totals(class_count, 0);
  std::size_t top1 = 0, top5 = 0;
  const auto l = logits.data();
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto y = static_cast<std::size_t>(labels[i]);
    const float* row = l.data() + i * class_count;
    // Rank of the true class; ties go to the smaller class index, as in argmax.
    std::size_t rank = 0;
    for (std::size_t c = 0; c < class_count; ++c) {
      if (row[c] > row[y] || (row[c] == row[y] && c < y)) ++rank;
    }
    ++totals[y];
    if (rank == 0) {
      ++top1;
      ++hits[y];
    }
    if (rank < 5) ++top5;
  }
  const double n = static_cast<double>(std::max<std::size_t>(labels.size(), 1));
  r.top1 = static_cast<double>(top1) / n;
  r.top5 = static_cast<double>(top5) / n;
  r.per_class.resize(class_count);
  for (std::size_t c = 0; c < class_count; ++c) {
    r.per_class[c] = totals[c] ? static_cast<double>(hits[c]) / static_cast<double>(totals[c]) : 0.0;
  }
  return r;
}

Tensor train_linear_classifier(const Tensor& train_features, const std::vector<int>& train_labels,
                               const Tensor& test_features, std::size_t class_count,
                               const ProbeConfig& cfg) {
  cfg.validate();
  if (train_features.rank() != 2 || train_features.dim(0) != train_labels.size()) {
    throw DimensionError("linear classifier: features " + shape_str(train_features.shape()) +
                         " do not match " + std::to_string(train_labels.size()) + " labels");
  }
  check_labels(train_labels, class_count, "train");
  const std::size_t d = train_features.dim(1);
  Parameter w("probe.weight", Tensor::zeros({class_count, d}));
  Parameter b("probe.bias", Tensor::zeros({class_count}));
  const ParameterList params{&w, &b};
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const SgdOptions opt{cfg.lr_at_epoch(epoch), cfg.momentum, cfg.weight_decay};
    for (const auto& batch : data::epoch_batches(train_labels.size(), cfg.batch_size, cfg.seed,
                                                 static_cast<std::uint64_t>(epoch))) {
      std::vector<int> y(batch.size());
      for (std::size_t i = 0; i < batch.size(); ++i) y[i] = train_labels[batch[i]];
      Tape tape;
      const Tensor logits = ops::linear(tape, gather_rows(train_features, batch), w.tensor(), b.tensor());
      const Tensor loss = ops::cross_entropy(tape, logits, y);
      if (!std::isfinite(loss.item())) {
        throw DivergenceError("linear probe loss became non-finite at epoch " +
                              std::to_string(epoch) + "; lower probe.lr");
      }
      tape.backward(loss);
      sgd_step(params, opt);
      zero_grad(params);
    }
  }
  Tape tape = Tape::no_grad();
  return ops::linear(tape, test_features, w.tensor(), b.tensor());
}

EvalReport linear_probe(const nn::Encoder& encoder, const data::Dataset& train,
                        const data::Dataset& test, const ProbeConfig& cfg) {
  check_class_counts(train, test);
  const Tensor train_f = extract_features(encoder, train);
  const Tensor test_f = extract_features(encoder, test);
  const Tensor logits = train_linear_classifier(train_f, train.labels, test_f, train.class_count, cfg);
  EvalReport r = score_logits(logits, test.labels, test.class_count);
  r.kind = "linear_probe";
  return r;
}

std::vector<int> knn_predict(const Tensor& train_features, const std::vector<int>& train_labels,
                             const Tensor& query_features, std::size_t class_count,
                             std::size_t k) {
  const std::size_t n = train_labels.size();
  if (k < 1) throw ConfigError("knn k must be at least 1");
  if (k > n) {
    throw ConfigError("knn k = " + std::to_string(k) + " exceeds the " + std::to_string(n) +
                      " training samples");
  }
  if (train_features.rank() != 2 || query_features.rank() != 2 || train_features.dim(0) != n ||
      train_features.dim(1) != query_features.dim(1)) {
    throw DimensionError("knn: feature shapes " + shape_str(train_features.shape()) + " and " +
                         shape_str(query_features.shape()) + " are incompatible");
  }
  check_labels(train_labels, class_count, "train");
  const std::size_t d = train_features.dim(1);
  auto normalized = [d](const Tensor& t) {
    std::vector<double> out(t.numel());
    const auto src = t.data();
    for (std::size_t r = 0; r < t.dim(0); ++r) {
      double sq = 0.0;
      for (std::size_t j = 0; j < d; ++j) sq += static_cast<double>(src[r * d + j]) * src[r * d + j];
      const double inv = sq > 0.0 ? 1.0 / std::sqrt(sq) : 0.0;
      for (std::size_t j = 0; j < d; ++j) out[r * d + j] = src[r * d + j] * inv;
    }
    return out;
  };
  const auto tr = normalized(train_features);
  const auto qr = normalized(query_features);
  const std::size_t nq = query_features.dim(0);
  std::vector<int> predictions(nq);
  std::vector<std::pair<double, std::size_t>> sims(n);
  std::vector<std::size_t> votes(class_count);
  for (std::size_t q = 0; q < nq; ++q) {
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < d; ++j) s += qr[q * d + j] * tr[i * d + j];
      sims[i] = {s, i};
    }
    std::partial_sort(sims.begin(), sims.begin() + static_cast<std::ptrdiff_t>(k), sims.end(),
                      [](const auto& a, const auto& b) {
                        return a.first > b.first || (a.first == b.first && a.second < b.second);
                      });
    std::fill(votes.begin(), votes.end(), 0);
    for (std::size_t i = 0; i < k; ++i) ++votes[static_cast<std::size_t>(train_labels[sims[i].second])];
    predictions[q] = static_cast<int>(std::max_element(votes.begin(), votes.end()) - votes.begin());
  }
  return predictions;
}

EvalReport knn_eval(const nn::Encoder& encoder, const data::Dataset& train,
                    const data::Dataset& test, std::size_t k) {
  check_class_counts(train, test);
  const std::vector<int> pred = knn_predict(extract_features(encoder, train), train.labels,
                                            extract_features(encoder, test), train.class_count, k);
  // One-hot votes as logits, so top-5 degenerates to top-1 ranking with index ties.
  std::vector<float> logits(pred.size() * train.class_count, 0.0f);
  for (std::size_t i = 0; i < pred.size(); ++i) {
    logits[i * train.class_count + static_cast<std::size_t>(pred[i])] = 1.0f;
  }
  EvalReport r = score_logits(Tensor({pred.size(), train.class_count}, std::move(logits)),
                              test.labels, test.class_count);
  r.kind = "knn";
  return r;
}

EvalReport semi_supervised_finetune(const nn::Encoder& encoder, const data::Dataset& train,
                                    const data::Dataset& test, double fraction,
                                    const FinetuneConfig& cfg) {
  cfg.validate();
  check_class_counts(train, test);
  std::vector<std::size_t> selected;
  const data::Dataset subset = data::label_fraction_subset(train, fraction, cfg.seed, &selected);

  nn::Encoder net = encoder;
  ParameterList params;
  net.collect(params);
  for (Parameter* p : params) {
    if (!p->is_buffer()) p->set_trainable(true);
  }
  const std::size_t d = net.config().representation_dim();
  Parameter w("classifier.weight", Tensor::zeros({subset.class_count, d}));
  Parameter b("classifier.bias", Tensor::zeros({subset.class_count}));
  params.push_back(&w);
  params.push_back(&b);

  const ProbeConfig schedule = cfg.schedule();
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const SgdOptions opt{schedule.lr_at_epoch(epoch), cfg.momentum, cfg.weight_decay};
    for (const auto& batch : data::epoch_batches(subset.size(), cfg.batch_size, cfg.seed,
                                                 static_cast<std::uint64_t>(epoch))) {
      if (batch.size() < 2) continue;
      Tape tape;
      const Tensor pooled =
          ops::global_avg_pool(tape, net.forward(tape, subset.gather(batch), nn::BnMode::kTrain));
      const Tensor logits = ops::linear(tape, pooled, w.tensor(), b.tensor());
      const Tensor loss = ops::cross_entropy(tape, logits, subset.gather_labels(batch));
      if (!std::isfinite(loss.item())) {
        throw DivergenceError("fine-tune loss became non-finite at epoch " + std::to_string(epoch) +
                              "; lower finetune.lr");
      }
      tape.backward(loss);
      sgd_step(params, opt);
      zero_grad(params);
    }
  }
  Tape tape = Tape::no_grad();
  const Tensor logits = ops::linear(tape, extract_features(net, test), w.tensor(), b.tensor());
  EvalReport r = score_logits(logits, test.labels, test.class_count);
  r.kind = "finetune";
  r.label_fraction = fraction;
  r.subset_hash = subset_hash(selected);
  return r;
}

std::string subset_hash(const std::vector<std::size_t>& indices) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::size_t idx : indices) {
    for (int byte = 0; byte < 8; ++byte) {
      h ^= (static_cast<std::uint64_t>(idx) >> (8 * byte)) & 0xffU;
      h *= 0x100000001b3ULL;
    }
  }
  return fmt::format("{:016x}", h);
}

std::string eval_csv_header() {
  return "kind,top1,top5,test_size,label_fraction,fingerprint,subset_hash";
}

std::string format_eval_row(const EvalReport& r) {
  return fmt::format("{},{:.9g},{:.9g},{},{:.9g},{},{}", r.kind, r.top1, r.top5, r.test_size,
                     r.label_fraction, r.fingerprint, r.subset_hash);
}

EvalReport parse_eval_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open eval file " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != eval_csv_header()) {
    throw FormatError(path.string() + ": unexpected eval header");
  }
  if (!std::getline(in, line)) throw FormatError(path.string() + ": missing eval row");
  std::vector<std::string> f;
  std::string field;
  std::istringstream row(line);
  while (std::getline(row, field, ',')) f.push_back(field);
  if (!line.empty() && line.back() == ',') f.emplace_back();
  if (f.size() != 7) throw FormatError(path.string() + ": eval row has " + std::to_string(f.size()) + " fields");
  EvalReport r;
  try {
    r.kind = f[0];
    r.top1 = std::stod(f[1]);
    r.top5 = std::stod(f[2]);
    r.test_size = std::stoul(f[3]);
    r.label_fraction = std::stod(f[4]);
  } catch (const std::logic_error&) {
    throw FormatError(path.string() + ": malformed eval row");
  }
  r.fingerprint = f[5];
  r.subset_hash = f[6];
  return r;
}

void write_eval_report(const EvalReport& report, const std::filesystem::path& dir,
                       const std::string& stem) {
  {
    std::ofstream csv(dir / (stem + ".csv"));
    if (!csv) throw FormatError("cannot write " + (dir / (stem + ".csv")).string());
    csv << eval_csv_header() << '\n' << format_eval_row(report) << '\n';
  }
  nlohmann::json j{{"kind", report.kind},
                   {"top1", report.top1},
                   {"top5", report.top5},
                   {"per_class", report.per_class},
                   {"test_size", report.test_size},
                   {"label_fraction", report.label_fraction},
                   {"fingerprint", report.fingerprint},
                   {"subset_hash", report.subset_hash}};
  std::ofstream out(dir / (stem + ".json"));
  if (!out) throw FormatError("cannot write " + (dir / (stem + ".json")).string());
  out << j.dump(2) << '\n';
}

}  // namespace retro::eval

#include "retro/config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

#include <fmt/format.h>
#include <fmt/ranges.h>

#include "retro/errors.hpp"

namespace retro {

namespace {

std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return std::string(s.substr(first, last - first + 1));
}

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
  T value{};
  const char* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, value);
  if (ec != std::errc() || ptr != end) {
    throw ConfigError("key '" + key + "': cannot parse '" + text + "' as a number");
  }
  return value;
}

bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1") return true;
  if (text == "false" || text == "0") return false;
  throw ConfigError("key '" + key + "': expected true or false, got '" + text + "'");
}

template <typename T>
std::vector<T> parse_list(const std::string& key, const std::string& text) {
  std::vector<T> out;
  std::stringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) out.push_back(parse_number<T>(key, trim(item)));
  return out;
}

template <typename T>
std::string join(const std::vector<T>& values) {
  return fmt::format("{}", fmt::join(values, ","));
}

struct Field {
  std::function<std::string(const ExperimentConfig&)> get;
  std::function<void(ExperimentConfig&, const std::string&, const std::string&)> set;
};

template <typename T>
Field number(T ExperimentConfig::*member) {
  return {[member](const ExperimentConfig& c) { return fmt::format("{}", c.*member); },
          [member](ExperimentConfig& c, const std::string& k, const std::string& v) {
            c.*member = parse_number<T>(k, v);
          }};
}

// Generic accessor-based field: `ref` returns a reference into the config.
template <typename T, typename Ref>
Field number_at(Ref ref) {
  return {[ref](const ExperimentConfig& c) {
            return fmt::format("{}", ref(const_cast<ExperimentConfig&>(c)));
          },
          [ref](ExperimentConfig& c, const std::string& k, const std::string& v) {
            ref(c) = parse_number<T>(k, v);
          }};
}

template <typename Ref>
Field text_at(Ref ref) {
  return {[ref](const ExperimentConfig& c) { return ref(const_cast<ExperimentConfig&>(c)); },
          [ref](ExperimentConfig& c, const std::string&, const std::string& v) { ref(c) = v; }};
}

template <typename T, typename Ref>
Field list_at(Ref ref) {
  return {[ref](const ExperimentConfig& c) { return join(ref(const_cast<ExperimentConfig&>(c))); },
          [ref](ExperimentConfig& c, const std::string& k, const std::string& v) {
            ref(c) = parse_list<T>(k, v);
          }};
}

#define RETRO_REF(expr) [](ExperimentConfig& c) -> auto& { return expr; }

const std::map<std::string, Field>& fields() {
  static const std::map<std::string, Field> table = [] {
    std::map<std::string, Field> f;
    f["run_id"] = text_at(RETRO_REF(c.run_id));
    f["mode"] = {[](const ExperimentConfig& c) { return train::to_string(c.train.mode); },
                 [](ExperimentConfig& c, const std::string&, const std::string& v) {
                   c.train.mode = train::parse_train_mode(v);
                 }};
    f["seed"] = {[](const ExperimentConfig& c) { return std::to_string(c.seed); },
                 [](ExperimentConfig& c, const std::string& k, const std::string& v) {
                   c.set_seed(parse_number<std::uint64_t>(k, v));
                 }};
    f["out_dir"] = text_at(RETRO_REF(c.out_dir));
    f["threads"] = number(&ExperimentConfig::threads);

    f["data.source"] = text_at(RETRO_REF(c.data.source));
    f["data.classes"] = number_at<std::size_t>(RETRO_REF(c.data.classes));
    f["data.train_per_class"] = number_at<std::size_t>(RETRO_REF(c.data.train_per_class));
    f["data.test_per_class"] = number_at<std::size_t>(RETRO_REF(c.data.test_per_class));
    f["data.image_size"] = number_at<std::size_t>(RETRO_REF(c.data.image_size));
    f["data.seed"] = number_at<std::uint64_t>(RETRO_REF(c.data.seed));
    f["data.cifar_train"] = text_at(RETRO_REF(c.data.cifar_train));
    f["data.cifar_test"] = text_at(RETRO_REF(c.data.cifar_test));

    f["aug.crop_padding"] = number_at<std::size_t>(RETRO_REF(c.aug.crop_padding));
    f["aug.flip_prob"] = number_at<double>(RETRO_REF(c.aug.flip_prob));
    f["aug.brightness_jitter"] = number_at<double>(RETRO_REF(c.aug.brightness_jitter));
    f["aug.noise_std"] = number_at<double>(RETRO_REF(c.aug.noise_std));

    f["teacher.widths"] = list_at<std::size_t>(RETRO_REF(c.teacher.widths));
    f["teacher.strides"] = list_at<std::size_t>(RETRO_REF(c.teacher.strides));
    f["teacher.kernels"] = list_at<std::size_t>(RETRO_REF(c.teacher.kernels));
    f["student.widths"] = list_at<std::size_t>(RETRO_REF(c.student.widths));
    f["student.strides"] = list_at<std::size_t>(RETRO_REF(c.student.strides));
    f["student.kernels"] = list_at<std::size_t>(RETRO_REF(c.student.kernels));

    f["head.embedding_dim"] = number_at<std::size_t>(RETRO_REF(c.embedding_dim));
    f["head.teacher_hidden"] = number_at<std::size_t>(RETRO_REF(c.teacher_head_hidden));
    f["head.student_hidden"] = number_at<std::size_t>(RETRO_REF(c.student_head_hidden));
    f["disco.head_hidden"] = number_at<std::size_t>(RETRO_REF(c.disco_head_hidden));
    f["moco.network"] = text_at(RETRO_REF(c.moco_network));

    f["train.epochs"] = number_at<int>(RETRO_REF(c.train.epochs));
    f["train.batch_size"] = number_at<std::size_t>(RETRO_REF(c.train.batch_size));
    f["train.lr"] = number_at<double>(RETRO_REF(c.train.lr));
    f["train.momentum"] = number_at<double>(RETRO_REF(c.train.momentum));
    f["train.weight_decay"] = number_at<double>(RETRO_REF(c.train.weight_decay));
    f["train.temperature"] = number_at<double>(RETRO_REF(c.train.temperature));
    f["train.gamma"] = number_at<double>(RETRO_REF(c.train.gamma));
    f["train.consistency_weight"] = number_at<double>(RETRO_REF(c.train.consistency_weight));
    f["train.ema_momentum"] = number_at<double>(RETRO_REF(c.train.ema_momentum));
    f["train.bank_size"] = number_at<std::size_t>(RETRO_REF(c.train.bank_size));
    f["train.frozen_epochs"] = number_at<int>(RETRO_REF(c.train.freeze.frozen_epochs));
    f["train.unfrozen_epochs"] = number_at<int>(RETRO_REF(c.train.freeze.unfrozen_epochs));
    f["train.lr_schedule"] = {
        [](const ExperimentConfig& c) {
          return std::string(c.train.lr_schedule == train::LrSchedule::kCosine ? "cosine" : "constant");
        },
        [](ExperimentConfig& c, const std::string& k, const std::string& v) {
          if (v == "cosine") c.train.lr_schedule = train::LrSchedule::kCosine;
          else if (v == "constant") c.train.lr_schedule = train::LrSchedule::kConstant;
          else throw ConfigError("key '" + k + "': expected cosine or constant, got '" + v + "'");
        }};
    f["train.teacher_checkpoint"] = text_at(RETRO_REF(c.teacher_checkpoint));

    f["probe.epochs"] = number_at<int>(RETRO_REF(c.probe.epochs));
    f["probe.lr"] = number_at<double>(RETRO_REF(c.probe.lr));
    f["probe.milestones"] = list_at<double>(RETRO_REF(c.probe.milestones));
    f["probe.drop_factor"] = number_at<double>(RETRO_REF(c.probe.drop_factor));
    f["probe.batch_size"] = number_at<std::size_t>(RETRO_REF(c.probe.batch_size));
    f["probe.momentum"] = number_at<double>(RETRO_REF(c.probe.momentum));
    f["probe.weight_decay"] = number_at<double>(RETRO_REF(c.probe.weight_decay));
    f["probe.checkpoint"] = text_at(RETRO_REF(c.probe_checkpoint));
    f["probe.knn_k"] = number_at<std::size_t>(RETRO_REF(c.knn_k));

    f["finetune.epochs"] = number_at<int>(RETRO_REF(c.finetune.epochs));
    f["finetune.lr"] = number_at<double>(RETRO_REF(c.finetune.lr));
    f["finetune.milestones"] = list_at<double>(RETRO_REF(c.finetune.milestones));
    f["finetune.drop_factor"] = number_at<double>(RETRO_REF(c.finetune.drop_factor));
    f["finetune.batch_size"] = number_at<std::size_t>(RETRO_REF(c.finetune.batch_size));
    f["finetune.momentum"] = number_at<double>(RETRO_REF(c.finetune.momentum));
    f["finetune.weight_decay"] = number_at<double>(RETRO_REF(c.finetune.weight_decay));
    f["finetune.label_fraction"] = number_at<double>(RETRO_REF(c.label_fraction));

    f["metrics.wall_time"] = {
        [](const ExperimentConfig& c) { return std::string(c.wall_time ? "true" : "false"); },
        [](ExperimentConfig& c, const std::string& k, const std::string& v) {
          c.wall_time = parse_bool(k, v);
        }};
    return f;
  }();
  return table;
}

#undef RETRO_REF

const std::set<std::string> kRequired = {"mode", "seed"};

}  // namespace

void ExperimentConfig::set_seed(std::uint64_t value) {
  seed = value;
  train.seed = value;
  aug.seed = value;
  probe.seed = value;
  finetune.seed = value;
}

void ExperimentConfig::validate() const {
  if (run_id.empty() || run_id.find_first_of(",\n") != std::string::npos) {
    throw ConfigError("run_id must be non-empty and contain no commas");
  }
  if (threads < 1) throw ConfigError("threads must be at least 1");
  if (data.source != "synthetic" && data.source != "cifar") {
    throw ConfigError("data.source must be synthetic or cifar, got '" + data.source + "'");
  }
  if (data.source == "cifar" && (data.cifar_train.empty() || data.cifar_test.empty())) {
    throw ConfigError("data.source = cifar needs data.cifar_train and data.cifar_test");
  }
  if (data.classes < 2) throw ConfigError("data.classes must be at least 2");
  if (moco_network != "teacher" && moco_network != "student") {
    throw ConfigError("moco.network must be teacher or student, got '" + moco_network + "'");
  }
  if (embedding_dim == 0) throw ConfigError("head.embedding_dim must be positive");
  if (!(label_fraction > 0.0 && label_fraction <= 1.0)) {
    throw ConfigError("finetune.label_fraction must be in (0,1]");
  }
  if (knn_k < 1) throw ConfigError("probe.knn_k must be at least 1");
  aug.validate();
  teacher.validate();
  student.validate();
  train.validate();
  probe.validate();
  finetune.validate();
}

const nn::EncoderConfig& ExperimentConfig::trained_encoder() const {
  if (train.mode == train::TrainMode::kBaselineMoco && moco_network == "teacher") return teacher;
  return student;
}

std::string ExperimentConfig::network_prefix() const {
  return train.mode == train::TrainMode::kBaselineMoco ? "query." : "student.";
}

nn::HeadConfig ExperimentConfig::teacher_head() const {
  return {teacher.representation_dim(), teacher_head_hidden, embedding_dim};
}

nn::HeadConfig ExperimentConfig::moco_head() const {
  if (moco_network == "teacher") return teacher_head();
  return {student.representation_dim(), student_head_hidden, embedding_dim};
}

ExperimentConfig parse_config(const std::string& text) {
  ExperimentConfig cfg;
  std::set<std::string> seen;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string body = trim(std::string_view(line).substr(0, line.find('#')));
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(line_no) + ": expected 'key = value'");
    }
    const std::string key = trim(std::string_view(body).substr(0, eq));
    const std::string value = trim(std::string_view(body).substr(eq + 1));
    const auto it = fields().find(key);
    if (it == fields().end()) {
      throw ConfigError("line " + std::to_string(line_no) + ": unknown key '" + key + "'");
    }
    if (!seen.insert(key).second) {
      throw ConfigError("line " + std::to_string(line_no) + ": duplicate key '" + key + "'");
    }
    it->second.set(cfg, key, value);
  }
  for (const auto& key : kRequired) {
    if (!seen.count(key)) throw ConfigError("missing required key '" + key + "'");
  }
  // A schedule left unspecified keeps the head frozen for the whole run.
  if (!seen.count("train.frozen_epochs") && !seen.count("train.unfrozen_epochs")) {
    cfg.train.freeze = {cfg.train.epochs, 0};
  }
  cfg.validate();
  return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  std::stringstream buffer;
  buffer << in.rdbuf();
  return parse_config(buffer.str());
}

std::string serialize_config(const ExperimentConfig& cfg) {
  std::string out;
  for (const auto& [key, field] : fields()) out += key + " = " + field.get(cfg) + "\n";
  return out;
}

std::string config_fingerprint(const ExperimentConfig& cfg) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : serialize_config(cfg)) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return fmt::format("{:016x}", h);
}

data::Dataset load_train_split(const ExperimentConfig& cfg) {
  if (cfg.data.source == "cifar") return data::load_cifar_binary(cfg.data.cifar_train, cfg.data.classes);
  return data::generate_synthetic(cfg.data.classes, cfg.data.train_per_class, cfg.data.image_size,
                                  cfg.data.seed);
}

data::Dataset load_test_split(const ExperimentConfig& cfg) {
  if (cfg.data.source == "cifar") return data::load_cifar_binary(cfg.data.cifar_test, cfg.data.classes);
  return data::generate_synthetic(cfg.data.classes, cfg.data.test_per_class, cfg.data.image_size,
                                  cfg.data.seed + 1);
}

}  // namespace retro

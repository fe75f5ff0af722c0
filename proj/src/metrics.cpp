#include "retro/metrics.hpp"

#include <cmath>
#include <sstream>

#include <fmt/format.h>

#include "retro/errors.hpp"

namespace retro {

namespace {
std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> fields;
  std::string field;
  std::istringstream in(line);
  while (std::getline(in, field, ',')) fields.push_back(field);
  if (!line.empty() && line.back() == ',') fields.emplace_back();
  return fields;
}
}  // namespace

std::string metrics_version_line() {
  return "# retro-metrics v" + std::to_string(kMetricsSchemaVersion);
}

std::string metrics_header() {
  return "run_id,mode,epoch,step,loss_total,loss_dis,loss_con,lr,head_frozen,wall_ms";
}

std::string format_metrics_row(const MetricsRecord& r) {
  for (double v : {r.loss_total, r.loss_dis, r.loss_con, r.lr, r.wall_ms}) {
    if (!std::isfinite(v)) {
      throw ContractError("metrics record for step " + std::to_string(r.step) +
                          " has a non-finite field");
    }
  }
  return fmt::format("{},{},{},{},{:.9g},{:.9g},{:.9g},{:.9g},{},{:.3f}", r.run_id, r.mode,
                     r.epoch, r.step, r.loss_total, r.loss_dis, r.loss_con, r.lr,
                     r.head_frozen ? 1 : 0, r.wall_ms);
}

MetricsRecord parse_metrics_row(const std::string& line) {
  const auto f = split_csv(line);
  if (f.size() != 10) throw FormatError("metrics row has " + std::to_string(f.size()) + " fields");
  MetricsRecord r;
  try {
    r.run_id = f[0];
    r.mode = f[1];
    r.epoch = std::stoi(f[2]);
    r.step = std::stol(f[3]);
    r.loss_total = std::stod(f[4]);
    r.loss_dis = std::stod(f[5]);
    r.loss_con = std::stod(f[6]);
    r.lr = std::stod(f[7]);
    r.head_frozen = f[8] == "1";
    r.wall_ms = std::stod(f[9]);
  } catch (const std::logic_error&) {
    throw FormatError("malformed metrics row: " + line);
  }
  return r;
}

std::vector<MetricsRecord> read_metrics_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open metrics file " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != metrics_version_line()) {
    throw FormatError(path.string() + ": missing or unsupported metrics version line");
  }
  if (!std::getline(in, line) || line != metrics_header()) {
    throw FormatError(path.string() + ": unexpected metrics header");
  }
  std::vector<MetricsRecord> rows;
  while (std::getline(in, line)) {
    if (!line.empty()) rows.push_back(parse_metrics_row(line));
  }
  return rows;
}

MetricsWriter::MetricsWriter(const std::filesystem::path& path) : out_(path), path_(path) {
  if (!out_) throw FormatError("cannot write metrics file " + path.string());
  out_ << metrics_version_line() << '\n' << metrics_header() << '\n';
  out_.flush();
}

void MetricsWriter::write(const MetricsRecord& record) {
  out_ << format_metrics_row(record) << '\n';
  out_.flush();
}

MetricsSink MetricsWriter::sink() {
  return [this](const MetricsRecord& r) { write(r); };
}

}  // namespace retro

#pragma once

#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

namespace retro {

/// One row of a metrics CSV.
struct MetricsRecord {
  std::string run_id;
  std::string mode;
  int epoch = 0;
  long step = 0;
  double loss_total = 0.0;
  double loss_dis = 0.0;
  double loss_con = 0.0;
  double lr = 0.0;
  bool head_frozen = false;
  double wall_ms = 0.0;
};

using MetricsSink = std::function<void(const MetricsRecord&)>;

inline constexpr int kMetricsSchemaVersion = 1;
// First line of every metrics file; the column header follows it.
std::string metrics_version_line();
std::string metrics_header();
std::string format_metrics_row(const MetricsRecord& record);
MetricsRecord parse_metrics_row(const std::string& line);

// Reads a metrics file written by MetricsWriter, validating the version line and header.
std::vector<MetricsRecord> read_metrics_csv(const std::filesystem::path& path);

/// Append-only CSV writer. Non-finite numeric fields are rejected.
class MetricsWriter {
 public:
  explicit MetricsWriter(const std::filesystem::path& path);
  void write(const MetricsRecord& record);
  MetricsSink sink();

 private:
  std::ofstream out_;
  std::filesystem::path path_;
};

}  // namespace retro

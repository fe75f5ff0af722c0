#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace retro {

struct SummaryRow {
  std::string run_id;
  std::string mode;
  std::string fingerprint;
  int epochs = 0;
  double final_loss = 0.0;
  std::optional<double> top1;  // absent when the run has no eval.csv
  std::optional<double> top5;
};

// Scans `root` and its immediate subdirectories for run directories (those
// holding epochs.csv) and writes root/summary.csv and root/curves.csv.
// Throws ConfigError when no run is found.
std::vector<SummaryRow> export_report(const std::filesystem::path& root);

}  // namespace retro

#include "retro/report.hpp"

#include <algorithm>
#include <fstream>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "retro/errors.hpp"
#include "retro/eval.hpp"
#include "retro/metrics.hpp"

namespace retro {

namespace fs = std::filesystem;

namespace {

std::string read_first_line(const fs::path& path) {
  std::ifstream in(path);
  std::string line;
  if (in) std::getline(in, line);
  return line;
}

std::string optional_field(const std::optional<double>& v) {
  return v ? fmt::format("{:.9g}", *v) : std::string("n/a");
}

}  // namespace

std::vector<SummaryRow> export_report(const fs::path& root) {
  if (!fs::is_directory(root)) throw ConfigError("report: " + root.string() + " is not a directory");
  std::vector<fs::path> runs;
  if (fs::exists(root / "epochs.csv")) runs.push_back(root);
  for (const auto& entry : fs::directory_iterator(root)) {
    if (entry.is_directory() && fs::exists(entry.path() / "epochs.csv")) runs.push_back(entry.path());
  }
  std::sort(runs.begin(), runs.end());

  std::vector<SummaryRow> summary;
  std::ofstream curves(root / "curves.csv");
  if (!curves) throw FormatError("cannot write " + (root / "curves.csv").string());
  curves << "run_id,mode,epoch,loss_total,loss_dis,loss_con,lr,head_frozen\n";
  for (const fs::path& dir : runs) {
    const auto epochs = read_metrics_csv(dir / "epochs.csv");
    if (epochs.empty()) {
      spdlog::warn("report: {} has no completed epochs; skipped", dir.string());
      continue;
    }
    SummaryRow row;
    row.run_id = epochs.back().run_id;
    row.mode = epochs.back().mode;
    row.fingerprint = read_first_line(dir / "fingerprint.txt");
    row.epochs = static_cast<int>(epochs.size());
    row.final_loss = epochs.back().loss_total;
    if (fs::exists(dir / "eval.csv")) {
      const eval::EvalReport r = eval::parse_eval_csv(dir / "eval.csv");
      row.top1 = r.top1;
      row.top5 = r.top5;
    }
    for (const MetricsRecord& e : epochs) {
      curves << fmt::format("{},{},{},{:.9g},{:.9g},{:.9g},{:.9g},{}\n", e.run_id, e.mode, e.epoch,
                            e.loss_total, e.loss_dis, e.loss_con, e.lr, e.head_frozen ? 1 : 0);
    }
    summary.push_back(std::move(row));
  }
  if (summary.empty()) throw ConfigError("report: no run directories with metrics under " + root.string());

  std::ofstream out(root / "summary.csv");
  if (!out) throw FormatError("cannot write " + (root / "summary.csv").string());
  out << "run_id,mode,fingerprint,epochs,final_loss,top1,top5\n";
  for (const SummaryRow& r : summary) {
    out << fmt::format("{},{},{},{},{:.9g},{},{}\n", r.run_id, r.mode, r.fingerprint, r.epochs,
                       r.final_loss, optional_field(r.top1), optional_field(r.top5));
  }
  return summary;
}

}  // namespace retro

#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "distillkit/evaluation.hpp"
#include "distillkit/kd_losses.hpp"
#include "distillkit/model_zoo.hpp"
#include "json.hpp"

namespace distillkit {

using json = nlohmann::json;

struct EpochLog {
  int64_t epoch = 0;
  LossBreakdown train;
  LossBreakdown val;
  double train_accuracy = 0.0;
  double val_accuracy = 0.0;
};

// Everything one training run reports: one row of the comparison table.
struct RunRecord {
  std::string name;                  // "STU", "KD_REL_T2", "RN50", ...
  std::string table_type;            // "Teacher Models" | "Student Model" | "KD Models"
  std::string fine_tuning = "-";     // "Fine-tuned" | "Pre-trained" | "-"
  std::string status = "ok";         // "ok" | "failed"
  std::string error;
  json config = json::object();      // resolved TrainConfig snapshot
  json seeds = json::object();       // master, split, init, shuffle
  std::vector<EpochLog> epochs;
  int64_t best_epoch = -1;
  std::optional<MetricsReport> test_metrics;
  std::optional<ModelComplexityReport> complexity;
  int64_t frozen_parameters = 0;
  double wall_clock_seconds = 0.0;
  std::map<std::string, std::string> artifacts;

  json to_json() const;
  static RunRecord from_json(const json& j);
};

enum class ReportFormat { Json, Csv, Markdown };

ReportFormat parse_report_format(const std::string& s);
std::string extension_for(ReportFormat f);

// Column order of the comparison table.
const std::vector<std::string>& report_columns();

// Metrics use weighted averaging; failed runs print "failed".
std::string render_report(const std::vector<RunRecord>& records, ReportFormat format);
void export_report(const std::vector<RunRecord>& records, ReportFormat format, const std::filesystem::path& path);

// Reads either a single run_record.json or a JSON report (array of records).
std::vector<RunRecord> load_run_records(const std::filesystem::path& path);

}  // namespace distillkit

#include "distillkit/report.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

#include "distillkit/errors.hpp"

namespace distillkit {

namespace {

LossWeights weights_from_config(const json& config) {
  LossWeights w;
  if (config.contains("loss_weights")) {
    const auto& j = config["loss_weights"];
    w.resp = j.value("resp", w.resp);
    w.feat = j.value("feat", w.feat);
    w.rel = j.value("rel", w.rel);
  }
  return w;
}

std::string percent(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f%%", 100.0 * v);
  return buf;
}

std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::vector<std::string> row_cells(const RunRecord& r) {
  std::vector<std::string> cells = {r.table_type, r.name, r.fine_tuning};
  if (r.status == "ok" && r.test_metrics) {
    const auto& m = *r.test_metrics;
    cells.push_back(percent(m.accuracy));
    cells.push_back(percent(m.weighted.precision));
    cells.push_back(percent(m.weighted.f1));
    cells.push_back(percent(m.weighted.recall));
  } else {
    for (int i = 0; i < 4; ++i) cells.push_back("failed");
  }
  return cells;
}

}  // namespace

json RunRecord::to_json() const {
  json ep = json::array();
  for (const auto& e : epochs) {
    ep.push_back({{"epoch", e.epoch},
                  {"train", e.train.to_json()},
                  {"val", e.val.to_json()},
                  {"train_accuracy", e.train_accuracy},
                  {"val_accuracy", e.val_accuracy}});
  }
  json j = {{"name", name},
            {"table_type", table_type},
            {"fine_tuning", fine_tuning},
            {"status", status},
            {"error", error},
            {"config", config},
            {"seeds", seeds},
            {"epochs", ep},
            {"best_epoch", best_epoch},
            {"frozen_parameters", frozen_parameters},
            {"wall_clock_seconds", wall_clock_seconds},
            {"artifacts", artifacts}};
  j["test_metrics"] = test_metrics ? test_metrics->to_json() : json(nullptr);
  j["complexity"] = complexity ? complexity->to_json() : json(nullptr);
  return j;
}

RunRecord RunRecord::from_json(const json& j) {
  RunRecord r;
  r.name = j.at("name").get<std::string>();
  r.table_type = j.value("table_type", std::string{});
  r.fine_tuning = j.value("fine_tuning", std::string{"-"});
  r.status = j.value("status", std::string{"ok"});
  r.error = j.value("error", std::string{});
  r.config = j.value("config", json::object());
  r.seeds = j.value("seeds", json::object());
  const auto weights = weights_from_config(r.config);
  for (const auto& e : j.value("epochs", json::array())) {
    EpochLog log;
    log.epoch = e.at("epoch").get<int64_t>();
    log.train = LossBreakdown::from_json(e.at("train"), weights);
    log.val = LossBreakdown::from_json(e.at("val"), weights);
    log.train_accuracy = e.value("train_accuracy", 0.0);
    log.val_accuracy = e.value("val_accuracy", 0.0);
    r.epochs.push_back(std::move(log));
  }
  r.best_epoch = j.value("best_epoch", int64_t{-1});
  if (j.contains("test_metrics") && !j["test_metrics"].is_null()) {
    r.test_metrics = MetricsReport::from_json(j["test_metrics"]);
  }
  if (j.contains("complexity") && !j["complexity"].is_null()) {
    r.complexity = ModelComplexityReport::from_json(j["complexity"]);
  }
  r.frozen_parameters = j.value("frozen_parameters", int64_t{0});
  r.wall_clock_seconds = j.value("wall_clock_seconds", 0.0);
  r.artifacts = j.value("artifacts", std::map<std::string, std::string>{});
  return r;
}

ReportFormat parse_report_format(const std::string& s) {
  if (s == "json") return ReportFormat::Json;
  if (s == "csv") return ReportFormat::Csv;
  if (s == "markdown" || s == "md") return ReportFormat::Markdown;
  throw ConfigError("unknown report format '" + s + "' (expected json, csv or markdown)");
}

std::string extension_for(ReportFormat f) {
  switch (f) {
    case ReportFormat::Json: return "json";
    case ReportFormat::Csv: return "csv";
    case ReportFormat::Markdown: return "md";
  }
  return "txt";
}

const std::vector<std::string>& report_columns() {
  static const std::vector<std::string> cols = {"Type",      "Model",    "Fine-Tuning", "Accuracy",
                                                "Precision", "F1 Score", "Recall"};
  return cols;
}

std::string render_report(const std::vector<RunRecord>& records, ReportFormat format) {
  if (records.empty()) throw InputError("report: no run records");
  std::ostringstream out;
  switch (format) {
    case ReportFormat::Json: {
      json arr = json::array();
      for (const auto& r : records) arr.push_back(r.to_json());
      out << arr.dump(2) << "\n";
      break;
    }
    case ReportFormat::Csv: {
      const auto& cols = report_columns();
      for (size_t i = 0; i < cols.size(); ++i) out << (i ? "," : "") << csv_escape(cols[i]);
      out << "\n";
      for (const auto& r : records) {
        const auto cells = row_cells(r);
        for (size_t i = 0; i < cells.size(); ++i) out << (i ? "," : "") << csv_escape(cells[i]);
        out << "\n";
      }
      break;
    }
    case ReportFormat::Markdown: {
      const auto& cols = report_columns();
      out << "|";
      for (const auto& c : cols) out << " " << c << " |";
      out << "\n|";
      for (size_t i = 0; i < cols.size(); ++i) out << (i < 3 ? "---|" : "---:|");
      out << "\n";
      for (const auto& r : records) {
        out << "|";
        for (const auto& c : row_cells(r)) out << " " << c << " |";
        out << "\n";
      }
      break;
    }
  }
  return out.str();
}

void export_report(const std::vector<RunRecord>& records, ReportFormat format, const std::filesystem::path& path) {
  const auto text = render_report(records, format);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write report " + path.string());
  out << text;
}

std::vector<RunRecord> load_run_records(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ResourceError("cannot open " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw InputError("malformed JSON in " + path.string() + ": " + e.what());
  }
  std::vector<RunRecord> out;
  if (j.is_array()) {
    for (const auto& r : j) out.push_back(RunRecord::from_json(r));
  } else {
    out.push_back(RunRecord::from_json(j));
  }
  return out;
}

}  // namespace distillkit

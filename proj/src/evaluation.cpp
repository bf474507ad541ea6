#include "distillkit/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <sstream>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "distillkit/checkpoint.hpp"
#include "distillkit/errors.hpp"

namespace distillkit {

namespace F = torch::nn::functional;

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

namespace {

void check_inputs(std::span<const int64_t> preds, std::span<const int64_t> labels, int64_t k) {
  if (k < 1) throw InputError("metrics: num_classes must be positive");
  if (preds.size() != labels.size()) {
    throw InputError("metrics: " + std::to_string(preds.size()) + " predictions vs " + std::to_string(labels.size()) +
                     " labels");
  }
  if (preds.empty()) throw InputError("metrics: no samples");
  for (size_t i = 0; i < preds.size(); ++i) {
    if (preds[i] < 0 || preds[i] >= k || labels[i] < 0 || labels[i] >= k) {
      throw InputError("metrics: class index out of range at sample " + std::to_string(i));
    }
  }
}

json averaged_json(const AveragedMetrics& a) {
  return {{"precision", a.precision}, {"recall", a.recall}, {"f1", a.f1}};
}

AveragedMetrics averaged_from(const json& j) {
  return {j.at("precision").get<double>(), j.at("recall").get<double>(), j.at("f1").get<double>()};
}

}  // namespace

int64_t ConfusionMatrix::total() const {
  int64_t t = 0;
  for (const auto& row : counts) {
    for (auto c : row) t += c;
  }
  return t;
}

std::vector<std::vector<double>> ConfusionMatrix::row_percentages() const {
  std::vector<std::vector<double>> out;
  for (const auto& row : counts) {
    int64_t sum = 0;
    for (auto c : row) sum += c;
    std::vector<double> r(row.size(), 0.0);
    if (sum > 0) {
      for (size_t j = 0; j < row.size(); ++j) r[j] = 100.0 * static_cast<double>(row[j]) / static_cast<double>(sum);
    }
    out.push_back(std::move(r));
  }
  return out;
}

json ConfusionMatrix::to_json() const {
  return {{"class_names", class_names}, {"counts", counts}, {"row_percentages", row_percentages()}};
}

ConfusionMatrix confusion_matrix(std::span<const int64_t> preds, std::span<const int64_t> labels, int64_t num_classes,
                                 std::vector<std::string> class_names) {
  check_inputs(preds, labels, num_classes);
  ConfusionMatrix cm;
  cm.counts.assign(num_classes, std::vector<int64_t>(num_classes, 0));
  for (size_t i = 0; i < preds.size(); ++i) cm.counts[labels[i]][preds[i]] += 1;
  if (class_names.empty()) {
    for (int64_t k = 0; k < num_classes; ++k) class_names.push_back(std::to_string(k));
  }
  if (static_cast<int64_t>(class_names.size()) != num_classes) {
    throw InputError("confusion matrix: class_names size does not match num_classes");
  }
  cm.class_names = std::move(class_names);
  return cm;
}

MetricsReport compute_metrics(std::span<const int64_t> preds, std::span<const int64_t> labels, int64_t num_classes) {
  const auto cm = confusion_matrix(preds, labels, num_classes);
  const auto n = static_cast<double>(preds.size());
  MetricsReport report;
  report.num_samples = static_cast<int64_t>(preds.size());

  std::vector<int64_t> predicted(num_classes, 0);
  int64_t correct = 0;
  for (int64_t i = 0; i < num_classes; ++i) {
    correct += cm.counts[i][i];
    for (int64_t j = 0; j < num_classes; ++j) predicted[j] += cm.counts[i][j];
  }
  report.accuracy = static_cast<double>(correct) / n;

  for (int64_t k = 0; k < num_classes; ++k) {
    ClassMetrics m;
    const auto tp = cm.counts[k][k];
    for (auto c : cm.counts[k]) m.support += c;
    if (predicted[k] > 0) {
      m.precision = static_cast<double>(tp) / static_cast<double>(predicted[k]);
    } else {
      m.zero_division = true;
    }
    if (m.support > 0) {
      m.recall = static_cast<double>(tp) / static_cast<double>(m.support);
    } else {
      m.zero_division = true;
      report.warnings.push_back("class " + std::to_string(k) + " has no samples; it contributes 0 to macro averages");
    }
    if (m.precision + m.recall > 0.0) m.f1 = 2.0 * m.precision * m.recall / (m.precision + m.recall);
    report.zero_division = report.zero_division || m.zero_division;
    report.per_class.push_back(m);
  }

  for (const auto& m : report.per_class) {
    const double w = static_cast<double>(m.support) / n;
    report.macro.precision += m.precision;
    report.macro.recall += m.recall;
    report.macro.f1 += m.f1;
    report.weighted.precision += w * m.precision;
    report.weighted.recall += w * m.recall;
    report.weighted.f1 += w * m.f1;
  }
  const auto k = static_cast<double>(num_classes);
  report.macro.precision /= k;
  report.macro.recall /= k;
  report.macro.f1 /= k;
  return report;
}

json MetricsReport::to_json() const {
  json per = json::array();
  for (const auto& m : per_class) {
    per.push_back({{"precision", m.precision},
                   {"recall", m.recall},
                   {"f1", m.f1},
                   {"support", m.support},
                   {"zero_division", m.zero_division}});
  }
  return {{"accuracy", accuracy},
          {"macro", averaged_json(macro)},
          {"weighted", averaged_json(weighted)},
          {"per_class", per},
          {"num_samples", num_samples},
          {"zero_division", zero_division},
          {"warnings", warnings}};
}

MetricsReport MetricsReport::from_json(const json& j) {
  MetricsReport r;
  r.accuracy = j.at("accuracy").get<double>();
  r.macro = averaged_from(j.at("macro"));
  r.weighted = averaged_from(j.at("weighted"));
  for (const auto& m : j.at("per_class")) {
    r.per_class.push_back({m.at("precision").get<double>(), m.at("recall").get<double>(), m.at("f1").get<double>(),
                           m.at("support").get<int64_t>(), m.value("zero_division", false)});
  }
  r.num_samples = j.value("num_samples", int64_t{0});
  r.zero_division = j.value("zero_division", false);
  r.warnings = j.value("warnings", std::vector<std::string>{});
  return r;
}

void write_confusion_png(const ConfusionMatrix& cm, const std::filesystem::path& path) {
  const int k = static_cast<int>(cm.counts.size());
  if (k == 0) throw InputError("confusion png: empty matrix");
  constexpr int kCell = 48;
  constexpr int kMargin = 24;
  cv::Mat img(k * kCell + 2 * kMargin, k * kCell + 2 * kMargin, CV_8UC3, cv::Scalar(255, 255, 255));
  const auto pct = cm.row_percentages();
  for (int i = 0; i < k; ++i) {
    for (int j = 0; j < k; ++j) {
      const int shade = 255 - static_cast<int>(std::lround(2.0 * pct[i][j]));
      const cv::Rect cell(kMargin + j * kCell, kMargin + i * kCell, kCell, kCell);
      cv::rectangle(img, cell, cv::Scalar(255, shade, shade), cv::FILLED);
      cv::rectangle(img, cell, cv::Scalar(160, 160, 160), 1);
      const auto text = std::to_string(cm.counts[i][j]);
      const cv::Scalar ink = pct[i][j] > 60.0 ? cv::Scalar(255, 255, 255) : cv::Scalar(0, 0, 0);
      cv::putText(img, text, cv::Point(cell.x + 6, cell.y + kCell / 2 + 5), cv::FONT_HERSHEY_SIMPLEX, 0.45, ink, 1,
                  cv::LINE_8);
    }
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  if (!cv::imwrite(path.string(), img)) throw IoError("cannot write " + path.string());
}

// ---------------------------------------------------------------------------
// Grad-CAM
// ---------------------------------------------------------------------------

SaliencyMap gradcam(Classifier& model, const torch::Tensor& image, int64_t target_class, std::string layer) {
  const auto layers = model.activation_layers();
  if (layer.empty()) layer = layers.back();
  if (std::find(layers.begin(), layers.end(), layer) == layers.end()) {
    throw ConfigError("gradcam: '" + layer + "' is not a convolutional activation of this model");
  }
  if (target_class < 0 || target_class >= model.num_classes()) {
    throw InputError("gradcam: target class " + std::to_string(target_class) + " out of range");
  }
  if (image.dim() != 3 || image.size(0) != 3) throw InputError("gradcam: expected a 3 x H x W image");

  torch::AutoGradMode grad_on(true);
  const bool was_training = model.is_training();
  model.eval();
  auto x = image.detach().unsqueeze(0).clone().set_requires_grad(true);
  auto out = model.run(x, layer);
  auto activation = out.activation;  // 1 x C x h x w
  auto score = out.logits.select(1, target_class).sum();
  auto grads = torch::autograd::grad({score}, {activation}, /*grad_outputs=*/{}, /*retain_graph=*/false,
                                     /*create_graph=*/false, /*allow_unused=*/true)[0];
  model.train(was_training);
  if (!grads.defined()) grads = torch::zeros_like(activation);

  torch::NoGradGuard no_grad;
  const auto weights = grads.mean({2, 3}, /*keepdim=*/true);           // 1 x C x 1 x 1
  auto cam = torch::relu((weights * activation.detach()).sum(1, true));  // 1 x 1 x h x w
  cam = F::interpolate(cam, F::InterpolateFuncOptions()
                                .size(std::vector<int64_t>{image.size(1), image.size(2)})
                                .mode(torch::kBilinear)
                                .align_corners(false));
  cam = cam.squeeze(0).squeeze(0).clamp_min(0.0);
  const auto peak = cam.max().item<double>();
  if (peak > 0.0) {
    cam = cam / peak;
  } else {
    cam = torch::zeros_like(cam);
  }
  return {cam.to(torch::kFloat32).contiguous(), target_class, layer};
}

namespace {

cv::Mat heatmap_u8(const SaliencyMap& map) {
  auto h = (map.heatmap.clamp(0.0, 1.0) * 255.0).round().to(torch::kUInt8).contiguous();
  cv::Mat gray(static_cast<int>(h.size(0)), static_cast<int>(h.size(1)), CV_8UC1);
  std::memcpy(gray.data, h.data_ptr(), static_cast<size_t>(h.numel()));
  return gray;
}

void write_png(const cv::Mat& img, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  if (!cv::imwrite(path.string(), img)) throw IoError("cannot write " + path.string());
}

}  // namespace

void write_saliency_png(const SaliencyMap& map, const std::filesystem::path& path) { write_png(heatmap_u8(map), path); }

void write_overlay_png(const SaliencyMap& map, const torch::Tensor& image, const PreprocessConfig& cfg,
                       const std::filesystem::path& path) {
  auto mean = torch::tensor(std::vector<float>(cfg.mean.begin(), cfg.mean.end())).view({3, 1, 1});
  auto stddev = torch::tensor(std::vector<float>(cfg.stddev.begin(), cfg.stddev.end())).view({3, 1, 1});
  auto rgb = ((image.detach().to(torch::kFloat32) * stddev + mean).clamp(0.0, 1.0) * 255.0)
                 .round()
                 .to(torch::kUInt8)
                 .permute({1, 2, 0})
                 .contiguous();
  cv::Mat base(static_cast<int>(rgb.size(0)), static_cast<int>(rgb.size(1)), CV_8UC3);
  std::memcpy(base.data, rgb.data_ptr(), static_cast<size_t>(rgb.numel()));
  cv::cvtColor(base, base, cv::COLOR_RGB2BGR);
  cv::Mat colored;
  cv::applyColorMap(heatmap_u8(map), colored, cv::COLORMAP_JET);
  if (colored.size() != base.size()) cv::resize(colored, colored, base.size(), 0, 0, cv::INTER_LINEAR);
  cv::Mat blended;
  cv::addWeighted(base, 0.5, colored, 0.5, 0.0, blended);
  write_png(blended, path);
}

// ---------------------------------------------------------------------------
// Complexity
// ---------------------------------------------------------------------------

ComplexityTable complexity_report(const std::vector<std::pair<std::string, Model>>& models) {
  ComplexityTable table;
  for (const auto& [name, model] : models) {
    const auto r = count_parameters(*model);
    table.rows.push_back({name, r.total_parameters, r.trainable_parameters, r.serialized_size_bytes});
  }
  if (table.rows.size() < 2) return table;
  const auto& student = table.rows.front();
  for (size_t i = 1; i < table.rows.size(); ++i) {
    const auto& t = table.rows[i];
    table.reductions.push_back(
        {t.name, static_cast<double>(t.total_parameters) / static_cast<double>(std::max<int64_t>(1, student.total_parameters)),
         static_cast<double>(t.size_bytes) / static_cast<double>(std::max<int64_t>(1, student.size_bytes))});
  }
  return table;
}

std::string ComplexityTable::to_markdown() const {
  std::ostringstream out;
  out << "| Model | Total Number of Parameters | Model Size (bytes) |\n";
  out << "|---|---:|---:|\n";
  for (const auto& r : rows) out << "| " << r.name << " | " << r.total_parameters << " | " << r.size_bytes << " |\n";
  if (!reductions.empty()) {
    out << "\n| Student reduction factor vs | Parameters | Size |\n|---|---:|---:|\n";
    char buf[64];
    for (const auto& f : reductions) {
      out << "| " << f.teacher << " | ";
      std::snprintf(buf, sizeof buf, "%.1fx | %.1fx |", f.parameter_factor, f.size_factor);
      out << buf << "\n";
    }
  }
  return out.str();
}

json ComplexityTable::to_json() const {
  json rows_j = json::array();
  for (const auto& r : rows) {
    rows_j.push_back({{"name", r.name},
                      {"total_parameters", r.total_parameters},
                      {"trainable_parameters", r.trainable_parameters},
                      {"size_bytes", r.size_bytes}});
  }
  json red = json::array();
  for (const auto& f : reductions) {
    red.push_back({{"teacher", f.teacher}, {"parameter_factor", f.parameter_factor}, {"size_factor", f.size_factor}});
  }
  return {{"rows", rows_j}, {"reductions", red}};
}

std::vector<int64_t> predict(Classifier& model, const ImageDataset& data, int64_t batch_size) {
  torch::NoGradGuard no_grad;
  const bool was_training = model.is_training();
  model.eval();
  std::vector<int64_t> preds;
  preds.reserve(data.size());
  const auto n = static_cast<int64_t>(data.size());
  for (int64_t start = 0; start < n; start += batch_size) {
    std::vector<int64_t> rows;
    for (int64_t i = start; i < std::min(n, start + batch_size); ++i) rows.push_back(i);
    auto [x, y] = data.batch(rows);
    auto arg = model.forward(x).argmax(1).contiguous();
    const auto* p = arg.data_ptr<int64_t>();
    preds.insert(preds.end(), p, p + arg.numel());
  }
  model.train(was_training);
  return preds;
}

}  // namespace distillkit

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <torch/torch.h>

#include "distillkit/data_pipeline.hpp"
#include "distillkit/model_zoo.hpp"
#include "json.hpp"

namespace distillkit {

using json = nlohmann::json;

struct ClassMetrics {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  int64_t support = 0;
  // Set when a 0/0 ratio was replaced by 0 for this class.
  bool zero_division = false;
};

struct AveragedMetrics {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

struct MetricsReport {
  double accuracy = 0.0;
  AveragedMetrics macro;
  AveragedMetrics weighted;
  std::vector<ClassMetrics> per_class;
  int64_t num_samples = 0;
  bool zero_division = false;
  std::vector<std::string> warnings;

  json to_json() const;
  static MetricsReport from_json(const json& j);
};

struct ConfusionMatrix {
  std::vector<std::vector<int64_t>> counts;  // rows = true class, cols = predicted
  std::vector<std::string> class_names;

  int64_t total() const;
  // Each row scaled to sum to 100 (all-zero rows stay zero).
  std::vector<std::vector<double>> row_percentages() const;
  json to_json() const;
};

// One-vs-rest precision/recall/F1 per class plus macro and support-weighted
// averages. Throws InputError on length mismatch, empty input or labels
// outside [0, K).
MetricsReport compute_metrics(std::span<const int64_t> preds, std::span<const int64_t> labels, int64_t num_classes);

ConfusionMatrix confusion_matrix(std::span<const int64_t> preds, std::span<const int64_t> labels, int64_t num_classes,
                                 std::vector<std::string> class_names = {});

// PNG render of the row-normalised matrix with counts printed in each cell.
void write_confusion_png(const ConfusionMatrix& cm, const std::filesystem::path& path);

struct SaliencyMap {
  torch::Tensor heatmap;  // H x W float in [0, 1]
  int64_t target_class = 0;
  std::string source_layer;
};

// Grad-CAM on a single preprocessed image (3 x H x W). An empty `layer`
// selects the model's last conv activation. Non-conv layers raise ConfigError.
SaliencyMap gradcam(Classifier& model, const torch::Tensor& image, int64_t target_class, std::string layer = {});

// Grayscale heatmap (0..255).
void write_saliency_png(const SaliencyMap& map, const std::filesystem::path& path);
// JET colormap blended 50/50 over the de-standardised input image.
void write_overlay_png(const SaliencyMap& map, const torch::Tensor& image, const PreprocessConfig& cfg,
                       const std::filesystem::path& path);

struct ComplexityRow {
  std::string name;
  int64_t total_parameters = 0;
  int64_t trainable_parameters = 0;
  int64_t size_bytes = 0;
};

struct ReductionFactor {
  std::string teacher;
  double parameter_factor = 0.0;  // teacher params / student params
  double size_factor = 0.0;       // teacher bytes / student bytes
};

struct ComplexityTable {
  std::vector<ComplexityRow> rows;
  std::vector<ReductionFactor> reductions;

  std::string to_markdown() const;
  json to_json() const;
};

// The first entry is the student; every later entry is compared against it.
ComplexityTable complexity_report(const std::vector<std::pair<std::string, Model>>& models);

// Argmax predictions of `model` over a dataset, evaluated in batches.
std::vector<int64_t> predict(Classifier& model, const ImageDataset& data, int64_t batch_size = 64);

}  // namespace distillkit

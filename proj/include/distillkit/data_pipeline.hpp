#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <opencv2/core.hpp>
#include <torch/torch.h>

#include "json.hpp"

namespace distillkit {

using json = nlohmann::json;
namespace fs = std::filesystem;

enum class Split { Train, Val, Test, Unassigned };

std::string to_string(Split s);
Split parse_split(const std::string& s);

struct ImageRecord {
  fs::path path;  // absolute or root-joined
  int64_t label = 0;
  Split split = Split::Unassigned;
};

struct DatasetManifest {
  fs::path root;
  std::vector<std::string> class_names;  // index == label, lexicographic
  std::vector<ImageRecord> records;      // sorted by path
  std::vector<std::string> excluded_classes;
  int64_t skipped_files = 0;

  int64_t num_classes() const { return static_cast<int64_t>(class_names.size()); }
  std::vector<size_t> indices(Split s) const;
  size_t count(Split s) const { return indices(s).size(); }
  // Record path relative to root, '/'-separated.
  std::string relative_path(const ImageRecord& r) const;
};

struct SplitConfig {
  std::array<double, 3> ratios{0.6, 0.2, 0.2};  // train, val, test
  uint64_t seed = 0;
  bool stratified = true;

  // Throws ConfigError unless ratios are non-negative and sum to 1 within 1e-9.
  void validate() const;
};

// ImageNet statistics; teachers are pretrained with them.
struct PreprocessConfig {
  int64_t image_size = 224;
  std::array<float, 3> mean{0.485f, 0.456f, 0.406f};
  std::array<float, 3> stddev{0.229f, 0.224f, 0.225f};

  json to_json() const;
};

// Expects <root>/<class_name>/<image>.{jpg,jpeg,png}. Files that cannot be
// read are skipped with a warning and counted in `skipped_files`.
DatasetManifest ingest_folder_dataset(const fs::path& root, const std::vector<std::string>& exclude = {});

// Deterministic (stratified) shuffle-and-cut with largest-remainder rounding.
DatasetManifest split_dataset(const DatasetManifest& manifest, const SplitConfig& cfg);

// Sidecar: {seed, ratios, stratified, excluded_classes, assignments: [{path, split}]}
std::string split_sidecar_json(const DatasetManifest& manifest, const SplitConfig& cfg);
void write_split_sidecar(const DatasetManifest& manifest, const SplitConfig& cfg, const fs::path& path);
// Assigns splits from a sidecar; records missing from it stay unassigned.
DatasetManifest apply_split_sidecar(const DatasetManifest& manifest, const fs::path& path);
SplitConfig read_split_config(const fs::path& sidecar);

// RGB(A)/gray 8- or 16-bit image in OpenCV channel order (BGR) ->
// 3 x S x S float tensor, plain bilinear resize, then per-channel standardisation.
torch::Tensor preprocess(const cv::Mat& image, const PreprocessConfig& cfg = {});

// Decodes and preprocesses one file. Throws InputError if undecodable.
torch::Tensor load_image(const fs::path& path, const PreprocessConfig& cfg = {});

// Folder-per-class PNG dataset of noisy geometric patterns: the class sets
// the shape and a base hue, position, scale and colour are jittered.
// Deterministic in (num_classes, per_class, seed, image_size).
DatasetManifest synth_dataset(int64_t num_classes, int64_t per_class, uint64_t seed, const fs::path& out_root,
                              int64_t image_size = 64);

// Records of one split decoded into memory.
class ImageDataset {
 public:
  ImageDataset(const DatasetManifest& manifest, Split split, PreprocessConfig cfg);

  size_t size() const { return labels_.size(); }
  torch::Tensor images() const;  // N x 3 x S x S, standardised
  const torch::Tensor& labels() const { return labels_tensor_; }
  int64_t label(size_t i) const { return labels_[i]; }

  // Stacks the given rows into a batch.
  std::pair<torch::Tensor, torch::Tensor> batch(const std::vector<int64_t>& rows) const;

 private:
  PreprocessConfig cfg_;
  torch::Tensor pixels_;  // N x 3 x S x S uint8
  torch::Tensor labels_tensor_;
  std::vector<int64_t> labels_;
};

}  // namespace distillkit

#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <torch/torch.h>

#include "json.hpp"

namespace distillkit {

using json = nlohmann::json;

// One conv block of the student: conv -> batch-norm -> ReLU [-> 2x2 max-pool].
struct ConvBlockSpec {
  int64_t in_channels = 0;
  int64_t out_channels = 0;
  int64_t kernel_size = 3;
  bool pool = true;
};

struct StudentArchSpec {
  std::vector<ConvBlockSpec> conv_blocks;
  int64_t head_width = 0;
  int64_t num_classes = 0;
  int64_t input_size = 224;

  // Three blocks 3->32->56->64, 3x3 kernels, global pool, FC 64->num_classes.
  static StudentArchSpec standard(int64_t num_classes, int64_t input_size = 224);

  // Throws ConfigError on a broken channel chain or num_classes < 2.
  void validate() const;

  json to_json() const;
  static StudentArchSpec from_json(const json& j);
};

enum class Backbone { RN50, RN101, RN152, Toy };
enum class WeightsMode { Pretrained, Finetuned, Scratch };

std::string to_string(Backbone b);
std::string to_string(WeightsMode m);
Backbone parse_backbone(std::string_view s);
WeightsMode parse_weights_mode(std::string_view s);

struct TeacherSpec {
  Backbone backbone = Backbone::RN50;
  WeightsMode weights_mode = WeightsMode::Scratch;
  int64_t frozen_prefix_depth = 0;
  int64_t num_classes = 1000;
  int64_t input_size = 224;
  // Required for WeightsMode::Finetuned.
  std::optional<std::filesystem::path> checkpoint;
};

enum class TapPoint { Penultimate, Logits };

struct FeatureTap {
  TapPoint point = TapPoint::Penultimate;
  int64_t dimension = 0;
};

struct ModelComplexityReport {
  int64_t total_parameters = 0;
  int64_t trainable_parameters = 0;
  int64_t serialized_size_bytes = 0;

  json to_json() const;
  static ModelComplexityReport from_json(const json& j);
};

// Freezing unit. Groups with no parameters (pooling stages) are still counted.
struct LayerGroup {
  std::string name;
  std::vector<std::shared_ptr<torch::nn::Module>> modules;
};

struct ForwardResult {
  torch::Tensor logits;    // B x num_classes
  torch::Tensor features;  // B x feature_dim, post global pool
  torch::Tensor activation;  // captured conv activation, undefined if none requested
};

// Common surface of the student, the toy teacher and the ResNet teachers.
class Classifier : public torch::nn::Module {
 public:
  Classifier(int64_t num_classes, int64_t feature_dim, int64_t input_size)
      : num_classes_(num_classes), feature_dim_(feature_dim), input_size_(input_size) {}

  // `capture` names one of activation_layers(); that activation is returned
  // still attached to the graph so callers can differentiate through it.
  virtual ForwardResult run(const torch::Tensor& x, const std::string& capture = {}) = 0;
  torch::Tensor forward(const torch::Tensor& x) { return run(x).logits; }

  virtual std::vector<std::string> activation_layers() const = 0;
  // Backbone groups in input-to-output order. The classifier head is not a group.
  virtual std::vector<LayerGroup> layer_groups() = 0;
  virtual json architecture() const = 0;

  int64_t num_classes() const { return num_classes_; }
  int64_t feature_dim() const { return feature_dim_; }
  int64_t input_size() const { return input_size_; }
  int64_t frozen_depth() const { return frozen_depth_; }

  void freeze_prefix(int64_t depth);
  void train(bool on = true) override;

 private:
  int64_t num_classes_;
  int64_t feature_dim_;
  int64_t input_size_;
  int64_t frozen_depth_ = 0;
};

using Model = std::shared_ptr<Classifier>;

class StudentNet : public Classifier {
 public:
  explicit StudentNet(StudentArchSpec spec);

  ForwardResult run(const torch::Tensor& x, const std::string& capture = {}) override;
  std::vector<std::string> activation_layers() const override;
  std::vector<LayerGroup> layer_groups() override;
  json architecture() const override;

  const StudentArchSpec& spec() const { return spec_; }

 private:
  StudentArchSpec spec_;
  std::vector<torch::nn::Conv2d> convs_;
  std::vector<torch::nn::BatchNorm2d> norms_;
  torch::nn::Linear head_{nullptr};
};

// Five conv blocks, 3->32->64->96->128->128. Stands in for a ResNet teacher
// where a real backbone is too slow to train on CPU.
class ToyTeacherNet : public Classifier {
 public:
  ToyTeacherNet(int64_t num_classes, int64_t input_size);

  ForwardResult run(const torch::Tensor& x, const std::string& capture = {}) override;
  std::vector<std::string> activation_layers() const override;
  std::vector<LayerGroup> layer_groups() override;
  json architecture() const override;

  static constexpr int64_t kFeatureDim = 128;

 private:
  std::vector<torch::nn::Conv2d> convs_;
  std::vector<torch::nn::BatchNorm2d> norms_;
  torch::nn::Linear head_{nullptr};
};

// Bottleneck ResNet (50/101/152) with torchvision-compatible layout.
class ResNetTeacher : public Classifier {
 public:
  ResNetTeacher(Backbone backbone, int64_t num_classes, int64_t input_size);

  ForwardResult run(const torch::Tensor& x, const std::string& capture = {}) override;
  std::vector<std::string> activation_layers() const override;
  std::vector<LayerGroup> layer_groups() override;
  json architecture() const override;

  Backbone backbone() const { return backbone_; }
  static constexpr int64_t kFeatureDim = 2048;

 private:
  Backbone backbone_;
  torch::nn::Conv2d stem_conv_{nullptr};
  torch::nn::BatchNorm2d stem_bn_{nullptr};
  std::vector<torch::nn::Sequential> stages_;
  torch::nn::Linear head_{nullptr};
};

// Number of bottleneck blocks per stage for each ResNet depth.
std::vector<int64_t> resnet_stage_blocks(Backbone backbone);

Model build_student(const StudentArchSpec& spec);

// Pretrained weights are read from $DISTILLKIT_WEIGHTS_DIR/<rn50|rn101|rn152|toy>.ckpt.
// A missing file raises ResourceError; there is no fallback to scratch.
Model build_teacher(const TeacherSpec& spec);

// Rebuilds a model from the architecture description stored in a checkpoint.
Model build_from_architecture(const json& arch);

FeatureTap make_tap(const Classifier& model, TapPoint point);

// Batch must be B x 3 x S x S with S == model.input_size().
torch::Tensor tap_features(Classifier& model, const FeatureTap& tap, const torch::Tensor& batch);

ModelComplexityReport count_parameters(Classifier& model);

// Throws ConfigError when depth exceeds the number of layer groups.
void freeze_prefix(Classifier& model, int64_t depth);

std::filesystem::path weights_dir_from_env();

}  // namespace distillkit

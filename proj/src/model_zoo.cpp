#include "distillkit/model_zoo.hpp"

#include <cstdlib>

#include "distillkit/checkpoint.hpp"
#include "distillkit/errors.hpp"

namespace distillkit {

namespace nn = torch::nn;
namespace F = torch::nn::functional;

// ---------------------------------------------------------------------------
// Specs
// ---------------------------------------------------------------------------

StudentArchSpec StudentArchSpec::standard(int64_t num_classes, int64_t input_size) {
  StudentArchSpec spec;
  spec.conv_blocks = {{3, 32, 3, true}, {32, 56, 3, true}, {56, 64, 3, true}};
  spec.head_width = 64;
  spec.num_classes = num_classes;
  spec.input_size = input_size;
  return spec;
}

void StudentArchSpec::validate() const {
  if (num_classes < 2) {
    throw ConfigError("student: num_classes must be >= 2, got " + std::to_string(num_classes));
  }
  if (conv_blocks.empty()) throw ConfigError("student: at least one conv block is required");
  if (conv_blocks.front().in_channels != 3) {
    throw ConfigError("student: first block must take 3 input channels");
  }
  for (size_t i = 0; i < conv_blocks.size(); ++i) {
    const auto& b = conv_blocks[i];
    if (b.in_channels < 1 || b.out_channels < 1 || b.kernel_size < 1) {
      throw ConfigError("student: block " + std::to_string(i) + " has a non-positive dimension");
    }
    if (b.kernel_size % 2 == 0) {
      throw ConfigError("student: block " + std::to_string(i) + " kernel size must be odd");
    }
    if (i + 1 < conv_blocks.size() && b.out_channels != conv_blocks[i + 1].in_channels) {
      throw ConfigError("student: channel chain broken between block " + std::to_string(i) +
                        " (out " + std::to_string(b.out_channels) + ") and block " + std::to_string(i + 1) +
                        " (in " + std::to_string(conv_blocks[i + 1].in_channels) + ")");
    }
  }
  if (head_width != conv_blocks.back().out_channels) {
    throw ConfigError("student: head_width " + std::to_string(head_width) +
                      " does not match last block width " + std::to_string(conv_blocks.back().out_channels));
  }
  if (input_size < 1) throw ConfigError("student: input_size must be positive");
}

json StudentArchSpec::to_json() const {
  json blocks = json::array();
  for (const auto& b : conv_blocks) {
    blocks.push_back({{"in_channels", b.in_channels},
                      {"out_channels", b.out_channels},
                      {"kernel_size", b.kernel_size},
                      {"pool", b.pool}});
  }
  return {{"conv_blocks", blocks}, {"head_width", head_width}, {"num_classes", num_classes}, {"input_size", input_size}};
}

StudentArchSpec StudentArchSpec::from_json(const json& j) {
  StudentArchSpec spec;
  for (const auto& b : j.at("conv_blocks")) {
    spec.conv_blocks.push_back({b.at("in_channels").get<int64_t>(), b.at("out_channels").get<int64_t>(),
                                b.value("kernel_size", int64_t{3}), b.value("pool", true)});
  }
  spec.head_width = j.at("head_width").get<int64_t>();
  spec.num_classes = j.at("num_classes").get<int64_t>();
  spec.input_size = j.value("input_size", int64_t{224});
  return spec;
}

std::string to_string(Backbone b) {
  switch (b) {
    case Backbone::RN50: return "RN50";
    case Backbone::RN101: return "RN101";
    case Backbone::RN152: return "RN152";
    case Backbone::Toy: return "TOY";
  }
  return "?";
}

std::string to_string(WeightsMode m) {
  switch (m) {
    case WeightsMode::Pretrained: return "pretrained";
    case WeightsMode::Finetuned: return "finetuned";
    case WeightsMode::Scratch: return "scratch";
  }
  return "?";
}

Backbone parse_backbone(std::string_view s) {
  if (s == "RN50" || s == "rn50") return Backbone::RN50;
  if (s == "RN101" || s == "rn101") return Backbone::RN101;
  if (s == "RN152" || s == "rn152") return Backbone::RN152;
  if (s == "TOY" || s == "toy") return Backbone::Toy;
  throw ConfigError("unknown backbone id '" + std::string(s) + "'");
}

WeightsMode parse_weights_mode(std::string_view s) {
  if (s == "pretrained") return WeightsMode::Pretrained;
  if (s == "finetuned") return WeightsMode::Finetuned;
  if (s == "scratch") return WeightsMode::Scratch;
  throw ConfigError("unknown weights mode '" + std::string(s) + "'");
}

json ModelComplexityReport::to_json() const {
  return {{"total_parameters", total_parameters},
          {"trainable_parameters", trainable_parameters},
          {"serialized_size_bytes", serialized_size_bytes}};
}

ModelComplexityReport ModelComplexityReport::from_json(const json& j) {
  return {j.at("total_parameters").get<int64_t>(), j.at("trainable_parameters").get<int64_t>(),
          j.at("serialized_size_bytes").get<int64_t>()};
}

// ---------------------------------------------------------------------------
// Classifier
// ---------------------------------------------------------------------------

void Classifier::freeze_prefix(int64_t depth) {
  auto groups = layer_groups();
  if (depth < 0 || depth > static_cast<int64_t>(groups.size())) {
    throw ConfigError("freeze depth " + std::to_string(depth) + " out of range [0, " +
                      std::to_string(groups.size()) + "]");
  }
  for (auto& p : parameters()) p.set_requires_grad(true);
  for (int64_t g = 0; g < depth; ++g) {
    for (auto& m : groups[g].modules) {
      for (auto& p : m->parameters()) p.set_requires_grad(false);
    }
  }
  frozen_depth_ = depth;
  train(is_training());
}

void Classifier::train(bool on) {
  torch::nn::Module::train(on);
  if (!on || frozen_depth_ == 0) return;
  // Frozen batch-norm layers keep their running statistics.
  auto groups = layer_groups();
  for (int64_t g = 0; g < frozen_depth_; ++g) {
    for (auto& m : groups[g].modules) m->eval();
  }
}

// ---------------------------------------------------------------------------
// Student
// ---------------------------------------------------------------------------

StudentNet::StudentNet(StudentArchSpec spec)
    : Classifier(spec.num_classes, spec.head_width, spec.input_size), spec_(std::move(spec)) {
  spec_.validate();
  for (size_t i = 0; i < spec_.conv_blocks.size(); ++i) {
    const auto& b = spec_.conv_blocks[i];
    const auto tag = "block" + std::to_string(i + 1);
    convs_.push_back(register_module(
        tag + "_conv",
        nn::Conv2d(nn::Conv2dOptions(b.in_channels, b.out_channels, b.kernel_size).stride(1).padding(b.kernel_size / 2))));
    norms_.push_back(register_module(tag + "_bn", nn::BatchNorm2d(b.out_channels)));
  }
  head_ = register_module("head", nn::Linear(spec_.head_width, spec_.num_classes));
}

ForwardResult StudentNet::run(const torch::Tensor& x, const std::string& capture) {
  ForwardResult out;
  auto h = x;
  for (size_t i = 0; i < convs_.size(); ++i) {
    h = torch::relu(norms_[i]->forward(convs_[i]->forward(h)));
    if (capture == "block" + std::to_string(i + 1)) out.activation = h;
    if (spec_.conv_blocks[i].pool) h = F::max_pool2d(h, F::MaxPool2dFuncOptions(2).stride(2));
  }
  out.features = F::adaptive_avg_pool2d(h, F::AdaptiveAvgPool2dFuncOptions(1)).flatten(1);
  out.logits = head_->forward(out.features);
  return out;
}

std::vector<std::string> StudentNet::activation_layers() const {
  std::vector<std::string> names;
  for (size_t i = 0; i < convs_.size(); ++i) names.push_back("block" + std::to_string(i + 1));
  return names;
}

std::vector<LayerGroup> StudentNet::layer_groups() {
  std::vector<LayerGroup> groups;
  for (size_t i = 0; i < convs_.size(); ++i) {
    groups.push_back({"block" + std::to_string(i + 1), {convs_[i].ptr(), norms_[i].ptr()}});
  }
  return groups;
}

json StudentNet::architecture() const {
  return {{"kind", "student"}, {"spec", spec_.to_json()}, {"frozen_prefix_depth", frozen_depth()}};
}

// ---------------------------------------------------------------------------
// Toy teacher
// ---------------------------------------------------------------------------

namespace {
constexpr int64_t kToyWidths[] = {3, 32, 64, 96, 128, 128};
}

ToyTeacherNet::ToyTeacherNet(int64_t num_classes, int64_t input_size)
    : Classifier(num_classes, kFeatureDim, input_size) {
  if (num_classes < 2) throw ConfigError("teacher: num_classes must be >= 2");
  for (int i = 0; i < 5; ++i) {
    const auto tag = "block" + std::to_string(i + 1);
    convs_.push_back(register_module(
        tag + "_conv", nn::Conv2d(nn::Conv2dOptions(kToyWidths[i], kToyWidths[i + 1], 3).padding(1))));
    norms_.push_back(register_module(tag + "_bn", nn::BatchNorm2d(kToyWidths[i + 1])));
  }
  head_ = register_module("head", nn::Linear(kFeatureDim, num_classes));
}

ForwardResult ToyTeacherNet::run(const torch::Tensor& x, const std::string& capture) {
  ForwardResult out;
  auto h = x;
  for (size_t i = 0; i < convs_.size(); ++i) {
    h = torch::relu(norms_[i]->forward(convs_[i]->forward(h)));
    if (capture == "block" + std::to_string(i + 1)) out.activation = h;
    if (h.size(2) >= 2 && h.size(3) >= 2) h = F::max_pool2d(h, F::MaxPool2dFuncOptions(2).stride(2));
  }
  out.features = F::adaptive_avg_pool2d(h, F::AdaptiveAvgPool2dFuncOptions(1)).flatten(1);
  out.logits = head_->forward(out.features);
  return out;
}

std::vector<std::string> ToyTeacherNet::activation_layers() const {
  return {"block1", "block2", "block3", "block4", "block5"};
}

std::vector<LayerGroup> ToyTeacherNet::layer_groups() {
  std::vector<LayerGroup> groups;
  for (size_t i = 0; i < convs_.size(); ++i) {
    groups.push_back({"block" + std::to_string(i + 1), {convs_[i].ptr(), norms_[i].ptr()}});
  }
  return groups;
}

json ToyTeacherNet::architecture() const {
  return {{"kind", "teacher"},
          {"backbone", to_string(Backbone::Toy)},
          {"num_classes", num_classes()},
          {"input_size", input_size()},
          {"frozen_prefix_depth", frozen_depth()}};
}

// ---------------------------------------------------------------------------
// ResNet
// ---------------------------------------------------------------------------

namespace {

struct BottleneckImpl : nn::Module {
  static constexpr int64_t kExpansion = 4;

  BottleneckImpl(int64_t in_planes, int64_t planes, int64_t stride) {
    conv1 = register_module("conv1", nn::Conv2d(nn::Conv2dOptions(in_planes, planes, 1).bias(false)));
    bn1 = register_module("bn1", nn::BatchNorm2d(planes));
    conv2 = register_module(
        "conv2", nn::Conv2d(nn::Conv2dOptions(planes, planes, 3).stride(stride).padding(1).bias(false)));
    bn2 = register_module("bn2", nn::BatchNorm2d(planes));
    conv3 = register_module("conv3", nn::Conv2d(nn::Conv2dOptions(planes, planes * kExpansion, 1).bias(false)));
    bn3 = register_module("bn3", nn::BatchNorm2d(planes * kExpansion));
    if (stride != 1 || in_planes != planes * kExpansion) {
      downsample = register_module(
          "downsample",
          nn::Sequential(nn::Conv2d(nn::Conv2dOptions(in_planes, planes * kExpansion, 1).stride(stride).bias(false)),
                         nn::BatchNorm2d(planes * kExpansion)));
    }
  }

  torch::Tensor forward(const torch::Tensor& x) {
    auto out = torch::relu(bn1(conv1(x)));
    out = torch::relu(bn2(conv2(out)));
    out = bn3(conv3(out));
    auto identity = downsample.is_empty() ? x : downsample->forward(x);
    return torch::relu(out + identity);
  }

  nn::Conv2d conv1{nullptr}, conv2{nullptr}, conv3{nullptr};
  nn::BatchNorm2d bn1{nullptr}, bn2{nullptr}, bn3{nullptr};
  nn::Sequential downsample{nullptr};
};
TORCH_MODULE(Bottleneck);

}  // namespace

std::vector<int64_t> resnet_stage_blocks(Backbone backbone) {
  switch (backbone) {
    case Backbone::RN50: return {3, 4, 6, 3};
    case Backbone::RN101: return {3, 4, 23, 3};
    case Backbone::RN152: return {3, 8, 36, 3};
    case Backbone::Toy: break;
  }
  throw ConfigError("not a ResNet backbone: " + to_string(backbone));
}

ResNetTeacher::ResNetTeacher(Backbone backbone, int64_t num_classes, int64_t input_size)
    : Classifier(num_classes, kFeatureDim, input_size), backbone_(backbone) {
  if (num_classes < 2) throw ConfigError("teacher: num_classes must be >= 2");
  const auto blocks = resnet_stage_blocks(backbone);
  stem_conv_ = register_module("stem_conv", nn::Conv2d(nn::Conv2dOptions(3, 64, 7).stride(2).padding(3).bias(false)));
  stem_bn_ = register_module("stem_bn", nn::BatchNorm2d(64));
  int64_t in_planes = 64;
  const int64_t planes[] = {64, 128, 256, 512};
  for (size_t s = 0; s < 4; ++s) {
    nn::Sequential stage;
    for (int64_t b = 0; b < blocks[s]; ++b) {
      const int64_t stride = (b == 0 && s > 0) ? 2 : 1;
      stage->push_back(Bottleneck(in_planes, planes[s], stride));
      in_planes = planes[s] * BottleneckImpl::kExpansion;
    }
    stages_.push_back(register_module("layer" + std::to_string(s + 1), stage));
  }
  head_ = register_module("head", nn::Linear(kFeatureDim, num_classes));
}

ForwardResult ResNetTeacher::run(const torch::Tensor& x, const std::string& capture) {
  ForwardResult out;
  auto h = torch::relu(stem_bn_->forward(stem_conv_->forward(x)));
  h = F::max_pool2d(h, F::MaxPool2dFuncOptions(3).stride(2).padding(1));
  for (size_t s = 0; s < stages_.size(); ++s) {
    h = stages_[s]->forward(h);
    if (capture == "layer" + std::to_string(s + 1)) out.activation = h;
  }
  out.features = F::adaptive_avg_pool2d(h, F::AdaptiveAvgPool2dFuncOptions(1)).flatten(1);
  out.logits = head_->forward(out.features);
  return out;
}

std::vector<std::string> ResNetTeacher::activation_layers() const {
  return {"layer1", "layer2", "layer3", "layer4"};
}

std::vector<LayerGroup> ResNetTeacher::layer_groups() {
  std::vector<LayerGroup> groups;
  groups.push_back({"stem_conv", {stem_conv_.ptr()}});
  groups.push_back({"stem_bn", {stem_bn_.ptr()}});
  groups.push_back({"stem_pool", {}});
  for (size_t s = 0; s < stages_.size(); ++s) {
    groups.push_back({"layer" + std::to_string(s + 1), {stages_[s].ptr()}});
  }
  return groups;
}

json ResNetTeacher::architecture() const {
  return {{"kind", "teacher"},
          {"backbone", to_string(backbone_)},
          {"num_classes", num_classes()},
          {"input_size", input_size()},
          {"frozen_prefix_depth", frozen_depth()}};
}

// ---------------------------------------------------------------------------
// Factories and queries
// ---------------------------------------------------------------------------

std::filesystem::path weights_dir_from_env() {
  const char* dir = std::getenv("DISTILLKIT_WEIGHTS_DIR");
  return dir ? std::filesystem::path(dir) : std::filesystem::path{};
}

Model build_student(const StudentArchSpec& spec) {
  spec.validate();
  return std::make_shared<StudentNet>(spec);
}

namespace {

Model make_teacher(Backbone backbone, int64_t num_classes, int64_t input_size) {
  if (backbone == Backbone::Toy) return std::make_shared<ToyTeacherNet>(num_classes, input_size);
  return std::make_shared<ResNetTeacher>(backbone, num_classes, input_size);
}

std::string weights_file_name(Backbone b) {
  switch (b) {
    case Backbone::RN50: return "rn50.ckpt";
    case Backbone::RN101: return "rn101.ckpt";
    case Backbone::RN152: return "rn152.ckpt";
    case Backbone::Toy: return "toy.ckpt";
  }
  return {};
}

}  // namespace

Model build_teacher(const TeacherSpec& spec) {
  auto model = make_teacher(spec.backbone, spec.num_classes, spec.input_size);
  switch (spec.weights_mode) {
    case WeightsMode::Scratch:
      break;
    case WeightsMode::Pretrained: {
      const auto dir = weights_dir_from_env();
      if (dir.empty()) {
        throw ResourceError("pretrained weights requested for " + to_string(spec.backbone) +
                            " but DISTILLKIT_WEIGHTS_DIR is not set");
      }
      const auto ckpt = read_checkpoint(dir / weights_file_name(spec.backbone));
      // Pretrained heads (ImageNet: 1000 classes) are replaced by the task head.
      const bool same_head = ckpt.header.value("num_classes", int64_t{-1}) == spec.num_classes;
      load_state(*model, ckpt, {}, same_head ? std::vector<std::string>{} : std::vector<std::string>{"head."});
      break;
    }
    case WeightsMode::Finetuned: {
      if (!spec.checkpoint) throw ConfigError("finetuned teacher requires a checkpoint path");
      const auto ckpt = read_checkpoint(*spec.checkpoint);
      const auto& arch = ckpt.header.at("arch_spec");
      if (arch.value("backbone", std::string{}) != to_string(spec.backbone)) {
        throw ConfigError("checkpoint " + spec.checkpoint->string() + " holds backbone " +
                          arch.value("backbone", std::string{"<none>"}) + ", expected " + to_string(spec.backbone));
      }
      load_state(*model, ckpt);
      break;
    }
  }
  model->freeze_prefix(spec.frozen_prefix_depth);
  return model;
}

Model build_from_architecture(const json& arch) {
  const auto kind = arch.at("kind").get<std::string>();
  Model model;
  if (kind == "student") {
    model = build_student(StudentArchSpec::from_json(arch.at("spec")));
  } else if (kind == "teacher") {
    model = make_teacher(parse_backbone(arch.at("backbone").get<std::string>()), arch.at("num_classes").get<int64_t>(),
                         arch.value("input_size", int64_t{224}));
  } else {
    throw ConfigError("unknown architecture kind '" + kind + "'");
  }
  model->freeze_prefix(arch.value("frozen_prefix_depth", int64_t{0}));
  return model;
}

FeatureTap make_tap(const Classifier& model, TapPoint point) {
  return {point, point == TapPoint::Penultimate ? model.feature_dim() : model.num_classes()};
}

torch::Tensor tap_features(Classifier& model, const FeatureTap& tap, const torch::Tensor& batch) {
  if (batch.dim() != 4 || batch.size(1) != 3 || batch.size(2) != model.input_size() ||
      batch.size(3) != model.input_size()) {
    throw InputError("tap_features: expected batch B x 3 x " + std::to_string(model.input_size()) + " x " +
                     std::to_string(model.input_size()) + ", got " + c10::str(batch.sizes()));
  }
  const auto expected = make_tap(model, tap.point).dimension;
  if (tap.dimension != expected) {
    throw ConfigError("tap dimension " + std::to_string(tap.dimension) + " does not match model width " +
                      std::to_string(expected));
  }
  auto result = model.run(batch);
  return tap.point == TapPoint::Penultimate ? result.features : result.logits;
}

ModelComplexityReport count_parameters(Classifier& model) {
  ModelComplexityReport report;
  for (const auto& p : model.parameters()) {
    report.total_parameters += p.numel();
    if (p.requires_grad()) report.trainable_parameters += p.numel();
  }
  report.serialized_size_bytes = static_cast<int64_t>(serialize_model(model).size());
  return report;
}

void freeze_prefix(Classifier& model, int64_t depth) { model.freeze_prefix(depth); }

}  // namespace distillkit

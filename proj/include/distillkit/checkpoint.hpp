#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "distillkit/model_zoo.hpp"

namespace distillkit {

// On-disk layout (little endian):
//   "DKCKPT\0\0"            8 bytes magic
//   u32 format version
//   u64 header length N
//   N bytes JSON header      {arch_spec, num_classes, created_at, framework_version,
//                             tensors: [{name, dtype, shape, offset, nbytes}], ...}
//   raw tensor bytes, in header order
//
// Only weights and batch-norm buffers are stored, never optimizer state.
inline constexpr uint32_t kCheckpointVersion = 1;

struct NamedTensor {
  std::string name;
  torch::Tensor tensor;
};

struct Checkpoint {
  json header;
  std::map<std::string, torch::Tensor> tensors;
};

std::string framework_version();

// Parameters then buffers, recursively, in registration order.
std::vector<NamedTensor> state_of(const torch::nn::Module& module, const std::string& prefix = {});

std::string serialize_checkpoint(const std::vector<NamedTensor>& tensors, json header);
Checkpoint deserialize_checkpoint(const std::string& bytes);

// `extra` keys are merged into the header (e.g. "fusion_params").
void save_model(Classifier& model, const std::filesystem::path& path, const json& extra = json::object(),
                const std::vector<NamedTensor>& extra_tensors = {});
std::string serialize_model(Classifier& model);

// Throws ResourceError when the file does not exist.
Checkpoint read_checkpoint(const std::filesystem::path& path);

// Copies matching tensors into `module`. Tensors listed in `skip_prefixes` are
// ignored; any other missing or misshapen tensor raises ConfigError.
void load_state(torch::nn::Module& module, const Checkpoint& ckpt, const std::string& prefix = {},
                const std::vector<std::string>& skip_prefixes = {});

Model load_model(const std::filesystem::path& path);

}  // namespace distillkit

#include "distillkit/checkpoint.hpp"

#include <chrono>
#include <cstring>
#include <ctime>
#include <fstream>
#include <sstream>

#include <torch/version.h>

#include "distillkit/errors.hpp"

namespace distillkit {
namespace {

constexpr char kMagic[8] = {'D', 'K', 'C', 'K', 'P', 'T', '\0', '\0'};

std::string dtype_name(torch::Dtype dt) {
  switch (dt) {
    case torch::kFloat32: return "float32";
    case torch::kFloat64: return "float64";
    case torch::kInt64: return "int64";
    default: throw ConfigError("checkpoint: unsupported dtype " + std::string(c10::toString(dt)));
  }
}

torch::Dtype dtype_from(const std::string& s) {
  if (s == "float32") return torch::kFloat32;
  if (s == "float64") return torch::kFloat64;
  if (s == "int64") return torch::kInt64;
  throw InputError("checkpoint: unknown dtype '" + s + "'");
}

std::string utc_now() {
  auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

template <typename T>
T get(const std::string& in, size_t& pos) {
  if (pos + sizeof(T) > in.size()) throw InputError("checkpoint: truncated file");
  T v;
  std::memcpy(&v, in.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}

}  // namespace

std::string framework_version() {
  return std::string("distillkit 0.1.0; libtorch ") + TORCH_VERSION;
}

std::vector<NamedTensor> state_of(const torch::nn::Module& module, const std::string& prefix) {
  std::vector<NamedTensor> out;
  for (const auto& item : module.named_parameters(/*recurse=*/true)) {
    out.push_back({prefix + item.key(), item.value()});
  }
  for (const auto& item : module.named_buffers(/*recurse=*/true)) {
    out.push_back({prefix + item.key(), item.value()});
  }
  return out;
}

std::string serialize_checkpoint(const std::vector<NamedTensor>& tensors, json header) {
  json entries = json::array();
  std::string payload;
  for (const auto& nt : tensors) {
    auto t = nt.tensor.detach().to(torch::kCPU).contiguous();
    const auto nbytes = static_cast<size_t>(t.numel()) * t.element_size();
    entries.push_back({{"name", nt.name},
                       {"dtype", dtype_name(t.scalar_type())},
                       {"shape", t.sizes().vec()},
                       {"offset", payload.size()},
                       {"nbytes", nbytes}});
    payload.append(static_cast<const char*>(t.data_ptr()), nbytes);
  }
  header["tensors"] = std::move(entries);
  if (!header.contains("created_at")) header["created_at"] = utc_now();
  if (!header.contains("framework_version")) header["framework_version"] = framework_version();
  const std::string text = header.dump();

  std::string out(kMagic, sizeof kMagic);
  put<uint32_t>(out, kCheckpointVersion);
  put<uint64_t>(out, text.size());
  out += text;
  out += payload;
  return out;
}

Checkpoint deserialize_checkpoint(const std::string& bytes) {
  if (bytes.size() < sizeof kMagic || std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0) {
    throw InputError("checkpoint: bad magic");
  }
  size_t pos = sizeof kMagic;
  const auto version = get<uint32_t>(bytes, pos);
  if (version != kCheckpointVersion) {
    throw InputError("checkpoint: unsupported format version " + std::to_string(version));
  }
  const auto hlen = get<uint64_t>(bytes, pos);
  if (pos + hlen > bytes.size()) throw InputError("checkpoint: truncated header");
  Checkpoint ckpt;
  ckpt.header = json::parse(bytes.substr(pos, hlen));
  pos += hlen;
  const size_t base = pos;
  for (const auto& e : ckpt.header.at("tensors")) {
    const auto shape = e.at("shape").get<std::vector<int64_t>>();
    const auto offset = e.at("offset").get<size_t>();
    const auto nbytes = e.at("nbytes").get<size_t>();
    if (base + offset + nbytes > bytes.size()) throw InputError("checkpoint: truncated tensor data");
    auto t = torch::empty(shape, torch::TensorOptions().dtype(dtype_from(e.at("dtype"))));
    if (static_cast<size_t>(t.numel()) * t.element_size() != nbytes) {
      throw InputError("checkpoint: size mismatch for " + e.at("name").get<std::string>());
    }
    std::memcpy(t.data_ptr(), bytes.data() + base + offset, nbytes);
    ckpt.tensors.emplace(e.at("name").get<std::string>(), std::move(t));
  }
  return ckpt;
}

namespace {

json model_header(Classifier& model, const json& extra) {
  json header = extra.is_object() ? extra : json::object();
  header["arch_spec"] = model.architecture();
  header["num_classes"] = model.num_classes();
  return header;
}

}  // namespace

std::string serialize_model(Classifier& model) {
  return serialize_checkpoint(state_of(model), model_header(model, json::object()));
}

void save_model(Classifier& model, const std::filesystem::path& path, const json& extra,
                const std::vector<NamedTensor>& extra_tensors) {
  auto tensors = state_of(model);
  tensors.insert(tensors.end(), extra_tensors.begin(), extra_tensors.end());
  const auto bytes = serialize_checkpoint(tensors, model_header(model, extra));
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write on checkpoint " + path.string());
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  if (!std::filesystem::is_regular_file(path)) {
    throw ResourceError("checkpoint not found: " + path.string());
  }
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ResourceError("cannot open checkpoint: " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return deserialize_checkpoint(ss.str());
}

void load_state(torch::nn::Module& module, const Checkpoint& ckpt, const std::string& prefix,
                const std::vector<std::string>& skip_prefixes) {
  torch::NoGradGuard no_grad;
  for (auto& nt : state_of(module)) {
    bool skip = false;
    for (const auto& p : skip_prefixes) {
      if (nt.name.rfind(p, 0) == 0) skip = true;
    }
    if (skip) continue;
    auto it = ckpt.tensors.find(prefix + nt.name);
    if (it == ckpt.tensors.end()) {
      throw ConfigError("checkpoint is missing tensor '" + prefix + nt.name + "'");
    }
    if (!it->second.sizes().equals(nt.tensor.sizes())) {
      throw ConfigError("checkpoint tensor '" + prefix + nt.name + "' has mismatched shape");
    }
    nt.tensor.copy_(it->second);
  }
}

Model load_model(const std::filesystem::path& path) {
  auto ckpt = read_checkpoint(path);
  auto model = build_from_architecture(ckpt.header.at("arch_spec"));
  load_state(*model, ckpt);
  model->eval();
  return model;
}

}  // namespace distillkit

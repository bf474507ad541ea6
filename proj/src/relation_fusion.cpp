#include "distillkit/relation_fusion.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "distillkit/errors.hpp"

namespace distillkit {

namespace nn = torch::nn;

void AttentionConfig::validate() const {
  if (d_model < 1 || num_heads < 1 || ffn_dim < 1) throw ConfigError("attention: all dims must be >= 1");
  if (d_model % num_heads != 0) {
    throw ConfigError("attention: d_model " + std::to_string(d_model) + " is not divisible by num_heads " +
                      std::to_string(num_heads));
  }
  if (pool != "mean") throw ConfigError("attention: unsupported pool '" + pool + "'");
}

json AttentionConfig::to_json() const {
  return {{"d_model", d_model},
          {"num_heads", num_heads},
          {"ffn_dim", ffn_dim},
          {"use_teacher_embeddings", use_teacher_embeddings},
          {"pool", pool}};
}

AttentionConfig AttentionConfig::from_json(const json& j) {
  AttentionConfig c;
  c.d_model = j.value("d_model", c.d_model);
  c.num_heads = j.value("num_heads", c.num_heads);
  c.ffn_dim = j.value("ffn_dim", c.ffn_dim);
  c.use_teacher_embeddings = j.value("use_teacher_embeddings", c.use_teacher_embeddings);
  c.pool = j.value("pool", c.pool);
  return c;
}

FusionBlockImpl::FusionBlockImpl(std::vector<int64_t> teacher_widths, AttentionConfig config)
    : config_(std::move(config)), widths_(std::move(teacher_widths)) {
  config_.validate();
  if (widths_.size() < 2) {
    throw ConfigError("relation fusion needs at least 2 teachers, got " + std::to_string(widths_.size()));
  }
  const auto d = config_.d_model;
  for (size_t i = 0; i < widths_.size(); ++i) {
    if (widths_[i] < 1) throw ConfigError("relation fusion: teacher width must be positive");
    input_proj_.push_back(register_module("input_proj" + std::to_string(i), nn::Linear(widths_[i], d)));
  }
  if (config_.use_teacher_embeddings) {
    slot_embedding_ = register_parameter("slot_embedding", torch::randn({num_teachers(), d}) * 0.02);
  }
  w_query_ = register_module("w_query", nn::Linear(d, d));
  w_key_ = register_module("w_key", nn::Linear(d, d));
  w_value_ = register_module("w_value", nn::Linear(d, d));
  w_out_ = register_module("w_out", nn::Linear(d, d));
  norm_attn_ = register_module("norm_attn", nn::LayerNorm(nn::LayerNormOptions({d})));
  ffn_in_ = register_module("ffn_in", nn::Linear(d, config_.ffn_dim));
  ffn_out_ = register_module("ffn_out", nn::Linear(config_.ffn_dim, d));
  norm_ffn_ = register_module("norm_ffn", nn::LayerNorm(nn::LayerNormOptions({d})));
}

FusionTrace FusionBlockImpl::encode(const torch::Tensor& tokens) {
  if (tokens.dim() != 3 || tokens.size(2) != config_.d_model) {
    throw InputError("fusion encoder expects B x T x " + std::to_string(config_.d_model) + " tokens");
  }
  const auto batch = tokens.size(0);
  const auto seq = tokens.size(1);
  const auto heads = config_.num_heads;
  const auto head_dim = config_.d_model / heads;

  auto split_heads = [&](const torch::Tensor& t) {
    return t.view({batch, seq, heads, head_dim}).transpose(1, 2);  // B x H x T x dh
  };
  const auto q = split_heads(w_query_->forward(tokens));
  const auto k = split_heads(w_key_->forward(tokens));
  const auto v = split_heads(w_value_->forward(tokens));

  const auto scores = torch::matmul(q, k.transpose(-2, -1)) / std::sqrt(static_cast<double>(head_dim));
  const auto attention = torch::softmax(scores, -1);
  auto context = torch::matmul(attention, v).transpose(1, 2).contiguous().view({batch, seq, config_.d_model});

  const auto h = norm_attn_->forward(tokens + w_out_->forward(context));
  const auto ffn = ffn_out_->forward(torch::relu(ffn_in_->forward(h)));
  const auto encoded = norm_ffn_->forward(h + ffn);

  FusionTrace out;
  out.tokens = tokens;
  out.attention = attention;
  out.encoded = encoded;
  out.fused = encoded.mean(1);
  return out;
}

FusionTrace FusionBlockImpl::trace(const std::vector<torch::Tensor>& features, const std::vector<int64_t>& order) {
  if (static_cast<int64_t>(features.size()) != num_teachers()) {
    throw ConfigError("relation fusion built for " + std::to_string(num_teachers()) + " teachers, got " +
                      std::to_string(features.size()));
  }
  std::vector<int64_t> slots = order;
  if (slots.empty()) {
    slots.resize(features.size());
    std::iota(slots.begin(), slots.end(), 0);
  }
  auto sorted = slots;
  std::sort(sorted.begin(), sorted.end());
  for (size_t i = 0; i < sorted.size(); ++i) {
    if (sorted.size() != features.size() || sorted[i] != static_cast<int64_t>(i)) {
      throw ConfigError("relation fusion: order is not a permutation of the teachers");
    }
  }
  const auto batch = features.front().size(0);
  std::vector<torch::Tensor> tokens;
  for (size_t k = 0; k < slots.size(); ++k) {
    const auto i = slots[k];
    const auto& f = features[i];
    if (f.dim() != 2 || f.size(1) != widths_[i]) {
      throw InputError("teacher " + std::to_string(i) + " features must be B x " + std::to_string(widths_[i]) +
                       ", got " + c10::str(f.sizes()));
    }
    if (f.size(0) != batch) throw InputError("relation fusion: teacher batch sizes differ");
    auto token = input_proj_[i]->forward(f.detach());
    if (config_.use_teacher_embeddings) token = token + slot_embedding_[static_cast<int64_t>(k)];
    tokens.push_back(token);
  }
  return encode(torch::stack(tokens, 1));
}

torch::Tensor FusionBlockImpl::forward(const std::vector<torch::Tensor>& features) { return trace(features).fused; }

torch::Tensor fuse_teacher_features(const std::vector<torch::Tensor>& features, FusionBlock& fusion) {
  if (features.size() < 2) {
    throw ConfigError("relation fusion needs at least 2 teachers, got " + std::to_string(features.size()));
  }
  return fusion->forward(features);
}

torch::Tensor relation_distillation_loss(const torch::Tensor& fused, const torch::Tensor& student_features,
                                         Projection& teacher_proj, Projection& student_proj) {
  if (teacher_proj->out_dim() != student_proj->out_dim()) {
    throw ConfigError("projection output widths differ: teacher " + std::to_string(teacher_proj->out_dim()) +
                      ", student " + std::to_string(student_proj->out_dim()));
  }
  if (fused.size(-1) != teacher_proj->in_dim() || student_features.size(-1) != student_proj->in_dim()) {
    throw ConfigError("relation loss: projection input widths do not match the fused/student features");
  }
  if (fused.size(0) != student_features.size(0)) throw InputError("relation loss: batch sizes differ");
  const auto projected_t = teacher_proj->forward(fused);
  const auto projected_s = student_proj->forward(student_features);
  return (projected_t - projected_s).pow(2).mean();
}

}  // namespace distillkit

#pragma once

#include <string>
#include <vector>

#include <torch/torch.h>

#include "distillkit/kd_losses.hpp"
#include "json.hpp"

namespace distillkit {

using json = nlohmann::json;

struct AttentionConfig {
  int64_t d_model = 128;
  int64_t num_heads = 4;
  int64_t ffn_dim = 256;
  // Learnable embedding per sequence slot, added to each teacher token.
  bool use_teacher_embeddings = true;
  std::string pool = "mean";

  // Throws ConfigError unless d_model % num_heads == 0 and all dims >= 1.
  void validate() const;
  json to_json() const;
  static AttentionConfig from_json(const json& j);
};

struct FusionTrace {
  torch::Tensor tokens;     // B x T x d_model, encoder input
  torch::Tensor attention;  // B x heads x T x T, softmax rows
  torch::Tensor encoded;    // B x T x d_model, encoder output
  torch::Tensor fused;      // B x d_model, mean over the sequence
};

// Fuses the penultimate vectors of several teachers into one vector with a
// single transformer encoder block:
//
//   token_i = W_i f_i + b_i (+ slot embedding)
//   h   = LayerNorm(X + MultiHeadSelfAttention(X))
//   out = LayerNorm(h + FFN(h)),   FFN = Linear -> ReLU -> Linear
//   f*  = mean over the teacher axis of out
//
// Teacher features enter detached: only the block's own parameters learn.
class FusionBlockImpl : public torch::nn::Module {
 public:
  FusionBlockImpl(std::vector<int64_t> teacher_widths, AttentionConfig config);

  // features[i] is B x teacher_widths[i].
  torch::Tensor forward(const std::vector<torch::Tensor>& features);

  // `order` places teacher order[k] at sequence slot k. Slot embeddings follow
  // the slot, so reordering is invisible only when embeddings are disabled.
  FusionTrace trace(const std::vector<torch::Tensor>& features, const std::vector<int64_t>& order = {});

  // Runs the encoder block on a prepared B x T x d_model token sequence.
  FusionTrace encode(const torch::Tensor& tokens);

  const AttentionConfig& config() const { return config_; }
  const std::vector<int64_t>& teacher_widths() const { return widths_; }
  int64_t num_teachers() const { return static_cast<int64_t>(widths_.size()); }

  // Projection that maps teacher i onto the token width.
  torch::nn::Linear input_projection(int64_t i) const { return input_proj_.at(i); }

 private:
  AttentionConfig config_;
  std::vector<int64_t> widths_;
  std::vector<torch::nn::Linear> input_proj_;
  torch::Tensor slot_embedding_;
  torch::nn::Linear w_query_{nullptr}, w_key_{nullptr}, w_value_{nullptr}, w_out_{nullptr};
  torch::nn::LayerNorm norm_attn_{nullptr}, norm_ffn_{nullptr};
  torch::nn::Linear ffn_in_{nullptr}, ffn_out_{nullptr};
};
TORCH_MODULE(FusionBlock);

// Throws ConfigError for fewer than 2 teachers or a teacher-count mismatch
// and InputError when batch sizes differ.
torch::Tensor fuse_teacher_features(const std::vector<torch::Tensor>& features, FusionBlock& fusion);

// MSE between Phi_t(f*) and Phi_s(f_s). Unlike feature_distillation_loss the
// fused vector is NOT detached, so the fusion block learns through this loss.
torch::Tensor relation_distillation_loss(const torch::Tensor& fused, const torch::Tensor& student_features,
                                         Projection& teacher_proj, Projection& student_proj);

}  // namespace distillkit

#pragma once

#include <optional>

#include <torch/torch.h>

#include "json.hpp"

namespace distillkit {

using json = nlohmann::json;

// Softmax over the last dimension of z / T with max subtraction.
// Accepts a single K-vector or a B x K batch. Throws DomainError for T <= 0.
torch::Tensor softmax_with_temperature(const torch::Tensor& logits, double temperature);

// MSE between the tempered soft targets of teacher and student logits,
// mean over batch then classes. Teacher logits are detached.
// With `on_logits` the raw logits are compared instead of soft targets.
torch::Tensor response_distillation_loss(const torch::Tensor& teacher_logits, const torch::Tensor& student_logits,
                                         double temperature = 1.0, bool on_logits = false);

// Learnable linear map with bias aligning feature widths. Identity when
// constructed with `identity = true` (requires in_dim == out_dim).
class ProjectionImpl : public torch::nn::Module {
 public:
  ProjectionImpl(int64_t in_dim, int64_t out_dim, bool identity = false);

  torch::Tensor forward(const torch::Tensor& x);

  int64_t in_dim() const { return in_dim_; }
  int64_t out_dim() const { return out_dim_; }
  bool is_identity() const { return identity_; }

 private:
  int64_t in_dim_;
  int64_t out_dim_;
  bool identity_;
  torch::nn::Linear linear_{nullptr};
};
TORCH_MODULE(Projection);

// MSE between Phi_t(f_t) and Phi_s(f_s), mean over batch and dimensions.
// Teacher features are detached; the teacher projection still learns.
torch::Tensor feature_distillation_loss(const torch::Tensor& teacher_features, const torch::Tensor& student_features,
                                        Projection& teacher_proj, Projection& student_proj);

struct LossWeights {
  double resp = 1.0;
  double feat = 1.0;
  double rel = 1.0;

  json to_json() const { return {{"resp", resp}, {"feat", feat}, {"rel", rel}}; }
};

// Scalar loss values of one step. Absent terms are not part of the objective.
struct LossBreakdown {
  double ce = 0.0;
  std::optional<double> resp;
  std::optional<double> feat;
  std::optional<double> rel;
  LossWeights weights;
  double total = 0.0;

  // Keys: "ce", "resp", "feat", "rel", "total"; absent terms are omitted.
  json to_json() const;
  static LossBreakdown from_json(const json& j, const LossWeights& weights);
};

struct LossTerms {
  torch::Tensor ce;
  torch::Tensor resp;  // undefined when absent
  torch::Tensor feat;
  torch::Tensor rel;
};

struct TotalLoss {
  torch::Tensor value;  // differentiable objective
  LossBreakdown breakdown;
};

// total = ce + w.resp * resp + w.feat * feat + w.rel * rel. Throws ConfigError
// on a negative weight.
TotalLoss total_loss(const LossTerms& terms, const LossWeights& weights);

}  // namespace distillkit

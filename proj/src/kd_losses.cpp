#include "distillkit/kd_losses.hpp"

#include <string>

#include "distillkit/errors.hpp"

namespace distillkit {

torch::Tensor softmax_with_temperature(const torch::Tensor& logits, double temperature) {
  if (!(temperature > 0.0)) {
    throw DomainError("temperature must be positive, got " + std::to_string(temperature));
  }
  if (logits.dim() < 1 || logits.size(-1) < 2) throw InputError("softmax: need at least 2 classes");
  if (!torch::isfinite(logits).all().item<bool>()) throw InputError("softmax: logits must be finite");
  auto scaled = logits / temperature;
  auto shifted = scaled - std::get<0>(scaled.max(-1, /*keepdim=*/true)).detach();
  auto e = shifted.exp();
  return e / e.sum(-1, /*keepdim=*/true);
}

torch::Tensor response_distillation_loss(const torch::Tensor& teacher_logits, const torch::Tensor& student_logits,
                                         double temperature, bool on_logits) {
  if (!teacher_logits.sizes().equals(student_logits.sizes())) {
    throw InputError("response loss: teacher logits " + c10::str(teacher_logits.sizes()) +
                     " and student logits " + c10::str(student_logits.sizes()) + " differ");
  }
  const auto teacher = teacher_logits.detach();
  if (on_logits) return (teacher - student_logits).pow(2).mean();
  const auto soft_t = softmax_with_temperature(teacher, temperature);
  const auto soft_s = softmax_with_temperature(student_logits, temperature);
  return (soft_t - soft_s).pow(2).mean();
}

ProjectionImpl::ProjectionImpl(int64_t in_dim, int64_t out_dim, bool identity)
    : in_dim_(in_dim), out_dim_(out_dim), identity_(identity) {
  if (in_dim < 1 || out_dim < 1) throw ConfigError("projection dims must be positive");
  if (identity && in_dim != out_dim) {
    throw ConfigError("identity projection needs in_dim == out_dim (" + std::to_string(in_dim) + " vs " +
                      std::to_string(out_dim) + ")");
  }
  if (!identity) linear_ = register_module("linear", torch::nn::Linear(in_dim, out_dim));
}

torch::Tensor ProjectionImpl::forward(const torch::Tensor& x) {
  if (x.size(-1) != in_dim_) {
    throw InputError("projection expects width " + std::to_string(in_dim_) + ", got " + std::to_string(x.size(-1)));
  }
  return identity_ ? x : linear_->forward(x);
}

torch::Tensor feature_distillation_loss(const torch::Tensor& teacher_features, const torch::Tensor& student_features,
                                        Projection& teacher_proj, Projection& student_proj) {
  if (teacher_proj->out_dim() != student_proj->out_dim()) {
    throw ConfigError("projection output widths differ: teacher " + std::to_string(teacher_proj->out_dim()) +
                      ", student " + std::to_string(student_proj->out_dim()));
  }
  if (teacher_features.dim() == 2 && student_features.dim() == 2 &&
      teacher_features.size(0) != student_features.size(0)) {
    throw InputError("feature loss: batch sizes differ");
  }
  const auto projected_t = teacher_proj->forward(teacher_features.detach());
  const auto projected_s = student_proj->forward(student_features);
  return (projected_t - projected_s).pow(2).mean();
}

json LossBreakdown::to_json() const {
  json j = {{"ce", ce}};
  if (resp) j["resp"] = *resp;
  if (feat) j["feat"] = *feat;
  if (rel) j["rel"] = *rel;
  j["total"] = total;
  return j;
}

LossBreakdown LossBreakdown::from_json(const json& j, const LossWeights& weights) {
  LossBreakdown b;
  b.ce = j.at("ce").get<double>();
  if (j.contains("resp")) b.resp = j["resp"].get<double>();
  if (j.contains("feat")) b.feat = j["feat"].get<double>();
  if (j.contains("rel")) b.rel = j["rel"].get<double>();
  b.total = j.at("total").get<double>();
  b.weights = weights;
  return b;
}

TotalLoss total_loss(const LossTerms& terms, const LossWeights& weights) {
  if (weights.resp < 0 || weights.feat < 0 || weights.rel < 0) {
    throw ConfigError("loss weights must be non-negative");
  }
  if (!terms.ce.defined()) throw InputError("total_loss: cross-entropy term is required");
  TotalLoss out;
  out.breakdown.weights = weights;
  out.value = terms.ce;
  out.breakdown.ce = terms.ce.item<double>();
  double total = out.breakdown.ce;
  auto add = [&](const torch::Tensor& term, double w, std::optional<double>& slot) {
    if (!term.defined()) return;
    out.value = out.value + w * term;
    slot = term.item<double>();
    total += w * *slot;
  };
  add(terms.resp, weights.resp, out.breakdown.resp);
  add(terms.feat, weights.feat, out.breakdown.feat);
  add(terms.rel, weights.rel, out.breakdown.rel);
  out.breakdown.total = total;
  return out;
}

}  // namespace distillkit

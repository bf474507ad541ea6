#pragma once

// Independent reference computations used by the unit and acceptance tests.
// Nothing here calls into the library under test.

#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include <torch/torch.h>

namespace oracle {

inline int64_t conv(int64_t in, int64_t out, int64_t k, bool bias = true) { return in * out * k * k + (bias ? out : 0); }
inline int64_t batch_norm(int64_t c) { return 2 * c; }
inline int64_t linear(int64_t in, int64_t out) { return in * out + out; }

// Student: 3x3 conv blocks 3->32->56->64 with batch-norm, FC 64->K.
inline int64_t student_params(int64_t k) {
  return conv(3, 32, 3) + batch_norm(32) + conv(32, 56, 3) + batch_norm(56) + conv(56, 64, 3) + batch_norm(64) +
         linear(64, k);
}

// Toy teacher: 3x3 conv blocks 3->32->64->96->128->128, FC 128->K.
inline std::vector<int64_t> toy_group_params() {
  const int64_t w[] = {3, 32, 64, 96, 128, 128};
  std::vector<int64_t> out;
  for (int i = 0; i < 5; ++i) out.push_back(conv(w[i], w[i + 1], 3) + batch_norm(w[i + 1]));
  return out;
}
inline int64_t toy_params(int64_t k) {
  int64_t total = linear(128, k);
  for (auto g : toy_group_params()) total += g;
  return total;
}

// Bottleneck ResNet, grouped as stem_conv, stem_bn, stem_pool, layer1..4.
inline std::vector<int64_t> resnet_group_params(const std::vector<int64_t>& blocks) {
  std::vector<int64_t> groups = {conv(3, 64, 7, false), batch_norm(64), 0};
  int64_t in = 64;
  const int64_t widths[] = {64, 128, 256, 512};
  for (size_t s = 0; s < 4; ++s) {
    const int64_t w = widths[s];
    int64_t stage = 0;
    for (int64_t b = 0; b < blocks[s]; ++b) {
      stage += conv(in, w, 1, false) + batch_norm(w);
      stage += conv(w, w, 3, false) + batch_norm(w);
      stage += conv(w, 4 * w, 1, false) + batch_norm(4 * w);
      if (b == 0) stage += conv(in, 4 * w, 1, false) + batch_norm(4 * w);
      in = 4 * w;
    }
    groups.push_back(stage);
  }
  return groups;
}
inline int64_t resnet_params(const std::vector<int64_t>& blocks, int64_t k) {
  int64_t total = linear(2048, k);
  for (auto g : resnet_group_params(blocks)) total += g;
  return total;
}

// Per-class one-vs-rest counts by brute force; 0/0 -> 0.
struct Counts {
  std::vector<int64_t> tp, fp, fn, support;
  std::vector<std::vector<int64_t>> matrix;
};

inline Counts count(const std::vector<int64_t>& preds, const std::vector<int64_t>& labels, int64_t k) {
  Counts c;
  c.tp.assign(k, 0);
  c.fp.assign(k, 0);
  c.fn.assign(k, 0);
  c.support.assign(k, 0);
  c.matrix.assign(k, std::vector<int64_t>(k, 0));
  for (int64_t cls = 0; cls < k; ++cls) {
    for (size_t i = 0; i < preds.size(); ++i) {
      const bool p = preds[i] == cls, t = labels[i] == cls;
      if (p && t) ++c.tp[cls];
      if (p && !t) ++c.fp[cls];
      if (!p && t) ++c.fn[cls];
      if (t) ++c.support[cls];
    }
    for (int64_t col = 0; col < k; ++col) {
      for (size_t i = 0; i < preds.size(); ++i) {
        if (labels[i] == cls && preds[i] == col) ++c.matrix[cls][col];
      }
    }
  }
  return c;
}

inline double ratio(double a, double b) { return b == 0.0 ? 0.0 : a / b; }

struct Averages {
  double accuracy = 0, macro_p = 0, macro_r = 0, macro_f1 = 0, weighted_p = 0, weighted_r = 0, weighted_f1 = 0;
  std::vector<double> precision, recall, f1;
};

inline Averages averages(const std::vector<int64_t>& preds, const std::vector<int64_t>& labels, int64_t k) {
  const auto c = count(preds, labels, k);
  Averages a;
  const double n = static_cast<double>(labels.size());
  int64_t correct = 0;
  for (size_t i = 0; i < preds.size(); ++i) correct += preds[i] == labels[i];
  a.accuracy = correct / n;
  for (int64_t cls = 0; cls < k; ++cls) {
    const double p = ratio(c.tp[cls], c.tp[cls] + c.fp[cls]);
    const double r = ratio(c.tp[cls], c.tp[cls] + c.fn[cls]);
    const double f = ratio(2 * p * r, p + r);
    a.precision.push_back(p);
    a.recall.push_back(r);
    a.f1.push_back(f);
    a.macro_p += p / k;
    a.macro_r += r / k;
    a.macro_f1 += f / k;
    const double w = c.support[cls] / n;
    a.weighted_p += w * p;
    a.weighted_r += w * r;
    a.weighted_f1 += w * f;
  }
  return a;
}

// Central finite differences of a scalar function with respect to every
// element of `x` (double precision, modified in place and restored).
inline torch::Tensor numeric_gradient(const std::function<double()>& f, torch::Tensor x, double h = 1e-6) {
  torch::NoGradGuard no_grad;
  auto flat = x.view({-1});
  auto grad = torch::zeros_like(flat);
  for (int64_t i = 0; i < flat.numel(); ++i) {
    const double orig = flat[i].item<double>();
    flat[i] = orig + h;
    const double up = f();
    flat[i] = orig - h;
    const double down = f();
    flat[i] = orig;
    grad[i] = (up - down) / (2 * h);
  }
  return grad.view_as(x);
}

// max |a - b| / max(|a|, |b|, floor)
inline double relative_error(const torch::Tensor& a, const torch::Tensor& b, double floor = 1e-8) {
  const double diff = (a - b).abs().max().item<double>();
  const double scale = std::max({a.abs().max().item<double>(), b.abs().max().item<double>(), floor});
  return diff / scale;
}

}  // namespace oracle

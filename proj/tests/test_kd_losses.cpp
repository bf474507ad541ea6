#include "check.hpp"

#include <limits>

#include "distillkit/errors.hpp"
#include "distillkit/kd_losses.hpp"
#include "oracles.hpp"

using namespace distillkit;

namespace {

torch::Tensor dbl(torch::IntArrayRef shape) { return torch::randn(shape, torch::kFloat64); }

double reference_softmax(const std::vector<double>& z, double t, size_t i) {
  double denom = 0;
  for (double v : z) denom += std::exp(v / t);
  return std::exp(z[i] / t) / denom;
}

}  // namespace

TEST_SUITE("kd_losses") {

TEST_CASE("tempered softmax") {
  const std::vector<double> z = {1.0, -2.0, 0.5, 3.0};
  const auto zt = torch::tensor(z, torch::kFloat64);
  for (double t : {0.5, 1.0, 4.0}) {
    const auto p = softmax_with_temperature(zt, t);
    CHECK(p.sum().item<double>() == doctest::Approx(1.0).epsilon(1e-12));
    for (size_t i = 0; i < z.size(); ++i) {
      CHECK(p[i].item<double>() == doctest::Approx(reference_softmax(z, t, i)).epsilon(1e-12));
    }
  }
  // Large logits stay finite.
  const auto big = softmax_with_temperature(torch::tensor({1000.0, 999.0}, torch::kFloat64), 1.0);
  CHECK(torch::isfinite(big).all().item<bool>());
  // Higher temperature flattens the distribution.
  CHECK(softmax_with_temperature(zt, 8.0).max().item<double>() < softmax_with_temperature(zt, 1.0).max().item<double>());
  CHECK(softmax_with_temperature(dbl({5, 7}), 2.0).sum(1).allclose(torch::ones({5}, torch::kFloat64)));
}

TEST_CASE("tempered softmax errors") {
  const auto z = torch::tensor({1.0, 2.0});
  CHECK_THROWS_AS(softmax_with_temperature(z, 0.0), DomainError);
  CHECK_THROWS_AS(softmax_with_temperature(z, -1.0), DomainError);
  CHECK_THROWS_AS(softmax_with_temperature(torch::tensor({1.0}), 1.0), InputError);
  CHECK_THROWS_AS(softmax_with_temperature(torch::tensor({1.0, std::numeric_limits<double>::quiet_NaN()}), 1.0),
                  InputError);
}

TEST_CASE("response loss: identity, shape errors, teacher isolation") {
  const auto t = dbl({3, 5});
  CHECK(response_distillation_loss(t, t.clone()).item<double>() == 0.0);
  CHECK_THROWS_AS(response_distillation_loss(dbl({3, 5}), dbl({3, 4})), InputError);
  CHECK_THROWS_AS(response_distillation_loss(t, t, 0.0), DomainError);

  auto teacher = dbl({3, 5}).requires_grad_();
  auto student = dbl({3, 5}).requires_grad_();
  response_distillation_loss(teacher, student, 2.0).backward();
  CHECK_FALSE(teacher.grad().defined());
  CHECK(student.grad().abs().sum().item<double>() > 0);
}

TEST_CASE("response loss matches the reference formula") {
  const auto t = dbl({4, 6}), s = dbl({4, 6});
  const double temp = 3.0;
  double expected = 0;
  for (int b = 0; b < 4; ++b) {
    std::vector<double> tv(6), sv(6);
    for (int k = 0; k < 6; ++k) tv[k] = t[b][k].item<double>(), sv[k] = s[b][k].item<double>();
    for (size_t k = 0; k < 6; ++k) {
      const double d = reference_softmax(tv, temp, k) - reference_softmax(sv, temp, k);
      expected += d * d;
    }
  }
  expected /= 24.0;
  CHECK(response_distillation_loss(t, s, temp).item<double>() == doctest::Approx(expected).epsilon(1e-12));
  CHECK(response_distillation_loss(t, s, 1.0, true).item<double>() ==
        doctest::Approx((t - s).pow(2).mean().item<double>()).epsilon(1e-12));
}

TEST_CASE("response loss gradient check") {
  for (int64_t dim : {4, 16, 64}) {
    CAPTURE(dim);
    const auto t = dbl({3, dim});
    auto s = dbl({3, dim}).requires_grad_();
    response_distillation_loss(t, s, 2.0).backward();
    const auto analytic = s.grad().clone();
    auto probe = s.detach().clone();
    const auto numeric = oracle::numeric_gradient(
        [&] { return response_distillation_loss(t, probe, 2.0).item<double>(); }, probe);
    CHECK(oracle::relative_error(analytic, numeric) <= 1e-4);
  }
}

TEST_CASE("projection") {
  Projection id(8, 8, true);
  const auto x = torch::randn({2, 8});
  CHECK(torch::equal(id(x), x));
  CHECK(id->parameters().empty());
  CHECK_THROWS_AS(Projection(8, 4, true), ConfigError);
  CHECK_THROWS_AS(Projection(0, 4), ConfigError);
  Projection p(8, 4);
  CHECK(p(x).sizes() == torch::IntArrayRef({2, 4}));
  CHECK_THROWS_AS(p(torch::randn({2, 7})), InputError);
}

TEST_CASE("feature loss: identity and teacher isolation") {
  Projection id_t(16, 16, true), id_s(16, 16, true);
  const auto f = dbl({4, 16});
  CHECK(feature_distillation_loss(f, f.clone(), id_t, id_s).item<double>() == 0.0);

  Projection pt(32, 8), ps(16, 8), bad(16, 4);
  CHECK_THROWS_AS(feature_distillation_loss(dbl({4, 32}), dbl({4, 16}), pt, bad), ConfigError);

  auto teacher = torch::randn({4, 32}).requires_grad_();
  auto student = torch::randn({4, 16}).requires_grad_();
  feature_distillation_loss(teacher, student, pt, ps).backward();
  CHECK_FALSE(teacher.grad().defined());
  CHECK(student.grad().abs().sum().item<float>() > 0);
  for (auto& w : pt->parameters()) CHECK(w.grad().defined());
}

TEST_CASE("feature loss gradient check") {
  for (int64_t dim : {4, 16, 64}) {
    CAPTURE(dim);
    Projection pt(dim, 8), ps(dim, 8);
    pt->to(torch::kFloat64);
    ps->to(torch::kFloat64);
    const auto t = dbl({3, dim});
    auto s = dbl({3, dim}).requires_grad_();
    feature_distillation_loss(t, s, pt, ps).backward();
    auto probe = s.detach().clone();
    const auto loss = [&] { return feature_distillation_loss(t, probe, pt, ps).item<double>(); };
    CHECK(oracle::relative_error(s.grad(), oracle::numeric_gradient(loss, probe)) <= 1e-4);
    // And with respect to every projection parameter.
    for (auto* proj : {&pt, &ps}) {
      for (auto& w : (*proj)->parameters()) {
        const auto analytic = w.grad().clone();
        auto data = w.detach();
        CHECK(oracle::relative_error(analytic, oracle::numeric_gradient(loss, data)) <= 1e-4);
      }
    }
  }
}

TEST_CASE("total loss composition") {
  LossTerms terms;
  terms.ce = torch::tensor(0.7, torch::kFloat64);
  terms.resp = torch::tensor(0.2, torch::kFloat64);
  terms.feat = torch::tensor(0.1, torch::kFloat64);
  const LossWeights w{0.5, 2.0, 1.0};
  const auto total = total_loss(terms, w);
  CHECK(total.value.item<double>() == doctest::Approx(0.7 + 0.5 * 0.2 + 2.0 * 0.1).epsilon(1e-12));
  CHECK(total.breakdown.total == doctest::Approx(total.value.item<double>()).epsilon(1e-12));
  CHECK_FALSE(total.breakdown.rel.has_value());
  const auto j = total.breakdown.to_json();
  CHECK(j.contains("ce"));
  CHECK(j.contains("resp"));
  CHECK(j.contains("feat"));
  CHECK_FALSE(j.contains("rel"));
  const auto back = LossBreakdown::from_json(j, w);
  CHECK(back.total == doctest::Approx(total.breakdown.total));

  CHECK_THROWS_AS(total_loss(terms, {-0.1, 1.0, 1.0}), ConfigError);
}

TEST_CASE("vanilla breakdown has only ce and total") {
  LossTerms terms;
  terms.ce = torch::tensor(1.25);
  const auto total = total_loss(terms, {0.0, 0.0, 0.0});
  const auto j = total.breakdown.to_json();
  CHECK(j.size() == 2);
  CHECK(std::abs(j["total"].get<double>() - j["ce"].get<double>()) <= 1e-6);
}

}

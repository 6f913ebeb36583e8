#include <gtest/gtest.h>

#include <random>

#include "ldl/gradcheck.hpp"
#include "ldl/gradsuite.hpp"

using namespace ldl;

namespace {

ParameterStore<double> dense_store(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  ParameterStore<double> s;
  s.add("w", detail::random_tensor({4, 3}, rng));
  s.add("b", detail::random_tensor({3}, rng));
  return s;
}

const Tensor<double> kInput({2, 4}, {0.3, -1.2, 0.8, 2.0, -0.4, 0.1, 1.5, -0.7});
const Tensor<double> kTarget({2, 3}, {0.2, 0.3, 0.5, 0.6, 0.1, 0.3});

// x -> 2x in the forward pass with a backward that reports 4x: every gradient flowing through is doubled.
Var doubled_gradient(Graph<double>& g, Var x) {
  Tensor<double> out = g.value(x);
  for (auto& v : out.data()) v *= 2;
  return g.record("corrupt", {x}, std::move(out), [](Graph<double>& gr, std::size_t self) {
    const auto src = gr.input_id(self, 0);
    if (!gr.wants_grad(src)) return;
    auto& gx = gr.grad_at(src);
    const auto& gy = gr.grad_at(self);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += 4 * gy[i];
  });
}

}  // namespace

TEST(GradCheck, DenseWithSquaredLossPasses) {
  auto s = dense_store(1);
  GradCheckOptions opt;
  opt.tol = 1e-6;
  const auto r = grad_check(
      s,
      [](Graph<double>& g) {
        return ad::euclidean_loss(g, ad::dense(g, g.constant(kInput), g.param("w"), g.param("b")), kTarget, true);
      },
      opt);
  EXPECT_TRUE(r.passed) << r.max_rel_error;
  EXPECT_EQ(r.checked, 15u);
  EXPECT_LE(r.max_rel_error, 1e-6);
}

TEST(GradCheck, DoubledGradientFailsWithRelativeErrorNearOne) {
  auto s = dense_store(2);
  const auto r = grad_check(s, [](Graph<double>& g) {
    auto y = doubled_gradient(g, ad::dense(g, g.constant(kInput), g.param("w"), g.param("b")));
    return ad::euclidean_loss(g, y, kTarget, true);
  });
  EXPECT_FALSE(r.passed);
  EXPECT_NEAR(r.max_rel_error, 1.0, 1e-3);
}

TEST(GradCheck, NoParametersPassesTrivially) {
  ParameterStore<double> s;
  const auto r = grad_check(s, [](Graph<double>& g) { return ad::sum(g, g.constant(Tensor<double>({2}, {1, 2}))); });
  EXPECT_TRUE(r.passed);
  EXPECT_EQ(r.checked, 0u);
  EXPECT_EQ(r.max_rel_error, 0.0);
}

TEST(GradCheck, NonFiniteValueProducesNumericalReportNamingOp) {
  ParameterStore<double> s;
  s.add("x", Tensor<double>({2}, {1e300, 1.0}));
  const auto r = grad_check(s, [](Graph<double>& g) { return ad::sum(g, ad::scale(g, g.param("x"), 1e300)); });
  EXPECT_FALSE(r.passed);
  EXPECT_NE(r.numerical_failure.find("scale"), std::string::npos) << r.numerical_failure;
}

TEST(GradCheck, SamplingLimitsCheckedElements) {
  auto s = dense_store(3);
  GradCheckOptions opt;
  opt.sample_above = 5;
  const auto r = grad_check(
      s,
      [](Graph<double>& g) {
        return ad::euclidean_loss(g, ad::dense(g, g.constant(kInput), g.param("w"), g.param("b")), kTarget, true);
      },
      opt);
  EXPECT_TRUE(r.passed);
  EXPECT_EQ(r.checked, 5u + 3u);
}

TEST(GradCheck, ReportsWorstElement) {
  auto s = dense_store(4);
  const auto r = grad_check(s, [](Graph<double>& g) {
    auto y = doubled_gradient(g, ad::dense(g, g.constant(kInput), g.param("w"), g.param("b")));
    return ad::euclidean_loss(g, y, kTarget, true);
  });
  EXPECT_FALSE(r.worst_param.empty());
  EXPECT_NEAR(r.worst_analytic, 2 * r.worst_numeric, 1e-6 * std::max(1.0, std::abs(r.worst_numeric)));
}

TEST(GradSuite, SingleSeedPassesEveryCase) {
  const auto cases = run_gradient_suite(1);
  EXPECT_GE(cases.size(), 20u);
  for (const auto& c : cases) EXPECT_TRUE(c.passed()) << c.name << " rel " << c.report.max_rel_error;
}

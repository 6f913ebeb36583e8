#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "ldl/autodiff.hpp"
#include "ldl/distribution.hpp"
#include "ldl/gradcheck.hpp"
#include "ldl/network.hpp"

namespace ldl {

struct GradSuiteCase {
  std::string name;
  double tolerance = 0.0;
  GradCheckReport report;
  bool passed() const { return report.passed && report.max_rel_error < tolerance; }
};

inline constexpr double kOpGradTolerance = 1e-5;
inline constexpr double kNetworkGradTolerance = 1e-4;

/// Small network used by the end-to-end gradient check.
inline NetworkSpec gradcheck_toy_spec() {
  NetworkSpec s;
  s.stage_widths = {2, 4, 4, 4};
  s.stem_width = 2;
  s.input_size = 8;
  return s;
}

namespace detail {

inline Tensor<double> random_tensor(const Shape& shape, std::mt19937_64& rng, double sd = 1.0, double mean = 0.0) {
  std::normal_distribution<double> dist(mean, sd);
  Tensor<double> t(shape);
  for (auto& v : t.data()) v = dist(rng);
  return t;
}

inline Tensor<double> random_distribution_rows(std::size_t n, std::size_t c, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.05, 1.0);
  Tensor<double> t({n, c});
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0;
    for (std::size_t j = 0; j < c; ++j) s += t[i * c + j] = u(rng);
    for (std::size_t j = 0; j < c; ++j) t[i * c + j] /= s;
  }
  return t;
}

}  // namespace detail

/// Checks every autodiff op and the toy network against central differences
/// for one seed. Each op's output is reduced to a scalar through a random
/// projection so that no gradient is trivially uniform.
inline std::vector<GradSuiteCase> run_gradient_suite(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<GradSuiteCase> cases;
  GradCheckOptions opt;
  opt.seed = seed;

  auto run = [&](std::string name, double tol, ParameterStore<double>& store,
                 const std::function<Var(Graph<double>&)>& fn, double eps = 1e-5) {
    opt.tol = tol;
    opt.eps = eps;
    cases.push_back({std::move(name), tol, grad_check(store, fn, opt)});
  };
  // Projection weights are drawn once per case so every evaluation sees the same scalar function.
  auto with_projection = [&](auto body) {
    const std::uint64_t pseed = rng();
    return [body, pseed](Graph<double>& g) {
      Var y = body(g);
      std::mt19937_64 local(pseed);
      return ad::dot(g, y, detail::random_tensor(g.value(y).shape(), local));
    };
  };

  {
    ParameterStore<double> s;
    s.add("x", detail::random_tensor({3, 4}, rng));
    s.add("w", detail::random_tensor({4, 5}, rng));
    s.add("b", detail::random_tensor({5}, rng));
    run("dense", kOpGradTolerance, s,
        with_projection([](Graph<double>& g) { return ad::dense(g, g.param("x"), g.param("w"), g.param("b")); }));
  }
  for (auto [stride, pad] : {std::pair<std::size_t, std::size_t>{1, 1}, {2, 0}, {2, 1}}) {
    ParameterStore<double> s;
    s.add("x", detail::random_tensor({2, 3, 5, 5}, rng));
    s.add("k", detail::random_tensor({4, 3, 3, 3}, rng));
    run("conv2d stride=" + std::to_string(stride) + " pad=" + std::to_string(pad), kOpGradTolerance, s,
        with_projection([stride, pad](Graph<double>& g) { return ad::conv2d(g, g.param("x"), g.param("k"), stride, pad); }));
  }
  for (Mode mode : {Mode::train, Mode::eval}) {
    ParameterStore<double> s;
    s.add("x", detail::random_tensor({3, 2, 3, 3}, rng, 1.0, 0.5));
    s.add("gamma", detail::random_tensor({2}, rng, 0.3, 1.0));
    s.add("beta", detail::random_tensor({2}, rng));
    const Tensor<double> mean0 = detail::random_tensor({2}, rng, 0.2);
    Tensor<double> var0({2});
    var0.fill(1.5);
    run(std::string("batch_norm ") + (mode == Mode::train ? "train" : "eval"), kOpGradTolerance, s,
        with_projection([mode, mean0, var0](Graph<double>& g) {
          Tensor<double> rm = mean0, rv = var0;
          return ad::batch_norm(g, g.param("x"), g.param("gamma"), g.param("beta"), rm, rv, mode);
        }));
  }
  {
    ParameterStore<double> s;
    s.add("x", detail::random_tensor({2, 3, 4}, rng));
    run("relu", kOpGradTolerance, s, with_projection([](Graph<double>& g) { return ad::relu(g, g.param("x")); }));
  }
  for (auto mode : {ad::PoolMode::max, ad::PoolMode::avg}) {
    for (auto [window, stride] : {std::pair<std::size_t, std::size_t>{2, 2}, {3, 2}}) {
      ParameterStore<double> s;
      s.add("x", detail::random_tensor({2, 2, 5, 5}, rng));
      run(std::string(mode == ad::PoolMode::max ? "max" : "avg") + "_pool " + std::to_string(window) + "/" +
              std::to_string(stride),
          kOpGradTolerance, s, with_projection([mode, window, stride](Graph<double>& g) {
            return ad::pool(g, g.param("x"), mode, window, stride);
          }));
    }
  }
  {
    ParameterStore<double> s;
    s.add("a", detail::random_tensor({2, 3}, rng));
    s.add("b", detail::random_tensor({2, 3}, rng));
    run("add", kOpGradTolerance, s,
        with_projection([](Graph<double>& g) { return ad::add(g, g.param("a"), g.param("b")); }));
  }
  {
    ParameterStore<double> s;
    s.add("x", detail::random_tensor({2, 3}, rng));
    run("scale", kOpGradTolerance, s,
        with_projection([](Graph<double>& g) { return ad::scale(g, g.param("x"), -1.7); }));
  }
  {
    ParameterStore<double> s;
    s.add("x", detail::random_tensor({2, 3, 2, 2}, rng));
    run("reshape", kOpGradTolerance, s,
        with_projection([](Graph<double>& g) { return ad::reshape(g, g.param("x"), Shape{2, 12}); }));
  }
  {
    ParameterStore<double> s;
    s.add("z", detail::random_tensor({3, 5}, rng, 2.0));
    run("softmax", kOpGradTolerance, s, with_projection([](Graph<double>& g) { return ad::softmax(g, g.param("z")); }));
  }
  {
    ParameterStore<double> s;
    s.add("x", detail::random_tensor({4, 3}, rng));
    run("sum", kOpGradTolerance, s, [](Graph<double>& g) { return ad::sum(g, g.param("x")); });
  }
  {
    ParameterStore<double> s;
    s.add("x", detail::random_tensor({4, 3}, rng));
    const Tensor<double> w = detail::random_tensor({4, 3}, rng);
    run("dot", kOpGradTolerance, s, [w](Graph<double>& g) { return ad::dot(g, g.param("x"), w); });
  }
  for (bool squared : {false, true}) {
    ParameterStore<double> s;
    s.add("f", detail::random_distribution_rows(3, 5, rng));
    const Tensor<double> target = detail::random_distribution_rows(3, 5, rng);
    run(squared ? "euclidean_loss squared" : "euclidean_loss", kOpGradTolerance, s,
        [target, squared](Graph<double>& g) { return ad::euclidean_loss(g, g.param("f"), target, squared); });
  }
  {
    ParameterStore<double> s;
    s.add("f", detail::random_distribution_rows(3, 5, rng));
    const Tensor<double> target = detail::random_distribution_rows(3, 5, rng);
    run("kl_loss", kOpGradTolerance, s, [target](Graph<double>& g) { return ad::kl_loss(g, g.param("f"), target); });
  }
  for (LossKind loss : {LossKind::euclidean, LossKind::kl}) {
    Network<double> net(gradcheck_toy_spec());
    net.init_weights(rng());
    const auto spec = net.spec();
    const Tensor<double> images = detail::random_tensor({3, 3, spec.input_size, spec.input_size}, rng);
    const Tensor<double> target = detail::random_distribution_rows(3, spec.num_labels, rng);
    run("network " + to_string(loss), kNetworkGradTolerance, net.parameters(),
        [&net, images, target, loss](Graph<double>& g) {
          const auto out = net.forward(g, images, Mode::train);
          return loss == LossKind::kl ? ad::kl_loss(g, out.distribution, target)
                                      : ad::euclidean_loss(g, out.distribution, target, false);
        },
        1e-6);  // batch statistics over tiny stages are strongly curved; a smaller step keeps truncation error low
  }
  return cases;
}

}  // namespace ldl

#pragma once

// Central-difference gradient checks shared by the unit tests and the
// acceptance runner.

#include <functional>
#include <string>
#include <vector>

#include "scenemixer/layers.hpp"
#include "scenemixer/model.hpp"
#include "scenemixer/train.hpp"
#include "test_util.hpp"

namespace scenemixer::testing {

/// 4x4x1 input, patch 2, two channels, one block, two classes.
inline ModelConfig tiny_config() {
  ModelConfig c;
  c.input_h = c.input_w = 4;
  c.input_c = 1;
  c.patch = 2;
  c.embed_dim = 2;
  c.depth = 1;
  c.kernels = {3, 5};
  c.num_classes = 2;
  return c;
}

/// Random values in every tensor, buffers included, so zero biases or
/// identity norms cannot hide wiring mistakes.
template <typename T>
void randomize(SceneMixerModel<T>& m, Rng& rng) {
  for (auto& p : m.parameters()) *p.tensor = random_tensor<T>(p.tensor->shape(), rng, -1, 1);
  for (auto& b : m.blocks) {
    b.norm.gamma = random_tensor<T>(b.norm.gamma.shape(), rng, 0.5, 1.5);
    b.norm.running_mean = random_tensor<T>(b.norm.running_mean.shape(), rng, -0.5, 0.5);
    b.norm.running_var = random_tensor<T>(b.norm.running_var.shape(), rng, 0.5, 2.0);
  }
}

struct GradError {
  std::string what;
  double rel_error;
};

constexpr double kFiniteDiffStep = 1e-5;

struct GradCase {
  std::string name;
  Tensor64 input;
  std::vector<Tensor64> params;
  std::function<Tensor64(const Tensor64&, const std::vector<Tensor64>&, LayerCache<double>*)> run;
};

inline std::vector<GradCase> layer_grad_cases(Rng& rng) {
  using P = std::vector<Tensor64>;
  std::vector<GradCase> cases;
  cases.push_back({"patch_embed",
                   random_tensor<double>(Shape{2, 4, 6, 2}, rng),
                   {random_tensor<double>(Shape{2, 2, 2, 3}, rng), random_tensor<double>(Shape{3}, rng)},
                   [](const Tensor64& x, const P& p, LayerCache<double>* c) {
                     return patch_embed(x, ConvParams<double>{p[0], p[1]}, 2, c);
                   }});
  for (std::size_t k : {3u, 5u}) {
    cases.push_back({"depthwise_conv" + std::to_string(k),
                     random_tensor<double>(Shape{2, 4, 3, 3}, rng),
                     {random_tensor<double>(Shape{k, k, 3}, rng), random_tensor<double>(Shape{3}, rng)},
                     [](const Tensor64& x, const P& p, LayerCache<double>* c) {
                       return depthwise_conv(x, ConvParams<double>{p[0], p[1]}, c);
                     }});
  }
  cases.push_back({"pointwise_conv",
                   random_tensor<double>(Shape{2, 3, 3, 4}, rng),
                   {random_tensor<double>(Shape{4, 5}, rng), random_tensor<double>(Shape{5}, rng)},
                   [](const Tensor64& x, const P& p, LayerCache<double>* c) {
                     return pointwise_conv(x, ConvParams<double>{p[0], p[1]}, c);
                   }});
  cases.push_back({"gelu", random_tensor<double>(Shape{3, 7}, rng, -3, 3), {},
                   [](const Tensor64& x, const P&, LayerCache<double>* c) { return gelu(x, c); }});
  cases.push_back({"batch_norm_train",
                   random_tensor<double>(Shape{2, 2, 3, 3}, rng),
                   {random_tensor<double>(Shape{3}, rng, 0.5, 1.5), random_tensor<double>(Shape{3}, rng)},
                   [](const Tensor64& x, const P& p, LayerCache<double>* c) {
                     auto s = BatchNormState<double>::fresh(3, 0.99, 1e-3);
                     s.gamma = p[0];
                     s.beta = p[1];
                     return batch_norm(x, s, Mode::train, c);
                   }});
  cases.push_back({"batch_norm_infer",
                   random_tensor<double>(Shape{2, 2, 2, 3}, rng),
                   {random_tensor<double>(Shape{3}, rng, 0.5, 1.5), random_tensor<double>(Shape{3}, rng)},
                   [](const Tensor64& x, const P& p, LayerCache<double>* c) {
                     auto s = BatchNormState<double>::fresh(3, 0.99, 1e-3);
                     s.gamma = p[0];
                     s.beta = p[1];
                     s.running_mean = Tensor64(Shape{3}, {0.1, -0.2, 0.3});
                     s.running_var = Tensor64(Shape{3}, {0.5, 1.5, 2.0});
                     return batch_norm(x, s, Mode::infer, c);
                   }});
  cases.push_back({"global_avg_pool", random_tensor<double>(Shape{2, 3, 2, 4}, rng), {},
                   [](const Tensor64& x, const P&, LayerCache<double>* c) { return global_avg_pool(x, c); }});
  cases.push_back({"dense",
                   random_tensor<double>(Shape{3, 4}, rng),
                   {random_tensor<double>(Shape{4, 5}, rng), random_tensor<double>(Shape{5}, rng)},
                   [](const Tensor64& x, const P& p, LayerCache<double>* c) {
                     return dense(x, ConvParams<double>{p[0], p[1]}, c);
                   }});
  cases.push_back({"softmax", random_tensor<double>(Shape{3, 5}, rng, -2, 2), {},
                   [](const Tensor64& x, const P&, LayerCache<double>* c) { return softmax(x, c); }});
  return cases;
}

/// Input and parameter gradients of every layer against central differences
/// of sum(upstream * layer(...)), for one seed.
inline std::vector<GradError> layer_grad_errors(std::uint64_t seed) {
  Rng rng(seed);
  std::vector<GradError> out;
  for (const auto& gc : layer_grad_cases(rng)) {
    LayerCache<double> cache;
    const auto y = gc.run(gc.input, gc.params, &cache);
    const auto upstream = random_tensor<double>(y.shape(), rng);
    const auto analytic = layer_backward(cache, upstream);

    const auto numeric_input = finite_diff_grad(
        [&](const Tensor64& x) { return weighted_sum(gc.run(x, gc.params, nullptr), upstream); }, gc.input,
        kFiniteDiffStep);
    out.push_back({gc.name + " input", max_rel_error(analytic.input, numeric_input)});

    if (analytic.params.size() != gc.params.size()) {
      out.push_back({gc.name + " parameter count", 1.0});
      continue;
    }
    for (std::size_t i = 0; i < gc.params.size(); ++i) {
      const auto numeric = finite_diff_grad(
          [&](const Tensor64& t) {
            auto ps = gc.params;
            ps[i] = t;
            return weighted_sum(gc.run(gc.input, ps, nullptr), upstream);
          },
          gc.params[i], kFiniteDiffStep);
      out.push_back({gc.name + " param " + std::to_string(i), max_rel_error(analytic.params[i], numeric)});
    }
  }
  return out;
}

/// d(cross-entropy)/d(theta) of a randomized tiny model, train mode, for
/// every trainable tensor.
inline std::vector<GradError> model_grad_errors(std::uint64_t seed) {
  Rng rng(seed);
  auto m = build<double>(tiny_config(), seed);
  randomize(m, rng);
  const auto x = random_tensor<double>(Shape{3, 4, 4, 1}, rng);
  const std::vector<std::size_t> labels{0, 1, 1};

  auto loss = [&](SceneMixerModel<double> probe) {
    return cross_entropy(forward(probe, x, Mode::train).probs, labels).loss;
  };

  auto work = m;
  auto r = forward(work, x, Mode::train, true);
  const auto grads = backward(work, r.trace, cross_entropy(r.probs, labels).grad_logits);
  const auto params = m.parameters();
  std::vector<GradError> out;
  if (grads.size() != params.size()) return {{"gradient count", 1.0}};
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto numeric = finite_diff_grad(
        [&](const Tensor64& t) {
          auto probe = m;
          *probe.parameters()[i].tensor = t;
          return loss(probe);
        },
        *params[i].tensor, kFiniteDiffStep);
    out.push_back({params[i].name, max_rel_error(grads[i], numeric)});
  }
  return out;
}

}  // namespace scenemixer::testing

#pragma once

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include <gtest/gtest.h>

#include "dispatcher/ops.hpp"

namespace testutil {

using dispatcher::Buffer;
using dispatcher::Shape;
using dispatcher::Tensor;

inline Tensor random_tensor(const Shape& shape, std::mt19937_64& rng, bool requires_grad = true,
                            double scale = 1.0) {
  std::normal_distribution<double> normal(0.0, scale);
  Buffer values(dispatcher::numel(shape));
  for (double& v : values) v = normal(rng);
  return Tensor(shape, std::move(values), requires_grad);
}

// Reduces f(inputs) to a scalar by a fixed random projection, then compares
// reverse-mode gradients with central differences for every input entry.
inline void expect_gradients_match(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                                   std::vector<Tensor> inputs, double tol = 1e-6,
                                   std::uint64_t seed = 7) {
  std::mt19937_64 rng(seed);
  Tensor probe_shape = f(inputs);
  Tensor projection = random_tensor(probe_shape.shape(), rng, false);
  auto loss = [&] { return dispatcher::sum(dispatcher::mul(f(inputs), projection)); };
  for (auto& t : inputs) t.zero_grad();
  loss().backward();
  const double h = 1e-6;
  dispatcher::NoGradGuard guard;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    if (!inputs[k].requires_grad()) continue;
    const std::vector<double> analytic(inputs[k].grad().begin(), inputs[k].grad().end());
    auto w = inputs[k].mutable_data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double saved = w[i];
      w[i] = saved + h;
      const double up = loss().item();
      w[i] = saved - h;
      const double down = loss().item();
      w[i] = saved;
      const double numeric = (up - down) / (2 * h);
      EXPECT_NEAR(analytic[i], numeric, tol * std::max(1.0, std::abs(numeric)))
          << "input " << k << " entry " << i;
    }
  }
}

}  // namespace testutil

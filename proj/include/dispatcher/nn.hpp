#pragma once

#include <cstddef>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "dispatcher/ops.hpp"

namespace dispatcher {

struct Linear {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out]

  static Linear init(std::size_t in, std::size_t out, double stddev, std::mt19937_64& rng) {
    std::normal_distribution<double> normal(0.0, stddev);
    Buffer w(in * out);
    for (double& v : w) v = normal(rng);
    return {Tensor({in, out}, std::move(w), true), Tensor::zeros({out}, true)};
  }

  Tensor operator()(const Tensor& x) const { return linear(x, weight, bias); }
};

struct LayerNorm {
  Tensor gamma;
  Tensor beta;

  static LayerNorm init(std::size_t d) {
    return {Tensor::full({d}, 1.0, true), Tensor::zeros({d}, true)};
  }

  Tensor operator()(const Tensor& x) const { return layer_norm(x, gamma, beta); }
};

using NamedParameters = std::vector<std::pair<std::string, Tensor>>;

inline void append_parameters(NamedParameters& out, const std::string& prefix, const Linear& l) {
  out.emplace_back(prefix + ".weight", l.weight);
  out.emplace_back(prefix + ".bias", l.bias);
}

inline void append_parameters(NamedParameters& out, const std::string& prefix,
                              const LayerNorm& ln) {
  out.emplace_back(prefix + ".gamma", ln.gamma);
  out.emplace_back(prefix + ".beta", ln.beta);
}

}  // namespace dispatcher

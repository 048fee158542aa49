#pragma once

#include <cmath>
#include <cstddef>
#include <random>
#include <string>

#include "dispatcher/nn.hpp"
#include "dispatcher/ops.hpp"

// Masked multi-head self-attention on the same tensor engine, used as the
// quadratic baseline.
namespace dispatcher {

struct MsaParams {
  Linear query;
  Linear key;
  Linear value;
  Linear output;
  std::size_t heads = 1;

  static MsaParams init(std::size_t d, std::size_t heads, double stddev, double out_stddev,
                        std::mt19937_64& rng) {
    if (heads == 0 || d % heads != 0) {
      throw ContractError("MsaParams: d=" + std::to_string(d) + " not divisible by heads=" +
                          std::to_string(heads));
    }
    MsaParams p;
    p.heads = heads;
    p.query = Linear::init(d, d, stddev, rng);
    p.key = Linear::init(d, d, stddev, rng);
    p.value = Linear::init(d, d, stddev, rng);
    p.output = Linear::init(d, d, out_stddev, rng);
    return p;
  }

  void append_to(NamedParameters& out, const std::string& prefix) const {
    append_parameters(out, prefix + ".query", query);
    append_parameters(out, prefix + ".key", key);
    append_parameters(out, prefix + ".value", value);
    append_parameters(out, prefix + ".output", output);
  }
};

// Causal attention probabilities [B, H, N, N] for input [B, N, d].
inline Tensor msa_attention_weights(const Tensor& input, const MsaParams& params) {
  if (input.rank() != 3) throw DimensionError("msa: expected [B, N, d], got " + to_string(input.shape()));
  const std::size_t d = input.extent(-1);
  if (d != params.query.weight.extent(0)) {
    throw DimensionError("msa: input width " + std::to_string(d) + " but parameters expect " +
                         std::to_string(params.query.weight.extent(0)));
  }
  const std::size_t heads = params.heads;
  const std::size_t dh = d / heads;
  const std::size_t bsz = input.extent(0), n = input.extent(1);
  Tensor q = split_heads(params.query(input), heads);
  Tensor k = split_heads(params.key(input), heads);
  op_counters().mixing_macs += static_cast<std::uint64_t>(bsz) * heads * n * n * dh;
  Tensor scores = scale(matmul(q, k, /*transpose_b=*/true), 1.0 / std::sqrt(static_cast<double>(dh)));
  return softmax(causal_mask_fill(scores), -1);
}

// input [B, N, d] (or [N, d]) -> same shape.
inline Tensor msa_forward(const Tensor& input, const MsaParams& params) {
  if (input.rank() == 2) {
    const Shape shape = input.shape();
    return reshape(msa_forward(reshape(input, {1, shape[0], shape[1]}), params), shape);
  }
  const std::size_t d = input.extent(-1);
  const std::size_t bsz = input.extent(0), n = input.extent(1);
  Tensor probs = msa_attention_weights(input, params);
  Tensor v = split_heads(params.value(input), params.heads);
  op_counters().mixing_macs += static_cast<std::uint64_t>(bsz) * n * n * d;
  Tensor context = merge_heads(matmul(probs, v));
  return params.output(context);
}

}  // namespace dispatcher

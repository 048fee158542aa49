#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "dispatcher/dispatcher_layer.hpp"
#include "dispatcher/msa.hpp"
#include "dispatcher/nn.hpp"

namespace dispatcher {

enum class LayerKind { kDispatcher, kMsa };

inline std::string to_string(LayerKind kind) {
  return kind == LayerKind::kDispatcher ? "dispatcher" : "msa";
}

inline LayerKind parse_layer_kind(const std::string& name) {
  if (name == "dispatcher") return LayerKind::kDispatcher;
  if (name == "msa") return LayerKind::kMsa;
  throw ContractError("unknown layer kind '" + name + "' (expected dispatcher or msa)");
}

struct ModelConfig {
  LayerKind layer_kind = LayerKind::kDispatcher;
  std::size_t d_model = 128;
  std::size_t d_inner = 128;
  std::size_t n_layers = 2;
  std::size_t n_heads = 1;
  std::size_t max_seq = 256;
  std::size_t vocab_size = 256;
  double dropout_p = 0.0;      // residual-path dropout
  double row_dropout_p = 0.0;  // dispatcher shift-and-sum row skipping
  std::uint64_t seed = 0;

  void validate() const {
    if (d_model == 0 || d_inner == 0 || n_layers == 0 || n_heads == 0 || max_seq == 0 ||
        vocab_size == 0) {
      throw ContractError("ModelConfig: all extents must be positive");
    }
    if (d_model % n_heads != 0) {
      throw ContractError("ModelConfig: d_model=" + std::to_string(d_model) +
                          " not divisible by n_heads=" + std::to_string(n_heads));
    }
    if (!(dropout_p >= 0.0 && dropout_p < 1.0) || !(row_dropout_p >= 0.0 && row_dropout_p <= 1.0)) {
      throw ContractError("ModelConfig: dropout probabilities out of range");
    }
  }

  bool operator==(const ModelConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"layer_kind", to_string(c.layer_kind)},
                     {"d_model", c.d_model},
                     {"d_inner", c.d_inner},
                     {"n_layers", c.n_layers},
                     {"n_heads", c.n_heads},
                     {"max_seq", c.max_seq},
                     {"vocab_size", c.vocab_size},
                     {"dropout_p", c.dropout_p},
                     {"row_dropout_p", c.row_dropout_p},
                     {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  c.layer_kind = parse_layer_kind(j.at("layer_kind").get<std::string>());
  j.at("d_model").get_to(c.d_model);
  j.at("d_inner").get_to(c.d_inner);
  j.at("n_layers").get_to(c.n_layers);
  j.at("n_heads").get_to(c.n_heads);
  j.at("max_seq").get_to(c.max_seq);
  j.at("vocab_size").get_to(c.vocab_size);
  j.at("dropout_p").get_to(c.dropout_p);
  c.row_dropout_p = j.value("row_dropout_p", c.dropout_p);
  j.at("seed").get_to(c.seed);
}

// Token ids [batch, seq] with next-token targets.
struct TokenBatch {
  std::size_t batch = 0;
  std::size_t seq = 0;
  std::vector<std::size_t> inputs;
  std::vector<std::size_t> targets;

  Shape shape() const { return {batch, seq}; }
};

// Causal language model: token + learned positional embeddings, pre-norm
// blocks (mixer, residual, feed-forward, residual), final norm and an output
// head tied to the token embeddings.
class LmModel {
 public:
  struct Block {
    LayerNorm ln1;
    DispatcherParams dispatcher;
    MsaParams msa;
    LayerNorm ln2;
    Linear ff1;
    Linear ff2;
  };

  explicit LmModel(const ModelConfig& config) : config_(config) {
    config_.validate();
    std::mt19937_64 rng(config_.seed);
    const std::size_t d = config_.d_model;
    const double stddev = 0.02;
    const double out_stddev = stddev / std::sqrt(2.0 * static_cast<double>(config_.n_layers));
    std::normal_distribution<double> normal(0.0, stddev);
    Buffer tok(config_.vocab_size * d), pos(config_.max_seq * d);
    for (double& v : tok) v = normal(rng);
    for (double& v : pos) v = normal(rng);
    token_embedding_ = Tensor({config_.vocab_size, d}, std::move(tok), true);
    position_embedding_ = Tensor({config_.max_seq, d}, std::move(pos), true);
    for (std::size_t l = 0; l < config_.n_layers; ++l) {
      Block b;
      b.ln1 = LayerNorm::init(d);
      if (config_.layer_kind == LayerKind::kDispatcher) {
        b.dispatcher =
            DispatcherParams::init(d, config_.n_heads, config_.max_seq, stddev, out_stddev, rng);
      } else {
        b.msa = MsaParams::init(d, config_.n_heads, stddev, out_stddev, rng);
      }
      b.ln2 = LayerNorm::init(d);
      b.ff1 = Linear::init(d, config_.d_inner, stddev, rng);
      b.ff2 = Linear::init(config_.d_inner, d, out_stddev, rng);
      blocks_.push_back(std::move(b));
    }
    final_norm_ = LayerNorm::init(d);
  }

  const ModelConfig& config() const { return config_; }
  const std::vector<Block>& blocks() const { return blocks_; }
  const Tensor& token_embedding() const { return token_embedding_; }
  const LayerNorm& final_norm() const { return final_norm_; }

  // Parameters in a fixed order; the checkpoint format relies on it.
  NamedParameters parameters() const {
    NamedParameters out;
    out.emplace_back("token_embedding", token_embedding_);
    out.emplace_back("position_embedding", position_embedding_);
    for (std::size_t l = 0; l < blocks_.size(); ++l) {
      const std::string prefix = "blocks." + std::to_string(l);
      const Block& b = blocks_[l];
      append_parameters(out, prefix + ".ln1", b.ln1);
      if (config_.layer_kind == LayerKind::kDispatcher) {
        b.dispatcher.append_to(out, prefix + ".dispatcher");
      } else {
        b.msa.append_to(out, prefix + ".msa");
      }
      append_parameters(out, prefix + ".ln2", b.ln2);
      append_parameters(out, prefix + ".ff1", b.ff1);
      append_parameters(out, prefix + ".ff2", b.ff2);
    }
    append_parameters(out, "final_norm", final_norm_);
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t total = 0;
    for (const auto& [name, t] : parameters()) total += t.size();
    return total;
  }

  void zero_grad() const {
    for (auto& [name, t] : parameters()) {
      Tensor handle = t;
      handle.zero_grad();
    }
  }

  // Logits [B, N, vocab]. `rng` drives dropout and is required only when
  // training with a nonzero dropout probability.
  Tensor forward(std::span<const std::size_t> ids, const Shape& ids_shape, bool training,
                 std::mt19937_64* rng) const {
    if (ids_shape.size() != 2) throw DimensionError("lm_forward: ids must be [batch, seq]");
    const std::size_t n = ids_shape[1];
    if (n > config_.max_seq) {
      throw CapacityError("lm_forward: sequence length " + std::to_string(n) +
                          " exceeds max_seq " + std::to_string(config_.max_seq));
    }
    const bool drop = training && config_.dropout_p > 0.0;
    if ((drop || (training && config_.row_dropout_p > 0.0)) && !rng) {
      throw ContractError("lm_forward: training with dropout needs an rng");
    }
    Tensor x = add(embedding(ids, ids_shape, token_embedding_), slice_first(position_embedding_, n));
    for (const Block& b : blocks_) {
      Tensor mixed = config_.layer_kind == LayerKind::kDispatcher
                         ? dispatcher_forward(b.ln1(x), b.dispatcher, training,
                                              config_.row_dropout_p, rng)
                         : msa_forward(b.ln1(x), b.msa);
      if (drop) mixed = dropout(mixed, config_.dropout_p, *rng);
      x = add(x, mixed);
      Tensor ff = b.ff2(gelu(b.ff1(b.ln2(x))));
      if (drop) ff = dropout(ff, config_.dropout_p, *rng);
      x = add(x, ff);
    }
    return matmul(final_norm_(x), token_embedding_, /*transpose_b=*/true);
  }

 private:
  ModelConfig config_;
  Tensor token_embedding_;
  Tensor position_embedding_;
  std::vector<Block> blocks_;
  LayerNorm final_norm_;
};

inline Tensor lm_forward(const LmModel& model, const TokenBatch& batch, bool training,
                         std::mt19937_64* rng = nullptr) {
  return model.forward(batch.inputs, batch.shape(), training, rng);
}

// Mean next-token negative log-likelihood of the batch.
inline Tensor lm_loss(const LmModel& model, const TokenBatch& batch, bool training,
                      std::mt19937_64* rng = nullptr) {
  return cross_entropy(lm_forward(model, batch, training, rng), batch.targets);
}

// exp(mean token NLL) over non-overlapping windows of max_seq predictions.
inline double perplexity(const LmModel& model, std::span<const std::size_t> stream) {
  if (stream.size() < 2) {
    throw DataError("perplexity: evaluation stream needs at least two tokens, got " +
                    std::to_string(stream.size()));
  }
  NoGradGuard no_grad;
  const std::size_t window = model.config().max_seq;
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t start = 0; start + 1 < stream.size(); start += window) {
    const std::size_t len = std::min(window, stream.size() - 1 - start);
    TokenBatch batch{1, len,
                     std::vector<std::size_t>(stream.begin() + static_cast<std::ptrdiff_t>(start),
                                              stream.begin() + static_cast<std::ptrdiff_t>(start + len)),
                     std::vector<std::size_t>(stream.begin() + static_cast<std::ptrdiff_t>(start + 1),
                                              stream.begin() + static_cast<std::ptrdiff_t>(start + len + 1))};
    total += lm_loss(model, batch, false).item() * static_cast<double>(len);
    count += len;
  }
  return std::exp(total / static_cast<double>(count));
}

// Extends `prompt` by `steps` tokens. Temperature 0 is greedy (lowest id wins
// ties); otherwise samples from softmax(logits / temperature).
inline std::vector<std::size_t> generate(const LmModel& model, std::span<const std::size_t> prompt,
                                         std::size_t steps, double temperature,
                                         std::mt19937_64& rng) {
  if (prompt.empty()) throw ContractError("generate: prompt must not be empty");
  if (temperature < 0.0) throw ContractError("generate: temperature must be non-negative");
  if (prompt.size() + steps > model.config().max_seq) {
    throw CapacityError("generate: prompt of " + std::to_string(prompt.size()) + " plus " +
                        std::to_string(steps) + " steps exceeds max_seq " +
                        std::to_string(model.config().max_seq));
  }
  NoGradGuard no_grad;
  std::vector<std::size_t> tokens(prompt.begin(), prompt.end());
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  const std::size_t vocab = model.config().vocab_size;
  for (std::size_t s = 0; s < steps; ++s) {
    Tensor logits = model.forward(tokens, {1, tokens.size()}, false, nullptr);
    auto last = logits.data().subspan((tokens.size() - 1) * vocab, vocab);
    std::size_t next = 0;
    if (temperature == 0.0) {
      next = static_cast<std::size_t>(std::max_element(last.begin(), last.end()) - last.begin());
    } else {
      const double mx = *std::max_element(last.begin(), last.end());
      std::vector<double> weights(vocab);
      double total = 0.0;
      for (std::size_t j = 0; j < vocab; ++j) {
        weights[j] = std::exp((last[j] - mx) / temperature);
        total += weights[j];
      }
      double u = uniform(rng) * total;
      next = vocab - 1;
      for (std::size_t j = 0; j < vocab; ++j) {
        if (u < weights[j]) {
          next = j;
          break;
        }
        u -= weights[j];
      }
    }
    tokens.push_back(next);
  }
  return tokens;
}

}  // namespace dispatcher

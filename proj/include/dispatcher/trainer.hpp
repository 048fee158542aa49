#pragma once

#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "dispatcher/checkpoint.hpp"
#include "dispatcher/model.hpp"

namespace dispatcher {

struct TrainConfig {
  std::size_t batch_size = 4;
  std::size_t seq_len = 64;
  std::size_t steps = 1000;
  double learning_rate = 1e-3;
  std::size_t warmup_steps = 200;
  double clip_norm = 1.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t seed = 0;
  std::size_t eval_every = 0;  // 0: only at the end
  std::filesystem::path checkpoint_path;  // empty: no checkpoints
  std::filesystem::path log_path;         // empty: no CSV log

  void validate() const {
    if (batch_size == 0 || seq_len == 0 || steps == 0) {
      throw ContractError("TrainConfig: batch_size, seq_len and steps must be positive");
    }
    if (warmup_steps > steps) {
      throw ContractError("TrainConfig: warmup_steps (" + std::to_string(warmup_steps) +
                          ") exceeds steps (" + std::to_string(steps) + ")");
    }
    if (!(learning_rate >= 0.0) || !(clip_norm > 0.0)) {
      throw ContractError("TrainConfig: learning_rate must be >= 0 and clip_norm > 0");
    }
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"batch_size", c.batch_size},   {"seq_len", c.seq_len},
                     {"steps", c.steps},             {"learning_rate", c.learning_rate},
                     {"warmup_steps", c.warmup_steps}, {"clip_norm", c.clip_norm},
                     {"beta1", c.beta1},             {"beta2", c.beta2},
                     {"eps", c.eps},                 {"seed", c.seed},
                     {"eval_every", c.eval_every},
                     {"checkpoint_path", c.checkpoint_path.string()},
                     {"log_path", c.log_path.string()}};
}

// Splits a token stream into `batch` contiguous equal streams and walks
// non-overlapping windows through them, wrapping to the start when a stream
// is exhausted.
class StreamBatcher {
 public:
  StreamBatcher(std::span<const std::size_t> stream, std::size_t batch, std::size_t seq)
      : stream_(stream.begin(), stream.end()), batch_(batch), seq_(seq) {
    if (batch == 0 || seq == 0) throw ContractError("StreamBatcher: empty batch shape");
    lane_ = stream_.size() / batch;
    if (lane_ < seq + 1) {
      throw DataError("corpus of " + std::to_string(stream_.size()) +
                      " tokens is shorter than one batch window (" + std::to_string(batch) +
                      " x " + std::to_string(seq + 1) + ")");
    }
  }

  TokenBatch next() {
    if (cursor_ + seq_ + 1 > lane_) cursor_ = 0;
    TokenBatch b{batch_, seq_, {}, {}};
    b.inputs.reserve(batch_ * seq_);
    b.targets.reserve(batch_ * seq_);
    for (std::size_t i = 0; i < batch_; ++i) {
      const std::size_t base = i * lane_ + cursor_;
      for (std::size_t p = 0; p < seq_; ++p) {
        b.inputs.push_back(stream_[base + p]);
        b.targets.push_back(stream_[base + p + 1]);
      }
    }
    cursor_ += seq_;
    return b;
  }

 private:
  std::vector<std::size_t> stream_;
  std::size_t batch_;
  std::size_t seq_;
  std::size_t lane_ = 0;
  std::size_t cursor_ = 0;
};

struct AdamState {
  std::vector<Buffer> m;
  std::vector<Buffer> v;
  std::size_t step = 0;

  explicit AdamState(const NamedParameters& params) {
    for (const auto& [name, t] : params) {
      m.emplace_back(t.size(), 0.0);
      v.emplace_back(t.size(), 0.0);
    }
  }
};

// Learning rate after linear warmup: 0 at step 0, reaching `base` at `warmup`.
inline double warmup_lr(double base, std::size_t step, std::size_t warmup) {
  if (warmup == 0 || step >= warmup) return base;
  return base * static_cast<double>(step) / static_cast<double>(warmup);
}

inline double global_grad_norm(const NamedParameters& params) {
  double sq = 0.0;
  for (const auto& [name, t] : params)
    for (double g : t.grad()) sq += g * g;
  return std::sqrt(sq);
}

// Rescales all gradients so their global L2 norm is at most max_norm.
// Returns the norm before clipping.
inline double clip_grad_norm(NamedParameters& params, double max_norm) {
  const double norm = global_grad_norm(params);
  if (norm > max_norm) {
    const double factor = max_norm / norm;
    for (auto& [name, t] : params)
      for (double& g : t.mutable_grad()) g *= factor;
  }
  return norm;
}

// One Adam update with bias correction. Throws NumericError naming the first
// parameter with a non-finite gradient, before touching any state.
inline void adam_step(NamedParameters& params, AdamState& state, double lr, double beta1,
                      double beta2, double eps) {
  if (state.m.size() != params.size()) throw ContractError("adam_step: state does not match parameters");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (state.m[i].size() != params[i].second.size()) {
      throw ContractError("adam_step: state shape mismatch for '" + params[i].first + "'");
    }
    for (double g : params[i].second.grad()) {
      if (!std::isfinite(g)) {
        throw NumericError("non-finite gradient in parameter '" + params[i].first + "'");
      }
    }
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto w = params[i].second.mutable_data();
    auto g = params[i].second.grad();
    Buffer& m = state.m[i];
    Buffer& v = state.v[i];
    for (std::size_t k = 0; k < w.size(); ++k) {
      m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
      v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
      w[k] -= lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + eps);
    }
  }
}

struct TrainReport {
  std::vector<double> losses;
  std::vector<double> learning_rates;
  std::vector<std::pair<std::size_t, double>> valid_perplexities;  // (step, ppl)
  double seconds = 0.0;
};

// Optional hooks: `valid` is evaluated at every checkpoint; `metadata` is
// stored in each checkpoint written.
struct TrainHooks {
  std::span<const std::size_t> valid;
  nlohmann::json metadata = nlohmann::json::object();
  std::function<void(std::size_t step, double loss)> on_step;
};

// Runs cfg.steps optimizer steps with batches drawn from `next_batch`.
// Deterministic given the model seed and cfg.seed.
inline TrainReport train(LmModel& model, const std::function<TokenBatch()>& next_batch,
                         const TrainConfig& cfg, const TrainHooks& hooks = {}) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  NamedParameters params = model.parameters();
  AdamState adam(params);
  TrainReport report;
  std::ofstream log;
  if (!cfg.log_path.empty()) {
    log.open(cfg.log_path, std::ios::app);
    if (!log) throw DataError("cannot open loss log " + cfg.log_path.string());
    if (std::filesystem::file_size(cfg.log_path) == 0) log << "step,loss,lr,seconds\n";
  }
  const auto start = std::chrono::steady_clock::now();
  auto checkpoint = [&](std::size_t step) {
    if (!hooks.valid.empty()) report.valid_perplexities.emplace_back(step, perplexity(model, hooks.valid));
    if (!cfg.checkpoint_path.empty()) save_checkpoint(cfg.checkpoint_path, model, hooks.metadata);
  };
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    TokenBatch batch = next_batch();
    model.zero_grad();
    Tensor loss = lm_loss(model, batch, true, &rng);
    const double value = loss.item();
    if (!std::isfinite(value)) {
      throw NumericError("non-finite loss at step " + std::to_string(step));
    }
    loss.backward();
    clip_grad_norm(params, cfg.clip_norm);
    const double lr = warmup_lr(cfg.learning_rate, step, cfg.warmup_steps);
    adam_step(params, adam, lr, cfg.beta1, cfg.beta2, cfg.eps);
    report.losses.push_back(value);
    report.learning_rates.push_back(lr);
    const double elapsed =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (log) {
      std::ostringstream line;
      line << step << ',' << std::setprecision(17) << value << ',' << lr << ','
           << std::setprecision(6) << elapsed << '\n';
      log << line.str() << std::flush;
    }
    if (hooks.on_step) hooks.on_step(step, value);
    if (cfg.eval_every != 0 && (step + 1) % cfg.eval_every == 0 && step + 1 != cfg.steps) {
      checkpoint(step + 1);
    }
  }
  checkpoint(cfg.steps);
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

inline TrainReport train(LmModel& model, std::span<const std::size_t> corpus, const TrainConfig& cfg,
                         const TrainHooks& hooks = {}) {
  cfg.validate();
  StreamBatcher batcher(corpus, cfg.batch_size, cfg.seq_len);
  return train(model, [&batcher] { return batcher.next(); }, cfg, hooks);
}

}  // namespace dispatcher

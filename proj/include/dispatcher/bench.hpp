#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <new>
#include <ostream>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "dispatcher/model.hpp"
#include "dispatcher/trainer.hpp"

// Step-time, peak-memory and work measurements across sequence lengths.
namespace dispatcher {

struct BenchRecord {
  LayerKind layer_kind = LayerKind::kDispatcher;
  std::size_t n = 0;
  std::size_t repeats = 0;
  double mean_step_seconds = 0.0;
  double stddev_seconds = 0.0;
  double median_step_seconds = 0.0;
  std::size_t peak_tensor_bytes = 0;
  std::uint64_t counted_macs = 0;  // forward sequence-mixing MACs, all layers and rows of the batch
  std::uint64_t total_macs = 0;    // every counted MAC of one full training step
  bool failed = false;
  std::string error;
};

struct BenchOptions {
  std::size_t batch_size = 4;
  std::size_t repeats = 5;
  std::size_t warmup = 2;
  std::uint64_t seed = 0;
  std::size_t memory_budget = std::numeric_limits<std::size_t>::max();
};

// Closed forms for the forward mixing work of one step.
inline std::uint64_t dispatcher_mixing_macs(const ModelConfig& cfg, std::size_t batch, std::size_t n) {
  return static_cast<std::uint64_t>(cfg.n_layers) * batch * num_rows(n) * n * cfg.d_model;
}

inline std::uint64_t msa_mixing_macs(const ModelConfig& cfg, std::size_t batch, std::size_t n) {
  return static_cast<std::uint64_t>(cfg.n_layers) * batch * 2 * n * n * cfg.d_model;
}

namespace detail {

inline TokenBatch random_batch(std::size_t batch, std::size_t n, std::size_t vocab,
                               std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> pick(0, vocab - 1);
  TokenBatch b{batch, n, {}, {}};
  for (std::size_t i = 0; i < batch * n; ++i) {
    b.inputs.push_back(pick(rng));
    b.targets.push_back(pick(rng));
  }
  return b;
}

struct StepMeasurement {
  double seconds = 0.0;
  std::size_t peak_bytes = 0;
  std::uint64_t mixing_macs = 0;
  std::uint64_t total_macs = 0;
};

// Forward, backward, clipping and one Adam update.
inline StepMeasurement timed_step(const LmModel& model, NamedParameters& params, AdamState& adam,
                                  const TokenBatch& batch, std::mt19937_64& rng) {
  StepMeasurement m;
  const std::size_t baseline = MemoryTracker::live();
  MemoryTracker::reset_peak();
  reset_op_counters();
  const auto start = std::chrono::steady_clock::now();
  model.zero_grad();
  {
    Tensor loss = lm_loss(model, batch, true, &rng);
    m.mixing_macs = op_counters().mixing_macs;
    loss.backward();
  }
  m.peak_bytes = MemoryTracker::peak() - baseline;
  clip_grad_norm(params, 1.0);
  adam_step(params, adam, 1e-4, 0.9, 0.999, 1e-8);
  m.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  m.total_macs = op_counters().total_macs;
  return m;
}

inline void summarize(BenchRecord& r, const std::vector<double>& times) {
  r.repeats = times.size();
  double mean = 0.0;
  for (double t : times) mean += t;
  mean /= static_cast<double>(times.size());
  double var = 0.0;
  for (double t : times) var += (t - mean) * (t - mean);
  r.mean_step_seconds = mean;
  r.stddev_seconds = times.size() > 1 ? std::sqrt(var / static_cast<double>(times.size() - 1)) : 0.0;
  std::vector<double> sorted = times;
  std::sort(sorted.begin(), sorted.end());
  const std::size_t mid = sorted.size() / 2;
  r.median_step_seconds = sorted.size() % 2 ? sorted[mid] : 0.5 * (sorted[mid - 1] + sorted[mid]);
}

}  // namespace detail

// Times full training steps of `cfg` (its layer kind) at each sequence length.
// Allocation failures, including exceeding options.memory_budget, mark the
// record failed and the sweep continues.
inline std::vector<BenchRecord> bench_step_time(const ModelConfig& cfg, const std::vector<std::size_t>& ns,
                                                const BenchOptions& options) {
  if (options.repeats < 5) throw ContractError("bench_step_time: at least 5 timed repeats required");
  std::vector<BenchRecord> records;
  for (std::size_t n : ns) {
    if (n > cfg.max_seq) {
      throw ContractError("bench_step_time: N=" + std::to_string(n) + " exceeds max_seq " +
                          std::to_string(cfg.max_seq));
    }
    BenchRecord record;
    record.layer_kind = cfg.layer_kind;
    record.n = n;
    try {
      ScopedMemoryBudget budget(options.memory_budget);
      LmModel model(cfg);
      NamedParameters params = model.parameters();
      AdamState adam(params);
      std::mt19937_64 rng(options.seed);
      const TokenBatch batch = detail::random_batch(options.batch_size, n, cfg.vocab_size, rng);
      std::vector<double> times;
      for (std::size_t i = 0; i < options.warmup + options.repeats; ++i) {
        detail::StepMeasurement m = detail::timed_step(model, params, adam, batch, rng);
        if (i < options.warmup) continue;
        times.push_back(m.seconds);
        record.peak_tensor_bytes = std::max(record.peak_tensor_bytes, m.peak_bytes);
        record.counted_macs = m.mixing_macs;
        record.total_macs = m.total_macs;
      }
      detail::summarize(record, times);
    } catch (const std::bad_alloc&) {
      record.failed = true;
      record.error = "allocation failed";
    }
    records.push_back(record);
  }
  return records;
}

// Least-squares slope of log(y) against log(x).
inline double fit_loglog_slope(const std::vector<double>& xs, const std::vector<double>& ys) {
  if (xs.size() != ys.size()) throw ContractError("fit_loglog_slope: size mismatch");
  std::set<double> distinct(xs.begin(), xs.end());
  if (distinct.size() < 4 || *distinct.rbegin() < 16.0 * *distinct.begin()) {
    throw ContractError("fit_scaling_exponent: need >= 4 distinct N spanning >= 16x");
  }
  const double count = static_cast<double>(xs.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (!(xs[i] > 0.0) || !(ys[i] > 0.0)) throw ContractError("fit_loglog_slope: values must be positive");
    mx += std::log(xs[i]);
    my += std::log(ys[i]);
  }
  mx /= count;
  my /= count;
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double dx = std::log(xs[i]) - mx;
    sxy += dx * (std::log(ys[i]) - my);
    sxx += dx * dx;
  }
  return sxy / sxx;
}

// Time exponent over the successful records of one layer kind.
inline double fit_scaling_exponent(const std::vector<BenchRecord>& records) {
  std::vector<double> xs, ys;
  for (const auto& r : records) {
    if (r.failed) continue;
    if (!xs.empty() && r.layer_kind != records.front().layer_kind) {
      throw ContractError("fit_scaling_exponent: records mix layer kinds");
    }
    xs.push_back(static_cast<double>(r.n));
    ys.push_back(r.mean_step_seconds);
  }
  return fit_loglog_slope(xs, ys);
}

struct MemoryRecord {
  LayerKind layer_kind = LayerKind::kDispatcher;
  std::size_t n = 0;
  std::size_t peak_bytes = 0;
  bool failed = false;
};

// Peak live tensor bytes allocated during one forward+backward pass, per N.
// Parameters and optimizer state already resident are not counted.
inline std::vector<MemoryRecord> memory_report(const ModelConfig& cfg, const std::vector<std::size_t>& ns,
                                               const BenchOptions& options) {
  std::vector<MemoryRecord> out;
  for (std::size_t n : ns) {
    MemoryRecord r{cfg.layer_kind, n, 0, false};
    try {
      ScopedMemoryBudget budget(options.memory_budget);
      LmModel model(cfg);
      std::mt19937_64 rng(options.seed);
      const TokenBatch batch = detail::random_batch(options.batch_size, n, cfg.vocab_size, rng);
      const std::size_t baseline = MemoryTracker::live();
      MemoryTracker::reset_peak();
      {
        Tensor loss = lm_loss(model, batch, true, &rng);
        loss.backward();
      }
      r.peak_bytes = MemoryTracker::peak() - baseline;
    } catch (const std::bad_alloc&) {
      r.failed = true;
    }
    out.push_back(r);
  }
  return out;
}

// Largest relative deviation of ys from the least-squares line a + b*x.
inline double linear_fit_max_residual(const std::vector<double>& xs, const std::vector<double>& ys) {
  const double count = static_cast<double>(xs.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    mx += xs[i];
    my += ys[i];
  }
  mx /= count;
  my /= count;
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    sxy += (xs[i] - mx) * (ys[i] - my);
    sxx += (xs[i] - mx) * (xs[i] - mx);
  }
  const double slope = sxy / sxx;
  const double intercept = my - slope * mx;
  double worst = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    worst = std::max(worst, std::abs(ys[i] - (intercept + slope * xs[i])) / ys[i]);
  }
  return worst;
}

inline void write_bench_csv(std::ostream& out, const std::vector<BenchRecord>& records) {
  out << "layer_kind,N,repeats,mean_s,stddev_s,peak_bytes,macs\n";
  for (const auto& r : records) {
    if (r.failed) {
      out << to_string(r.layer_kind) << ',' << r.n << ",0,nan,nan,nan,nan\n";
      continue;
    }
    out << to_string(r.layer_kind) << ',' << r.n << ',' << r.repeats << ',' << r.mean_step_seconds
        << ',' << r.stddev_seconds << ',' << r.peak_tensor_bytes << ',' << r.counted_macs << '\n';
  }
}

// Mean step time of the dispatcher with and without row dropout, measured with
// interleaved steps so drift affects both settings equally.
struct DropoutTiming {
  double mean_without = 0.0;
  double mean_with = 0.0;
};

inline DropoutTiming bench_row_dropout(ModelConfig cfg, std::size_t n, double row_dropout_p,
                                       const BenchOptions& options) {
  cfg.layer_kind = LayerKind::kDispatcher;
  cfg.dropout_p = 0.0;
  ModelConfig with = cfg;
  with.row_dropout_p = row_dropout_p;
  cfg.row_dropout_p = 0.0;
  LmModel plain(cfg), dropped(with);
  NamedParameters plain_params = plain.parameters(), dropped_params = dropped.parameters();
  AdamState plain_adam(plain_params), dropped_adam(dropped_params);
  std::mt19937_64 rng(options.seed);
  const TokenBatch batch = detail::random_batch(options.batch_size, n, cfg.vocab_size, rng);
  DropoutTiming timing;
  for (std::size_t i = 0; i < options.warmup + options.repeats; ++i) {
    const double a = detail::timed_step(plain, plain_params, plain_adam, batch, rng).seconds;
    const double b = detail::timed_step(dropped, dropped_params, dropped_adam, batch, rng).seconds;
    if (i < options.warmup) continue;
    timing.mean_without += a;
    timing.mean_with += b;
  }
  timing.mean_without /= static_cast<double>(options.repeats);
  timing.mean_with /= static_cast<double>(options.repeats);
  return timing;
}

}  // namespace dispatcher

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "dispatcher/model.hpp"

// Property suites: causality probes, dense-matrix oracle for the mixing loop,
// finite-difference gradients.
namespace dispatcher {

struct CheckResult {
  std::string name;
  bool passed = true;
  std::string detail;
};

// Edits one token at a random position and requires the logits of every
// earlier position to stay bit-identical.
inline CheckResult check_causality(LayerKind kind, const std::vector<std::size_t>& lengths,
                                   std::size_t trials, std::uint64_t seed) {
  CheckResult result{"causality/" + to_string(kind), true, ""};
  ModelConfig cfg;
  cfg.layer_kind = kind;
  cfg.d_model = 16;
  cfg.d_inner = 24;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.vocab_size = 23;
  cfg.max_seq = *std::max_element(lengths.begin(), lengths.end());
  cfg.seed = seed;
  LmModel model(cfg);
  std::mt19937_64 rng(seed ^ 0x5eedULL);
  std::uniform_int_distribution<std::size_t> tok(0, cfg.vocab_size - 1);
  NoGradGuard no_grad;
  std::size_t probes = 0;
  for (std::size_t n : lengths) {
    std::uniform_int_distribution<std::size_t> pos(0, n - 1);
    for (std::size_t t = 0; t < trials; ++t) {
      std::vector<std::size_t> ids(n);
      for (auto& id : ids) id = tok(rng);
      const std::size_t edit = pos(rng);
      std::vector<std::size_t> edited = ids;
      edited[edit] = (ids[edit] + 1 + tok(rng) % (cfg.vocab_size - 1)) % cfg.vocab_size;
      Tensor a = model.forward(ids, {1, n}, false, nullptr);
      Tensor b = model.forward(edited, {1, n}, false, nullptr);
      const std::size_t prefix = edit * cfg.vocab_size;
      ++probes;
      if (!std::equal(a.data().begin(), a.data().begin() + static_cast<std::ptrdiff_t>(prefix),
                      b.data().begin())) {
        result.passed = false;
        result.detail = "N=" + std::to_string(n) + ": editing position " + std::to_string(edit) +
                        " changed an earlier logit";
        return result;
      }
    }
  }
  result.detail = std::to_string(probes) + " probes";
  return result;
}

// Dense [N, N] operator of the shift-and-sum loop for one channel group:
// product over ascending rows of (I + diag(c_r) S_{2^r}), S_k the cyclic shift.
inline std::vector<double> dense_mixing_matrix(std::size_t n, const std::vector<std::vector<double>>& gates) {
  std::vector<double> m(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) m[i * n + i] = 1.0;
  for (std::size_t r = 0; r < gates.size(); ++r) {
    const std::size_t shift = std::size_t{1} << r;
    std::vector<double> step(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      step[i * n + i] = 1.0;
      step[i * n + (i + n - shift % n) % n] += gates[r][i];
    }
    std::vector<double> next(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < n; ++k) {
        const double s = step[i * n + k];
        if (s == 0.0) continue;
        for (std::size_t j = 0; j < n; ++j) next[i * n + j] += s * m[k * n + j];
      }
    m.swap(next);
  }
  return m;
}

// Compares dispatch_mix with the dense oracle; returns the worst relative error.
inline double mixing_oracle_error(std::size_t n, std::size_t d, std::size_t heads, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const std::size_t rows = num_rows(n);
  const CausalShiftMask mask = build_causal_mask(n, rows);
  std::vector<double> v(n * d), g(n * rows * heads);
  for (double& x : v) x = normal(rng);
  for (std::size_t p = 0; p < n; ++p)
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t h = 0; h < heads; ++h)
        g[(p * rows + r) * heads + h] = mask.at(r, p) ? unit(rng) : 0.0;
  Tensor out = dispatch_mix(Tensor({n, d}, v), Tensor({n, rows, heads}, g), RowDropoutMask::all(rows));
  const std::size_t dh = d / heads;
  double worst = 0.0;
  for (std::size_t h = 0; h < heads; ++h) {
    std::vector<std::vector<double>> gates(rows, std::vector<double>(n));
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t p = 0; p < n; ++p) gates[r][p] = g[(p * rows + r) * heads + h];
    const std::vector<double> m = dense_mixing_matrix(n, gates);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = i + 1; j < n; ++j) {
        if (m[i * n + j] != 0.0) return INFINITY;  // not lower-triangular
      }
      for (std::size_t c = h * dh; c < (h + 1) * dh; ++c) {
        double expect = 0.0;
        for (std::size_t j = 0; j < n; ++j) expect += m[i * n + j] * v[j * d + c];
        const double got = out.data()[i * d + c];
        worst = std::max(worst, std::abs(got - expect) / std::max(std::abs(expect), 1.0));
      }
    }
  }
  return worst;
}

inline CheckResult check_mixing_oracle(const std::vector<std::size_t>& lengths, double tolerance,
                                       std::uint64_t seed) {
  CheckResult result{"oracle-equivalence", true, ""};
  double worst = 0.0;
  for (std::size_t n : lengths) {
    for (std::size_t heads : {std::size_t{1}, std::size_t{2}}) {
      const double err = mixing_oracle_error(n, 6, heads, seed + n);
      worst = std::max(worst, err);
      if (!(err <= tolerance)) {
        result.passed = false;
        result.detail = "N=" + std::to_string(n) + " heads=" + std::to_string(heads) +
                        ": relative error " + std::to_string(err);
        return result;
      }
    }
  }
  std::ostringstream s;
  s << "max relative error " << worst;
  result.detail = s.str();
  return result;
}

struct GradCheckReport {
  std::size_t checked = 0;
  double worst_relative = 0.0;
  std::string worst_parameter;
};

// Central differences for every element of every parameter. The relative
// error uses max(|analytic|, |numeric|, floor) as denominator so entries whose
// true gradient is ~0 are judged on absolute error.
inline GradCheckReport gradient_check(const LmModel& model, const TokenBatch& batch, double h,
                                      double floor) {
  model.zero_grad();
  lm_loss(model, batch, false).backward();
  GradCheckReport report;
  NoGradGuard no_grad;
  for (auto& [name, param] : model.parameters()) {
    Tensor handle = param;
    auto w = handle.mutable_data();
    const std::vector<double> analytic(param.grad().begin(), param.grad().end());
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double saved = w[i];
      w[i] = saved + h;
      const double up = lm_loss(model, batch, false).item();
      w[i] = saved - h;
      const double down = lm_loss(model, batch, false).item();
      w[i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double rel = std::abs(numeric - analytic[i]) /
                         std::max({std::abs(numeric), std::abs(analytic[i]), floor});
      ++report.checked;
      if (rel > report.worst_relative) {
        report.worst_relative = rel;
        report.worst_parameter = name + "[" + std::to_string(i) + "]";
      }
    }
  }
  return report;
}

// Small two-layer dispatcher model used by the gradient suite.
inline ModelConfig gradient_check_config(std::uint64_t seed) {
  ModelConfig cfg;
  cfg.layer_kind = LayerKind::kDispatcher;
  cfg.d_model = 8;
  cfg.d_inner = 12;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.max_seq = 8;
  cfg.vocab_size = 11;
  cfg.seed = seed;
  return cfg;
}

inline constexpr double kGradCheckStep = 1e-5;
inline constexpr double kGradCheckTolerance = 1e-4;
inline constexpr double kGradCheckFloor = 1e-8;

inline CheckResult check_gradients(std::uint64_t seed) {
  CheckResult result{"gradients/dispatcher", true, ""};
  LmModel model(gradient_check_config(seed));
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> tok(0, model.config().vocab_size - 1);
  TokenBatch batch{2, 7, {}, {}};
  for (std::size_t i = 0; i < 14; ++i) {
    batch.inputs.push_back(tok(rng));
    batch.targets.push_back(tok(rng));
  }
  const GradCheckReport r = gradient_check(model, batch, kGradCheckStep, kGradCheckFloor);
  std::ostringstream s;
  s << r.checked << " entries, worst relative error " << r.worst_relative << " at " << r.worst_parameter;
  result.detail = s.str();
  result.passed = r.worst_relative <= kGradCheckTolerance;
  return result;
}

inline const std::vector<std::size_t>& causality_lengths() {
  static const std::vector<std::size_t> lengths = {1, 2, 5, 16, 33, 128};
  return lengths;
}

inline const std::vector<std::size_t>& oracle_lengths() {
  static const std::vector<std::size_t> lengths = {2, 3, 4, 5, 8, 16, 33, 64};
  return lengths;
}

inline std::vector<CheckResult> run_property_suite(std::uint64_t seed) {
  return {check_causality(LayerKind::kDispatcher, causality_lengths(), 20, seed),
          check_causality(LayerKind::kMsa, causality_lengths(), 20, seed),
          check_mixing_oracle(oracle_lengths(), 1e-9, seed), check_gradients(seed)};
}

}  // namespace dispatcher

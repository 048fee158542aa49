// Acceptance gate. Prints one PASS/FAIL line per criterion and exits nonzero
// if any criterion fails. Pass criterion numbers as arguments to run a subset.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "dispatcher/bench.hpp"
#include "dispatcher/checkpoint.hpp"
#include "dispatcher/checks.hpp"
#include "dispatcher/corpus.hpp"
#include "dispatcher/trainer.hpp"

using namespace dispatcher;
namespace fs = std::filesystem;

namespace {

// Tolerances and limits.
constexpr double kOracleTolerance = 1e-9;
constexpr double kDispatcherTimeExponentMax = 1.4;
constexpr double kMsaTimeExponentMin = 1.7;
constexpr double kMacTolerance = 0.05;
constexpr double kDispatcherMemoryResidualMax = 0.10;
constexpr double kDispatcherMemoryExponentMax = 1.15;
constexpr double kMsaMemoryExponentMin = 1.6;
constexpr double kKeepRateTolerance = 0.02;
constexpr double kParityGapMax = 0.25;
constexpr double kOverfitLossMax = 0.1;
constexpr std::size_t kOverfitSteps = 500;
constexpr std::size_t kSmoothingWindow = 50;

constexpr double kMinute = 60.0;
constexpr double kLimitCausality = 1 * kMinute;
constexpr double kLimitOracle = 1 * kMinute;
constexpr double kLimitGradients = 5 * kMinute;
constexpr double kLimitScaling = 30 * kMinute;
constexpr double kLimitParity = 120 * kMinute;

const std::vector<std::size_t> kSweep = {128, 256, 512, 1024, 2048, 4096};

struct Outcome {
  bool passed = false;
  std::string detail;
};

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

std::string fmt(double v, int precision = 4) {
  std::ostringstream s;
  s << std::setprecision(precision) << v;
  return s.str();
}

fs::path data_dir() { return fs::path(DISPATCHER_SOURCE_DIR) / "data"; }

// ---------------------------------------------------------------------------

Outcome criterion_causality() {
  Stopwatch clock;
  std::string detail;
  bool ok = true;
  for (LayerKind kind : {LayerKind::kDispatcher, LayerKind::kMsa}) {
    const CheckResult r = check_causality(kind, causality_lengths(), 20, 2024);
    ok = ok && r.passed;
    detail += to_string(kind) + ": " + r.detail + "; ";
  }
  const double t = clock.seconds();
  return {ok && t < kLimitCausality, detail + "runtime " + fmt(t, 3) + " s"};
}

Outcome criterion_oracle() {
  Stopwatch clock;
  const CheckResult r = check_mixing_oracle(oracle_lengths(), kOracleTolerance, 2024);
  const double t = clock.seconds();
  return {r.passed && t < kLimitOracle, r.detail + "; runtime " + fmt(t, 3) + " s"};
}

Outcome criterion_gradients() {
  Stopwatch clock;
  const CheckResult r = check_gradients(2024);
  const double t = clock.seconds();
  return {r.passed && t < kLimitGradients, r.detail + "; runtime " + fmt(t, 3) + " s"};
}

// Shared by criteria 4 and 5.
struct Sweep {
  std::vector<BenchRecord> dispatcher;
  std::vector<BenchRecord> msa;
  ModelConfig dispatcher_cfg;
  ModelConfig msa_cfg;
  double seconds = 0.0;
};

ModelConfig sweep_config(LayerKind kind) {
  ModelConfig c;
  c.layer_kind = kind;
  c.d_model = 128;
  c.d_inner = 128;
  c.n_layers = 2;
  c.n_heads = 1;
  c.max_seq = kSweep.back();
  c.vocab_size = 256;
  c.seed = 1;
  return c;
}

BenchOptions sweep_options() {
  BenchOptions o;
  o.batch_size = 4;
  o.repeats = 5;
  o.warmup = 2;
  return o;
}

const Sweep& sweep() {
  static const Sweep s = [] {
    Sweep out;
    Stopwatch clock;
    out.dispatcher_cfg = sweep_config(LayerKind::kDispatcher);
    out.msa_cfg = sweep_config(LayerKind::kMsa);
    out.dispatcher = bench_step_time(out.dispatcher_cfg, kSweep, sweep_options());
    out.msa = bench_step_time(out.msa_cfg, kSweep, sweep_options());
    out.seconds = clock.seconds();
    std::ostringstream csv;
    std::vector<BenchRecord> all = out.dispatcher;
    all.insert(all.end(), out.msa.begin(), out.msa.end());
    write_bench_csv(csv, all);
    std::cout << csv.str() << std::flush;
    return out;
  }();
  return s;
}

bool macs_match(const std::vector<BenchRecord>& records, const std::function<std::uint64_t(std::size_t)>& closed,
                std::string& detail) {
  bool ok = true;
  for (const auto& r : records) {
    if (r.failed) continue;
    const double expect = static_cast<double>(closed(r.n));
    const double rel = std::abs(static_cast<double>(r.counted_macs) - expect) / expect;
    if (rel > kMacTolerance) {
      ok = false;
      detail += "N=" + std::to_string(r.n) + " MAC deviation " + fmt(rel) + "; ";
    }
  }
  return ok;
}

std::size_t failures(const std::vector<BenchRecord>& records) {
  return static_cast<std::size_t>(std::count_if(records.begin(), records.end(), [](const auto& r) { return r.failed; }));
}

Outcome criterion_scaling() {
  const Sweep& s = sweep();
  std::string detail;
  double disp = NAN, msa = NAN;
  try {
    disp = fit_scaling_exponent(s.dispatcher);
    msa = fit_scaling_exponent(s.msa);
  } catch (const ContractError& e) {
    detail += std::string(e.what()) + "; ";
  }
  const std::size_t batch = sweep_options().batch_size;
  bool macs = macs_match(s.dispatcher, [&](std::size_t n) { return dispatcher_mixing_macs(s.dispatcher_cfg, batch, n); }, detail);
  macs = macs_match(s.msa, [&](std::size_t n) { return msa_mixing_macs(s.msa_cfg, batch, n); }, detail) && macs;
  const bool ok = disp < kDispatcherTimeExponentMax && msa > kMsaTimeExponentMin && macs &&
                  failures(s.dispatcher) == 0 && failures(s.msa) == 0 && s.seconds < kLimitScaling;
  detail += "dispatcher exponent " + fmt(disp) + " (< " + fmt(kDispatcherTimeExponentMax) + "), msa exponent " +
            fmt(msa) + " (> " + fmt(kMsaTimeExponentMin) + "), MACs " + (macs ? "match" : "deviate") +
            " closed forms, failed points " + std::to_string(failures(s.dispatcher) + failures(s.msa)) +
            ", sweep runtime " + fmt(s.seconds, 4) + " s";
  return {ok, detail};
}

Outcome criterion_memory() {
  const Sweep& s = sweep();
  std::vector<double> dn, db, mn, mb;
  for (const auto& r : s.dispatcher)
    if (!r.failed) dn.push_back(static_cast<double>(r.n)), db.push_back(static_cast<double>(r.peak_tensor_bytes));
  for (const auto& r : s.msa)
    if (!r.failed) mn.push_back(static_cast<double>(r.n)), mb.push_back(static_cast<double>(r.peak_tensor_bytes));
  double residual = NAN, disp_exp = NAN, msa_exp = NAN;
  std::string detail;
  try {
    residual = linear_fit_max_residual(dn, db);
    disp_exp = fit_loglog_slope(dn, db);
    msa_exp = fit_loglog_slope(mn, mb);
  } catch (const ContractError& e) {
    detail += std::string(e.what()) + "; ";
  }
  const bool ok = residual < kDispatcherMemoryResidualMax && disp_exp < kDispatcherMemoryExponentMax &&
                  msa_exp > kMsaMemoryExponentMin;
  detail += "dispatcher linear-fit residual " + fmt(residual) + " (< " + fmt(kDispatcherMemoryResidualMax) +
            "), dispatcher exponent " + fmt(disp_exp) + " (< " + fmt(kDispatcherMemoryExponentMax) +
            "), msa exponent " + fmt(msa_exp) + " (> " + fmt(kMsaMemoryExponentMin) + ")";
  return {ok, detail};
}

Outcome criterion_dropout() {
  std::string detail;
  // p = 1 removes every row: the layer is exactly linear3(linear2(x)).
  std::mt19937_64 rng(5);
  const DispatcherParams params = DispatcherParams::init(32, 2, 256, 0.1, 0.1, rng);
  std::normal_distribution<double> normal;
  Buffer xs(3 * 200 * 32);
  for (double& v : xs) v = normal(rng);
  const Tensor x({3, 200, 32}, std::move(xs));
  const Tensor dropped = dispatcher_forward(x, params, true, 1.0, &rng);
  const Tensor per_token = params.linear3(params.linear2(x));
  const bool exact = std::equal(dropped.data().begin(), dropped.data().end(), per_token.data().begin());
  detail += std::string("p=1 per-token map ") + (exact ? "exact" : "differs");

  std::size_t kept = 0;
  constexpr std::size_t samples = 10000;
  for (std::size_t i = 0; i < samples; ++i) kept += sample_row_mask(1, 0.5, rng).kept();
  const double rate = static_cast<double>(kept) / samples;
  const bool rate_ok = std::abs(rate - 0.5) <= kKeepRateTolerance;
  detail += "; keep rate " + fmt(rate) + " over 1e4 samples";

  ModelConfig cfg = sweep_config(LayerKind::kDispatcher);
  cfg.max_seq = 2048;
  BenchOptions opt = sweep_options();
  opt.repeats = 20;
  opt.warmup = 2;
  const DropoutTiming timing = bench_row_dropout(cfg, 2048, 0.5, opt);
  const bool faster = timing.mean_with < timing.mean_without;
  detail += "; N=2048 mean step " + fmt(timing.mean_without, 5) + " s (p=0) vs " + fmt(timing.mean_with, 5) +
            " s (p=0.5)";
  return {exact && rate_ok && faster, detail};
}

ModelConfig parity_config(LayerKind kind, std::size_t vocab) {
  ModelConfig c;
  c.layer_kind = kind;
  c.d_model = 128;
  c.d_inner = 128;
  c.n_layers = 4;
  c.n_heads = 1;
  c.max_seq = 256;
  c.vocab_size = vocab;
  c.seed = 17;
  return c;
}

// Perplexity of the add-one smoothed unigram distribution of the training split.
double unigram_perplexity(const std::vector<std::size_t>& train, const std::vector<std::size_t>& test,
                          std::size_t vocab) {
  std::vector<double> counts(vocab, 1.0);
  for (std::size_t id : train) counts[id] += 1.0;
  const double total = static_cast<double>(train.size() + vocab);
  double nll = 0.0;
  for (std::size_t i = 1; i < test.size(); ++i) nll -= std::log(counts[test[i]] / total);
  return std::exp(nll / static_cast<double>(test.size() - 1));
}

Outcome criterion_parity() {
  Stopwatch clock;
  const fs::path base = data_dir() / "canterbury";
  const auto train_tokens = load_split_tokens(base, Split::kTrain, TokenizerMode::kChar);
  const Vocab vocab = build_vocab(train_tokens, 1, 0);
  const std::vector<std::size_t> train_ids = vocab.encode(train_tokens);
  const std::vector<std::size_t> test_ids = load_split(base, Split::kTest, TokenizerMode::kChar, vocab).ids;
  const double unigram = unigram_perplexity(train_ids, test_ids, vocab.size());

  TrainConfig tc;
  tc.batch_size = 8;
  tc.seq_len = 256;
  tc.steps = 3000;
  tc.learning_rate = 1e-3;
  tc.warmup_steps = 200;
  tc.seed = 17;
  std::map<LayerKind, double> ppl;
  std::string detail = "unigram " + fmt(unigram);
  for (LayerKind kind : {LayerKind::kDispatcher, LayerKind::kMsa}) {
    LmModel model(parity_config(kind, vocab.size()));
    Stopwatch run;
    const TrainReport report = train(model, train_ids, tc);
    ppl[kind] = perplexity(model, test_ids);
    detail += "; " + to_string(kind) + " test ppl " + fmt(ppl[kind]) + " (final train loss " +
              fmt(report.losses.back()) + ", " + fmt(run.seconds(), 4) + " s)";
    std::cout << "  [parity] " << to_string(kind) << " test perplexity " << ppl[kind] << '\n' << std::flush;
  }
  const double a = ppl[LayerKind::kDispatcher], b = ppl[LayerKind::kMsa];
  const double gap = std::abs(a - b) / std::min(a, b);
  const double t = clock.seconds();
  detail += "; relative gap " + fmt(gap) + "; runtime " + fmt(t, 4) + " s";
  return {a < unigram && b < unigram && gap < kParityGapMax && t < kLimitParity, detail};
}

Outcome criterion_overfit() {
  const fs::path base = data_dir() / "canterbury";
  const auto tokens = load_split_tokens(base, Split::kTrain, TokenizerMode::kChar);
  const Vocab vocab = build_vocab(tokens, 1, 0);
  const std::vector<std::size_t> ids = vocab.encode(tokens);
  constexpr std::size_t batch_size = 4, seq = 64;
  TokenBatch batch{batch_size, seq, {}, {}};
  for (std::size_t b = 0; b < batch_size; ++b) {
    const std::size_t start = 1000 + b * 10007;
    batch.inputs.insert(batch.inputs.end(), ids.begin() + start, ids.begin() + start + seq);
    batch.targets.insert(batch.targets.end(), ids.begin() + start + 1, ids.begin() + start + seq + 1);
  }
  TrainConfig tc;
  tc.steps = kOverfitSteps;
  tc.learning_rate = 3e-3;
  tc.warmup_steps = 50;
  tc.seed = 3;
  bool ok = true;
  std::string detail;
  for (LayerKind kind : {LayerKind::kDispatcher, LayerKind::kMsa}) {
    ModelConfig mc = parity_config(kind, vocab.size());
    mc.n_layers = 2;
    mc.max_seq = seq;
    LmModel model(mc);
    const TrainReport r = train(model, [&] { return batch; }, tc);
    std::size_t reached = 0;
    while (reached < r.losses.size() && r.losses[reached] >= kOverfitLossMax) ++reached;
    bool monotone = true;
    double previous = INFINITY;
    for (std::size_t w = 0; w + kSmoothingWindow <= r.losses.size(); w += kSmoothingWindow) {
      double mean = 0.0;
      for (std::size_t i = w; i < w + kSmoothingWindow; ++i) mean += r.losses[i];
      mean /= kSmoothingWindow;
      monotone = monotone && mean < previous;
      previous = mean;
    }
    const bool kind_ok = reached < r.losses.size() && monotone;
    ok = ok && kind_ok;
    detail += to_string(kind) + ": loss < " + fmt(kOverfitLossMax) + " " +
              (reached < r.losses.size() ? "at step " + std::to_string(reached + 1) : "never") +
              ", final " + fmt(r.losses.back()) + ", 50-step means " + (monotone ? "decreasing" : "not monotone") + "; ";
  }
  return {ok, detail};
}

Outcome criterion_determinism() {
  const fs::path base = data_dir() / "tiny";
  const auto tokens = load_split_tokens(base, Split::kTrain, TokenizerMode::kChar);
  const Vocab vocab = build_vocab(tokens, 1, 0);
  const auto train_ids = vocab.encode(tokens);
  const auto valid_ids = load_split(base, Split::kValid, TokenizerMode::kChar, vocab).ids;
  const fs::path dir = fs::temp_directory_path() / "dispatcher_acceptance_determinism";
  fs::create_directories(dir);
  bool ok = true;
  std::string detail;
  for (LayerKind kind : {LayerKind::kDispatcher, LayerKind::kMsa}) {
    std::vector<std::vector<double>> curves;
    std::vector<std::string> checkpoints;
    std::vector<double> ppls;
    for (int run = 0; run < 2; ++run) {
      ModelConfig mc = parity_config(kind, vocab.size());
      mc.d_model = 32;
      mc.d_inner = 32;
      mc.n_layers = 2;
      mc.max_seq = 64;
      mc.dropout_p = 0.1;
      mc.row_dropout_p = 0.2;
      LmModel model(mc);
      TrainConfig tc;
      tc.batch_size = 4;
      tc.seq_len = 64;
      tc.steps = 60;
      tc.warmup_steps = 10;
      tc.seed = 99;
      tc.checkpoint_path = dir / (to_string(kind) + std::to_string(run) + ".ckpt");
      curves.push_back(train(model, train_ids, tc).losses);
      checkpoints.push_back(read_text_file(tc.checkpoint_path));
      ppls.push_back(perplexity(load_checkpoint(tc.checkpoint_path).model, valid_ids));
    }
    const bool same = curves[0] == curves[1] && checkpoints[0] == checkpoints[1] && ppls[0] == ppls[1];
    ok = ok && same;
    detail += to_string(kind) + (same ? ": identical" : ": differs") + " (valid ppl " + fmt(ppls[0], 10) + "); ";
  }
  fs::remove_all(dir);
  return {ok, detail};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"causality suite", criterion_causality},
      {"oracle equivalence", criterion_oracle},
      {"gradient checks", criterion_gradients},
      {"scaling reproduction", criterion_scaling},
      {"memory claim", criterion_memory},
      {"dropout claims", criterion_dropout},
      {"training parity", criterion_parity},
      {"overfit one batch", criterion_overfit},
      {"determinism", criterion_determinism},
  };
  std::set<std::size_t> selected;
  for (int i = 1; i < argc; ++i) selected.insert(static_cast<std::size_t>(std::stoul(argv[i])));
  bool all = true;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    if (!selected.empty() && !selected.count(i + 1)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    all = all && o.passed;
    std::cout << (o.passed ? "PASS" : "FAIL") << " criterion " << i + 1 << " (" << criteria[i].first
              << "): " << o.detail << '\n'
              << std::flush;
  }
  return all ? 0 : 1;
}

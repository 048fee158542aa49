#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <new>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "dispatcher/bench.hpp"
#include "dispatcher/checkpoint.hpp"
#include "dispatcher/checks.hpp"
#include "dispatcher/corpus.hpp"
#include "dispatcher/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace dispatcher;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitNumeric = 3;
constexpr int kExitProperty = 4;

fs::path default_out_dir() {
  const char* env = std::getenv("DISPATCHER_OUT_DIR");
  return env && *env ? fs::path(env) : fs::path("runs");
}

std::string fnv1a_hex(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) return "";
  std::uint64_t h = 0xcbf29ce484222325ULL;
  char buf[1 << 16];
  while (in.read(buf, sizeof buf) || in.gcount() > 0) {
    for (std::streamsize i = 0; i < in.gcount(); ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 0x100000001b3ULL;
    }
  }
  std::ostringstream s;
  s << "fnv1a64:" << std::hex << std::setw(16) << std::setfill('0') << h;
  return s.str();
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

// Options that may also come from a JSON config file. A value given on the
// command line wins over the file, which wins over the built-in default.
class Settings {
 public:
  template <typename T>
  CLI::Option* add(CLI::App& app, const std::string& flag, const std::string& key, T& var,
                   const std::string& help) {
    CLI::Option* opt = app.add_option(flag, var, help)->capture_default_str();
    entries_.push_back({key, opt, [&var](const json& j) { var = j.get<T>(); },
                        [&var] { return json(var); }});
    return opt;
  }

  CLI::Option* add_config(CLI::App& app) {
    return app.add_option("--config", config_path_, "JSON file of option values (keys as listed in the manifest)");
  }

  void resolve() {
    if (config_path_.empty()) return;
    json cfg;
    try {
      cfg = json::parse(read_text_file(config_path_));
    } catch (const json::exception& e) {
      throw DataError(config_path_ + ": " + e.what());
    }
    if (!cfg.is_object()) throw DataError(config_path_ + ": expected a JSON object");
    for (const auto& [key, value] : cfg.items()) {
      Entry* e = find(key);
      if (!e) throw DataError(config_path_ + ": unknown key '" + key + "'");
      from_file_.insert(key);
      if (e->option->count() > 0) continue;
      try {
        e->load(value);
      } catch (const json::exception& ex) {
        throw DataError(config_path_ + ": bad value for '" + key + "': " + ex.what());
      }
    }
  }

  bool explicit_value(const std::string& key) const {
    for (const auto& e : entries_) {
      if (e.key == key) return e.option->count() > 0 || from_file_.count(key) > 0;
    }
    return false;
  }

  json resolved() const {
    json j = json::object();
    for (const auto& e : entries_) j[e.key] = e.dump();
    return j;
  }

  const std::string& config_path() const { return config_path_; }

 private:
  struct Entry {
    std::string key;
    CLI::Option* option;
    std::function<void(const json&)> load;
    std::function<json()> dump;
  };

  Entry* find(const std::string& key) {
    for (auto& e : entries_)
      if (e.key == key) return &e;
    return nullptr;
  }

  std::vector<Entry> entries_;
  std::set<std::string> from_file_;
  std::string config_path_;
};

// Model shape options shared by train, eval and bench.
struct ModelFlags {
  std::string layer = "dispatcher";
  std::size_t d_model = 128;
  std::size_t d_inner = 128;
  std::size_t layers = 2;
  std::size_t heads = 1;
  double dropout = 0.0;
  double row_dropout = -1.0;  // negative: same as dropout

  void add(CLI::App& app, Settings& s, bool allow_both = false) {
    std::vector<std::string> kinds = {"dispatcher", "msa"};
    if (allow_both) kinds.push_back("both");
    s.add(app, "--layer", "layer", layer, "mixing layer kind")->check(CLI::IsMember(kinds));
    s.add(app, "--d-model", "d_model", d_model, "embedding width");
    s.add(app, "--d-inner", "d_inner", d_inner, "feed-forward width");
    s.add(app, "--layers", "n_layers", layers, "number of blocks");
    s.add(app, "--heads", "n_heads", heads, "mixing heads");
    s.add(app, "--dropout", "dropout_p", dropout, "residual dropout probability");
    s.add(app, "--row-dropout", "row_dropout_p", row_dropout,
          "dispatcher row dropout probability (negative: use --dropout)");
  }

  ModelConfig config(std::size_t max_seq, std::size_t vocab, std::uint64_t seed) const {
    ModelConfig c;
    c.layer_kind = parse_layer_kind(layer);
    c.d_model = d_model;
    c.d_inner = d_inner;
    c.n_layers = layers;
    c.n_heads = heads;
    c.max_seq = max_seq;
    c.vocab_size = vocab;
    c.dropout_p = dropout;
    c.row_dropout_p = row_dropout < 0.0 ? dropout : row_dropout;
    c.seed = seed;
    c.validate();
    return c;
  }
};

json base_manifest(const std::string& command, const Settings& s, std::uint64_t seed, const fs::path& out) {
  json m;
  m["command"] = command;
  m["config"] = s.resolved();
  m["config_file"] = s.config_path();
  m["seed"] = seed;
  m["out_dir"] = out.string();
  m["corpus"] = json::object();
  m["inputs"] = json::object();
  m["artifacts"] = json::object();
  return m;
}

void record_corpus(json& manifest, const fs::path& base) {
  for (Split split : {Split::kTrain, Split::kValid, Split::kTest}) {
    const fs::path p = split_path(base, split);
    manifest["corpus"][to_string(split)] = p.string();
    if (fs::exists(p)) manifest["inputs"][p.string()] = fnv1a_hex(p);
  }
}

fs::path prepare_out_dir(const std::string& flag) {
  fs::path out = flag.empty() ? default_out_dir() : fs::path(flag);
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) throw DataError("cannot create output directory " + out.string() + ": " + ec.message());
  return out;
}

// ---------------------------------------------------------------- train

struct TrainFlags {
  ModelFlags model;
  std::string corpus;
  std::string tokenizer = "char";
  std::size_t vocab_max = 0;
  std::size_t min_count = 1;
  std::size_t batch = 4;
  std::size_t seq = 64;
  std::size_t steps = 1000;
  double lr = 1e-3;
  std::size_t warmup = 200;
  double clip = 1.0;
  std::uint64_t seed = 0;
  std::size_t eval_every = 0;
  std::string out;
};

int cmd_train(const TrainFlags& f, const Settings& s) {
  const fs::path out = prepare_out_dir(f.out);
  const fs::path base = f.corpus;
  json manifest = base_manifest("train", s, f.seed, out);
  record_corpus(manifest, base);
  write_json(out / "manifest.json", manifest);

  const TokenizerMode mode = parse_tokenizer_mode(f.tokenizer);
  const auto train_tokens = load_split_tokens(base, Split::kTrain, mode);
  const Vocab vocab = build_vocab(train_tokens, f.min_count, f.vocab_max);
  vocab.save(out / "vocab.txt");
  const std::vector<std::size_t> train_ids = vocab.encode(train_tokens);
  std::vector<std::size_t> valid_ids;
  if (fs::exists(split_path(base, Split::kValid))) {
    const auto valid_tokens = load_split_tokens(base, Split::kValid, mode);
    std::cout << "valid OOV rate: " << oov_rate(valid_tokens, vocab) << '\n';
    valid_ids = vocab.encode(valid_tokens);
  }

  const ModelConfig mc = f.model.config(f.seq, vocab.size(), f.seed);
  LmModel model(mc);
  std::cout << "layer=" << to_string(mc.layer_kind) << " vocab=" << vocab.size()
            << " parameters=" << model.parameter_count() << '\n';

  TrainConfig tc;
  tc.batch_size = f.batch;
  tc.seq_len = f.seq;
  tc.steps = f.steps;
  tc.learning_rate = f.lr;
  tc.warmup_steps = f.warmup;
  tc.clip_norm = f.clip;
  tc.seed = f.seed;
  tc.eval_every = f.eval_every;
  tc.checkpoint_path = out / "model.ckpt";
  tc.log_path = out / "loss.csv";
  fs::remove(tc.log_path);

  TrainHooks hooks;
  if (valid_ids.size() >= 2) hooks.valid = valid_ids;
  hooks.metadata = {{"tokenizer", f.tokenizer}, {"steps", f.steps}, {"seed", f.seed}};
  const std::size_t report_every = std::max<std::size_t>(1, f.steps / 20);
  hooks.on_step = [&](std::size_t step, double loss) {
    if ((step + 1) % report_every == 0) std::cout << "step " << step + 1 << " loss " << loss << '\n';
  };
  const TrainReport report = train(model, train_ids, tc, hooks);

  json summary = {{"final_loss", report.losses.back()}, {"seconds", report.seconds},
                  {"parameters", model.parameter_count()}};
  if (!report.valid_perplexities.empty()) {
    summary["valid_perplexity"] = report.valid_perplexities.back().second;
    std::cout << "valid perplexity=" << std::setprecision(17) << report.valid_perplexities.back().second
              << '\n';
  }
  manifest["artifacts"] = {{"model.ckpt", fnv1a_hex(tc.checkpoint_path)},
                           {"vocab.txt", fnv1a_hex(out / "vocab.txt")}};
  manifest["summary"] = summary;
  write_json(out / "manifest.json", manifest);
  return kExitOk;
}

// ---------------------------------------------------------------- eval

struct EvalFlags {
  ModelFlags model;
  std::size_t seq = 0;
  std::string checkpoint;
  std::string vocab;
  std::string corpus;
  std::string split = "test";
  std::string tokenizer;
  std::string out;
};

// Requested model fields must agree with the checkpoint.
void check_against_checkpoint(const EvalFlags& f, const Settings& s, const ModelConfig& ckpt) {
  auto mismatch = [](const std::string& field, const std::string& have, const std::string& want) {
    throw DataError("checkpoint/config mismatch: field '" + field + "' is " + have +
                    " in the checkpoint but " + want + " was requested");
  };
  auto check = [&](const std::string& key, std::size_t have, std::size_t want) {
    if (s.explicit_value(key) && have != want) mismatch(key, std::to_string(have), std::to_string(want));
  };
  if (s.explicit_value("layer") && parse_layer_kind(f.model.layer) != ckpt.layer_kind) {
    mismatch("layer", to_string(ckpt.layer_kind), f.model.layer);
  }
  check("d_model", ckpt.d_model, f.model.d_model);
  check("d_inner", ckpt.d_inner, f.model.d_inner);
  check("n_layers", ckpt.n_layers, f.model.layers);
  check("n_heads", ckpt.n_heads, f.model.heads);
  check("max_seq", ckpt.max_seq, f.seq);
}

int cmd_eval(const EvalFlags& f, const Settings& s) {
  const fs::path out = prepare_out_dir(f.out);
  json manifest = base_manifest("eval", s, 0, out);
  record_corpus(manifest, f.corpus);
  manifest["inputs"][f.checkpoint] = fnv1a_hex(f.checkpoint);
  write_json(out / "manifest.json", manifest);

  LoadedCheckpoint loaded = load_checkpoint(f.checkpoint);
  const ModelConfig& mc = loaded.model.config();
  check_against_checkpoint(f, s, mc);
  const fs::path vocab_path = f.vocab.empty() ? fs::path(f.checkpoint).parent_path() / "vocab.txt" : fs::path(f.vocab);
  const Vocab vocab = Vocab::load(vocab_path);
  if (vocab.size() != mc.vocab_size) {
    throw DataError("checkpoint/config mismatch: field 'vocab_size' is " + std::to_string(mc.vocab_size) +
                    " in the checkpoint but " + vocab_path.string() + " has " +
                    std::to_string(vocab.size()) + " entries");
  }
  const std::string tok = f.tokenizer.empty() ? loaded.metadata.value("tokenizer", std::string("char")) : f.tokenizer;
  const Split split = f.split == "valid" ? Split::kValid : f.split == "train" ? Split::kTrain : Split::kTest;
  const auto tokens = load_split_tokens(f.corpus, split, parse_tokenizer_mode(tok));
  const std::vector<std::size_t> ids = vocab.encode(tokens);
  const double ppl = perplexity(loaded.model, ids);
  std::cout << "perplexity=" << std::setprecision(17) << ppl << '\n';
  write_json(out / "eval.json", {{"checkpoint", f.checkpoint},
                                 {"split", f.split},
                                 {"tokens", ids.size()},
                                 {"oov_rate", oov_rate(tokens, vocab)},
                                 {"perplexity", ppl}});
  return kExitOk;
}

// ---------------------------------------------------------------- bench

struct BenchFlags {
  ModelFlags model;
  std::vector<std::size_t> ns = {128, 256, 512, 1024, 2048, 4096};
  std::size_t batch = 4;
  std::size_t repeats = 5;
  std::size_t warmup = 2;
  std::size_t vocab = 256;
  std::size_t budget_mb = 0;
  std::uint64_t seed = 0;
  std::string out;
};

int cmd_bench(const BenchFlags& f, const Settings& s) {
  const fs::path out = prepare_out_dir(f.out);
  write_json(out / "manifest.json", base_manifest("bench", s, f.seed, out));
  std::size_t max_n = 1;
  for (std::size_t n : f.ns) max_n = std::max(max_n, n);
  BenchOptions opt;
  opt.batch_size = f.batch;
  opt.repeats = f.repeats;
  opt.warmup = f.warmup;
  opt.seed = f.seed;
  if (f.budget_mb) opt.memory_budget = f.budget_mb << 20;

  std::vector<std::string> kinds;
  if (f.model.layer == "both") kinds = {"dispatcher", "msa"};
  else kinds = {f.model.layer};
  std::vector<BenchRecord> all;
  json report = {{"threads", 1}, {"exponents", json::object()}};
  std::cout << "# single-threaded timing, batch " << f.batch << ", " << f.repeats << " repeats after "
            << f.warmup << " warmup steps\n";
  for (const auto& kind : kinds) {
    ModelFlags mf = f.model;
    mf.layer = kind;
    const ModelConfig mc = mf.config(max_n, f.vocab, f.seed);
    const auto records = bench_step_time(mc, f.ns, opt);
    all.insert(all.end(), records.begin(), records.end());
    try {
      const double slope = fit_scaling_exponent(records);
      report["exponents"][kind] = slope;
      std::cout << "# " << kind << " time exponent " << slope << '\n';
    } catch (const ContractError& e) {
      std::cout << "# " << kind << ": " << e.what() << '\n';
    }
  }
  std::ofstream csv(out / "bench.csv", std::ios::trunc);
  write_bench_csv(csv, all);
  write_bench_csv(std::cout, all);
  write_json(out / "bench.json", report);
  return kExitOk;
}

// ---------------------------------------------------------------- generate

struct GenerateFlags {
  std::string checkpoint;
  std::string vocab;
  std::string prompt;
  std::string tokenizer;
  std::size_t steps = 100;
  double temperature = 0.0;
  std::uint64_t seed = 0;
  std::string out;
};

int cmd_generate(const GenerateFlags& f, const Settings& s) {
  const fs::path out = prepare_out_dir(f.out);
  json manifest = base_manifest("generate", s, f.seed, out);
  manifest["inputs"][f.checkpoint] = fnv1a_hex(f.checkpoint);
  write_json(out / "manifest.json", manifest);
  LoadedCheckpoint loaded = load_checkpoint(f.checkpoint);
  const fs::path vocab_path = f.vocab.empty() ? fs::path(f.checkpoint).parent_path() / "vocab.txt" : fs::path(f.vocab);
  const Vocab vocab = Vocab::load(vocab_path);
  const TokenizerMode mode = parse_tokenizer_mode(
      f.tokenizer.empty() ? loaded.metadata.value("tokenizer", std::string("char")) : f.tokenizer);
  std::vector<std::size_t> prompt = vocab.encode(preprocess(f.prompt, mode));
  if (prompt.empty()) prompt.push_back(kEosId);
  std::mt19937_64 rng(f.seed);
  const auto ids = generate(loaded.model, prompt, f.steps, f.temperature, rng);
  std::cout << detokenize(vocab.decode(ids), mode) << '\n';
  return kExitOk;
}

// ---------------------------------------------------------------- check

int cmd_check(std::uint64_t seed, const Settings& s, const std::string& out_flag) {
  const fs::path out = prepare_out_dir(out_flag);
  write_json(out / "manifest.json", base_manifest("check", s, seed, out));
  bool ok = true;
  for (const auto& r : run_property_suite(seed)) {
    std::cout << (r.passed ? "PASS " : "FAIL ") << r.name << ": " << r.detail << '\n';
    ok = ok && r.passed;
  }
  return ok ? kExitOk : kExitProperty;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dispatcher and masked self-attention language models: train, evaluate, benchmark"};
  app.require_subcommand(1);
  app.failure_message(CLI::FailureMessage::help);
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);

  TrainFlags tf;
  Settings ts;
  CLI::App* train_cmd = app.add_subcommand("train", "train a model on <corpus>.train.txt");
  ts.add_config(*train_cmd);
  tf.model.add(*train_cmd, ts);
  ts.add(*train_cmd, "--corpus", "corpus", tf.corpus, "corpus base path (<base>.train.txt etc.)")->required();
  ts.add(*train_cmd, "--tokenizer", "tokenizer", tf.tokenizer, "char or word")
      ->check(CLI::IsMember({"char", "word"}));
  ts.add(*train_cmd, "--vocab-max", "vocab_max", tf.vocab_max, "vocabulary cap including <UNK>/<EOS> (0: none)");
  ts.add(*train_cmd, "--min-count", "min_count", tf.min_count, "minimum token count kept in the vocabulary");
  ts.add(*train_cmd, "--batch", "batch_size", tf.batch, "sequences per batch");
  ts.add(*train_cmd, "--seq", "seq_len", tf.seq, "tokens per sequence (also max_seq)");
  ts.add(*train_cmd, "--steps", "steps", tf.steps, "optimizer steps");
  ts.add(*train_cmd, "--lr", "learning_rate", tf.lr, "peak learning rate");
  ts.add(*train_cmd, "--warmup", "warmup_steps", tf.warmup, "linear warmup steps");
  ts.add(*train_cmd, "--clip", "clip_norm", tf.clip, "global gradient norm cap");
  ts.add(*train_cmd, "--seed", "seed", tf.seed, "model and trainer seed");
  ts.add(*train_cmd, "--eval-every", "eval_every", tf.eval_every, "checkpoint interval (0: end only)");
  ts.add(*train_cmd, "--out", "out", tf.out, "output directory (default: $DISPATCHER_OUT_DIR or runs)");

  EvalFlags ef;
  Settings es;
  CLI::App* eval_cmd = app.add_subcommand("eval", "perplexity of a checkpoint on a corpus split");
  es.add_config(*eval_cmd);
  ef.model.add(*eval_cmd, es);
  es.add(*eval_cmd, "--seq", "max_seq", ef.seq, "expected max_seq (checked only when given)");
  es.add(*eval_cmd, "--checkpoint", "checkpoint", ef.checkpoint, "checkpoint file")->required();
  es.add(*eval_cmd, "--vocab", "vocab", ef.vocab, "vocabulary file (default: next to the checkpoint)");
  es.add(*eval_cmd, "--corpus", "corpus", ef.corpus, "corpus base path")->required();
  es.add(*eval_cmd, "--split", "split", ef.split, "train, valid or test")
      ->check(CLI::IsMember({"train", "valid", "test"}));
  es.add(*eval_cmd, "--tokenizer", "tokenizer", ef.tokenizer, "char or word (default: from checkpoint)");
  es.add(*eval_cmd, "--out", "out", ef.out, "output directory (default: $DISPATCHER_OUT_DIR or runs)");

  BenchFlags bf;
  Settings bs;
  CLI::App* bench_cmd = app.add_subcommand("bench", "step time and memory versus sequence length");
  bs.add_config(*bench_cmd);
  bf.model.layer = "both";
  bf.model.add(*bench_cmd, bs, /*allow_both=*/true);
  bs.add(*bench_cmd, "--n", "n", bf.ns, "sequence lengths")->delimiter(',')->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);
  bs.add(*bench_cmd, "--batch", "batch_size", bf.batch, "sequences per step");
  bs.add(*bench_cmd, "--repeats", "repeats", bf.repeats, "timed steps per N (>= 5)");
  bs.add(*bench_cmd, "--warmup", "warmup", bf.warmup, "untimed steps per N");
  bs.add(*bench_cmd, "--vocab", "vocab_size", bf.vocab, "vocabulary size of the synthetic model");
  bs.add(*bench_cmd, "--memory-budget-mb", "memory_budget_mb", bf.budget_mb, "tensor memory cap (0: none)");
  bs.add(*bench_cmd, "--seed", "seed", bf.seed, "seed");
  bs.add(*bench_cmd, "--out", "out", bf.out, "output directory (default: $DISPATCHER_OUT_DIR or runs)");

  GenerateFlags gf;
  Settings gs;
  CLI::App* gen_cmd = app.add_subcommand("generate", "extend a prompt with a trained model");
  gs.add_config(*gen_cmd);
  gs.add(*gen_cmd, "--checkpoint", "checkpoint", gf.checkpoint, "checkpoint file")->required();
  gs.add(*gen_cmd, "--vocab", "vocab", gf.vocab, "vocabulary file (default: next to the checkpoint)");
  gs.add(*gen_cmd, "--prompt", "prompt", gf.prompt, "prompt text");
  gs.add(*gen_cmd, "--tokenizer", "tokenizer", gf.tokenizer, "char or word (default: from checkpoint)");
  gs.add(*gen_cmd, "--steps", "steps", gf.steps, "tokens to generate");
  gs.add(*gen_cmd, "--temperature", "temperature", gf.temperature, "sampling temperature (0: greedy)");
  gs.add(*gen_cmd, "--seed", "seed", gf.seed, "sampling seed");
  gs.add(*gen_cmd, "--out", "out", gf.out, "output directory (default: $DISPATCHER_OUT_DIR or runs)");

  std::uint64_t check_seed = 0;
  std::string check_out;
  Settings cs;
  CLI::App* check_cmd = app.add_subcommand("check", "causality, oracle and gradient property suites");
  cs.add_config(*check_cmd);
  cs.add(*check_cmd, "--seed", "seed", check_seed, "seed");
  cs.add(*check_cmd, "--out", "out", check_out, "output directory (default: $DISPATCHER_OUT_DIR or runs)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*train_cmd) {
      ts.resolve();
      return cmd_train(tf, ts);
    }
    if (*eval_cmd) {
      es.resolve();
      return cmd_eval(ef, es);
    }
    if (*bench_cmd) {
      bs.resolve();
      return cmd_bench(bf, bs);
    }
    if (*gen_cmd) {
      gs.resolve();
      return cmd_generate(gf, gs);
    }
    cs.resolve();
    return cmd_check(check_seed, cs, check_out);
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::bad_alloc&) {
    std::cerr << "error: out of memory\n";
    return 1;
  }
}

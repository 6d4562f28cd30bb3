#include <chrono>
#include <fstream>
#include <functional>
#include <map>
#include <ostream>
#include <sstream>

#include "prunecast/analysis.hpp"
#include "prunecast/app.hpp"
#include "prunecast/checkpoint.hpp"
#include "prunecast/errors.hpp"

namespace prunecast {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Run {
  std::string verb;
  RunConfig cfg;
  CommandOptions opts;
  fs::path out;
  std::ostream& log;
  std::vector<std::string> artifacts;
  json timing = json::object();

  void write_text(const fs::path& rel, const std::string& text) {
    const fs::path p = out / rel;
    fs::create_directories(p.parent_path());
    std::ofstream os(p, std::ios::binary);
    if (!os) throw Error("cannot write " + p.string());
    os << text;
    artifacts.push_back(rel.generic_string());
  }
  void write_json(const fs::path& rel, const json& j) { write_text(rel, j.dump(2) + "\n"); }
  template <class Fn>
  void write_with(const fs::path& rel, Fn fn) {
    std::ostringstream os;
    fn(os);
    write_text(rel, os.str());
  }
  void save(const fs::path& rel, const Forecaster& m, const ImportanceLedger* ledger = nullptr) {
    const fs::path p = out / rel;
    fs::create_directories(p.parent_path());
    save_checkpoint(p.string(), m, ledger);
    artifacts.push_back(rel.generic_string());
  }
};

struct Data {
  std::shared_ptr<const SeriesTable> table;
  SplitSpec split;
  WindowSet train, val, test;
};

Data load_data(const RunConfig& cfg, const ForecasterConfig& model) {
  Data d;
  d.table = load_table(cfg.data);
  d.split = make_split(cfg.data, d.table->length(), model.context, model.horizon);
  d.train = make_windows(d.table, d.split, Part::train);
  d.val = make_windows(d.table, d.split, Part::val);
  d.test = make_windows(d.table, d.split, Part::test);
  return d;
}

// A checkpoint fixes the window geometry. Explicit model keys in the config
// must agree with it.
Forecaster load_model(const Run& run) {
  if (!run.opts.checkpoint) throw ConfigError(run.verb + " needs --checkpoint");
  Checkpoint ck = load_checkpoint(*run.opts.checkpoint);
  const ForecasterConfig& have = ck.model.config();
  const json want = to_json(run.cfg.model), got = to_json(have);
  std::vector<std::string> clash;
  for (const auto& k : run.cfg.model_keys) {
    if (k == "seed") continue;
    if (want.at(k) != got.at(k))
      clash.push_back("model." + k + " is " + want.at(k).dump() + " in the config but " + got.at(k).dump() +
                      " in the checkpoint");
  }
  if (!clash.empty()) {
    std::string msg = "arity mismatch between checkpoint " + *run.opts.checkpoint + " and config:";
    for (const auto& c : clash) msg += "\n  - " + c;
    throw DimensionError(msg);
  }
  return std::move(ck.model);
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string number_label(double v) {
  std::ostringstream os;
  os << v;
  return os.str();
}

void cmd_pretrain(Run& run) {
  Forecaster model(run.cfg.model);
  const Data d = load_data(run.cfg, model.config());
  run.log << "pretrain: " << d.train.size() << " train windows, " << model.parameter_count() << " parameters\n";
  const auto t0 = std::chrono::steady_clock::now();
  const TrainHistory hist = finetune(model, d.train, d.val, run.cfg.train);
  run.timing["train_seconds"] = seconds_since(t0);
  run.save("model.ckpt", model);
  run.write_json("history.json", hist.to_json());
  const EvalReport rep = evaluate(model, d.test, run.cfg.eval.raw_scale);
  run.timing["inference_seconds"] = rep.inference_seconds;
  run.write_json("eval_report.json", rep.to_json());
  run.log << "pretrain: best epoch " << hist.best_epoch << ", test mse " << rep.mse << "\n";
}

void cmd_analyze(Run& run) {
  const Forecaster model = load_model(run);
  const Data d = load_data(run.cfg, model.config());
  const std::size_t n = std::min(run.cfg.eval.analyze_windows, d.train.size());
  if (n == 0) throw ContractError("analyze: no training windows");
  const WindowBatch b = make_batch(d.train, 0, n);
  const SparsityStats stats = collect_stats(model, b.norm_contexts);
  run.write_with("head_norms.csv", [&](std::ostream& os) { write_head_norms_csv(stats.heads, os); });
  run.write_with("ffn_probs.csv", [&](std::ostream& os) { write_ffn_probs_csv(stats.ffn, os); });
  std::vector<MagnitudeCdf> cdfs;
  for (Granularity g : {Granularity::element, Granularity::row, Granularity::column})
    for (auto& t : magnitude_cdf(model, g)) cdfs.push_back(std::move(t));
  run.write_with("magnitude_cdf.csv", [&](std::ostream& os) { write_magnitude_cdf_csv(cdfs, os); });

  const auto sparse = sparse_channel_fraction(stats.ffn, 0.05);
  json layers = json::array();
  for (std::size_t l = 0; l < stats.heads.size(); ++l) {
    layers.push_back({{"layer", l},
                      {"head_mean_ratio", stats.heads[l].mean()},
                      {"tokens", stats.heads[l].tokens},
                      {"skipped_tokens", stats.heads[l].skipped},
                      {"ffn_sparse_fraction_below_5pct", sparse[l]}});
  }
  run.write_json("sparsity.json", {{"windows", n}, {"layers", layers}});
}

void prune_cell(Run& run, const Forecaster& base, const Data& d, double alpha, double ratio, const fs::path& dir) {
  Forecaster model = base;
  PruneSchedule sched = run.cfg.prune.schedule;
  sched.alpha = alpha;
  sched.ratio = ratio;
  const PruneVariant variant = run.cfg.prune.variant;
  json stat_j = nullptr;
  if (variant != PruneVariant::importance) {
    const std::size_t n = std::min(run.cfg.eval.analyze_windows, d.train.size());
    const WindowBatch b = make_batch(d.train, 0, n);
    const StatPruneResult sr =
        prune_stat(model, collect_stats(model, b.norm_contexts), run.cfg.prune.head_threshold, run.cfg.prune.act_threshold);
    stat_j = {{"heads", sr.heads}, {"ffn_channels", sr.ffn}};
  }
  ImportanceLedger ledger = ImportanceLedger::from_model(model, sched.protect_io, sched.protected_channels);
  ledger.alpha = alpha;
  if (variant != PruneVariant::stat) {
    const auto t0 = std::chrono::steady_clock::now();
    PruneResult res = progressive_prune(model, d.train, sched, std::move(ledger));
    run.timing["prune_seconds"][dir.empty() ? "." : dir.generic_string()] = seconds_since(t0);
    ledger = std::move(res.ledger);
    run.write_with(dir / "trace.jsonl", [&](std::ostream& os) { write_trace_jsonl(res.trace, os); });
    run.write_with(dir / "scores.csv", [&](std::ostream& os) { write_scores_csv(ledger, os); });
  }
  json report = prune_report(model, ledger);
  report["variant"] = to_string(variant);
  report["ratio"] = ratio;
  if (!stat_j.is_null()) report["stat"] = stat_j;
  run.write_json(dir / "prune_report.json", report);
  run.save(dir / "pruned.ckpt", model, &ledger);
  run.log << "prune " << (dir.empty() ? "" : dir.string() + " ") << "-> #p " << report["param_fraction"].get<double>()
          << "\n";
}

void cmd_prune(Run& run) {
  const Forecaster base = load_model(run);
  const Data d = load_data(run.cfg, base.config());
  const auto& alphas = run.cfg.prune.alphas;
  const auto& ratios = run.cfg.prune.ratios;
  const bool grid = alphas.size() * ratios.size() > 1;
  json cells = json::array();
  for (double a : alphas) {
    for (double r : ratios) {
      const fs::path dir = grid ? fs::path("alpha_" + number_label(a) + "-ratio_" + number_label(r)) : fs::path();
      prune_cell(run, base, d, a, r, dir);
      cells.push_back({{"alpha", a}, {"ratio", r}, {"dir", dir.generic_string()}});
    }
  }
  if (grid) run.write_json("grid.json", cells);
}

void cmd_finetune(Run& run) {
  Forecaster model = load_model(run);
  if (run.cfg.finetune_sliced) model = model.sliced();
  const Data d = load_data(run.cfg, model.config());
  const auto t0 = std::chrono::steady_clock::now();
  const TrainHistory hist = finetune(model, d.train, d.val, run.cfg.train);
  run.timing["train_seconds"] = seconds_since(t0);
  run.save("finetuned.ckpt", model);
  run.write_json("history.json", hist.to_json());
  const EvalReport rep = evaluate(model, d.test, run.cfg.eval.raw_scale);
  run.timing["inference_seconds"] = rep.inference_seconds;
  run.write_json("eval_report.json", rep.to_json());
  run.log << "finetune: test mse " << rep.mse << ", #p " << rep.param_fraction << "\n";
}

void cmd_eval(Run& run) {
  const Forecaster model = load_model(run);
  const Data d = load_data(run.cfg, model.config());
  const EvalReport rep = evaluate(model, d.test, run.cfg.eval.raw_scale);
  run.timing["inference_seconds"] = rep.inference_seconds;
  run.write_json("eval_report.json", rep.to_json());
  run.log << "eval: mse " << rep.mse << ", mae " << rep.mae << ", #p " << rep.param_fraction << "\n";
}

void cmd_bench(Run& run) {
  const Forecaster model = load_model(run);
  const Data d = load_data(run.cfg, model.config());
  const std::size_t n = std::min(run.cfg.eval.bench_batch, d.test.size());
  if (n == 0) throw ContractError("bench: empty test set");
  const WindowBatch b = make_batch(d.test, 0, n);
  const BenchStats as_is = bench_inference(model, b.norm_contexts, run.cfg.eval.bench_repeats);
  run.timing["checkpoint"] = as_is.to_json();
  if (!model.masks_all_ones()) {
    const BenchStats sl = bench_inference(model.sliced(), b.norm_contexts, run.cfg.eval.bench_repeats);
    run.timing["sliced"] = sl.to_json();
    run.timing["speedup"] = as_is.mean_seconds / sl.mean_seconds;
  }
  run.log << "bench: mean " << as_is.mean_seconds << " s over " << as_is.repeats << " batches of " << n << "\n";
}

void cmd_transfer(Run& run) {
  const Forecaster model = load_model(run);
  const Data d = load_data(run.cfg, model.config());
  const EvalReport rep = evaluate(model, d.test, run.cfg.eval.raw_scale);
  run.timing["inference_seconds"] = rep.inference_seconds;
  json j = rep.to_json();
  j["source_checkpoint"] = fs::path(*run.opts.checkpoint).filename().string();
  j["target_channels"] = d.table->channels;
  run.write_json("transfer_report.json", j);
  run.log << "transfer: zero-shot mse " << rep.mse << ", mae " << rep.mae << "\n";
}

const std::map<std::string, std::function<void(Run&)>>& verbs() {
  static const std::map<std::string, std::function<void(Run&)>> v{
      {"pretrain", cmd_pretrain}, {"analyze", cmd_analyze}, {"prune", cmd_prune},   {"finetune", cmd_finetune},
      {"eval", cmd_eval},         {"bench", cmd_bench},     {"transfer", cmd_transfer}};
  return v;
}

}  // namespace

const std::vector<std::string>& command_names() {
  static const std::vector<std::string> names{"pretrain", "analyze", "prune", "finetune", "eval", "bench", "transfer"};
  return names;
}

int run_command(const std::string& verb, const CommandOptions& opts, std::ostream& log) {
  auto it = verbs().find(verb);
  if (it == verbs().end()) throw ConfigError("unknown command '" + verb + "'");
  RunConfig cfg = RunConfig::load(opts.config_path);
  if (opts.seed) cfg.set_seed(*opts.seed);
  if (opts.out_dir) cfg.out_dir = fs::absolute(*opts.out_dir).lexically_normal().string();
  if (opts.checkpoint && !fs::exists(*opts.checkpoint)) throw ConfigError("checkpoint " + *opts.checkpoint + " does not exist");

  Run run{verb, cfg, opts, fs::path(cfg.out_dir), log, {}, json::object()};
  fs::create_directories(run.out);
  const auto t0 = std::chrono::steady_clock::now();
  it->second(run);
  run.timing["command"] = verb;
  run.timing["total_seconds"] = seconds_since(t0);

  std::sort(run.artifacts.begin(), run.artifacts.end());
  json manifest{{"command", verb},
                {"config_hash", cfg.hash()},
                {"seed", cfg.model.seed},
                {"versions", {{"prunecast", kVersion}, {"checkpoint_format", kCheckpointVersion}}},
                {"checkpoint_in", opts.checkpoint ? json(fs::path(*opts.checkpoint).filename().string()) : json(nullptr)},
                {"artifacts", run.artifacts},
                {"config", cfg.to_json()}};
  manifest["config"].erase("out_dir");
  std::ofstream(run.out / "manifest.json") << manifest.dump(2) << "\n";
  std::ofstream(run.out / "timing.json") << run.timing.dump(2) << "\n";
  return 0;
}

}  // namespace prunecast

#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "prunecast/dataset.hpp"
#include "prunecast/forecaster.hpp"
#include "prunecast/pruner.hpp"
#include "prunecast/trainer.hpp"

namespace prunecast {

struct DataConfig {
  std::optional<std::string> csv;     // absolute once loaded
  std::optional<std::string> schema;  // JSON sidecar
  std::optional<SynthKind> synthetic;
  std::uint64_t synthetic_seed = 1;
  SynthOptions synth;
  std::vector<std::string> channels;  // subset to keep; empty keeps all
  std::string channel_prefix;         // keep channels starting with this
  double train_fraction = 0.7;
  double test_fraction = 0.2;
  std::optional<std::size_t> train_points, val_points, test_points;
  std::size_t stride = 1;
};

enum class PruneVariant { importance, stat, stat_then_importance };
const char* to_string(PruneVariant v);
PruneVariant prune_variant_from_string(const std::string& s);

struct PruneConfig {
  PruneVariant variant = PruneVariant::importance;
  std::vector<double> alphas{0.5};
  std::vector<double> ratios{0.05};
  PruneSchedule schedule;  // alpha/ratio taken from the grid cell
  double head_threshold = 0.01;
  double act_threshold = 0.01;
};

struct EvalConfig {
  bool raw_scale = false;
  std::size_t bench_repeats = 50;
  std::size_t bench_batch = 64;
  std::size_t analyze_windows = 4096;  // first windows of the train part
};

struct RunConfig {
  ForecasterConfig model;
  DataConfig data;
  PruneConfig prune;
  TrainConfig train;
  EvalConfig eval;
  bool finetune_sliced = true;  // fine-tune the sliced model rather than the masked one
  std::string out_dir = "out";
  // Keys set explicitly under "model", so a checkpoint's config can be
  // checked against them.
  std::vector<std::string> model_keys;

  /// Validates every section and lists all violations in one ConfigError.
  /// Relative paths resolve against base_dir.
  static RunConfig from_json(const nlohmann::json& j, const std::filesystem::path& base_dir);
  static RunConfig load(const std::string& path);

  /// Fully expanded configuration with defaults filled in.
  nlohmann::json to_json() const;
  /// SHA-256 of the canonical expanded configuration without out_dir.
  std::string hash() const;

  /// Applies a seed override to model init and shuffling. Synthetic data keeps
  /// its own seed so the same series can be reused across runs.
  void set_seed(std::uint64_t seed);
};

/// Loads or synthesizes the table described by the config.
std::shared_ptr<const SeriesTable> load_table(const DataConfig& cfg);
SplitSpec make_split(const DataConfig& cfg, std::size_t length, std::size_t context, std::size_t horizon);

struct CommandOptions {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out_dir;
  std::optional<std::string> checkpoint;
};

inline const char* kVersion = "0.1.0";

/// Runs one verb and writes its artifacts. Returns the process exit code.
int run_command(const std::string& verb, const CommandOptions& opts, std::ostream& log);
const std::vector<std::string>& command_names();

}  // namespace prunecast

#pragma once

#include <cstdint>
#include <iosfwd>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "prunecast/forecaster.hpp"
#include "prunecast/tensor.hpp"

namespace prunecast {

/// Multivariate series stored as values[time x channel].
struct SeriesTable {
  std::vector<std::string> channels;
  Tensor values;
  std::optional<std::string> frequency;

  std::size_t length() const { return values.rows(); }
  std::size_t channel_count() const { return channels.size(); }
  double at(std::size_t t, std::size_t c) const { return values.at(t, c); }
  std::vector<double> column(std::size_t c) const;

  /// Sub-table with the named channels, in the given order.
  SeriesTable select(const std::vector<std::string>& names) const;
};

struct CsvSchema {
  // When set, the first column holds timestamps and is ignored.
  bool timestamp_column = true;
  std::optional<std::string> frequency;

  /// Reads a sidecar {"timestamp_column": bool|string|null, "frequency": string}.
  static CsvSchema from_sidecar(const std::string& path);
};

SeriesTable parse_csv(std::istream& in, const CsvSchema& schema = {});
SeriesTable load_csv(const std::string& path, const CsvSchema& schema = {});
void write_csv(const SeriesTable& table, std::ostream& out);

enum class Part { train, val, test };
const char* to_string(Part p);

/// Chronological train/val/test point counts plus window geometry.
struct SplitSpec {
  std::size_t train = 0, val = 0, test = 0;
  std::size_t context = 0;
  std::size_t horizon = 0;
  std::size_t stride = 1;

  /// Counts from fractions of `length`; train and test are floored and
  /// validation takes the remainder.
  static SplitSpec from_fractions(std::size_t length, double train, double test, std::size_t context,
                                  std::size_t horizon, std::size_t stride = 1);

  std::size_t begin(Part p) const;
  std::size_t end(Part p) const;
  void validate(std::size_t table_length) const;
};

/// First target index of a window within one channel.
struct Window {
  std::size_t channel = 0;
  std::size_t start = 0;
};

/// Immutable set of (context, target) windows over a shared table.
class WindowSet {
 public:
  WindowSet() = default;
  WindowSet(std::shared_ptr<const SeriesTable> table, std::size_t context, std::size_t horizon,
            std::vector<Window> windows);

  std::size_t size() const { return windows_.size(); }
  bool empty() const { return windows_.empty(); }
  std::size_t context_length() const { return context_; }
  std::size_t horizon() const { return horizon_; }
  const std::vector<Window>& windows() const { return windows_; }
  const SeriesTable& table() const { return *table_; }
  std::shared_ptr<const SeriesTable> table_ptr() const { return table_; }

  std::vector<double> context(std::size_t i) const;
  std::vector<double> target(std::size_t i) const;

 private:
  std::shared_ptr<const SeriesTable> table_;
  std::size_t context_ = 0, horizon_ = 0;
  std::vector<Window> windows_;
};

/// Enumerates windows channel-major then time. Every admissible start is
/// used (no drop-last). Contexts of val/test windows may reach back into
/// earlier parts; targets never leave their part.
WindowSet make_windows(std::shared_ptr<const SeriesTable> table, const SplitSpec& split, Part part);

/// Number of windows make_windows yields per channel.
std::size_t windows_per_channel(const SplitSpec& split, Part part);

/// A materialized mini-batch with per-window instance normalization.
struct WindowBatch {
  Tensor contexts;         // raw [N x L]
  Tensor targets;          // raw [N x H]
  Tensor norm_contexts;    // (x - mean) / std
  Tensor norm_targets;
  std::vector<WindowStats> stats;
  std::size_t size() const { return stats.size(); }
};

WindowBatch make_batch(const WindowSet& set, std::span<const std::size_t> indices);
WindowBatch make_batch(const WindowSet& set, std::size_t first, std::size_t count);

enum class SynthKind { sines, ar1, planted_redundancy };
SynthKind synth_kind_from_string(const std::string& s);
const char* to_string(SynthKind k);

struct SynthOptions {
  std::size_t length = 2000;
  std::size_t channels = 4;
  double ar_coefficient = 0.8;
  double noise = 0.1;
};

/// Reproducible synthetic series. planted_redundancy yields channels
/// "A0.." with a 24-step period and "B0.." with a 10-step period.
SeriesTable synth_dataset(SynthKind kind, std::uint64_t seed, const SynthOptions& options = {});

}  // namespace prunecast

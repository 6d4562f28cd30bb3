#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "prunecast/analysis.hpp"
#include "prunecast/dataset.hpp"
#include "prunecast/forecaster.hpp"
#include "prunecast/ledger.hpp"

namespace prunecast {

/// |-(1/N) sum g + (1/2N) sum g^2| over the per-sample gradients of one channel.
double raw_importance(std::span<const double> grads);
/// |-g + h/2|: second-order estimate of the loss change from zeroing a mask
/// coordinate, with g the gradient and h the diagonal curvature.
double taylor2_importance(double g, double h);

/// Per-window mask gradients d L_n / d m for every mask coordinate.
struct SampleGrads {
  std::vector<ChannelRef> refs;  // model mask order (layer order, input then output)
  Tensor grads;                  // [N x refs.size()]
  double loss = 0.0;             // mean loss over the batch

  std::vector<double> raw_scores() const;
};

/// Windows are split into fixed chunks of `chunk` samples, each on its own
/// tape. The result does not depend on the worker count.
SampleGrads per_sample_grads(const Forecaster& model, const Tensor& contexts, const Tensor& targets,
                             std::size_t chunk = 32);

/// s_ema <- alpha s + (1 - alpha) s_ema for every entry, dead ones included.
/// `raw` is aligned with ledger.entries().
void ema_update(ImportanceLedger& ledger, std::span<const double> raw, double alpha);

/// Marks the k alive, unprotected entries with the lowest EMA as dead.
/// Ties fall back to (layer_id, side, index).
std::vector<ChannelRef> prune_step(ImportanceLedger& ledger, std::size_t k);
/// Zeroes the mask coordinate of each ref.
void apply_pruning(Forecaster& model, const std::vector<ChannelRef>& refs);

struct PruneSchedule {
  double ratio = 0.05;  // fraction of prunable channels removed per epoch
  std::size_t epochs = 1;
  std::size_t batch_size = 64;
  std::optional<std::size_t> k_per_batch;  // overrides the derived K
  double target_param_fraction = 0.0;      // stop once #p <= this; 0 disables
  double alpha = 0.5;
  bool protect_io = true;
  std::vector<ChannelRef> protected_channels;
  std::uint64_t seed = 1;

  std::vector<std::string> violations() const;
  void validate() const;
};

struct PruneTraceRecord {
  std::size_t j = 0;
  double loss = 0.0;
  std::vector<ChannelRef> pruned;
  std::size_t alive_count = 0;

  nlohmann::json to_json() const;
};

struct PruneResult {
  ImportanceLedger ledger;
  std::vector<PruneTraceRecord> trace;
  std::size_t target = 0;  // channels the schedule asked to remove
  std::size_t removed = 0;
};

/// Batch-wise scoring, EMA and global TopK removal. Mutates the model's masks.
PruneResult progressive_prune(Forecaster& model, const WindowSet& data, const PruneSchedule& schedule);
/// Continues from an existing ledger (e.g. after threshold pruning).
PruneResult progressive_prune(Forecaster& model, const WindowSet& data, const PruneSchedule& schedule,
                              ImportanceLedger ledger);

void write_trace_jsonl(const std::vector<PruneTraceRecord>& trace, std::ostream& out);
void write_scores_csv(const ImportanceLedger& ledger, std::ostream& out);

struct StatPruneResult {
  std::vector<std::pair<std::size_t, std::size_t>> heads;  // (block, original head id)
  std::vector<std::pair<std::size_t, std::size_t>> ffn;    // (block, channel)
  std::vector<ChannelRef> refs;                            // mask coordinates zeroed
};

/// Removes heads whose mean relative norm is < head_threshold by zeroing their
/// W^O input rows, and FFN channels whose activation probability is
/// < act_threshold by zeroing the up output and down input together.
StatPruneResult prune_stat(Forecaster& model, const SparsityStats& stats, double head_threshold,
                           double act_threshold);

/// |L(m - e_i) - L(m)| on normalized data, for each ref.
std::vector<double> oracle_importance(const Forecaster& model, const Tensor& contexts, const Tensor& targets,
                                      const std::vector<ChannelRef>& refs);
double oracle_importance(const Forecaster& model, const Tensor& contexts, const Tensor& targets,
                         const ChannelRef& ref);

/// Spearman rank correlation with average ranks for ties.
double spearman(std::span<const double> a, std::span<const double> b);

/// Per-layer pruned fractions and parameter accounting.
nlohmann::json prune_report(const Forecaster& model, const ImportanceLedger& ledger);

}  // namespace prunecast

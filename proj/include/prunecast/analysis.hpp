#pragma once

#include <cstddef>
#include <iosfwd>
#include <string>
#include <vector>

#include "prunecast/forecaster.hpp"

namespace prunecast {

/// Relative output norms ||o_i|| / ||x|| of every head of one block,
/// accumulated token by token.
struct HeadNormStats {
  std::vector<std::size_t> head_ids;
  std::vector<double> ratio_sum;
  std::size_t tokens = 0;
  std::size_t skipped = 0;  // tokens whose residual norm was exactly zero

  std::vector<double> mean() const;
  void merge(const HeadNormStats& other);
};

/// Positive-activation counts of every FFN intermediate channel of one block.
struct ActivationStats {
  std::vector<std::size_t> positive;
  std::size_t total = 0;  // observations per channel

  std::vector<double> probability() const;
  void merge(const ActivationStats& other);
};

/// Adds one ratio per non-zero residual row; rows with ||x|| = 0 are skipped.
void accumulate_head_norms(HeadNormStats& stats, const Tensor& residual, const std::vector<Tensor>& head_outputs);
/// Counts activation > 0 per column.
void accumulate_activations(ActivationStats& stats, const Tensor& activation);

struct SparsityStats {
  std::vector<HeadNormStats> heads;  // one per block
  std::vector<ActivationStats> ffn;  // one per block
};

/// Runs inspecting forward passes over normalized contexts [N x L] in fixed
/// chunks and merges the per-chunk collectors in chunk order.
SparsityStats collect_stats(const Forecaster& model, const Tensor& contexts, std::size_t chunk = 64);
std::vector<HeadNormStats> collect_head_norms(const Forecaster& model, const Tensor& contexts);
std::vector<ActivationStats> collect_activation_probs(const Forecaster& model, const Tensor& contexts);

/// Per block, the fraction of channels whose probability is < threshold.
std::vector<double> sparse_channel_fraction(const std::vector<ActivationStats>& stats, double threshold);

enum class Granularity { element, row, column };
const char* to_string(Granularity g);

/// Empirical CDF of magnitudes divided by their maximum, sampled at
/// x[k] = (k + 1) / points. cdf[k] counts magnitudes <= x[k], so the last
/// point is always 1.
struct MagnitudeCdf {
  std::string layer_id;
  Granularity granularity = Granularity::element;
  std::vector<double> x;
  std::vector<double> cdf;
  std::size_t count = 0;
};

MagnitudeCdf magnitude_cdf(const MaskedLinear& layer, Granularity g, std::size_t points = 1000);
std::vector<MagnitudeCdf> magnitude_cdf(const Forecaster& model, Granularity g, std::size_t points = 1000);

void write_head_norms_csv(const std::vector<HeadNormStats>& stats, std::ostream& out);
void write_ffn_probs_csv(const std::vector<ActivationStats>& stats, std::ostream& out);
void write_magnitude_cdf_csv(const std::vector<MagnitudeCdf>& tables, std::ostream& out);

}  // namespace prunecast

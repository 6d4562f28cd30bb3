#include "prunecast/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <ostream>

#include "prunecast/errors.hpp"
#include "prunecast/parallel.hpp"

namespace prunecast {

std::vector<double> HeadNormStats::mean() const {
  std::vector<double> out(ratio_sum.size(), 0.0);
  if (tokens == 0) return out;
  for (std::size_t h = 0; h < out.size(); ++h) out[h] = ratio_sum[h] / static_cast<double>(tokens);
  return out;
}

void HeadNormStats::merge(const HeadNormStats& other) {
  if (ratio_sum.empty() && tokens == 0 && skipped == 0) {
    *this = other;
    return;
  }
  if (other.head_ids != head_ids) throw ContractError("merging head stats with different layouts");
  for (std::size_t h = 0; h < ratio_sum.size(); ++h) ratio_sum[h] += other.ratio_sum[h];
  tokens += other.tokens;
  skipped += other.skipped;
}

std::vector<double> ActivationStats::probability() const {
  std::vector<double> out(positive.size(), 0.0);
  if (total == 0) return out;
  for (std::size_t j = 0; j < out.size(); ++j)
    out[j] = static_cast<double>(positive[j]) / static_cast<double>(total);
  return out;
}

void ActivationStats::merge(const ActivationStats& other) {
  if (positive.empty() && total == 0) {
    *this = other;
    return;
  }
  if (other.positive.size() != positive.size()) throw ContractError("merging activation stats of different widths");
  for (std::size_t j = 0; j < positive.size(); ++j) positive[j] += other.positive[j];
  total += other.total;
}

namespace {

double row_norm(const Tensor& t, std::size_t r) {
  double s = 0.0;
  for (std::size_t c = 0; c < t.cols(); ++c) s += t.at(r, c) * t.at(r, c);
  return std::sqrt(s);
}

SparsityStats stats_for(const Forecaster& model, const Tensor& contexts) {
  Tape tape;
  ForwardCapture cap;
  model.forward(tape, contexts, ForwardOptions{}, nullptr, &cap);
  SparsityStats out;
  for (std::size_t b = 0; b < cap.blocks.size(); ++b) {
    const Block& blk = model.blocks()[b];
    const BlockCapture& bc = cap.blocks[b];
    HeadNormStats hs;
    hs.head_ids = blk.heads.head_ids;
    hs.ratio_sum.assign(blk.heads.count(), 0.0);
    std::vector<Tensor> outs;
    for (std::size_t h = 0; h < blk.heads.count(); ++h) outs.push_back(head_output(blk, bc.attention, h));
    accumulate_head_norms(hs, bc.residual, outs);
    out.heads.push_back(std::move(hs));

    ActivationStats as;
    as.positive.assign(bc.activation.cols(), 0);
    accumulate_activations(as, bc.activation);
    out.ffn.push_back(std::move(as));
  }
  return out;
}

}  // namespace

void accumulate_head_norms(HeadNormStats& stats, const Tensor& residual, const std::vector<Tensor>& head_outputs) {
  if (stats.ratio_sum.size() != head_outputs.size()) {
    if (!stats.ratio_sum.empty()) throw DimensionError("head statistics expect " + std::to_string(stats.ratio_sum.size()) + " heads");
    stats.ratio_sum.assign(head_outputs.size(), 0.0);
  }
  if (stats.head_ids.empty()) {
    for (std::size_t h = 0; h < head_outputs.size(); ++h) stats.head_ids.push_back(h);
  }
  for (const Tensor& o : head_outputs)
    if (o.rows() != residual.rows()) throw DimensionError("head output rows differ from residual rows");
  for (std::size_t r = 0; r < residual.rows(); ++r) {
    const double xn = row_norm(residual, r);
    if (xn == 0.0) {
      ++stats.skipped;
      continue;
    }
    for (std::size_t h = 0; h < head_outputs.size(); ++h) stats.ratio_sum[h] += row_norm(head_outputs[h], r) / xn;
    ++stats.tokens;
  }
}

void accumulate_activations(ActivationStats& stats, const Tensor& activation) {
  if (stats.positive.empty()) stats.positive.assign(activation.cols(), 0);
  if (stats.positive.size() != activation.cols()) throw DimensionError("activation width changed between batches");
  for (std::size_t r = 0; r < activation.rows(); ++r)
    for (std::size_t j = 0; j < activation.cols(); ++j) stats.positive[j] += activation.at(r, j) > 0.0;
  stats.total += activation.rows();
}

SparsityStats collect_stats(const Forecaster& model, const Tensor& contexts, std::size_t chunk) {
  if (contexts.rows() == 0) throw ContractError("no windows to analyze");
  if (chunk == 0) chunk = 64;
  const std::size_t N = contexts.rows(), L = contexts.cols();
  const std::size_t chunks = (N + chunk - 1) / chunk;
  std::vector<SparsityStats> parts(chunks);
  parallel_for(chunks, [&](std::size_t c) {
    const std::size_t first = c * chunk, n = std::min(chunk, N - first);
    Tensor sub({n, L}, std::vector<double>(contexts.raw() + first * L, contexts.raw() + (first + n) * L));
    parts[c] = stats_for(model, sub);
  });
  SparsityStats out = std::move(parts[0]);
  for (std::size_t c = 1; c < chunks; ++c) {
    for (std::size_t b = 0; b < out.heads.size(); ++b) {
      out.heads[b].merge(parts[c].heads[b]);
      out.ffn[b].merge(parts[c].ffn[b]);
    }
  }
  return out;
}

std::vector<HeadNormStats> collect_head_norms(const Forecaster& model, const Tensor& contexts) {
  return collect_stats(model, contexts).heads;
}

std::vector<ActivationStats> collect_activation_probs(const Forecaster& model, const Tensor& contexts) {
  return collect_stats(model, contexts).ffn;
}

std::vector<double> sparse_channel_fraction(const std::vector<ActivationStats>& stats, double threshold) {
  if (threshold < 0.0 || threshold > 1.0) throw ConfigError("threshold must lie in [0, 1]");
  if (stats.empty()) throw ContractError("no activation statistics");
  std::vector<double> out;
  for (const auto& s : stats) {
    if (s.total == 0 || s.positive.empty()) throw ContractError("empty activation statistics");
    std::size_t below = 0;
    for (double p : s.probability()) below += p < threshold;
    out.push_back(static_cast<double>(below) / static_cast<double>(s.positive.size()));
  }
  return out;
}

const char* to_string(Granularity g) {
  switch (g) {
    case Granularity::element: return "element";
    case Granularity::row: return "row";
    case Granularity::column: return "column";
  }
  return "?";
}

MagnitudeCdf magnitude_cdf(const MaskedLinear& layer, Granularity g, std::size_t points) {
  if (points == 0) throw ContractError("magnitude_cdf needs at least one point");
  const Tensor& w = layer.weight;
  std::vector<double> mags;
  switch (g) {
    case Granularity::element:
      for (double v : w.data()) mags.push_back(std::abs(v));
      break;
    case Granularity::row:
      for (std::size_t r = 0; r < w.rows(); ++r) mags.push_back(row_norm(w, r));
      break;
    case Granularity::column:
      for (std::size_t c = 0; c < w.cols(); ++c) {
        double s = 0.0;
        for (std::size_t r = 0; r < w.rows(); ++r) s += w.at(r, c) * w.at(r, c);
        mags.push_back(std::sqrt(s));
      }
      break;
  }
  if (mags.empty()) throw ContractError("layer " + layer.id + " has no weights");
  const double peak = *std::max_element(mags.begin(), mags.end());
  for (double& m : mags) m = peak > 0.0 ? m / peak : 0.0;
  std::sort(mags.begin(), mags.end());

  MagnitudeCdf out;
  out.layer_id = layer.id;
  out.granularity = g;
  out.count = mags.size();
  for (std::size_t k = 0; k < points; ++k) {
    const double x = static_cast<double>(k + 1) / static_cast<double>(points);
    const auto n = std::upper_bound(mags.begin(), mags.end(), x) - mags.begin();
    out.x.push_back(x);
    out.cdf.push_back(static_cast<double>(n) / static_cast<double>(mags.size()));
  }
  return out;
}

std::vector<MagnitudeCdf> magnitude_cdf(const Forecaster& model, Granularity g, std::size_t points) {
  std::vector<MagnitudeCdf> out;
  for (const MaskedLinear* l : model.linear_layers()) out.push_back(magnitude_cdf(*l, g, points));
  return out;
}

void write_head_norms_csv(const std::vector<HeadNormStats>& stats, std::ostream& out) {
  out << "layer,head,mean_ratio,tokens,skipped\n" << std::setprecision(17);
  for (std::size_t b = 0; b < stats.size(); ++b) {
    const auto mean = stats[b].mean();
    for (std::size_t h = 0; h < mean.size(); ++h)
      out << b << ',' << stats[b].head_ids[h] << ',' << mean[h] << ',' << stats[b].tokens << ','
          << stats[b].skipped << '\n';
  }
}

void write_ffn_probs_csv(const std::vector<ActivationStats>& stats, std::ostream& out) {
  out << "layer,channel,prob\n" << std::setprecision(17);
  for (std::size_t b = 0; b < stats.size(); ++b) {
    const auto p = stats[b].probability();
    for (std::size_t j = 0; j < p.size(); ++j) out << b << ',' << j << ',' << p[j] << '\n';
  }
}

void write_magnitude_cdf_csv(const std::vector<MagnitudeCdf>& tables, std::ostream& out) {
  out << "layer,granularity,x,cdf\n" << std::setprecision(17);
  for (const auto& t : tables)
    for (std::size_t k = 0; k < t.x.size(); ++k)
      out << t.layer_id << ',' << to_string(t.granularity) << ',' << t.x[k] << ',' << t.cdf[k] << '\n';
}

}  // namespace prunecast

#include "prunecast/pruner.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <ostream>

#include "prunecast/errors.hpp"
#include "prunecast/parallel.hpp"

namespace prunecast {

double raw_importance(std::span<const double> grads) {
  if (grads.empty()) throw ContractError("raw_importance needs at least one sample");
  double s1 = 0.0, s2 = 0.0;
  for (double g : grads) {
    s1 += g;
    s2 += g * g;
  }
  const double n = static_cast<double>(grads.size());
  return std::abs(-s1 / n + s2 / (2.0 * n));
}

double taylor2_importance(double g, double h) { return std::abs(-g + 0.5 * h); }

std::vector<double> SampleGrads::raw_scores() const {
  const std::size_t N = grads.rows(), C = refs.size();
  if (N == 0) throw ContractError("raw_importance needs at least one sample");
  std::vector<double> out(C);
  std::vector<double> col(N);
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t n = 0; n < N; ++n) col[n] = grads.at(n, c);
    out[c] = raw_importance(col);
  }
  return out;
}

namespace {

std::vector<ChannelRef> mask_refs(const Forecaster& model) {
  std::vector<ChannelRef> refs;
  for (const MaskedLinear* l : model.linear_layers()) {
    for (std::size_t i = 0; i < l->mask_in.size(); ++i) refs.push_back({l->id, ChannelSide::input, i});
    for (std::size_t i = 0; i < l->mask_out.size(); ++i) refs.push_back({l->id, ChannelSide::output, i});
  }
  return refs;
}

Tensor rows_of(const Tensor& t, std::size_t first, std::size_t n) {
  const std::size_t c = t.cols();
  return Tensor({n, c}, std::vector<double>(t.raw() + first * c, t.raw() + (first + n) * c));
}

double& mask_coordinate(Forecaster& model, const ChannelRef& ref) {
  MaskedLinear& l = model.layer(ref.layer_id);
  Tensor& m = ref.side == ChannelSide::input ? l.mask_in : l.mask_out;
  if (ref.index >= m.size()) throw ContractError("channel " + ref.str() + " out of range");
  return m[ref.index];
}

double batch_loss(const Forecaster& model, const Tensor& contexts, const Tensor& targets) {
  const Tensor pred = model.predict_normalized(contexts);
  double s = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = pred[i] - targets[i];
    s += d * d;
  }
  return s / static_cast<double>(pred.size());
}

}  // namespace

SampleGrads per_sample_grads(const Forecaster& model, const Tensor& contexts, const Tensor& targets,
                             std::size_t chunk) {
  const std::size_t N = contexts.rows();
  if (N == 0) throw ContractError("per_sample_grads: empty batch");
  if (targets.rows() != N) throw DimensionError("per_sample_grads: contexts and targets disagree on batch size");
  if (chunk == 0) chunk = 32;
  SampleGrads out;
  out.refs = mask_refs(model);
  const std::size_t C = out.refs.size();
  out.grads = Tensor::matrix(N, C);
  const std::size_t chunks = (N + chunk - 1) / chunk;
  std::vector<double> losses(chunks, 0.0);
  const auto layers = model.linear_layers();

  parallel_for(chunks, [&](std::size_t ci) {
    const std::size_t first = ci * chunk, n = std::min(chunk, N - first);
    Tape tape;
    tape.track_samples(n);
    ModelVars vars;
    ForwardOptions opts;
    opts.mask_grads = true;
    const Tensor ctx = rows_of(contexts, first, n);
    Var pred = model.forward(tape, ctx, opts, &vars);
    Var loss = ad::mse_loss(pred, tape.constant(rows_of(targets, first, n)));
    tape.backward(loss);
    losses[ci] = loss.value()[0] * static_cast<double>(n);
    // The chunk loss is the mean of n per-window losses, so each window's
    // own gradient is n times its share of the chunk gradient.
    const double scale = static_cast<double>(n);
    std::size_t col = 0;
    for (const MaskedLinear* l : layers) {
      for (const Tensor* m : {&l->mask_in, &l->mask_out}) {
        const Tensor sg = tape.sample_grad(vars.at(*m));
        for (std::size_t s = 0; s < n; ++s)
          for (std::size_t i = 0; i < m->size(); ++i) out.grads.at(first + s, col + i) = scale * sg.at(s, i);
        col += m->size();
      }
    }
  });
  double total = 0.0;
  for (double l : losses) total += l;
  out.loss = total / static_cast<double>(N);
  return out;
}

void ema_update(ImportanceLedger& ledger, std::span<const double> raw, double alpha) {
  if (!(alpha > 0.0 && alpha <= 1.0)) throw ConfigError("alpha must lie in (0, 1], got " + std::to_string(alpha));
  if (raw.size() != ledger.size()) {
    throw DimensionError("ema_update: " + std::to_string(raw.size()) + " scores for " +
                         std::to_string(ledger.size()) + " channels");
  }
  auto& entries = ledger.entries();
  for (std::size_t i = 0; i < entries.size(); ++i) {
    entries[i].last_raw = raw[i];
    entries[i].ema = alpha * raw[i] + (1.0 - alpha) * entries[i].ema;
  }
  ++ledger.batches;
}

std::vector<ChannelRef> prune_step(ImportanceLedger& ledger, std::size_t k) {
  if (k == 0) return {};
  auto& entries = ledger.entries();
  std::vector<std::size_t> cand;
  for (std::size_t i = 0; i < entries.size(); ++i)
    if (entries[i].alive && !entries[i].is_protected) cand.push_back(i);
  if (k > cand.size()) {
    throw ContractError("cannot prune " + std::to_string(k) + " channels: only " + std::to_string(cand.size()) +
                        " alive and unprotected");
  }
  auto less = [&](std::size_t a, std::size_t b) {
    if (entries[a].ema != entries[b].ema) return entries[a].ema < entries[b].ema;
    return entries[a].ref < entries[b].ref;
  };
  std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(k), cand.end(), less);
  std::vector<ChannelRef> out;
  for (std::size_t i = 0; i < k; ++i) {
    entries[cand[i]].alive = false;
    out.push_back(entries[cand[i]].ref);
  }
  return out;
}

void apply_pruning(Forecaster& model, const std::vector<ChannelRef>& refs) {
  for (const auto& r : refs) mask_coordinate(model, r) = 0.0;
}

std::vector<std::string> PruneSchedule::violations() const {
  std::vector<std::string> v;
  if (!(ratio >= 0.0 && ratio <= 1.0)) v.push_back("prune.ratio must lie in [0, 1]");
  if (epochs == 0) v.push_back("prune.epochs must be >= 1");
  if (batch_size == 0) v.push_back("prune.batch_size must be >= 1");
  if (!(target_param_fraction >= 0.0 && target_param_fraction <= 1.0))
    v.push_back("prune.target_param_fraction must lie in [0, 1]");
  if (!(alpha > 0.0 && alpha <= 1.0)) v.push_back("prune.alpha must lie in (0, 1]");
  return v;
}

void PruneSchedule::validate() const {
  const auto v = violations();
  if (v.empty()) return;
  std::string msg = "invalid prune schedule:";
  for (const auto& s : v) msg += "\n  " + s;
  throw ConfigError(msg);
}

nlohmann::json PruneTraceRecord::to_json() const {
  nlohmann::json p = nlohmann::json::array();
  for (const auto& r : pruned) p.push_back(r.str());
  return {{"j", j}, {"loss", loss}, {"pruned", p}, {"alive_count", alive_count}};
}

PruneResult progressive_prune(Forecaster& model, const WindowSet& data, const PruneSchedule& schedule) {
  return progressive_prune(model, data, schedule,
                           ImportanceLedger::from_model(model, schedule.protect_io, schedule.protected_channels));
}

PruneResult progressive_prune(Forecaster& model, const WindowSet& data, const PruneSchedule& schedule,
                              ImportanceLedger ledger) {
  schedule.validate();
  if (data.empty()) throw ContractError("progressive_prune: no windows");
  for (const auto& r : schedule.protected_channels) ledger.at(r).is_protected = true;
  ledger.alpha = schedule.alpha;

  PruneResult res;
  const std::size_t prunable = ledger.prunable_count();
  const std::size_t batches = (data.size() + schedule.batch_size - 1) / schedule.batch_size;
  res.target = std::min<std::size_t>(
      prunable, static_cast<std::size_t>(std::floor(static_cast<double>(prunable) * schedule.ratio *
                                                        static_cast<double>(schedule.epochs) + 1e-9)));
  std::size_t k = schedule.k_per_batch.value_or(static_cast<std::size_t>(
      std::ceil(static_cast<double>(prunable) * schedule.ratio / static_cast<double>(batches) - 1e-9)));
  const bool by_params = schedule.target_param_fraction > 0.0;
  auto done = [&] {
    if (res.removed >= res.target) return true;
    return by_params && model.remaining_fraction() <= schedule.target_param_fraction;
  };

  const auto refs = mask_refs(model);
  if (refs.size() != ledger.size()) throw StateError("ledger does not match the model's masks");
  for (std::size_t i = 0; i < refs.size(); ++i)
    if (!(refs[i] == ledger.entries()[i].ref)) throw StateError("ledger order does not match the model's masks");

  Rng rng(schedule.seed);
  std::vector<std::size_t> order(data.size());
  std::size_t j = 0;
  for (std::size_t epoch = 0; epoch < schedule.epochs && !done(); ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order);
    for (std::size_t b = 0; b < batches && !done(); ++b) {
      const std::size_t first = b * schedule.batch_size;
      const std::size_t n = std::min(schedule.batch_size, data.size() - first);
      const WindowBatch batch =
          make_batch(data, std::span<const std::size_t>(order.data() + first, n));
      const SampleGrads g = per_sample_grads(model, batch.norm_contexts, batch.norm_targets);
      ema_update(ledger, g.raw_scores(), schedule.alpha);
      const std::size_t take = std::min({k, res.target - res.removed, ledger.prunable_count()});
      PruneTraceRecord rec;
      rec.j = ++j;
      rec.loss = g.loss;
      rec.pruned = prune_step(ledger, take);
      apply_pruning(model, rec.pruned);
      res.removed += rec.pruned.size();
      rec.alive_count = ledger.alive_count();
      res.trace.push_back(std::move(rec));
      if (take == 0 && k == 0) break;
    }
  }
  res.ledger = std::move(ledger);
  return res;
}

void write_trace_jsonl(const std::vector<PruneTraceRecord>& trace, std::ostream& out) {
  for (const auto& r : trace) out << r.to_json().dump() << '\n';
}

void write_scores_csv(const ImportanceLedger& ledger, std::ostream& out) {
  out << "layer,side,index,ema,last_raw,alive,protected\n" << std::setprecision(17);
  for (const auto& e : ledger.entries())
    out << e.ref.layer_id << ',' << to_string(e.ref.side) << ',' << e.ref.index << ',' << e.ema << ','
        << e.last_raw << ',' << e.alive << ',' << e.is_protected << '\n';
}

StatPruneResult prune_stat(Forecaster& model, const SparsityStats& stats, double head_threshold,
                           double act_threshold) {
  std::vector<std::string> bad;
  if (!(head_threshold >= 0.0 && head_threshold <= 1.0)) bad.push_back("head_threshold must lie in [0, 1]");
  if (!(act_threshold >= 0.0 && act_threshold <= 1.0)) bad.push_back("act_threshold must lie in [0, 1]");
  if (!bad.empty()) {
    std::string msg = "prune_stat:";
    for (const auto& s : bad) msg += " " + s + ";";
    throw ConfigError(msg);
  }
  auto& blocks = model.blocks();
  if (stats.heads.size() != blocks.size() || stats.ffn.size() != blocks.size())
    throw ContractError("prune_stat: statistics cover a different number of blocks");

  StatPruneResult out;
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    Block& blk = blocks[b];
    const auto mean = stats.heads[b].mean();
    if (mean.size() != blk.heads.count()) throw ContractError("prune_stat: head statistics do not match layout");
    for (std::size_t h = 0; h < mean.size(); ++h) {
      if (!(mean[h] < head_threshold)) continue;
      out.heads.emplace_back(b, blk.heads.head_ids[h]);
      for (std::size_t c = blk.heads.v_offsets[h]; c < blk.heads.v_offsets[h + 1]; ++c) {
        blk.o.mask_in[c] = 0.0;
        out.refs.push_back({blk.o.id, ChannelSide::input, c});
      }
    }
    const auto prob = stats.ffn[b].probability();
    if (prob.size() != blk.up.cols()) throw ContractError("prune_stat: activation statistics do not match width");
    for (std::size_t j = 0; j < prob.size(); ++j) {
      if (!(prob[j] < act_threshold)) continue;
      out.ffn.emplace_back(b, j);
      blk.up.mask_out[j] = 0.0;
      blk.down.mask_in[j] = 0.0;
      out.refs.push_back({blk.up.id, ChannelSide::output, j});
      out.refs.push_back({blk.down.id, ChannelSide::input, j});
    }
  }
  return out;
}

std::vector<double> oracle_importance(const Forecaster& model, const Tensor& contexts, const Tensor& targets,
                                      const std::vector<ChannelRef>& refs) {
  Forecaster work = model;
  const double base = batch_loss(work, contexts, targets);
  std::vector<double> out;
  out.reserve(refs.size());
  for (const auto& r : refs) {
    double& m = mask_coordinate(work, r);
    const double keep = m;
    m = 0.0;
    out.push_back(std::abs(batch_loss(work, contexts, targets) - base));
    m = keep;
  }
  return out;
}

double oracle_importance(const Forecaster& model, const Tensor& contexts, const Tensor& targets,
                         const ChannelRef& ref) {
  return oracle_importance(model, contexts, targets, std::vector<ChannelRef>{ref}).front();
}

namespace {

std::vector<double> average_ranks(std::span<const double> v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> rank(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t t = i; t <= j; ++t) rank[idx[t]] = r;
    i = j + 1;
  }
  return rank;
}

}  // namespace

double spearman(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.size() < 2) throw ContractError("spearman needs two equal-length samples");
  const auto ra = average_ranks(a), rb = average_ranks(b);
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n;
  const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

nlohmann::json prune_report(const Forecaster& model, const ImportanceLedger& ledger) {
  nlohmann::json layers = nlohmann::json::array();
  for (const MaskedLinear* l : model.linear_layers()) {
    std::size_t in_dead = 0, out_dead = 0;
    for (double m : l->mask_in.data()) in_dead += m == 0.0;
    for (double m : l->mask_out.data()) out_dead += m == 0.0;
    layers.push_back({{"layer", l->id},
                      {"input_pruned", in_dead},
                      {"input_total", l->mask_in.size()},
                      {"output_pruned", out_dead},
                      {"output_total", l->mask_out.size()}});
  }
  const std::size_t dense = model.config().dense_parameter_count();
  const std::size_t eff = model.effective_parameter_count();
  return {{"layers", layers},
          {"dense_parameters", dense},
          {"effective_parameters", eff},
          {"param_fraction", static_cast<double>(eff) / static_cast<double>(dense)},
          {"channels", ledger.size()},
          {"alive_channels", ledger.alive_count()},
          {"prunable_alive", ledger.prunable_count()},
          {"batches", ledger.batches},
          {"alpha", ledger.alpha}};
}

}  // namespace prunecast

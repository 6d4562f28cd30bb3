#include <gtest/gtest.h>

#include <numeric>
#include <sstream>

#include "prunecast/analysis.hpp"
#include "prunecast/errors.hpp"
#include "prunecast/pruner.hpp"
#include "test_util.hpp"

using namespace prunecast;
using testutil::random_tensor;
using testutil::tiny_config;

namespace {

WindowSet sine_windows(std::size_t length = 240, std::uint64_t seed = 1) {
  SynthOptions o;
  o.length = length;
  o.channels = 2;
  auto t = std::make_shared<const SeriesTable>(synth_dataset(SynthKind::sines, seed, o));
  return make_windows(t, SplitSpec::from_fractions(length, 0.7, 0.1, 16, 4), Part::train);
}

std::size_t ref_column(const SampleGrads& g, const ChannelRef& r) {
  return static_cast<std::size_t>(std::find(g.refs.begin(), g.refs.end(), r) - g.refs.begin());
}

double sample_loss(const Forecaster& m, const Tensor& ctx, const Tensor& tgt, std::size_t n) {
  Tensor c = Tensor::matrix(1, ctx.cols()), t = Tensor::matrix(1, tgt.cols());
  for (std::size_t i = 0; i < ctx.cols(); ++i) c[i] = ctx.at(n, i);
  for (std::size_t i = 0; i < tgt.cols(); ++i) t[i] = tgt.at(n, i);
  return testutil::mse(m.predict_normalized(c), t);
}

// Loss and input-mask gradient of a lone linear layer under MSE.
double linear_loss(const MaskedLinear& l, const Tensor& x, const Tensor& y, Tensor* grad_in = nullptr) {
  Tape tape;
  LinearVars v = bind(tape, l, {false, true, true});
  Var loss = ad::mse_loss(forward(l, v, tape.constant(x)), tape.constant(y));
  const double out = loss.value()[0];
  if (grad_in) {
    tape.backward(loss);
    *grad_in = tape.grad(v.mask_in);
  }
  return out;
}

}  // namespace

TEST(RawImportance, WorkedExamples) {
  const std::vector<double> a{0.2, 0.4, -0.1};
  // -(0.5/3) + (0.21/6) = -0.1316...
  EXPECT_NEAR(raw_importance(a), std::abs(-0.5 / 3.0 + 0.21 / 6.0), 1e-15);
  const std::vector<double> b{0.6};
  EXPECT_NEAR(raw_importance(b), 0.42, 1e-15);
  const std::vector<double> z{0.0, 0.0};
  EXPECT_EQ(raw_importance(z), 0.0);
  // g = 2 for every sample: -2 + 2 = 0.
  const std::vector<double> two{2.0, 2.0, 2.0};
  EXPECT_EQ(raw_importance(two), 0.0);
}

TEST(RawImportance, NoSamplesIsAnError) {
  EXPECT_THROW(raw_importance(std::span<const double>{}), ContractError);
}

TEST(RawImportance, AgreesWithTaylorForm) {
  Rng rng(1);
  for (int trial = 0; trial < 100; ++trial) {
    const double g = rng.uniform(-3, 3);
    const std::vector<double> one{g};
    EXPECT_NEAR(raw_importance(one), taylor2_importance(g, g * g), 1e-12);
  }
}

TEST(SampleGrads, HandDerivedSingleLayer) {
  // y = (x . m_in) W + b, masked by m_out; loss averaged over 2 samples x 2 outputs.
  MaskedLinear l("lin", 2, 2, true);
  l.weight = Tensor({2, 2}, {1.0, -2.0, 0.5, 3.0});
  l.bias = Tensor({2}, {0.1, -0.2});
  const Tensor x({2, 2}, {1.0, 2.0, -1.0, 0.5});
  const Tensor y({2, 2}, {0.0, 1.0, 1.0, 0.0});
  Tape tape;
  tape.track_samples(2);
  LinearVars v = bind(tape, l, {false, true, true});
  tape.backward(ad::mse_loss(forward(l, v, tape.constant(x)), tape.constant(y)));
  const Tensor gin = tape.sample_grad(v.mask_in), gout = tape.sample_grad(v.mask_out);
  for (std::size_t n = 0; n < 2; ++n) {
    double pre[2], r[2];
    for (std::size_t j = 0; j < 2; ++j) {
      pre[j] = x.at(n, 0) * l.weight.at(0, j) + x.at(n, 1) * l.weight.at(1, j) + l.bias[j];
      r[j] = pre[j] - y.at(n, j);  // d(0.5 sum r^2)/dy
    }
    // Per-window loss is 0.5 sum_j r_j^2, and the tape stores 1/N of its gradient.
    for (std::size_t i = 0; i < 2; ++i) {
      const double want = r[0] * x.at(n, i) * l.weight.at(i, 0) + r[1] * x.at(n, i) * l.weight.at(i, 1);
      EXPECT_NEAR(2.0 * gin.at(n, i), want, 1e-14);
    }
    for (std::size_t j = 0; j < 2; ++j) EXPECT_NEAR(2.0 * gout.at(n, j), r[j] * pre[j], 1e-14);
  }
}

TEST(SampleGrads, MatchFiniteDifferencesOfEachWindowLoss) {
  const ForecasterConfig c = tiny_config(4);
  Forecaster m(c);
  Rng rng(4);
  const Tensor ctx = random_tensor({5, 16}, rng), tgt = random_tensor({5, 4}, rng);
  const SampleGrads g = per_sample_grads(m, ctx, tgt, 2);
  std::vector<ChannelRef> probe{{"embed", ChannelSide::output, 3},  {"block0.attn.q", ChannelSide::output, 1},
                                {"block0.attn.v", ChannelSide::input, 5}, {"block1.attn.o", ChannelSide::input, 6},
                                {"block1.ffn.up", ChannelSide::output, 7}, {"block1.ffn.down", ChannelSide::input, 2},
                                {"head", ChannelSide::input, 0}};
  for (const auto& r : probe) {
    const std::size_t col = ref_column(g, r);
    ASSERT_LT(col, g.refs.size()) << r.str();
    MaskedLinear& l = m.layer(r.layer_id);
    double& mk = (r.side == ChannelSide::input ? l.mask_in : l.mask_out)[r.index];
    for (std::size_t n = 0; n < 5; ++n) {
      const double h = 1e-5;
      mk = 1.0 + h;
      const double up = sample_loss(m, ctx, tgt, n);
      mk = 1.0 - h;
      const double down = sample_loss(m, ctx, tgt, n);
      mk = 1.0;
      EXPECT_LE(testutil::rel_err(g.grads.at(n, col), (up - down) / (2 * h), 1e-7), 1e-5) << r.str() << " n=" << n;
    }
  }
}

TEST(SampleGrads, IndependentOfChunking) {
  Forecaster m(tiny_config(5));
  Rng rng(5);
  const Tensor ctx = random_tensor({7, 16}, rng), tgt = random_tensor({7, 4}, rng);
  const SampleGrads a = per_sample_grads(m, ctx, tgt, 1), b = per_sample_grads(m, ctx, tgt, 32);
  EXPECT_LE(max_abs_diff(a.grads, b.grads), 1e-12);
  EXPECT_NEAR(a.loss, b.loss, 1e-14);
  EXPECT_NEAR(a.loss, testutil::mse(m.predict_normalized(ctx), tgt), 1e-14);
}

TEST(SampleGrads, ScoresEqualManuallyAssembledProducts) {
  // Gradient of one window's loss w.r.t. a mask coordinate equals the sum
  // over its rows of (dL/d masked output) x (pre-mask value).
  ForecasterConfig c = tiny_config(6);
  Forecaster m(c);
  Rng rng(6);
  const Tensor ctx = random_tensor({3, 16}, rng), tgt = random_tensor({3, 4}, rng);
  const SampleGrads g = per_sample_grads(m, ctx, tgt);
  std::vector<double> manual;
  const MaskedLinear& head = m.head();
  for (std::size_t n = 0; n < 3; ++n) {
    Tensor c1 = Tensor::matrix(1, 16), t1 = Tensor::matrix(1, 4);
    for (std::size_t i = 0; i < 16; ++i) c1[i] = ctx.at(n, i);
    for (std::size_t i = 0; i < 4; ++i) t1[i] = tgt.at(n, i);
    const Tensor pred = m.predict_normalized(c1);
    // head output j: d L/d m_out_j = 2/H (pred_j - t_j) * pred_j (mask is 1).
    for (std::size_t j = 0; j < 4; ++j) manual.push_back(0.5 * (pred[j] - t1[j]) * pred[j]);
  }
  for (std::size_t j = 0; j < 4; ++j) {
    const std::size_t col = ref_column(g, {head.id, ChannelSide::output, j});
    std::vector<double> col_grads;
    for (std::size_t n = 0; n < 3; ++n) {
      EXPECT_NEAR(g.grads.at(n, col), manual[n * 4 + j], 1e-12);
      col_grads.push_back(manual[n * 4 + j]);
    }
    EXPECT_NEAR(g.raw_scores()[col], raw_importance(col_grads), 1e-12);
  }
}

TEST(SampleGrads, DeadInputChannelScoresZero) {
  Forecaster m(tiny_config(7));
  m.layer("block0.ffn.up").mask_out[5] = 0.0;
  Rng rng(7);
  const Tensor ctx = random_tensor({6, 16}, rng), tgt = random_tensor({6, 4}, rng);
  const SampleGrads g = per_sample_grads(m, ctx, tgt);
  const std::size_t col = ref_column(g, {"block0.ffn.down", ChannelSide::input, 5});
  for (std::size_t n = 0; n < 6; ++n) EXPECT_EQ(g.grads.at(n, col), 0.0);
  EXPECT_EQ(g.raw_scores()[col], 0.0);
}

TEST(SampleGrads, ZeroedHeadGivesZeroUpstreamMaskGradients) {
  Forecaster m(tiny_config(8));
  Block& b = m.blocks()[1];
  for (std::size_t c = b.heads.v_offsets[0]; c < b.heads.v_offsets[1]; ++c) b.o.mask_in[c] = 0.0;
  Rng rng(8);
  const Tensor ctx = random_tensor({4, 16}, rng), tgt = random_tensor({4, 4}, rng);
  const SampleGrads g = per_sample_grads(m, ctx, tgt);
  for (const char* id : {"block1.attn.q", "block1.attn.k", "block1.attn.v"}) {
    for (std::size_t c = b.heads.qk_offsets[0]; c < b.heads.qk_offsets[1]; ++c) {
      const std::size_t col = ref_column(g, {id, ChannelSide::output, c});
      for (std::size_t n = 0; n < 4; ++n) EXPECT_EQ(g.grads.at(n, col), 0.0) << id << " " << c;
    }
  }
  // The other head still matters.
  const std::size_t live = ref_column(g, {"block1.attn.v", ChannelSide::output, b.heads.v_offsets[1]});
  double any = 0.0;
  for (std::size_t n = 0; n < 4; ++n) any += std::abs(g.grads.at(n, live));
  EXPECT_GT(any, 0.0);
}

TEST(SampleGrads, RefsFollowModelMaskOrder) {
  Forecaster m(tiny_config());
  Rng rng(9);
  const SampleGrads g = per_sample_grads(m, random_tensor({2, 16}, rng), random_tensor({2, 4}, rng));
  const auto ledger = ImportanceLedger::from_model(m);
  ASSERT_EQ(g.refs.size(), ledger.size());
  for (std::size_t i = 0; i < g.refs.size(); ++i) EXPECT_EQ(g.refs[i], ledger.entries()[i].ref);
}

TEST(Ema, WorkedExamples) {
  ImportanceLedger l;
  l.add({{"a", ChannelSide::input, 0}});
  l.add({{"a", ChannelSide::input, 1}, 0.0, 0.0, false});
  const std::vector<double> one{1.0, 4.0}, zero{0.0, 0.0};
  ema_update(l, one, 0.5);
  EXPECT_EQ(l.entries()[0].ema, 0.5);
  EXPECT_EQ(l.entries()[1].ema, 2.0);  // dead channels keep updating
  ema_update(l, zero, 0.5);
  EXPECT_EQ(l.entries()[0].ema, 0.25);
  EXPECT_EQ(l.entries()[0].last_raw, 0.0);
  ema_update(l, one, 1.0);
  EXPECT_EQ(l.entries()[1].ema, 4.0);
  EXPECT_EQ(l.batches, 3u);
}

TEST(Ema, AlphaOutsideRangeIsAConfigError) {
  ImportanceLedger l;
  l.add({{"a", ChannelSide::input, 0}});
  const std::vector<double> s{1.0};
  EXPECT_THROW(ema_update(l, s, 0.0), ConfigError);
  EXPECT_THROW(ema_update(l, s, 1.5), ConfigError);
  EXPECT_THROW(ema_update(l, std::vector<double>{1.0, 2.0}, 0.5), DimensionError);
}

TEST(PruneStep, WorkedExample) {
  ImportanceLedger l;
  const double ema[] = {3.0, 1.0, 2.0, 0.5, 0.1, 1.0};
  for (std::size_t i = 0; i < 6; ++i) l.add({{"x", ChannelSide::output, i}, ema[i]});
  l.entries()[3].is_protected = true;
  l.entries()[4].alive = false;
  // Lowest alive unprotected: index 1 and 5 tie at 1.0, then 2.
  const auto out = prune_step(l, 2);
  ASSERT_EQ(out.size(), 2u);
  EXPECT_EQ(out[0].index, 1u);
  EXPECT_EQ(out[1].index, 5u);
  EXPECT_FALSE(l.entries()[5].alive);
  EXPECT_EQ(prune_step(l, 1).front().index, 2u);
  EXPECT_TRUE(prune_step(l, 0).empty());
  EXPECT_THROW(prune_step(l, 2), ContractError);
}

TEST(PruneStep, TiesBreakOnLayerThenSideThenIndex) {
  ImportanceLedger l;
  l.add({{"b", ChannelSide::input, 0}, 1.0});
  l.add({{"a", ChannelSide::output, 0}, 1.0});
  l.add({{"a", ChannelSide::input, 7}, 1.0});
  l.add({{"a", ChannelSide::input, 2}, 1.0});
  const auto out = prune_step(l, 4);
  EXPECT_EQ(out[0].str(), "a:input:2");
  EXPECT_EQ(out[1].str(), "a:input:7");
  EXPECT_EQ(out[2].str(), "a:output:0");
  EXPECT_EQ(out[3].str(), "b:input:0");
}

TEST(PruneStep, MatchesFullSortOracle) {
  Rng rng(10);
  for (int trial = 0; trial < 50; ++trial) {
    ImportanceLedger l;
    const std::size_t n = 5 + rng.below(40);
    for (std::size_t i = 0; i < n; ++i) {
      LedgerEntry e{{"L" + std::to_string(rng.below(3)), rng.below(2) ? ChannelSide::input : ChannelSide::output, i},
                    double(rng.below(6))};  // coarse values force ties
      e.alive = rng.uniform() > 0.2;
      e.is_protected = rng.uniform() < 0.1;
      l.add(e);
    }
    std::vector<LedgerEntry> cand;
    for (const auto& e : l.entries())
      if (e.alive && !e.is_protected) cand.push_back(e);
    std::sort(cand.begin(), cand.end(), [](const LedgerEntry& a, const LedgerEntry& b) {
      return std::tie(a.ema, a.ref) < std::tie(b.ema, b.ref);
    });
    const std::size_t k = cand.empty() ? 0 : rng.below(cand.size() + 1);
    const auto out = prune_step(l, k);
    ASSERT_EQ(out.size(), k);
    for (std::size_t i = 0; i < k; ++i) EXPECT_EQ(out[i], cand[i].ref);
  }
}

TEST(Ledger, ProtectsEmbeddingInputsAndHeadOutputs) {
  Forecaster m(tiny_config());
  const auto l = ImportanceLedger::from_model(m);
  for (const auto& e : l.entries()) {
    const bool io = (e.ref.layer_id == "embed" && e.ref.side == ChannelSide::input) ||
                    (e.ref.layer_id == "head" && e.ref.side == ChannelSide::output);
    EXPECT_EQ(e.is_protected, io) << e.ref.str();
  }
  EXPECT_EQ(l.prunable_count(), l.size() - 4 - 4);
  EXPECT_EQ(ImportanceLedger::from_model(m, false).prunable_count(), l.size());
}

TEST(ProgressivePrune, ZeroRatioLeavesModelUntouched) {
  Forecaster m(tiny_config(11));
  const Forecaster before = m;
  PruneSchedule s;
  s.ratio = 0.0;
  s.batch_size = 16;
  const PruneResult r = progressive_prune(m, sine_windows(), s);
  EXPECT_EQ(r.target, 0u);
  EXPECT_EQ(r.removed, 0u);
  EXPECT_TRUE(m.masks_all_ones());
  Rng rng(11);
  const Tensor x = random_tensor({4, 16}, rng);
  EXPECT_EQ(m.predict_normalized(x), before.predict_normalized(x));
}

TEST(ProgressivePrune, ReachesTargetWithMonotoneAliveCount) {
  Forecaster m(tiny_config(12));
  PruneSchedule s;
  s.ratio = 0.2;
  s.epochs = 2;
  s.batch_size = 32;
  const WindowSet w = sine_windows();
  const PruneResult r = progressive_prune(m, w, s);
  const std::size_t prunable = ImportanceLedger::from_model(Forecaster(tiny_config(12))).prunable_count();
  EXPECT_EQ(r.target, static_cast<std::size_t>(std::floor(prunable * 0.4 + 1e-9)));
  EXPECT_EQ(r.removed, r.target);
  std::size_t prev = r.ledger.size(), dead_masks = 0;
  for (const auto& t : r.trace) {
    EXPECT_LE(t.alive_count, prev);
    EXPECT_EQ(prev - t.alive_count, t.pruned.size());
    prev = t.alive_count;
  }
  for (auto& mr : m.masks())
    for (double v : mr.mask->data()) dead_masks += v == 0.0;
  EXPECT_EQ(dead_masks, r.removed);
  for (const auto& e : r.ledger.entries())
    if (e.is_protected) EXPECT_TRUE(e.alive);
}

TEST(ProgressivePrune, DeterministicForFixedSeed) {
  const WindowSet w = sine_windows();
  PruneSchedule s;
  s.ratio = 0.1;
  s.batch_size = 20;
  Forecaster a(tiny_config(13)), b(tiny_config(13));
  const PruneResult ra = progressive_prune(a, w, s), rb = progressive_prune(b, w, s);
  ASSERT_EQ(ra.trace.size(), rb.trace.size());
  for (std::size_t i = 0; i < ra.trace.size(); ++i) {
    EXPECT_EQ(ra.trace[i].pruned, rb.trace[i].pruned);
    EXPECT_EQ(ra.trace[i].loss, rb.trace[i].loss);
  }
  for (std::size_t i = 0; i < ra.ledger.size(); ++i) EXPECT_EQ(ra.ledger.entries()[i].ema, rb.ledger.entries()[i].ema);
}

TEST(ProgressivePrune, PlantedDeadChannelsGoFirst) {
  Forecaster m(tiny_config(14));
  MaskedLinear& up = m.layer("block1.ffn.up");
  for (std::size_t r = 0; r < up.rows(); ++r) up.weight.at(r, 9) = 0.0;
  up.bias[9] = 0.0;
  PruneSchedule s;
  s.ratio = 0.05;
  s.k_per_batch = 2;
  s.batch_size = 16;
  const PruneResult r = progressive_prune(m, sine_windows(), s);
  ASSERT_FALSE(r.trace.empty());
  const std::vector<ChannelRef> want{{"block1.ffn.down", ChannelSide::input, 9}, {"block1.ffn.up", ChannelSide::output, 9}};
  EXPECT_EQ(r.trace.front().pruned, want);
}

TEST(ProgressivePrune, StopsAtParameterFraction) {
  Forecaster m(tiny_config(15));
  PruneSchedule s;
  s.ratio = 0.5;
  s.epochs = 2;
  s.batch_size = 16;
  s.target_param_fraction = 0.8;
  const PruneResult r = progressive_prune(m, sine_windows(), s);
  EXPECT_LE(m.remaining_fraction(), 0.8);
  EXPECT_LT(r.removed, r.target);
}

TEST(ProgressivePrune, ScheduleViolationsAreListed) {
  PruneSchedule s;
  s.ratio = 2.0;
  s.epochs = 0;
  s.alpha = 0.0;
  EXPECT_EQ(s.violations().size(), 3u);
  Forecaster m(tiny_config());
  EXPECT_THROW(progressive_prune(m, sine_windows(), s), ConfigError);
}

TEST(ProgressivePrune, TraceAndScoresSerialize) {
  Forecaster m(tiny_config(16));
  PruneSchedule s;
  s.ratio = 0.1;
  s.batch_size = 64;
  const PruneResult r = progressive_prune(m, sine_windows(), s);
  std::ostringstream trace, scores;
  write_trace_jsonl(r.trace, trace);
  write_scores_csv(r.ledger, scores);
  std::istringstream lines(trace.str());
  std::string line;
  std::size_t n = 0;
  while (std::getline(lines, line)) {
    const auto j = nlohmann::json::parse(line);
    EXPECT_EQ(j.at("j").get<std::size_t>(), ++n);
    EXPECT_TRUE(j.contains("loss") && j.contains("pruned") && j.contains("alive_count"));
  }
  EXPECT_EQ(n, r.trace.size());
  const std::string csv = scores.str();
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "layer,side,index,ema,last_raw,alive,protected");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), static_cast<long>(r.ledger.size() + 1));
}

TEST(PruneStat, ZeroThresholdsPruneNothing) {
  Forecaster m(tiny_config(17));
  Rng rng(17);
  const SparsityStats st = collect_stats(m, random_tensor({8, 16}, rng));
  const StatPruneResult r = prune_stat(m, st, 0.0, 0.0);
  EXPECT_TRUE(r.refs.empty());
  EXPECT_TRUE(m.masks_all_ones());
}

TEST(PruneStat, RemovesSilentHeadAndNeverFiringChannel) {
  ForecasterConfig c = tiny_config(18);
  c.activation = ActivationKind::relu;
  Forecaster m(c);
  Block& b = m.blocks()[0];
  for (std::size_t r = 0; r < b.v.rows(); ++r)
    for (std::size_t col = b.heads.v_offsets[1]; col < b.heads.v_offsets[2]; ++col) b.v.weight.at(r, col) = 0.0;
  for (std::size_t col = b.heads.v_offsets[1]; col < b.heads.v_offsets[2]; ++col) b.v.bias[col] = 0.0;
  b.up.bias[4] = -1e6;
  Rng rng(18);
  const SparsityStats st = collect_stats(m, random_tensor({8, 16}, rng));
  const StatPruneResult r = prune_stat(m, st, 0.01, 0.01);
  ASSERT_EQ(r.heads.size(), 1u);
  EXPECT_EQ(r.heads[0], std::make_pair(std::size_t{0}, std::size_t{1}));
  EXPECT_NE(std::find(r.ffn.begin(), r.ffn.end(), std::make_pair(std::size_t{0}, std::size_t{4})), r.ffn.end());
  EXPECT_EQ(b.up.mask_out[4], 0.0);
  EXPECT_EQ(b.down.mask_in[4], 0.0);
  for (std::size_t col = b.heads.v_offsets[1]; col < b.heads.v_offsets[2]; ++col) EXPECT_EQ(b.o.mask_in[col], 0.0);
  // The sliced model drops the head entirely.
  EXPECT_EQ(m.sliced().blocks()[0].heads.count(), 1u);
}

TEST(PruneStat, SweepIsMonotone) {
  ForecasterConfig c = tiny_config(19);
  c.activation = ActivationKind::relu;
  const Forecaster base(c);
  Rng rng(19);
  const SparsityStats st = collect_stats(base, random_tensor({8, 16}, rng));
  std::size_t prev_heads = 0, prev_ffn = 0;
  for (double thr : {0.0, 0.2, 0.4, 0.6, 0.8, 1.0}) {
    Forecaster m = base;
    const StatPruneResult r = prune_stat(m, st, thr, thr);
    EXPECT_GE(r.heads.size(), prev_heads);
    EXPECT_GE(r.ffn.size(), prev_ffn);
    prev_heads = r.heads.size();
    prev_ffn = r.ffn.size();
  }
}

TEST(PruneStat, BadThresholdsAreConfigErrors) {
  Forecaster m(tiny_config());
  Rng rng(20);
  const SparsityStats st = collect_stats(m, random_tensor({2, 16}, rng));
  EXPECT_THROW(prune_stat(m, st, -0.1, 0.0), ConfigError);
  EXPECT_THROW(prune_stat(m, st, 0.0, 1.1), ConfigError);
}

TEST(Oracle, DeadChannelHasZeroImportance) {
  Forecaster m(tiny_config(21));
  m.layer("block0.ffn.up").mask_out[3] = 0.0;
  Rng rng(21);
  const Tensor ctx = random_tensor({4, 16}, rng), tgt = random_tensor({4, 4}, rng);
  EXPECT_EQ(oracle_importance(m, ctx, tgt, ChannelRef{"block0.ffn.down", ChannelSide::input, 3}), 0.0);
  EXPECT_EQ(oracle_importance(m, ctx, tgt, ChannelRef{"block0.ffn.up", ChannelSide::output, 3}), 0.0);
}

TEST(Oracle, EqualsLossDifferenceAndRestoresModel) {
  Forecaster m(tiny_config(22));
  Rng rng(22);
  const Tensor ctx = random_tensor({4, 16}, rng), tgt = random_tensor({4, 4}, rng);
  const ChannelRef r{"block1.attn.v", ChannelSide::output, 2};
  const double base = testutil::mse(m.predict_normalized(ctx), tgt);
  Forecaster cut = m;
  cut.layer(r.layer_id).mask_out[2] = 0.0;
  EXPECT_NEAR(oracle_importance(m, ctx, tgt, r), std::abs(testutil::mse(cut.predict_normalized(ctx), tgt) - base),
              1e-15);
  EXPECT_TRUE(m.masks_all_ones());
}

TEST(Oracle, TaylorIsExactForASingleLinearLayer) {
  // The loss is quadratic in each mask coordinate, so the second-order
  // expansion of the removal is exact.
  Rng rng(23);
  MaskedLinear l("lin", 6, 3, true);
  l.init_uniform(rng);
  const Tensor x = random_tensor({10, 6}, rng), y = random_tensor({10, 3}, rng);
  Tensor g, g_cut;
  const double base = linear_loss(l, x, y, &g);
  for (std::size_t i = 0; i < 6; ++i) {
    MaskedLinear cut = l;
    cut.mask_in[i] = 0.0;
    const double removed = linear_loss(cut, x, y, &g_cut);
    const double h = g[i] - g_cut[i];  // gradient is linear in m_i
    EXPECT_NEAR(taylor2_importance(g[i], h), std::abs(removed - base), 1e-10);
  }
}

TEST(Spearman, KnownValues) {
  const std::vector<double> a{1, 2, 3, 4}, rev{4, 3, 2, 1}, tied{1, 2, 2, 3}, flat{5, 5, 5, 5};
  EXPECT_NEAR(spearman(a, a), 1.0, 1e-15);
  EXPECT_NEAR(spearman(a, rev), -1.0, 1e-15);
  EXPECT_NEAR(spearman(tied, a), 4.5 / std::sqrt(22.5), 1e-15);
  EXPECT_EQ(spearman(flat, a), 0.0);
  EXPECT_THROW(spearman(std::vector<double>{1}, std::vector<double>{1}), ContractError);
}

TEST(PruneReport, CountsPrunedChannels) {
  Forecaster m(tiny_config());
  m.layer("block0.ffn.up").mask_out[0] = 0.0;
  m.layer("block0.ffn.down").mask_in[0] = 0.0;
  const auto j = prune_report(m, ImportanceLedger::from_model(m));
  EXPECT_EQ(j.at("alive_channels").get<std::size_t>(), ImportanceLedger::from_model(m).size() - 2);
  EXPECT_LT(j.at("param_fraction").get<double>(), 1.0);
  for (const auto& l : j.at("layers"))
    if (l.at("layer") == "block0.ffn.up") EXPECT_EQ(l.at("output_pruned").get<std::size_t>(), 1u);
}

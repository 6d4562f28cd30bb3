#include <gtest/gtest.h>

#include "prunecast/errors.hpp"
#include "test_util.hpp"

using namespace prunecast;
using testutil::max_rel_err;
using testutil::random_tensor;

namespace {

using Build = std::function<Var(Tape&, const std::vector<Var>&)>;

// Reduces op output to a scalar through fixed random weights so that
// gradients are not trivially zero (softmax rows, normalized rows).
double weighted_value(const std::vector<Tensor>& inputs, const Build& op, const Tensor& w) {
  Tape t;
  std::vector<Var> vs;
  for (const auto& x : inputs) vs.push_back(t.leaf(x));
  return ad::sum(ad::mul(op(t, vs), t.constant(w))).value()[0];
}

// Worst relative error between tape gradients and central differences over every input.
double op_grad_error(std::vector<Tensor> inputs, const Build& op, std::uint64_t seed = 11) {
  Rng rng(seed);
  Tensor w;
  {
    Tape t;
    std::vector<Var> vs;
    for (const auto& x : inputs) vs.push_back(t.leaf(x));
    w = random_tensor(op(t, vs).shape(), rng);
  }
  Tape t;
  std::vector<Var> vs;
  for (const auto& x : inputs) vs.push_back(t.leaf(x, true));
  t.backward(ad::sum(ad::mul(op(t, vs), t.constant(w))));
  double worst = 0.0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const Tensor analytic = t.grad(vs[i]);
    const Tensor numeric = testutil::numeric_grad(inputs[i], [&] { return weighted_value(inputs, op, w); });
    worst = std::max(worst, max_rel_err(analytic, numeric));
  }
  return worst;
}

}  // namespace

TEST(Matmul, IdentityTimesMatrix) {
  Tape t;
  Var a = t.leaf(Tensor({2, 2}, {1, 0, 0, 1}));
  Var b = t.leaf(Tensor({2, 2}, {3, 4, 5, 6}));
  EXPECT_EQ(ad::matmul(a, b).value(), Tensor({2, 2}, {3, 4, 5, 6}));
}

TEST(Matmul, RowTimesColumn) {
  Tape t;
  Var c = ad::matmul(t.leaf(Tensor({1, 2}, {1, 2})), t.leaf(Tensor({2, 1}, {3, 4})));
  EXPECT_EQ(c.value(), Tensor({1, 1}, {11}));
}

TEST(Matmul, GradientMatchesFiniteDifferences) {
  Rng rng(1);
  const double err = op_grad_error({random_tensor({3, 4}, rng), random_tensor({4, 2}, rng)},
                                   [](Tape&, const std::vector<Var>& v) { return ad::matmul(v[0], v[1]); });
  EXPECT_LE(err, 1e-6);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  Tape t;
  try {
    ad::matmul(t.leaf(Tensor({2, 3})), t.leaf(Tensor({2, 3})));
    FAIL() << "expected a dimension error";
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2x3]"), std::string::npos) << msg;
  }
}

TEST(Softmax, ZerosGiveUniformRow) {
  Tape t;
  Var s = ad::softmax_rows(t.leaf(Tensor({1, 2}, {0, 0})));
  EXPECT_DOUBLE_EQ(s.value()[0], 0.5);
  EXPECT_DOUBLE_EQ(s.value()[1], 0.5);
}

TEST(Softmax, LargeLogitsStayFinite) {
  Tape t;
  Var s = ad::softmax_rows(t.leaf(Tensor({1, 2}, {1000, 0})));
  EXPECT_TRUE(std::isfinite(s.value()[0]));
  EXPECT_NEAR(s.value()[0], 1.0, 1e-12);
  EXPECT_NEAR(s.value()[1], 0.0, 1e-12);
}

TEST(Softmax, RowsSumToOne) {
  Rng rng(2);
  Tape t;
  Var s = ad::softmax_rows(t.leaf(random_tensor({5, 7}, rng, -20, 20)));
  for (std::size_t r = 0; r < 5; ++r) {
    double sum = 0.0;
    for (std::size_t c = 0; c < 7; ++c) sum += s.value().at(r, c);
    EXPECT_NEAR(sum, 1.0, 1e-12);
  }
}

TEST(Softmax, GradientMatchesFiniteDifferences) {
  Rng rng(3);
  EXPECT_LE(op_grad_error({random_tensor({2, 3}, rng)},
                          [](Tape&, const std::vector<Var>& v) { return ad::softmax_rows(v[0]); }),
            1e-6);
}

TEST(Activation, ReluValues) {
  Tape t;
  Var r = ad::relu(t.leaf(Tensor({2}, {-2, 3})));
  EXPECT_EQ(r.value()[0], 0.0);
  EXPECT_EQ(r.value()[1], 3.0);
}

TEST(Activation, GeluUsesTanhForm) {
  const double x = 0.7;
  const double expect = 0.5 * x * (1.0 + std::tanh(std::sqrt(2.0 / M_PI) * (x + 0.044715 * x * x * x)));
  EXPECT_DOUBLE_EQ(ad::gelu_value(x), expect);
}

TEST(Activation, GeluGradientAtPointSeven) {
  Tape t;
  Var x = t.leaf(Tensor({1}, {0.7}), true);
  t.backward(ad::sum(ad::gelu(x)));
  const double h = 1e-5;
  const double numeric = (ad::gelu_value(0.7 + h) - ad::gelu_value(0.7 - h)) / (2 * h);
  EXPECT_LE(testutil::rel_err(t.grad(x)[0], numeric), 1e-5);
}

TEST(Elementwise, AddMulBroadcastGradients) {
  Rng rng(4);
  // Same shape, row vector, and leading-batch tiling.
  for (Shape bs : {Shape{4, 3}, Shape{3}, Shape{2, 3}}) {
    const std::vector<Tensor> in{random_tensor({4, 3}, rng), random_tensor(bs, rng)};
    EXPECT_LE(op_grad_error(in, [](Tape&, const std::vector<Var>& v) { return ad::add(v[0], v[1]); }), 1e-6);
    EXPECT_LE(op_grad_error(in, [](Tape&, const std::vector<Var>& v) { return ad::mul(v[0], v[1]); }), 1e-6);
  }
}

TEST(Elementwise, BroadcastBeyondLeadingBatchIsRejected) {
  Tape t;
  EXPECT_THROW(ad::add(t.leaf(Tensor({4, 3})), t.leaf(Tensor({3, 3}))), DimensionError);
  EXPECT_THROW(ad::mul(t.leaf(Tensor({4, 3})), t.leaf(Tensor({4}))), DimensionError);
}

TEST(Elementwise, OtherOpsMatchFiniteDifferences) {
  Rng rng(5);
  const Tensor x = random_tensor({3, 5}, rng);
  const Tensor gain = random_tensor({5}, rng), off = random_tensor({5}, rng);
  EXPECT_LE(op_grad_error({x, gain, off},
                          [](Tape&, const std::vector<Var>& v) { return ad::layer_norm(v[0], v[1], v[2], 1e-5); }),
            1e-4);
  EXPECT_LE(op_grad_error({x, gain}, [](Tape&, const std::vector<Var>& v) { return ad::rms_norm(v[0], v[1], 1e-5); }),
            1e-4);
  EXPECT_LE(op_grad_error({x}, [](Tape&, const std::vector<Var>& v) { return ad::gelu(v[0]); }), 1e-4);
  EXPECT_LE(op_grad_error({x}, [](Tape&, const std::vector<Var>& v) { return ad::scale(v[0], -1.5); }), 1e-6);
  EXPECT_LE(op_grad_error({x, random_tensor({5}, rng)},
                          [](Tape&, const std::vector<Var>& v) { return ad::mask_columns(v[0], v[1]); }),
            1e-6);
  EXPECT_LE(op_grad_error({x}, [](Tape&, const std::vector<Var>& v) { return ad::gather_columns(v[0], {4, 0, 2}); }),
            1e-6);
  EXPECT_LE(op_grad_error({x}, [](Tape&, const std::vector<Var>& v) { return ad::scatter_columns(v[0], {6, 0, 2, 5, 3}, 8); }),
            1e-6);
  EXPECT_LE(op_grad_error({x}, [](Tape&, const std::vector<Var>& v) { return ad::take_rows(v[0], {2, 0}); }), 1e-6);
}

TEST(Elementwise, MseLossMatchesFiniteDifferences) {
  Rng rng(6);
  std::vector<Tensor> in{random_tensor({3, 4}, rng), random_tensor({3, 4}, rng)};
  Tape t;
  Var p = t.leaf(in[0], true), y = t.leaf(in[1], true);
  t.backward(ad::mse_loss(p, y));
  auto f = [&] {
    Tape u;
    return ad::mse_loss(u.leaf(in[0]), u.leaf(in[1])).value()[0];
  };
  EXPECT_LE(max_rel_err(t.grad(p), testutil::numeric_grad(in[0], f)), 1e-6);
  EXPECT_LE(max_rel_err(t.grad(y), testutil::numeric_grad(in[1], f)), 1e-6);
}

TEST(Elementwise, MseOfIdenticalInputsIsZeroWithZeroGradient) {
  Rng rng(7);
  const Tensor x = random_tensor({2, 3}, rng);
  Tape t;
  Var a = t.leaf(x, true);
  Var loss = ad::mse_loss(a, t.constant(x));
  EXPECT_EQ(loss.value()[0], 0.0);
  t.backward(loss);
  const Tensor ga = t.grad(a);
  for (double g : ga.data()) EXPECT_EQ(g, 0.0);
}

TEST(LayerNorm, RowsAreStandardized) {
  Rng rng(8);
  Tape t;
  const Tensor x = random_tensor({6, 16}, rng, -5, 5);
  Var y = ad::layer_norm(t.leaf(x), t.leaf(Tensor({16}, 1.0)), t.leaf(Tensor({16}, 0.0)), 1e-14);
  for (std::size_t r = 0; r < 6; ++r) {
    double mean = 0.0, var = 0.0;
    for (std::size_t c = 0; c < 16; ++c) mean += y.value().at(r, c);
    mean /= 16;
    for (std::size_t c = 0; c < 16; ++c) var += (y.value().at(r, c) - mean) * (y.value().at(r, c) - mean);
    var /= 16;
    EXPECT_LE(std::abs(mean), 1e-10);
    EXPECT_NEAR(var, 1.0, 1e-8);
  }
}

TEST(Attention, GradientMatchesFiniteDifferences) {
  Rng rng(9);
  ad::AttentionLayout lay{2, 3, {0, 2, 3}, {0, 1, 3}, 0.7, false};
  const std::vector<Tensor> in{random_tensor({6, 3}, rng), random_tensor({6, 3}, rng), random_tensor({6, 3}, rng)};
  EXPECT_LE(op_grad_error(in, [&](Tape&, const std::vector<Var>& v) { return ad::attention(v[0], v[1], v[2], lay); }),
            1e-6);
  lay.causal = true;
  EXPECT_LE(op_grad_error(in, [&](Tape&, const std::vector<Var>& v) { return ad::attention(v[0], v[1], v[2], lay); }),
            1e-6);
}

TEST(Backward, SquareHasGradientSix) {
  Tape t;
  Var x = t.leaf(Tensor({1}, {3.0}), true);
  t.backward(ad::sum(ad::mul(x, x)));
  EXPECT_EQ(t.grad(x)[0], 6.0);
}

TEST(Backward, UnusedLeafHasZeroGradient) {
  Tape t;
  Var x = t.leaf(Tensor({1}, {3.0}), true);
  Var y = t.leaf(Tensor({2}, {1.0, 2.0}), true);
  t.backward(ad::sum(ad::mul(x, x)));
  const Tensor gy = t.grad(y);
  for (double g : gy.data()) EXPECT_EQ(g, 0.0);
}

TEST(Backward, NonScalarLossIsAContractError) {
  Tape t;
  Var x = t.leaf(Tensor({2}, {1.0, 2.0}), true);
  EXPECT_THROW(t.backward(ad::scale(x, 2.0)), ContractError);
}

TEST(Backward, SecondBackwardIsAStateError) {
  Tape t;
  Var x = t.leaf(Tensor({1}, {3.0}), true);
  Var loss = ad::sum(ad::mul(x, x));
  t.backward(loss);
  EXPECT_THROW(t.backward(loss), StateError);
}

TEST(Backward, TapeIsTopologicallyOrdered) {
  Tape t;
  Var a = t.leaf(Tensor({1}, {1.0}), true);
  Var b = ad::scale(a, 2.0);
  Var c = ad::add(a, b);
  EXPECT_LT(a.id, b.id);
  EXPECT_LT(b.id, c.id);
}

TEST(Backward, RepeatedRunsAreBitIdentical) {
  auto run = [] {
    Rng rng(10);
    Tape t;
    Var a = t.leaf(random_tensor({4, 5}, rng), true);
    Var b = t.leaf(random_tensor({5, 3}, rng), true);
    Var y = ad::softmax_rows(ad::gelu(ad::matmul(a, b)));
    Var loss = ad::sum(ad::mul(y, y));
    t.backward(loss);
    return std::make_pair(loss.value(), t.grad(a));
  };
  EXPECT_EQ(run(), run());
}

TEST(Backward, PerSampleMaskGradientsSumToBatchGradient) {
  Rng rng(12);
  Tape t;
  t.track_samples(3);
  Var x = t.leaf(random_tensor({6, 4}, rng));
  Var m = t.leaf(Tensor({4}, 1.0), true);
  Var y = ad::mask_columns(x, m);
  t.backward(ad::sum(ad::mul(y, y)));
  const Tensor per = t.sample_grad(m), total = t.grad(m);
  for (std::size_t j = 0; j < 4; ++j) {
    double s = 0.0;
    for (std::size_t n = 0; n < 3; ++n) s += per.at(n, j);
    EXPECT_NEAR(s, total[j], 1e-12);
    // Sample n owns rows 2n and 2n+1.
    EXPECT_NEAR(per.at(1, j), 2 * (x.value().at(2, j) * x.value().at(2, j) + x.value().at(3, j) * x.value().at(3, j)),
                1e-12);
  }
}

#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <map>
#include <random>

#include "cunet/grad_check.hpp"
#include "cunet/ops.hpp"
#include "cunet/tape.hpp"
#include "cunet/tensor.hpp"

using namespace cunet;

namespace {

Tensor<double> randn(Shape s, std::uint64_t seed, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d(0.0, scale);
  Tensor<double> t(std::move(s));
  for (auto& v : t.data()) v = d(rng);
  return t;
}

// Direct seven-loop convolution.
Tensor<double> conv_oracle(const Tensor<double>& x, const Tensor<double>& w,
                           const Tensor<double>& b, std::size_t stride, std::size_t pad) {
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t O = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const std::size_t Ho = (H + 2 * pad - kh) / stride + 1, Wo = (W + 2 * pad - kw) / stride + 1;
  Tensor<double> y(Shape{N, O, Ho, Wo});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t o = 0; o < O; ++o)
      for (std::size_t i = 0; i < Ho; ++i)
        for (std::size_t j = 0; j < Wo; ++j) {
          double acc = b.defined() ? b[o] : 0.0;
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t p = 0; p < kh; ++p)
              for (std::size_t q = 0; q < kw; ++q) {
                const long r = static_cast<long>(i * stride + p) - static_cast<long>(pad);
                const long s = static_cast<long>(j * stride + q) - static_cast<long>(pad);
                if (r < 0 || s < 0 || r >= static_cast<long>(H) || s >= static_cast<long>(W))
                  continue;
                acc += x[((n * C + c) * H + r) * W + s] * w[((o * C + c) * kh + p) * kw + q];
              }
          y[((n * O + o) * Ho + i) * Wo + j] = acc;
        }
  return y;
}

struct ConvCase {
  std::size_t n, cin, cout, hw, k, stride, pad;
};

class ConvOracle : public ::testing::TestWithParam<ConvCase> {};

TEST_P(ConvOracle, MatchesDirectLoops) {
  const ConvCase c = GetParam();
  auto x = randn({c.n, c.cin, c.hw, c.hw}, 1);
  auto w = randn({c.cout, c.cin, c.k, c.k}, 2);
  auto b = randn({c.cout}, 3);
  auto y = ops::conv2d<double>(nullptr, x, w, b, c.stride, c.pad);
  auto ref = conv_oracle(x, w, b, c.stride, c.pad);
  ASSERT_EQ(y.shape(), ref.shape());
  for (std::size_t i = 0; i < y.numel(); ++i) EXPECT_NEAR(y[i], ref[i], 1e-12);
}

INSTANTIATE_TEST_SUITE_P(Geometries, ConvOracle,
                         ::testing::Values(ConvCase{2, 3, 4, 8, 3, 1, 1}, ConvCase{1, 2, 5, 9, 1, 1, 0},
                                           ConvCase{2, 1, 3, 16, 7, 2, 3},
                                           ConvCase{1, 4, 2, 7, 3, 2, 0},
                                           ConvCase{3, 5, 6, 4, 1, 1, 0}));

TEST(Conv, RejectsChannelMismatchNamingBothShapes) {
  auto x = randn({1, 3, 8, 8}, 1);
  auto w = randn({4, 2, 3, 3}, 2);
  try {
    ops::conv2d<double>(nullptr, x, w, {}, 1, 1);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[1x3x8x8]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[4x2x3x3]"), std::string::npos) << msg;
  }
}

TEST(Conv, FloatAgreesWithDouble) {
  auto x = randn({2, 3, 8, 8}, 4);
  auto w = randn({5, 3, 3, 3}, 5, 0.3);
  auto b = randn({5}, 6);
  auto yd = ops::conv2d<double>(nullptr, x, w, b, 1, 1);
  auto yf = ops::conv2d<float>(nullptr, tensor_cast<float>(x), tensor_cast<float>(w),
                               tensor_cast<float>(b), 1, 1);
  for (std::size_t i = 0; i < yd.numel(); ++i) EXPECT_NEAR(yf[i], yd[i], 1e-4);
}

// Loss = mse(op(inputs), fixed random target): generic and smooth away from kinks.
GradCheckReport check_op(std::map<std::string, Tensor<double>>& params,
                         const std::function<Tensor<double>(Tape<double>*)>& op,
                         double eps = 1e-5) {
  for (auto& [_, t] : params) t.set_requires_grad(true);
  const Tensor<double> probe = op(nullptr);
  const Tensor<double> target = randn(probe.shape(), 99);
  ScalarFn f = [&](Tape<double>* tape) { return ops::mse_loss(tape, op(tape), target); };
  return finite_diff_check(f, params, eps, 1e-5, 20, 7);
}

TEST(OpGradients, Conv2d) {
  std::map<std::string, Tensor<double>> p{{"x", randn({2, 3, 6, 6}, 1)},
                                          {"w", randn({4, 3, 3, 3}, 2)},
                                          {"b", randn({4}, 3)}};
  auto r = check_op(p, [&](Tape<double>* t) {
    return ops::conv2d(t, p.at("x"), p.at("w"), p.at("b"), 2, 1);
  });
  EXPECT_TRUE(r.pass);
  EXPECT_LT(r.max_rel_err, 1e-6);
}

TEST(OpGradients, Conv1x1) {
  std::map<std::string, Tensor<double>> p{{"x", randn({2, 5, 4, 4}, 1)},
                                          {"w", randn({3, 5, 1, 1}, 2)},
                                          {"b", randn({3}, 3)}};
  auto r = check_op(p, [&](Tape<double>* t) {
    return ops::conv2d(t, p.at("x"), p.at("w"), p.at("b"), 1, 0);
  });
  EXPECT_TRUE(r.pass);
  EXPECT_LT(r.max_rel_err, 1e-7);
}

TEST(OpGradients, BatchNormTrainMode) {
  std::map<std::string, Tensor<double>> p{{"x", randn({3, 4, 3, 3}, 1)},
                                          {"g", randn({4}, 2)},
                                          {"b", randn({4}, 3)}};
  auto r = check_op(p, [&](Tape<double>* t) {
    ops::BatchNormStats<double> stats(4);
    return ops::batch_norm(t, p.at("x"), p.at("g"), p.at("b"), stats, ops::Mode::Train);
  });
  EXPECT_TRUE(r.pass) << r.max_rel_err;
}

TEST(OpGradients, BatchNormEvalMode) {
  std::map<std::string, Tensor<double>> p{{"x", randn({2, 3, 4, 4}, 1)},
                                          {"g", randn({3}, 2)},
                                          {"b", randn({3}, 3)}};
  ops::BatchNormStats<double> stats(3);
  stats.mean = {0.3, -0.2, 0.1};
  stats.var = {1.5, 0.7, 2.0};
  auto r = check_op(p, [&](Tape<double>* t) {
    return ops::batch_norm(t, p.at("x"), p.at("g"), p.at("b"), stats, ops::Mode::Eval);
  });
  EXPECT_TRUE(r.pass) << r.max_rel_err;
}

// Values kept at least 0.05 from zero and from each other within a window.
Tensor<double> kink_free(Shape s, std::uint64_t seed) {
  Tensor<double> t = randn(std::move(s), seed);
  for (std::size_t i = 0; i < t.numel(); ++i) {
    const double v = std::abs(t[i]) + 0.05 + 0.1 * static_cast<double>(i % 4);
    t[i] = (i / 4) % 2 ? v : -v;
  }
  return t;
}

TEST(OpGradients, Relu) {
  std::map<std::string, Tensor<double>> p{{"x", kink_free({2, 3, 4, 4}, 1)}};
  auto r = check_op(p, [&](Tape<double>* t) { return ops::relu(t, p.at("x")); });
  EXPECT_TRUE(r.pass);
}

TEST(OpGradients, MaxPool) {
  std::map<std::string, Tensor<double>> p{{"x", randn({2, 3, 4, 4}, 1)}};
  auto r = check_op(p, [&](Tape<double>* t) { return ops::max_pool2(t, p.at("x")); });
  EXPECT_TRUE(r.pass);
}

TEST(OpGradients, UpsampleAddScaleConcatSlice) {
  std::map<std::string, Tensor<double>> p{{"a", randn({2, 2, 3, 3}, 1)},
                                          {"b", randn({2, 3, 6, 6}, 2)},
                                          {"c", randn({2, 2, 6, 6}, 3)}};
  auto r = check_op(p, [&](Tape<double>* t) {
    auto up = ops::upsample_nearest2(t, p.at("a"));
    auto s = ops::add(t, up, p.at("c"));
    std::vector<Tensor<double>> parts{ops::scale(t, s, 1.5), p.at("b")};
    auto cat = ops::concat_channels<double>(t, parts);
    return ops::slice_channels(t, cat, 1, 4);
  });
  EXPECT_TRUE(r.pass);
}

TEST(FiniteDiff, QuadraticAtThree) {
  std::map<std::string, Tensor<double>> p{{"theta", Tensor<double>(Shape{1}, 3.0)}};
  p.at("theta").set_requires_grad(true);
  ScalarFn f = [&](Tape<double>* t) {
    const auto& th = p.at("theta");
    // With one element, mse(θ, 0) is θ².
    return ops::mse_loss(t, th, Tensor<double>(Shape{1}, 0.0));
  };
  auto r = finite_diff_check(f, p, 1e-5, 1e-5);
  ASSERT_TRUE(r.pass);
  EXPECT_NEAR(p.at("theta").grad()[0], 6.0, 1e-12);
}

TEST(FiniteDiff, ReportsNonFiniteWithName) {
  std::map<std::string, Tensor<double>> p{{"w", Tensor<double>(Shape{2}, 1.0)}};
  p.at("w").set_requires_grad(true);
  ScalarFn f = [&](Tape<double>* t) {
    auto s = ops::scale(t, p.at("w"), std::numeric_limits<double>::infinity());
    return ops::sum(t, s);
  };
  auto r = finite_diff_check(f, p);
  EXPECT_FALSE(r.pass);
  EXPECT_NE(r.groups.at(0).message.find("w"), std::string::npos);
}

TEST(Autodiff, SumGivesOnes) {
  Tensor<double> x(Shape{2, 2}, 3.0);
  x.set_requires_grad(true);
  Tape<double> tape;
  tape.backward(ops::sum(&tape, x));
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Autodiff, MseAgainstDetachedSelfIsZero) {
  auto x = randn({3, 4}, 1);
  x.set_requires_grad(true);
  Tape<double> tape;
  tape.backward(ops::mse_loss(&tape, x, x.detach()));
  for (double g : x.grad()) EXPECT_EQ(g, 0.0);
}

TEST(Autodiff, RejectsNonScalarLoss) {
  auto x = randn({2, 2}, 1);
  x.set_requires_grad(true);
  Tape<double> tape;
  auto y = ops::scale(&tape, x, 2.0);
  EXPECT_THROW(tape.backward(y), std::invalid_argument);
}

TEST(Autodiff, BackwardIsLinear) {
  auto w = randn({4, 2, 3, 3}, 1);
  auto x = randn({2, 2, 5, 5}, 2);
  auto t1 = randn({2, 4, 5, 5}, 3), t2 = randn({2, 4, 5, 5}, 4);
  w.set_requires_grad(true);
  auto grad_of = [&](double a, double b) {
    w.clear_grad();
    Tape<double> tape;
    auto y = ops::conv2d(&tape, x, w, {}, 1, 1);
    auto l = ops::add(&tape, ops::scale(&tape, ops::mse_loss(&tape, y, t1), a),
                      ops::scale(&tape, ops::mse_loss(&tape, y, t2), b));
    tape.backward(l);
    return std::vector<double>(w.grad().begin(), w.grad().end());
  };
  const auto g1 = grad_of(1, 0), g2 = grad_of(0, 1), gc = grad_of(0.7, -1.3);
  for (std::size_t i = 0; i < gc.size(); ++i) EXPECT_NEAR(gc[i], 0.7 * g1[i] - 1.3 * g2[i], 1e-12);
}

TEST(Autodiff, UnreachableTensorsKeepNoGradient) {
  auto a = randn({2}, 1), b = randn({2}, 2);
  a.set_requires_grad(true);
  b.set_requires_grad(true);
  Tape<double> tape;
  auto la = ops::sum(&tape, a);
  ops::sum(&tape, b);
  tape.backward(la);
  EXPECT_TRUE(a.has_grad());
  EXPECT_FALSE(b.has_grad());
}

TEST(Ops, MaxPoolTieGoesToFirstElement) {
  Tensor<double> x(Shape{1, 1, 2, 2}, 5.0);
  x.set_requires_grad(true);
  Tape<double> tape;
  tape.backward(ops::sum(&tape, ops::max_pool2(&tape, x)));
  EXPECT_EQ(x.grad()[0], 1.0);
  EXPECT_EQ(x.grad()[1] + x.grad()[2] + x.grad()[3], 0.0);
}

TEST(Ops, MaxPoolRejectsOddExtent) {
  auto x = randn({1, 1, 3, 4}, 1);
  EXPECT_THROW(ops::max_pool2<double>(nullptr, x), ShapeError);
}

TEST(Ops, PoolOfUpsampleIsIdentity) {
  auto x = randn({2, 3, 4, 4}, 1);
  auto y = ops::max_pool2<double>(nullptr, ops::upsample_nearest2<double>(nullptr, x));
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y[i], x[i]);
}

TEST(Ops, UpsampleOfPoolOnBlockConstantInputIsIdentity) {
  auto small = randn({1, 2, 3, 3}, 1);
  auto x = ops::upsample_nearest2<double>(nullptr, small);
  auto y = ops::upsample_nearest2<double>(nullptr, ops::max_pool2<double>(nullptr, x));
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y[i], x[i]);
}

TEST(Ops, ConcatSliceRoundTripIsBitwise) {
  auto a = randn({2, 3, 4, 4}, 1), b = randn({2, 5, 4, 4}, 2);
  std::vector<Tensor<double>> parts{a, b};
  auto cat = ops::concat_channels<double>(nullptr, parts);
  auto ra = ops::slice_channels<double>(nullptr, cat, 0, 3);
  auto rb = ops::slice_channels<double>(nullptr, cat, 3, 8);
  EXPECT_EQ(std::memcmp(ra.ptr(), a.ptr(), a.numel() * sizeof(double)), 0);
  EXPECT_EQ(std::memcmp(rb.ptr(), b.ptr(), b.numel() * sizeof(double)), 0);
}

TEST(Ops, ConcatRejectsSpatialMismatch) {
  std::vector<Tensor<double>> parts{randn({1, 2, 4, 4}, 1), randn({1, 2, 2, 2}, 2)};
  EXPECT_THROW(ops::concat_channels<double>(nullptr, parts), ShapeError);
}

TEST(Ops, BatchNormUpdatesRunningStatistics) {
  auto x = randn({4, 2, 3, 3}, 1, 2.0);
  Tensor<double> g(Shape{2}, 1.0), b(Shape{2}, 0.0);
  ops::BatchNormStats<double> st(2);
  ops::batch_norm<double>(nullptr, x, g, b, st, ops::Mode::Train);
  const std::size_t per = 4 * 9;
  for (std::size_t c = 0; c < 2; ++c) {
    double mean = 0, sq = 0;
    for (std::size_t n = 0; n < 4; ++n)
      for (std::size_t i = 0; i < 9; ++i) mean += x[(n * 2 + c) * 9 + i];
    mean /= per;
    for (std::size_t n = 0; n < 4; ++n)
      for (std::size_t i = 0; i < 9; ++i) sq += std::pow(x[(n * 2 + c) * 9 + i] - mean, 2);
    const double unbiased = sq / (per - 1);
    EXPECT_NEAR(st.mean[c], 0.1 * mean, 1e-12);
    EXPECT_NEAR(st.var[c], 0.9 + 0.1 * unbiased, 1e-12);
  }
}

TEST(Ops, BatchNormTrainOutputIsNormalized) {
  auto x = randn({4, 2, 3, 3}, 1, 3.0);
  Tensor<double> g(Shape{2}, 1.0), b(Shape{2}, 0.0);
  ops::BatchNormStats<double> st(2);
  auto y = ops::batch_norm<double>(nullptr, x, g, b, st, ops::Mode::Train);
  for (std::size_t c = 0; c < 2; ++c) {
    double mean = 0, sq = 0;
    for (std::size_t n = 0; n < 4; ++n)
      for (std::size_t i = 0; i < 9; ++i) mean += y[(n * 2 + c) * 9 + i];
    mean /= 36;
    for (std::size_t n = 0; n < 4; ++n)
      for (std::size_t i = 0; i < 9; ++i) sq += std::pow(y[(n * 2 + c) * 9 + i] - mean, 2);
    EXPECT_NEAR(mean, 0.0, 1e-12);
    EXPECT_NEAR(sq / 36, 1.0, 1e-4);
  }
}

TEST(Ops, MseRejectsTargetRequiringGrad) {
  auto p = randn({2}, 1), t = randn({2}, 2);
  t.set_requires_grad(true);
  Tape<double> tape;
  EXPECT_THROW(ops::mse_loss(&tape, p, t), std::invalid_argument);
}

TEST(Ops, ForwardIsDeterministic) {
  auto x = randn({2, 3, 8, 8}, 1);
  auto w = randn({4, 3, 3, 3}, 2);
  auto a = ops::conv2d<double>(nullptr, x, w, {}, 1, 1);
  auto b = ops::conv2d<double>(nullptr, x, w, {}, 1, 1);
  EXPECT_EQ(std::memcmp(a.ptr(), b.ptr(), a.numel() * sizeof(double)), 0);
}

}  // namespace

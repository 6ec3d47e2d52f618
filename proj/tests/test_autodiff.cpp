#include <gtest/gtest.h>

#include <random>

#include "mfsurro/autodiff.hpp"

using namespace mfsurro;

namespace {

Tensor<double> random_tensor(Shape s, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor<double> t(s);
  for (double& v : t.data) v = u(rng);
  return t;
}

// Direct cross-correlation with zero padding.
Tensor<double> conv_reference(const Tensor<double>& x, const Tensor<double>& w,
                              const Tensor<double>& b, int stride, int pad) {
  const int ho = (x.shape.h + 2 * pad - w.shape.h) / stride + 1;
  const int wo = (x.shape.w + 2 * pad - w.shape.w) / stride + 1;
  Tensor<double> y({x.shape.n, w.shape.n, ho, wo});
  for (int n = 0; n < x.shape.n; ++n)
    for (int o = 0; o < w.shape.n; ++o)
      for (int i = 0; i < ho; ++i)
        for (int j = 0; j < wo; ++j) {
          double s = b.data[o];
          for (int c = 0; c < x.shape.c; ++c)
            for (int ki = 0; ki < w.shape.h; ++ki)
              for (int kj = 0; kj < w.shape.w; ++kj) {
                const int r = i * stride - pad + ki, q = j * stride - pad + kj;
                if (r >= 0 && r < x.shape.h && q >= 0 && q < x.shape.w)
                  s += w.at(o, c, ki, kj) * x.at(n, c, r, q);
              }
          y.at(n, o, i, j) = s;
        }
  return y;
}

Tensor<double> maxpool_reference(const Tensor<double>& x) {
  Tensor<double> y({x.shape.n, x.shape.c, x.shape.h / 2, x.shape.w / 2});
  for (int n = 0; n < x.shape.n; ++n)
    for (int c = 0; c < x.shape.c; ++c)
      for (int i = 0; i < y.shape.h; ++i)
        for (int j = 0; j < y.shape.w; ++j)
          y.at(n, c, i, j) = std::max({x.at(n, c, 2 * i, 2 * j), x.at(n, c, 2 * i, 2 * j + 1),
                                       x.at(n, c, 2 * i + 1, 2 * j), x.at(n, c, 2 * i + 1, 2 * j + 1)});
  return y;
}

// Loss weights that break the symmetries a plain sum would hide (a sum after
// batch normalization has zero gradient).
Tensor<double> weights_like(Shape s, std::uint64_t seed) { return random_tensor(s, seed, 0.5, 1.5); }

constexpr double kEps = 1e-5;
constexpr double kTol = 1e-4;

}  // namespace

TEST(Conv2d, OnesOverlapCounts) {
  Tape<double> t;
  Var x = t.constant(Tensor<double>({1, 1, 3, 3}, 1.0));
  Var w = t.constant(Tensor<double>({1, 1, 3, 3}, 1.0));
  Var b = t.constant(Tensor<double>({1, 1, 1, 1}, 0.0));
  const auto& y = t.value(conv2d(t, x, w, b, 1, 1));
  const double expect[9] = {4, 6, 4, 6, 9, 6, 4, 6, 4};
  for (int i = 0; i < 9; ++i) EXPECT_EQ(y.data[i], expect[i]);
}

TEST(Conv2d, DeltaKernelIsIdentity) {
  Tape<double> t;
  const auto xin = random_tensor({2, 1, 6, 5}, 1);
  Tensor<double> k({1, 1, 3, 3});
  k.at(0, 0, 1, 1) = 1.0;
  const auto& y = t.value(conv2d(t, t.constant(xin), t.constant(k), t.constant(Tensor<double>({1, 1, 1, 1})), 1, 1));
  EXPECT_EQ(y.data, xin.data);
}

TEST(Conv2d, MatchesReference) {
  const auto x = random_tensor({1, 2, 5, 5}, 2), w = random_tensor({3, 2, 3, 3}, 3), b = random_tensor({1, 3, 1, 1}, 4);
  for (int stride : {1, 2})
    for (int pad : {0, 1}) {
      Tape<double> t;
      const auto& y = t.value(conv2d(t, t.constant(x), t.constant(w), t.constant(b), stride, pad));
      const auto ref = conv_reference(x, w, b, stride, pad);
      ASSERT_EQ(y.shape, ref.shape);
      for (std::size_t i = 0; i < y.size(); ++i) EXPECT_NEAR(y.data[i], ref.data[i], 1e-12);
    }
  // several batch items share one GEMM
  const auto xb = random_tensor({5, 2, 7, 6}, 5);
  Tape<double> t;
  const auto& y = t.value(conv2d(t, t.constant(xb), t.constant(w), t.constant(b), 1, 1));
  const auto ref = conv_reference(xb, w, b, 1, 1);
  for (std::size_t i = 0; i < y.size(); ++i) EXPECT_NEAR(y.data[i], ref.data[i], 1e-12);
}

TEST(Conv2d, ShapeErrors) {
  Tape<double> t;
  Var x = t.constant(Tensor<double>({1, 2, 4, 4}));
  Var b = t.constant(Tensor<double>({1, 1, 1, 1}));
  EXPECT_THROW(conv2d(t, x, t.constant(Tensor<double>({1, 3, 3, 3})), b), ShapeError);
  EXPECT_THROW(conv2d(t, x, t.constant(Tensor<double>({1, 2, 2, 2})), b), ShapeError);
}

TEST(Conv2d, GradCheck) {
  const auto w0 = random_tensor({3, 2, 3, 3}, 6), b0 = random_tensor({1, 3, 1, 1}, 7);
  const auto wt = weights_like({2, 3, 5, 5}, 8);
  auto f = [&](Tape<double>& t, Var x) {
    return weighted_sum(t, conv2d(t, x, t.constant(w0), t.constant(b0), 1, 1), wt);
  };
  const auto r = grad_check(f, random_tensor({2, 2, 5, 5}, 9), kEps);
  EXPECT_LT(r.max_rel_error, kTol);
  EXPECT_EQ(r.checked, 100u);

  Parameter<double> w("w", w0), b("b", b0);
  const auto x0 = random_tensor({2, 2, 5, 5}, 10);
  const auto wt2 = weights_like({2, 3, 3, 3}, 11);
  auto g = [&](Tape<double>& t) { return weighted_sum(t, conv2d(t, t.constant(x0), t.param(w), t.param(b), 2, 1), wt2); };
  EXPECT_LT(grad_check_parameter(g, w, kEps).max_rel_error, kTol);
  EXPECT_LT(grad_check_parameter(g, b, kEps).max_rel_error, kTol);
}

TEST(Conv2d, LinearityAndTranslation) {
  const auto x1 = random_tensor({1, 2, 8, 8}, 12), x2 = random_tensor({1, 2, 8, 8}, 13);
  const auto w = random_tensor({2, 2, 3, 3}, 14);
  const Tensor<double> zero({1, 2, 1, 1});
  auto run = [&](const Tensor<double>& x) {
    Tape<double> t;
    return t.value(conv2d(t, t.constant(x), t.constant(w), t.constant(zero), 1, 1));
  };
  Tensor<double> mix = x1;
  for (std::size_t i = 0; i < mix.size(); ++i) mix.data[i] = 2 * x1.data[i] - 3 * x2.data[i];
  const auto y1 = run(x1), y2 = run(x2), ym = run(mix);
  for (std::size_t i = 0; i < ym.size(); ++i) EXPECT_NEAR(ym.data[i], 2 * y1.data[i] - 3 * y2.data[i], 1e-12);
  // shift by one column: interior outputs shift too
  Tensor<double> shifted({1, 2, 8, 8});
  for (int c = 0; c < 2; ++c)
    for (int i = 0; i < 8; ++i)
      for (int j = 1; j < 8; ++j) shifted.at(0, c, i, j) = x1.at(0, c, i, j - 1);
  const auto ys = run(shifted);
  for (int o = 0; o < 2; ++o)
    for (int i = 1; i < 7; ++i)
      for (int j = 2; j < 7; ++j) EXPECT_NEAR(ys.at(0, o, i, j), y1.at(0, o, i, j - 1), 1e-12);
}

TEST(BatchNorm, ConstantAndPlusMinusOne) {
  BatchNormState<double> st(1);
  Tape<double> t;
  Var g = t.constant(Tensor<double>({1, 1, 1, 1}, 1.0)), b = t.constant(Tensor<double>({1, 1, 1, 1}, 0.0));
  const auto& y0 = t.value(batchnorm2d(t, t.constant(Tensor<double>({2, 1, 3, 3}, 4.0)), g, b, st, NormMode::train));
  for (double v : y0.data) EXPECT_EQ(v, 0.0);
  Tensor<double> pm({1, 1, 2, 2}, std::vector<double>{-1, 1, 1, -1});
  const auto& y1 = t.value(batchnorm2d(t, t.constant(pm), g, b, st, NormMode::train));
  for (int i = 0; i < 4; ++i) EXPECT_NEAR(y1.data[i], pm.data[i] / std::sqrt(1 + 1e-5), 1e-15);
}

TEST(BatchNorm, EvalMatchesTrainWhenStatsAgree) {
  const auto x = random_tensor({3, 2, 4, 4}, 15);
  const auto gamma = random_tensor({1, 2, 1, 1}, 16), beta = random_tensor({1, 2, 1, 1}, 17);
  BatchNormState<double> st(2);
  Tape<double> t;
  const auto ytrain = t.value(batchnorm2d(t, t.constant(x), t.constant(gamma), t.constant(beta), st, NormMode::train));
  // set running stats to the biased batch statistics
  for (int c = 0; c < 2; ++c) {
    double s = 0, q = 0;
    for (int n = 0; n < 3; ++n)
      for (int i = 0; i < 16; ++i) s += x.plane(n, c)[i];
    const double mean = s / 48;
    for (int n = 0; n < 3; ++n)
      for (int i = 0; i < 16; ++i) q += (x.plane(n, c)[i] - mean) * (x.plane(n, c)[i] - mean);
    st.running_mean[c] = mean;
    st.running_var[c] = q / 48;
  }
  const auto yeval = t.value(batchnorm2d(t, t.constant(x), t.constant(gamma), t.constant(beta), st, NormMode::eval));
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(yeval.data[i], ytrain.data[i], 1e-12);
}

TEST(BatchNorm, RunningStatsUpdate) {
  Tensor<double> x({2, 1, 1, 2}, std::vector<double>{1, 2, 3, 4});
  BatchNormState<double> st(1);
  Tape<double> t;
  batchnorm2d(t, t.constant(x), t.constant(Tensor<double>({1, 1, 1, 1}, 1.0)),
              t.constant(Tensor<double>({1, 1, 1, 1}, 0.0)), st, NormMode::train);
  EXPECT_NEAR(st.running_mean[0], 0.1 * 2.5, 1e-15);
  EXPECT_NEAR(st.running_var[0], 0.9 + 0.1 * (5.0 / 3.0), 1e-15);
  EXPECT_THROW(batchnorm2d(t, t.constant(Tensor<double>({0, 1, 2, 2})), t.constant(Tensor<double>({1, 1, 1, 1})),
                           t.constant(Tensor<double>({1, 1, 1, 1})), st, NormMode::train),
               ShapeError);
}

TEST(BatchNorm, GradCheck) {
  const auto wt = weights_like({3, 2, 4, 4}, 18);
  Parameter<double> gamma("g", random_tensor({1, 2, 1, 1}, 19, 0.5, 1.5)), beta("b", random_tensor({1, 2, 1, 1}, 20));
  for (NormMode mode : {NormMode::train, NormMode::eval}) {
    BatchNormState<double> st(2);
    st.running_mean = {0.1, -0.2};
    st.running_var = {0.7, 1.3};
    const BatchNormState<double> frozen = st;
    auto f = [&](Tape<double>& t, Var x) {
      BatchNormState<double> s = frozen;
      return weighted_sum(t, batchnorm2d(t, x, t.param(gamma), t.param(beta), s, mode), wt);
    };
    EXPECT_LT(grad_check(f, random_tensor({3, 2, 4, 4}, 21), kEps).max_rel_error, kTol);
    const auto x0 = random_tensor({3, 2, 4, 4}, 22);
    auto g = [&](Tape<double>& t) {
      BatchNormState<double> s = frozen;
      return weighted_sum(t, batchnorm2d(t, t.constant(x0), t.param(gamma), t.param(beta), s, mode), wt);
    };
    EXPECT_LT(grad_check_parameter(g, gamma, kEps).max_rel_error, kTol);
    EXPECT_LT(grad_check_parameter(g, beta, kEps).max_rel_error, kTol);
  }
}

TEST(Relu, ValuesGradientIdempotence) {
  Tape<double> t;
  Var x = t.input(Tensor<double>({1, 1, 1, 3}, std::vector<double>{-1, 0, 2}));
  Var y = relu(t, x);
  EXPECT_EQ(t.value(y).data, (std::vector<double>{0, 0, 2}));
  EXPECT_EQ(t.value(relu(t, y)).data, t.value(y).data);
  t.backward(sum(t, y));
  EXPECT_EQ(t.grad(x)->data, (std::vector<double>{0, 0, 1}));
  Tape<double> t2;
  Var x2 = t2.input(Tensor<double>({1, 1, 1, 2}, std::vector<double>{-1, 2}));
  t2.backward(sum(t2, relu(t2, x2)));
  EXPECT_EQ(t2.grad(x2)->data, (std::vector<double>{0, 1}));
}

TEST(Relu, GradCheckExcludesKinks) {
  const auto wt = weights_like({1, 2, 4, 4}, 23);
  auto f = [&](Tape<double>& t, Var x) { return weighted_sum(t, relu(t, x), wt); };
  auto p = random_tensor({1, 2, 4, 4}, 24);
  p.data[3] = 1e-6;  // within eps of the kink
  const auto r = grad_check(f, p, kEps);
  EXPECT_LT(r.max_rel_error, kTol);
  EXPECT_EQ(r.excluded, 1u);
  EXPECT_EQ(r.checked, 31u);
}

TEST(MaxPool, ValuesTiesAndReference) {
  Tape<double> t;
  EXPECT_EQ(t.value(maxpool2(t, t.constant(Tensor<double>({1, 1, 2, 2}, std::vector<double>{1, 2, 3, 4})))).data[0], 4.0);
  Var c = t.input(Tensor<double>({1, 1, 4, 4}, 2.0));
  Var y = maxpool2(t, c);
  for (double v : t.value(y).data) EXPECT_EQ(v, 2.0);
  t.backward(sum(t, y));
  const auto& g = *t.grad(c);
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) EXPECT_EQ(g.at(0, 0, i, j), (i % 2 == 0 && j % 2 == 0) ? 1.0 : 0.0);
  const auto x = random_tensor({2, 3, 8, 8}, 25);
  Tape<double> t2;
  EXPECT_EQ(t2.value(maxpool2(t2, t2.constant(x))).data, maxpool_reference(x).data);
  EXPECT_THROW(maxpool2(t2, t2.constant(Tensor<double>({1, 1, 3, 4}))), ShapeError);
}

TEST(MaxPool, GradCheck) {
  const auto wt = weights_like({2, 2, 3, 3}, 26);
  auto f = [&](Tape<double>& t, Var x) { return weighted_sum(t, maxpool2(t, x), wt); };
  auto p = random_tensor({2, 2, 6, 6}, 27);
  p.data[1] = p.data[0] + 1e-6;  // near-tie in the first window
  const auto r = grad_check(f, p, kEps);
  EXPECT_LT(r.max_rel_error, kTol);
  EXPECT_GE(r.excluded, 1u);
}

TEST(AvgPool, GradCheck) {
  const auto wt = weights_like({1, 2, 3, 3}, 28);
  auto f = [&](Tape<double>& t, Var x) { return weighted_sum(t, avgpool2(t, x), wt); };
  EXPECT_LT(grad_check(f, random_tensor({1, 2, 6, 6}, 29), kEps).max_rel_error, kTol);
}

TEST(Upsample, ValuesRoundTripGradient) {
  Tape<double> t;
  Var x = t.input(Tensor<double>({1, 1, 2, 2}, std::vector<double>{1, 2, 3, 4}));
  Var y = upsample_nearest2(t, x);
  const std::vector<double> expect = {1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4};
  EXPECT_EQ(t.value(y).data, expect);
  EXPECT_EQ(t.value(maxpool2(t, y)).data, t.value(x).data);
  t.backward(sum(t, y));
  for (double g : t.grad(x)->data) EXPECT_EQ(g, 4.0);
  const auto wt = weights_like({1, 2, 6, 8}, 30);
  auto f = [&](Tape<double>& tp, Var v) { return weighted_sum(tp, upsample_nearest2(tp, v), wt); };
  EXPECT_LT(grad_check(f, random_tensor({1, 2, 3, 4}, 31), kEps).max_rel_error, kTol);
}

TEST(Concat, ShapesEmptyAndSlices) {
  const auto a = random_tensor({1, 8, 3, 4}, 32), b = random_tensor({1, 8, 3, 4}, 33);
  Tape<double> t;
  const auto& y = t.value(concat_channels(t, t.constant(a), t.constant(b)));
  EXPECT_EQ(y.shape, (Shape{1, 16, 3, 4}));
  EXPECT_EQ(slice_channels(y, 0, 8), a);
  EXPECT_EQ(slice_channels(y, 8, 16), b);
  const auto& same = t.value(concat_channels(t, t.constant(a), t.constant(Tensor<double>({1, 0, 3, 4}))));
  EXPECT_EQ(same, a);
  EXPECT_THROW(concat_channels(t, t.constant(a), t.constant(Tensor<double>({1, 2, 4, 4}))), ShapeError);
}

TEST(Concat, GradCheck) {
  const auto other = random_tensor({2, 3, 3, 3}, 34);
  const auto wt = weights_like({2, 5, 3, 3}, 35);
  auto f = [&](Tape<double>& t, Var x) {
    Var o = t.input(other, true);
    return weighted_sum(t, concat_channels(t, o, x), wt);
  };
  EXPECT_LT(grad_check(f, random_tensor({2, 2, 3, 3}, 36), kEps).max_rel_error, kTol);
}

TEST(PadCrop, RoundTripAndGradCheck) {
  const auto x = random_tensor({1, 2, 5, 5}, 37);
  Tape<double> t;
  Var p = pad2d(t, t.constant(x), 2, 1, 3, 0);
  EXPECT_EQ(t.value(p).shape, (Shape{1, 2, 8, 8}));
  EXPECT_EQ(t.value(crop2d(t, p, 2, 3, 5, 5)), x);
  const auto wt = weights_like({1, 2, 4, 3}, 38);
  auto f = [&](Tape<double>& tp, Var v) { return weighted_sum(tp, crop2d(tp, pad2d(tp, v, 1, 1, 1, 1), 1, 0, 4, 3), wt); };
  EXPECT_LT(grad_check(f, random_tensor({1, 2, 5, 5}, 39), kEps).max_rel_error, kTol);
}

TEST(Backward, AccumulationAndErrors) {
  Tape<double> t;
  Var x = t.input(Tensor<double>({1, 1, 2, 2}, 3.0));
  t.backward(sum(t, mul(t, x, x)));
  for (double g : t.grad(x)->data) EXPECT_EQ(g, 6.0);
  EXPECT_THROW(t.backward(sum(t, x)), AutodiffError);
  t.reset();
  Var x2 = t.input(Tensor<double>({1, 1, 2, 2}, 1.0));
  Var c = t.constant(Tensor<double>({1, 1, 2, 2}, 5.0));
  EXPECT_THROW(t.backward(add(t, x2, c)), AutodiffError);
  t.reset();
  Var x3 = t.input(Tensor<double>({1, 1, 2, 2}, 1.0));
  Var c3 = t.constant(Tensor<double>({1, 1, 2, 2}, 5.0));
  t.backward(sum(t, add(t, x3, c3)));
  for (double g : t.grad(x3)->data) EXPECT_EQ(g, 1.0);
  EXPECT_EQ(t.grad(c3), nullptr);
}

TEST(Backward, ParametersAccumulateAcrossUses) {
  Parameter<double> p("p", Tensor<double>({1, 1, 1, 2}, std::vector<double>{1, -2}));
  Tape<double> t;
  Var a = t.param(p);
  Var b = t.param(p);
  t.backward(sum(t, add(t, mul(t, a, b), a)));
  EXPECT_EQ(p.grad.data, (std::vector<double>{3, -3}));
}

TEST(Backward, CheckedModeCatchesNonFinite) {
  Tape<double> t;
  t.set_checked(true);
  Var x = t.input(Tensor<double>({1, 1, 1, 1}, 1e308));
  EXPECT_THROW(affine(t, x, 10.0, 0.0), AutodiffError);
}

TEST(GradCheck, LinearAndZeroFunctions) {
  const auto wt = random_tensor({1, 1, 3, 3}, 40);
  auto lin = [&](Tape<double>& t, Var x) { return weighted_sum(t, affine(t, x, 2.5, 1.0), wt); };
  EXPECT_LT(grad_check(lin, random_tensor({1, 1, 3, 3}, 41), kEps).max_rel_error, 1e-10);
  auto zero = [&](Tape<double>& t, Var x) { return weighted_sum(t, x, Tensor<double>({1, 1, 3, 3})); };
  EXPECT_EQ(grad_check(zero, random_tensor({1, 1, 3, 3}, 42), kEps).max_rel_error, 0.0);
}

TEST(GradCheck, CompositeConvBnReluPool) {
  const auto w0 = random_tensor({4, 2, 3, 3}, 43);
  const Tensor<double> b0({1, 4, 1, 1}, 0.1);
  const auto wt = weights_like({2, 4, 3, 3}, 44);
  Parameter<double> gamma("g", Tensor<double>({1, 4, 1, 1}, 1.0)), beta("b", Tensor<double>({1, 4, 1, 1}, 0.0));
  auto f = [&](Tape<double>& t, Var x) {
    BatchNormState<double> st(4);
    Var h = conv2d(t, x, t.constant(w0), t.constant(b0), 1, 1);
    h = relu(t, batchnorm2d(t, h, t.param(gamma), t.param(beta), st, NormMode::train));
    return weighted_sum(t, maxpool2(t, h), wt);
  };
  const auto r = grad_check(f, random_tensor({2, 2, 6, 6}, 45), kEps);
  EXPECT_LT(r.max_rel_error, kTol);
  EXPECT_GT(r.checked, 50u);
}

TEST(Determinism, RepeatedForwardBackwardBitwise) {
  const auto x = random_tensor({3, 2, 8, 8}, 46);
  Parameter<float> w("w", random_tensor({4, 2, 3, 3}, 47).cast<float>());
  Parameter<float> b("b", Tensor<float>({1, 4, 1, 1}));
  auto run = [&] {
    w.grad.fill(0.0f);
    Tape<float> t;
    Var y = relu(t, conv2d(t, t.constant(x.cast<float>()), t.param(w), t.param(b), 1, 1));
    const auto out = t.value(y);
    t.backward(sum(t, y));
    return std::make_pair(out, w.grad);
  };
  const auto a = run(), c = run();
  EXPECT_EQ(a.first, c.first);
  EXPECT_EQ(a.second, c.second);
}

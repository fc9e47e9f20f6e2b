#include <gtest/gtest.h>

#include <numeric>

#include "convshard/conv.hpp"
#include "convshard/layers.hpp"
#include "oracles.hpp"

using namespace convshard;

namespace {

Tensor4 from(std::initializer_list<double> v, std::size_t n, std::size_t c, std::size_t h,
             std::size_t w) {
  Tensor4 t(n, c, h, w);
  std::copy(v.begin(), v.end(), t.values().begin());
  return t;
}

}  // namespace

TEST(Tensor, RejectsEmptyDimensions) {
  EXPECT_THROW(Tensor4(0, 1, 1, 1), DimensionError);
  EXPECT_THROW(Tensor4(Shape4{1, 1, 2, 2}, Tensor4::Storage::Zero(3)), DimensionError);
}

TEST(Tensor, SlicesCopyTheRequestedRanges) {
  Rng rng(1);
  const auto t = oracle::random_tensor(rng, 2, 4, 3, 3);
  const auto s = slice_channels(t, 1, 3);
  EXPECT_EQ(s.shape(), (Shape4{2, 2, 3, 3}));
  EXPECT_EQ(s(1, 1, 2, 0), t(1, 2, 2, 0));
  const auto k = oracle::random_kernels(rng, 5, 3, 2, 2);
  EXPECT_EQ(slice_kernels(k, 2, 5)(0, 1, 1, 1), k(2, 1, 1, 1));
  EXPECT_EQ(slice_kernel_channels(k, 1, 3)(4, 1, 0, 1), k(4, 2, 0, 1));
  EXPECT_THROW(slice_kernels(k, 3, 3), DimensionError);
}

TEST(Conv, ZeroInputGivesZeroOutput) {
  const auto out = conv2d_forward(Tensor4(1, 1, 3, 3), KernelBank(1, 1, 2, 2));
  EXPECT_EQ(out, Tensor4(1, 1, 2, 2));
}

TEST(Conv, OneByOneKernelIsScalarMultiply) {
  KernelBank k(1, 1, 1, 1);
  k(0, 0, 0, 0) = 2;
  EXPECT_EQ(conv2d_forward(from({1, 2, 3, 4}, 1, 1, 2, 2), k), from({2, 4, 6, 8}, 1, 1, 2, 2));
}

TEST(Conv, ReferenceShapeMatchesDirectLoops) {
  Rng rng(2);
  const auto in = oracle::random_tensor(rng, 1, 3, 32, 32);
  const auto k = oracle::random_kernels(rng, 50, 3, 5, 5);
  const auto out = conv2d_forward(in, k);
  EXPECT_EQ(out.shape(), (Shape4{1, 50, 28, 28}));
  const auto ref = oracle::naive_conv(in, k);
  EXPECT_LT((out.array() - ref.array()).abs().maxCoeff(), 1e-12);
}

TEST(Conv, ShapeMismatchNamesBothShapes) {
  try {
    conv2d_forward(Tensor4(1, 2, 4, 4), KernelBank(1, 3, 2, 2));
    FAIL();
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("1x2x4x4"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("1x3x2x2"), std::string::npos);
  }
  EXPECT_THROW(conv2d_forward(Tensor4(1, 1, 2, 2), KernelBank(1, 1, 3, 3)), DimensionError);
}

TEST(Conv, MapIsIndependentOfTheRestOfTheBank) {
  Rng rng(3);
  const auto in = oracle::random_tensor(rng, 3, 4, 9, 11);
  const auto k = oracle::random_kernels(rng, 23, 4, 3, 3);
  const auto full = conv2d_forward(in, k);
  for (std::size_t j = 0; j < 23; ++j) {
    const auto alone = conv2d_forward(in, slice_kernels(k, j, j + 1));
    for (std::size_t n = 0; n < 3; ++n)
      EXPECT_TRUE(std::equal(alone.plane(n, 0), alone.plane(n, 0) + 63, full.plane(n, j)));
  }
  // Uneven split through every blocking path.
  const auto a = conv2d_forward(in, slice_kernels(k, 0, 7));
  const auto b = conv2d_forward(in, slice_kernels(k, 7, 23));
  for (std::size_t n = 0; n < 3; ++n) {
    EXPECT_TRUE(std::equal(a.plane(n, 0), a.plane(n, 7), full.plane(n, 0)));
    EXPECT_TRUE(std::equal(b.plane(n, 0), b.plane(n, 16), full.plane(n, 7)));
  }
}

TEST(ConvBackward, ZeroGradientGivesZeros) {
  Rng rng(4);
  const auto in = oracle::random_tensor(rng, 1, 2, 5, 5);
  const auto k = oracle::random_kernels(rng, 3, 2, 2, 2);
  const auto g = conv2d_backward(in, k, Tensor4(1, 3, 4, 4));
  EXPECT_EQ(g.input, Tensor4(1, 2, 5, 5));
  EXPECT_EQ(g.kernels, KernelBank(3, 2, 2, 2));
}

TEST(ConvBackward, ScalarMultiplyCase) {
  KernelBank k(1, 1, 1, 1);
  k(0, 0, 0, 0) = 2;
  const auto g = conv2d_backward(from({1, 2, 3, 4}, 1, 1, 2, 2), k, from({1, 1, 1, 1}, 1, 1, 2, 2));
  EXPECT_EQ(g.input, from({2, 2, 2, 2}, 1, 1, 2, 2));
  EXPECT_EQ(g.kernels(0, 0, 0, 0), 10.0);
}

TEST(ConvBackward, MatchesFiniteDifferences) {
  Rng rng(5);
  auto in = oracle::random_tensor(rng, 1, 2, 6, 6);
  auto k = oracle::random_kernels(rng, 3, 2, 3, 3);
  const auto r = oracle::random_tensor(rng, 1, 3, 4, 4);
  const auto loss = [&] { return oracle::dot(conv2d_forward(in, k).values(), r.values()); };
  const auto g = conv2d_backward(in, k, r);
  EXPECT_LT(oracle::max_fd_error(in.values(), g.input.values(), loss), 1e-6);
  EXPECT_LT(oracle::max_fd_error(k.values(), g.kernels.values(), loss), 1e-6);
  EXPECT_THROW(conv2d_backward(in, k, Tensor4(1, 3, 3, 3)), DimensionError);
}

TEST(ConvBackward, ChannelSliceOfDataGradientIsExact) {
  Rng rng(6);
  const auto k = oracle::random_kernels(rng, 9, 7, 5, 5);
  const auto go = oracle::random_tensor(rng, 2, 9, 6, 6);
  const auto full = conv2d_backward_data(k, go);
  const auto part = conv2d_backward_data(slice_kernel_channels(k, 2, 5), go);
  EXPECT_EQ(part, slice_channels(full, 2, 5));
}

TEST(ConvRanges, WriteTheSameBitsAsTheFullCall) {
  Rng rng(16);
  const auto in = oracle::random_tensor(rng, 3, 7, 12, 11);
  const auto k = oracle::random_kernels(rng, 37, 7, 5, 5);
  const auto go = oracle::random_tensor(rng, 3, 37, 8, 7);
  const auto fwd = conv2d_forward(in, k);
  const auto gk = conv2d_backward_kernels(in, k, go);
  const auto gd = conv2d_backward_data(k, go);
  Tensor4 f(fwd.shape()), d(gd.shape());
  KernelBank g(k.shape());
  for (auto [b, e] : {std::pair{0, 9}, {9, 10}, {10, 10}, {10, 37}}) {
    conv2d_forward_range(in, k, b, e, f);
    conv2d_backward_kernels_range(in, k, go, b, e, g);
  }
  for (auto [b, e] : {std::pair{0, 3}, {3, 7}}) conv2d_backward_data_range(k, go, b, e, d);
  EXPECT_EQ(f, fwd);
  EXPECT_EQ(g, gk);
  EXPECT_EQ(d, gd);
  EXPECT_THROW(conv2d_forward_range(in, k, 5, 38, f), DimensionError);
}

TEST(Pool, SingleBlock) {
  const auto r = maxpool_forward(from({1, 2, 3, 4}, 1, 1, 2, 2));
  EXPECT_EQ(r.output, from({4}, 1, 1, 1, 1));
  EXPECT_EQ(r.indices.argmax, std::vector<std::size_t>{3});
  EXPECT_EQ(maxpool_backward(from({1}, 1, 1, 1, 1), r.indices), from({0, 0, 0, 1}, 1, 1, 2, 2));
}

TEST(Pool, TiesGoToFirstElement) {
  Tensor4 t(1, 1, 4, 4);
  t.array() = 7.0;
  const auto r = maxpool_forward(t);
  EXPECT_TRUE((r.output.array() == 7.0).all());
  EXPECT_EQ(r.indices.argmax, (std::vector<std::size_t>{0, 2, 8, 10}));
}

TEST(Pool, DistinctValuesBruteForce) {
  Tensor4 t(1, 1, 4, 4);
  std::iota(t.values().begin(), t.values().end(), 0.0);
  EXPECT_EQ(maxpool_forward(t).output, from({5, 7, 13, 15}, 1, 1, 2, 2));
}

TEST(Pool, Errors) {
  EXPECT_THROW(maxpool_forward(Tensor4(1, 1, 3, 4)), DimensionError);
  EXPECT_THROW(maxpool_forward(Tensor4(1, 1, 4, 4), 3, 2), ConfigError);
  const auto r = maxpool_forward(Tensor4(1, 1, 4, 4));
  EXPECT_THROW(maxpool_backward(Tensor4(1, 1, 1, 1), r.indices), ConsistencyError);
  auto bad = r.indices;
  bad.argmax[0] = 99;
  EXPECT_THROW(maxpool_backward(Tensor4(1, 1, 2, 2), bad), ConsistencyError);
}

TEST(Pool, BackwardConservesGradient) {
  Rng rng(7);
  const auto in = oracle::random_tensor(rng, 3, 4, 8, 6);
  const auto r = maxpool_forward(in);
  Tensor4 go(r.output.shape());
  // Dyadic values keep every partial sum exact.
  for (auto& v : go.values()) v = std::floor(rng.uniform(-64, 64)) / 8.0;
  const auto gi = maxpool_backward(go, r.indices);
  EXPECT_EQ(gi.array().sum(), go.array().sum());
  EXPECT_EQ(maxpool_backward(Tensor4(r.output.shape()), r.indices), Tensor4(in.shape()));
}

TEST(Lrn, ZeroAlphaDividesByBiasPower) {
  Rng rng(8);
  const auto in = oracle::random_tensor(rng, 2, 3, 4, 4);
  EXPECT_EQ(lrn_forward(in, {5, 0.0, 0.75, 1.0}), in);
  const auto out = lrn_forward(in, {3, 0.0, 0.5, 4.0});
  EXPECT_LT((out.array() - in.array() / 2.0).abs().maxCoeff(), 1e-15);
}

TEST(Lrn, DirectEvaluation) {
  EXPECT_DOUBLE_EQ(lrn_forward(from({2}, 1, 1, 1, 1), {1, 1.0, 1.0, 1.0})(0, 0, 0, 0), 0.4);
}

TEST(Lrn, InvalidParameters) {
  EXPECT_THROW(lrn_forward(Tensor4(1, 1, 1, 1), {4, 1e-4, 0.75, 2.0}), ConfigError);
  EXPECT_THROW(lrn_forward(Tensor4(1, 1, 1, 1), {5, 1e-4, 0.75, 0.0}), ConfigError);
}

TEST(Lrn, BackwardMatchesFiniteDifferences) {
  Rng rng(9);
  auto in = oracle::random_tensor(rng, 1, 5, 4, 4, -3.0, 3.0);
  const auto r = oracle::random_tensor(rng, 1, 5, 4, 4);
  const LrnParams p{3, 0.3, 0.75, 2.0};
  const auto g = lrn_backward(in, r, p);
  const auto loss = [&] { return oracle::dot(lrn_forward(in, p).values(), r.values()); };
  EXPECT_LT(oracle::max_fd_error(in.values(), g.values(), loss), 1e-6);
}

TEST(Fc, ZeroWeightsGiveBias) {
  Rng rng(10);
  Vector<double> b(3);
  b << 1, -2, 3;
  const auto y = fc_forward(oracle::random_tensor(rng, 2, 1, 2, 2), Matrix<double>(Matrix<double>::Zero(3, 4)), b);
  EXPECT_EQ(y.row(0), b.transpose());
  EXPECT_EQ(y.row(1), b.transpose());
}

TEST(Fc, IdentityWeights) {
  const auto y = fc_forward(from({3, 4}, 1, 2, 1, 1), Matrix<double>(Matrix<double>::Identity(2, 2)),
                            Vector<double>(Vector<double>::Zero(2)));
  EXPECT_EQ(y(0, 0), 3.0);
  EXPECT_EQ(y(0, 1), 4.0);
}

TEST(Fc, MatchesDotProducts) {
  Rng rng(11);
  const auto in = oracle::random_tensor(rng, 1, 1, 6, 6);
  Matrix<double> w(10, 36);
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = rng.uniform(-1, 1);
  const Vector<double> b = Vector<double>::Constant(10, 0.5);
  const auto y = fc_forward(in, w, b);
  for (int o = 0; o < 10; ++o) {
    double s = 0.5;
    for (int i = 0; i < 36; ++i) s += w(o, i) * in.values()[i];
    EXPECT_NEAR(y(0, o), s, 1e-12);
  }
  EXPECT_THROW(fc_forward(in, Matrix<double>(10, 35), b), DimensionError);
}

TEST(Softmax, UniformLogits) {
  const std::vector<int> labels{4, 7};
  const auto r = softmax_loss(Matrix<double>::Zero(2, 10).eval(), labels);
  EXPECT_NEAR(r.loss, std::log(10.0), 1e-12);
}

TEST(Softmax, LargeLogitsStayFinite) {
  Matrix<double> z(1, 2);
  z << 1000, -1000;
  const std::vector<int> labels{0};
  const auto r = softmax_loss(z, labels);
  EXPECT_NEAR(r.loss, 0.0, 1e-12);
  EXPECT_TRUE(r.gradLogits.allFinite());
}

TEST(Softmax, GradientMatchesFiniteDifferencesAndSumsToZero) {
  Rng rng(12);
  Matrix<double> z(4, 10);
  for (Eigen::Index i = 0; i < z.size(); ++i) z.data()[i] = rng.uniform(-3, 3);
  const std::vector<int> labels{0, 9, 3, 3};
  const auto r = softmax_loss(z, labels);
  for (Eigen::Index i = 0; i < 4; ++i) EXPECT_LT(std::abs(r.gradLogits.row(i).sum()), 1e-12);
  const auto loss = [&] { return softmax_loss(z, labels).loss; };
  EXPECT_LT(oracle::max_fd_error({z.data(), 40}, {r.gradLogits.data(), 40}, loss), 1e-6);
  const std::vector<int> bad{0, 10, 0, 0};
  EXPECT_THROW(softmax_loss(z, bad), DataError);
}

TEST(Sgd, Arithmetic) {
  Vector<double> p(1), g(1);
  p << 1;
  g << 2;
  sgd_step(p, g, 0.5);
  EXPECT_EQ(p(0), 0.0);
  const Vector<double> before = p;
  sgd_step(p, g, 0.0);
  EXPECT_EQ(p, before);
  Vector<double> wrong(2);
  EXPECT_THROW(sgd_step(p, wrong, 0.1), DimensionError);
}

TEST(Sgd, MatchesElementwiseOracle) {
  Rng rng(13);
  auto p = oracle::random_tensor(rng, 2, 3, 4, 5);
  const auto g = oracle::random_tensor(rng, 2, 3, 4, 5);
  const auto before = p;
  sgd_step(p, g, 0.01);
  for (std::size_t i = 0; i < p.size(); ++i)
    EXPECT_EQ(p.values()[i], before.values()[i] - 0.01 * g.values()[i]);
  EXPECT_THROW(sgd_step(p, Tensor4(1, 1, 1, 1), 0.01), DimensionError);
}

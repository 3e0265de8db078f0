#include <gtest/gtest.h>

#include <array>
#include <cmath>
#include <random>

#include "depthart/tensor.hpp"
#include "support/gradcheck.hpp"
#include "support/primitive_cases.hpp"

using namespace depthart;
using depthart::testing::gradcheck;
using depthart::testing::random_tensor;

TEST(Matmul, IdentityAndScalar) {
  const Tensor eye({2, 2}, {1, 0, 0, 1});
  const Tensor b({2, 2}, {3, 4, 5, 6});
  const Tensor c = matmul(eye, b);
  EXPECT_EQ(std::vector<float>(c.data().begin(), c.data().end()), (std::vector<float>{3, 4, 5, 6}));
  EXPECT_FLOAT_EQ(matmul(Tensor({1, 1}, {2}), Tensor({1, 1}, {3})).item(), 6.0f);
}

TEST(Matmul, ShapeMismatchThrows) {
  EXPECT_THROW(matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), DimensionError);
}

TEST(Matmul, GradientOfSumIsRowSumsOfB) {
  std::mt19937_64 rng(11);
  Tensor a = random_tensor({4, 5}, rng);
  const Tensor b = random_tensor({5, 3}, rng, 1.0f, false);
  Tape tape;
  {
    TapeScope scope(tape);
    tape.backward(sum(matmul(a, b)));
  }
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 5; ++j) {
      const float expect = b.data()[j * 3] + b.data()[j * 3 + 1] + b.data()[j * 3 + 2];
      EXPECT_NEAR(a.grad()[i * 5 + j], expect, 1e-5);
    }
  const auto r = gradcheck([&](const auto& x) { return sum(matmul(x[0], b)); }, {a});
  EXPECT_LT(r.rel_error, 1e-3);
}

TEST(SoftmaxCrossEntropy, UniformLogitsGiveLogV) {
  const Tensor logits = Tensor::full({3, 4}, 0.25f);
  const std::vector<int> t{0, 1, 3};
  EXPECT_NEAR(softmax_cross_entropy(logits, t).item(), std::log(4.0), 1e-6);
}

TEST(SoftmaxCrossEntropy, LargeMarginVanishes) {
  std::vector<float> v(2 * 4, 0.0f);
  v[0 * 4 + 2] = 20.0f;
  v[1 * 4 + 0] = 20.0f;
  const std::vector<int> t{2, 0};
  const float loss = softmax_cross_entropy(Tensor({2, 4}, v), t).item();
  EXPECT_GE(loss, 0.0f);
  EXPECT_LT(loss, 1e-8f);
}

TEST(SoftmaxCrossEntropy, MatchesNaiveOracle) {
  std::mt19937_64 rng(3);
  const Tensor logits = random_tensor({3, 5}, rng, 2.0f, false);
  const std::vector<int> t{4, 0, 2};
  double oracle = 0.0;
  for (std::size_t i = 0; i < 3; ++i) {
    double z = 0.0;
    for (std::size_t j = 0; j < 5; ++j) z += std::exp(static_cast<double>(logits.data()[i * 5 + j]));
    oracle += -(logits.data()[i * 5 + static_cast<std::size_t>(t[i])] - std::log(z));
  }
  oracle /= 3.0;
  EXPECT_NEAR(softmax_cross_entropy(logits, t).item(), oracle, 1e-6);
}

TEST(SoftmaxCrossEntropy, OutOfRangeTargetThrows) {
  const std::vector<int> bad{5};
  EXPECT_THROW(softmax_cross_entropy(Tensor::zeros({1, 5}), bad), IndexError);
  const std::vector<int> neg{-1};
  EXPECT_THROW(softmax_cross_entropy(Tensor::zeros({1, 5}), neg), IndexError);
}

TEST(ResizeBilinear, ConstantStaysConstant) {
  const Tensor x = Tensor::full({2, 3, 5}, 1.25f);
  const Tensor y = resize_bilinear(x, 7, 2);
  ASSERT_EQ(y.shape(), (Shape{2, 7, 2}));
  for (float v : y.data()) EXPECT_FLOAT_EQ(v, 1.25f);
}

TEST(ResizeBilinear, SinglePixelReplicates) {
  const Tensor x({1, 1, 1}, {-3.5f});
  const Tensor y = resize_bilinear(x, 4, 6);
  for (float v : y.data()) EXPECT_EQ(v, -3.5f);
}

TEST(ResizeBilinear, UpDownRoundTripKeepsCorners) {
  const Tensor x({1, 2, 2}, {1.0f, 2.0f, 3.0f, 4.0f});
  const Tensor up = resize_bilinear(x, 4, 4);
  // Hand-computed align-corners weights: row 1 of the 4x4 sits at 1/3.
  EXPECT_NEAR(up.data()[1 * 4 + 0], 1.0f + 2.0f / 3.0f, 1e-6);
  EXPECT_NEAR(up.data()[0 * 4 + 1], 1.0f + 1.0f / 3.0f, 1e-6);
  const Tensor back = resize_bilinear(up, 2, 2);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(back.data()[i], x.data()[i]);
}

TEST(ResizeBilinear, InvalidTargetThrows) {
  EXPECT_THROW(resize_bilinear(Tensor::zeros({1, 2, 2}), 0, 2), DimensionError);
}

TEST(Conv2d, DiracKernelIsIdentity) {
  std::mt19937_64 rng(5);
  const Tensor x = random_tensor({3, 5, 4}, rng, 1.0f, false);
  std::vector<float> w(3 * 3 * 3 * 3, 0.0f);
  for (std::size_t c = 0; c < 3; ++c) w[((c * 3 + c) * 3 + 1) * 3 + 1] = 1.0f;
  const Tensor y = conv2d(x, Tensor({3, 3, 3, 3}, w), Tensor::zeros({3}), 1, 1);
  ASSERT_EQ(y.shape(), x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y.data()[i], x.data()[i]);
}

TEST(Conv2d, StrideTwoHalvesResolution) {
  const Tensor y = conv2d(Tensor::zeros({1, 32, 32}), Tensor::zeros({8, 1, 3, 3}), Tensor::zeros({8}), 2, 1);
  EXPECT_EQ(y.shape(), (Shape{8, 16, 16}));
}

TEST(LayerNorm, NormalizesRows) {
  std::mt19937_64 rng(9);
  const Tensor x = random_tensor({6, 17}, rng, 3.0f, false);
  const Tensor y = layer_norm(x, Tensor::full({17}, 1.0f), Tensor::zeros({17}));
  for (std::size_t i = 0; i < 6; ++i) {
    double mu = 0.0, var = 0.0;
    for (std::size_t j = 0; j < 17; ++j) mu += y.data()[i * 17 + j];
    mu /= 17.0;
    for (std::size_t j = 0; j < 17; ++j) var += std::pow(y.data()[i * 17 + j] - mu, 2);
    var /= 17.0;
    EXPECT_NEAR(mu, 0.0, 1e-5);
    EXPECT_NEAR(var, 1.0, 1e-4);  // eps = 1e-5 inside the sqrt
  }
}

TEST(EmbeddingLookup, OutOfRangeThrows) {
  const std::vector<int> idx{0, 3};
  EXPECT_THROW(embedding_lookup(Tensor::zeros({3, 2}), idx), IndexError);
}

TEST(Attention, UniformKeysAverageValues) {
  const Tensor q = Tensor::zeros({2, 4});
  const Tensor k = Tensor::zeros({3, 4});
  const Tensor v({3, 4}, {1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12});
  const Tensor o = attention(q, k, v, 2);
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t e = 0; e < 4; ++e) EXPECT_NEAR(o.data()[i * 4 + e], 5.0f + static_cast<float>(e), 1e-5);
}

TEST(Attention, MaskedKeysAreIgnored) {
  std::mt19937_64 rng(4);
  const Tensor q = random_tensor({2, 4}, rng, 1.0f, false);
  const Tensor k = random_tensor({3, 4}, rng, 1.0f, false);
  const Tensor v = random_tensor({3, 4}, rng, 1.0f, false);
  const std::vector<std::uint8_t> allowed{1, 1, 0, 1, 1, 0};
  const Tensor full = attention(q, slice_rows(k, 0, 2), slice_rows(v, 0, 2), 2);
  const Tensor masked = attention(q, k, v, 2, allowed);
  for (std::size_t i = 0; i < full.numel(); ++i) EXPECT_EQ(full.data()[i], masked.data()[i]);
  const std::vector<std::uint8_t> none{0, 0, 0, 1, 1, 1};
  EXPECT_THROW(attention(q, k, v, 2, none), DimensionError);
}

TEST(Gradients, EveryPrimitiveMatchesFiniteDifferences) {
  for (auto& c : depthart::testing::primitive_gradient_cases()) {
    const auto r = gradcheck(c.fn, c.inputs);
    EXPECT_TRUE(r.finite) << c.primitive << " " << c.shape;
    EXPECT_LT(r.rel_error, 1e-3) << c.primitive << " " << c.shape;
  }
}

TEST(Gradients, SharedSubexpressionsAccumulate) {
  std::mt19937_64 rng(21);
  Tensor x = random_tensor({3, 4}, rng);
  Tensor w = random_tensor({4, 4}, rng);
  std::vector<float> shared_grad, dup_grad;
  {
    Tape tape;
    TapeScope scope(tape);
    const Tensor y = gelu(matmul(x, w));  // reused twice below
    tape.backward(sum(add(mul(y, y), scale(y, 3.0f))));
    shared_grad.assign(x.grad().begin(), x.grad().end());
  }
  x.zero_grad();
  w.zero_grad();
  {
    Tape tape;
    TapeScope scope(tape);
    const Tensor y1 = gelu(matmul(x, w));
    const Tensor y2 = gelu(matmul(x, w));
    const Tensor y3 = gelu(matmul(x, w));
    tape.backward(sum(add(mul(y1, y2), scale(y3, 3.0f))));
    dup_grad.assign(x.grad().begin(), x.grad().end());
  }
  ASSERT_EQ(shared_grad.size(), dup_grad.size());
  for (std::size_t i = 0; i < dup_grad.size(); ++i) EXPECT_NEAR(shared_grad[i], dup_grad[i], 1e-5);
}

TEST(Tape, NonScalarRootThrows) {
  Tensor x = Tensor::zeros({2}, true);
  Tape tape;
  TapeScope scope(tape);
  const Tensor y = scale(x, 2.0f);
  EXPECT_THROW(tape.backward(y), DimensionError);
}

TEST(Tape, NoRecordingWithoutScopeOrGradInputs) {
  Tensor x = Tensor::zeros({2}, true);
  const Tensor y = scale(x, 2.0f);
  EXPECT_FALSE(y.requires_grad());
  Tape tape;
  TapeScope scope(tape);
  const Tensor c = scale(Tensor::zeros({2}), 2.0f);
  EXPECT_FALSE(c.requires_grad());
  EXPECT_EQ(tape.size(), 0u);
  {
    NoGradScope ng;
    EXPECT_FALSE(scale(x, 1.0f).requires_grad());
  }
  EXPECT_TRUE(scale(x, 1.0f).requires_grad());
  EXPECT_EQ(tape.size(), 1u);
}

TEST(Determinism, RepeatedForwardIsBitIdentical) {
  std::mt19937_64 rng(8);
  const Tensor x = random_tensor({1, 6, 6}, rng, 1.0f, false);
  const Tensor w = random_tensor({4, 1, 3, 3}, rng, 1.0f, false);
  const Tensor b = random_tensor({4}, rng, 1.0f, false);
  auto run = [&] {
    const Tensor c = gelu(conv2d(x, w, b, 1, 1));
    const Tensor r = transpose(reshape(c, {4, 36}));
    return attention(r, r, r, 2);
  };
  const Tensor a = run(), bb = run();
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_EQ(a.data()[i], bb.data()[i]);
}

TEST(Gemm, RowResultIndependentOfBatchRows) {
  std::mt19937_64 rng(12);
  const Tensor a = random_tensor({7, 130}, rng, 1.0f, false);
  const Tensor b = random_tensor({130, 70}, rng, 1.0f, false);
  const Tensor full = matmul(a, b);
  for (std::size_t r = 0; r < 7; ++r) {
    const Tensor one = matmul(slice_rows(a, r, r + 1), b);
    for (std::size_t j = 0; j < 70; ++j) EXPECT_EQ(one.data()[j], full.data()[r * 70 + j]);
  }
}

TEST(Gemm, MatchesSequentialFmaInBothLayouts) {
  std::mt19937_64 rng(31);
  std::normal_distribution<float> nd;
  for (const auto [m, k, n] : {std::array<std::size_t, 3>{9, 37, 150}, {4, 5, 64}, {3, 20, 7}, {17, 64, 128}}) {
    std::vector<float> a(m * k), at(k * m), b(k * n), c0(m * n);
    for (auto& x : a) x = nd(rng);
    for (auto& x : b) x = nd(rng);
    for (auto& x : c0) x = nd(rng);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t p = 0; p < k; ++p) at[p * m + i] = a[i * k + p];
    for (bool accumulate : {false, true}) {
      std::vector<float> want(m * n), c1 = c0, c2 = c0;
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          float s = accumulate ? c0[i * n + j] : 0.0f;
          for (std::size_t p = 0; p < k; ++p) s = std::fma(a[i * k + p], b[p * n + j], s);
          want[i * n + j] = s;
        }
      kernels::gemm(a.data(), b.data(), c1.data(), m, k, n, accumulate);
      kernels::gemm_at(at.data(), b.data(), c2.data(), m, k, n, accumulate);
      EXPECT_EQ(c1, want) << m << "x" << k << "x" << n;
      EXPECT_EQ(c2, want) << m << "x" << k << "x" << n;
    }
  }
}

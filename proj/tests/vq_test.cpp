#include <gtest/gtest.h>

#include <algorithm>
#include <random>

#include "depthart/vq.hpp"
#include "support/gradcheck.hpp"
#include "support/vq_oracle.hpp"

namespace depthart {
namespace {

VqModel small_model(std::uint64_t seed = 1) { return VqModel::init(VqConfig{}, seed); }

Tensor random_features(const VqModel& vq, std::mt19937_64& rng, float scale = 1.0f) {
  const auto [h, w] = vq.schedule().last();
  return testing::random_tensor({vq.config.channels, h, w}, rng, scale, false);
}

TEST(Quantize, CodebookEntryMapsToItself) {
  const VqModel vq = small_model();
  const std::size_t c = vq.config.channels;
  std::vector<float> f(c * 9);
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t p = 0; p < 9; ++p) f[ch * 9 + p] = vq.codebook.data()[7 * c + ch];
  const TokenMap m = quantize(Tensor({c, 3, 3}, f), vq.codebook);
  EXPECT_EQ(m.indices, std::vector<int>(9, 7));
}

TEST(Quantize, TiesGoToLowestIndex) {
  std::vector<float> cb(8 * 2, 10.0f);
  for (std::size_t j = 0; j < 8; ++j) cb[j * 2] = 10.0f + static_cast<float>(j);
  cb[2 * 2] = 0.0f, cb[2 * 2 + 1] = 0.0f;
  cb[5 * 2] = 2.0f, cb[5 * 2 + 1] = 0.0f;
  const TokenMap m = quantize(Tensor({2, 1, 1}, {1.0f, 0.0f}), Tensor({8, 2}, cb));
  EXPECT_EQ(m.indices[0], 2);
}

TEST(Quantize, MatchesExhaustiveScan) {
  std::mt19937_64 rng(4);
  for (int rep = 0; rep < 20; ++rep) {
    const Tensor cb = testing::random_tensor({16, 4}, rng, 1.0f, false);
    const Tensor f = testing::random_tensor({4, 3, 3}, rng, 1.0f, false);
    const TokenMap m = quantize(f, cb);
    for (std::size_t p = 0; p < 9; ++p) {
      std::vector<double> d(16);
      for (std::size_t j = 0; j < 16; ++j)
        for (std::size_t ch = 0; ch < 4; ++ch) {
          const double diff = f.data()[ch * 9 + p] - cb.data()[j * 4 + ch];
          d[j] += diff * diff;
        }
      EXPECT_EQ(m.indices[p], std::min_element(d.begin(), d.end()) - d.begin());
    }
  }
}

TEST(Codebook, FreshEntriesAreDistinctAndSelfNearest) {
  const VqModel vq = small_model();
  const std::size_t v = vq.config.codebook_size, c = vq.config.channels;
  for (std::size_t j = 0; j < v; ++j) {
    std::vector<float> row(vq.codebook.data().begin() + static_cast<long>(j * c),
                           vq.codebook.data().begin() + static_cast<long>((j + 1) * c));
    EXPECT_EQ(quantize(Tensor({c, 1, 1}, row), vq.codebook).indices[0], static_cast<int>(j));
  }
}

TEST(Eta, LastScaleWithIdentityConvIsEmbedding) {
  const VqModel vq = small_model();
  std::mt19937_64 rng(2);
  const Tensor f = random_features(vq, rng);
  const TokenMap m = quantize(f, vq.codebook, vq.schedule().size() - 1);
  const Tensor e = eta(vq, m);
  const std::size_t c = vq.config.channels, n = m.indices.size();
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t p = 0; p < n; ++p)
      ASSERT_EQ(e.data()[ch * n + p], vq.codebook.data()[static_cast<std::size_t>(m.indices[p]) * c + ch]);
}

TEST(Eta, ConstantMapGivesConstantPreconv) {
  const VqModel vq = small_model();
  const TokenMap m{1, 2, 2, {9, 9, 9, 9}};
  const Tensor e = eta_preconv(vq, m);
  const std::size_t n = 64;
  for (std::size_t ch = 0; ch < vq.config.channels; ++ch)
    for (std::size_t p = 0; p < n; ++p) ASSERT_EQ(e.data()[ch * n + p], e.data()[ch * n]);
}

TEST(Eta, MatchesResizeThenConvOracle) {
  VqModel vq = small_model();
  std::mt19937_64 rng(6);
  auto w = vq.eta.weight.mutable_data();
  for (auto& x : w) x = std::normal_distribution<float>(0.0f, 0.2f)(rng);
  const TokenMap m{2, 4, 4, {}};
  for (int i = 0; i < 16; ++i) const_cast<TokenMap&>(m).indices.push_back((i * 13) % 64);
  const std::size_t c = vq.config.channels;
  std::vector<float> emb(c * 16);
  for (std::size_t p = 0; p < 16; ++p)
    for (std::size_t ch = 0; ch < c; ++ch)
      emb[ch * 16 + p] = vq.codebook.data()[static_cast<std::size_t>(m.indices[p]) * c + ch];
  const Tensor oracle = conv2d(resize_bilinear(Tensor({c, 4, 4}, emb), 8, 8), vq.eta.weight, vq.eta.bias, 1, 1);
  const Tensor got = eta(vq, m);
  ASSERT_EQ(got.shape(), oracle.shape());
  for (std::size_t i = 0; i < got.numel(); ++i) ASSERT_EQ(got.data()[i], oracle.data()[i]);
}

TEST(Decompose, SingleScaleEqualsQuantize) {
  VqConfig cfg;
  cfg.schedule = ScaleSchedule({{8, 8}});
  const VqModel vq = VqModel::init(cfg, 3);
  std::mt19937_64 rng(3);
  const Tensor f = random_features(vq, rng);
  const auto maps = decompose(vq, f);
  ASSERT_EQ(maps.size(), 1u);
  EXPECT_EQ(maps[0], quantize(f, vq.codebook, 0));
}

TEST(Decompose, ExactEtaImageHasZeroResidual) {
  VqConfig cfg;
  cfg.schedule = ScaleSchedule({{8, 8}});
  const VqModel vq = VqModel::init(cfg, 3);
  TokenMap x{0, 8, 8, {}};
  for (int i = 0; i < 64; ++i) x.indices.push_back((i * 7 + 3) % 64);
  const Tensor f = eta(vq, x);
  const Decomposition d = decompose_full(vq, f);
  EXPECT_EQ(d.maps[0], x);
  for (float r : d.residuals.back().data()) ASSERT_EQ(r, 0.0f);
}

TEST(Decompose, MatchesStraightLineOracle) {
  VqConfig cfg;
  cfg.raster = 16;
  cfg.channels = 2;
  cfg.codebook_size = 4;
  cfg.schedule = ScaleSchedule({{1, 1}, {2, 2}, {4, 4}});
  std::mt19937_64 rng(12);
  for (int rep = 0; rep < 10; ++rep) {
    VqModel vq = VqModel::init(cfg, 100 + static_cast<std::uint64_t>(rep));
    if (rep % 2) {
      auto w = vq.eta.weight.mutable_data();
      for (auto& x : w) x += std::normal_distribution<float>(0.0f, 0.1f)(rng);
    }
    const Tensor f = random_features(vq, rng);
    const Decomposition d = decompose_full(vq, f);

    testing::Grid g = testing::make_grid(2, 4, 4);
    g.v.assign(f.data().begin(), f.data().end());
    const std::vector<float> cb(vq.codebook.data().begin(), vq.codebook.data().end());
    const std::vector<float> ew(vq.eta.weight.data().begin(), vq.eta.weight.data().end());
    const std::vector<float> eb(vq.eta.bias.data().begin(), vq.eta.bias.data().end());
    double final_norm = 0;
    const auto steps = testing::residual_recursion(g, cb, 4, {{1, 1}, {2, 2}, {4, 4}}, ew, eb, &final_norm);
    for (std::size_t k = 0; k < 3; ++k) {
      EXPECT_EQ(d.maps[k].indices, steps[k].tokens) << "rep " << rep << " scale " << k;
      double n = 0;
      for (float x : d.residuals[k].data()) n += static_cast<double>(x) * x;
      EXPECT_NEAR(std::sqrt(n), steps[k].residual_norm, 1e-5);
    }
    double n = 0;
    for (float x : d.residuals[3].data()) n += static_cast<double>(x) * x;
    EXPECT_NEAR(std::sqrt(n), final_norm, 1e-5);
  }
}

TEST(Compose, SingleScaleEqualsEta) {
  const VqModel vq = small_model();
  const TokenMap m{1, 2, 2, {1, 2, 3, 4}};
  const Tensor a = compose(vq, {m}), b = eta(vq, m);
  for (std::size_t i = 0; i < a.numel(); ++i) ASSERT_EQ(a.data()[i], b.data()[i]);
}

TEST(Compose, OrderOfMapsDoesNotMatter) {
  const VqModel vq = small_model();
  std::mt19937_64 rng(8);
  auto maps = decompose(vq, random_features(vq, rng));
  const Tensor ref = compose(vq, maps);
  std::shuffle(maps.begin(), maps.end(), rng);
  const Tensor perm = compose(vq, maps);
  std::reverse(maps.begin(), maps.end());
  const Tensor rev = compose(vq, maps);
  for (std::size_t i = 0; i < ref.numel(); ++i) {
    ASSERT_EQ(ref.data()[i], perm.data()[i]);
    ASSERT_EQ(ref.data()[i], rev.data()[i]);
  }
}

TEST(Compose, TelescopingIdentity) {
  VqModel vq = small_model();
  std::mt19937_64 rng(9);
  auto w = vq.eta.weight.mutable_data();
  for (auto& x : w) x += std::normal_distribution<float>(0.0f, 0.05f)(rng);
  for (int rep = 0; rep < 20; ++rep) {
    const Tensor f = random_features(vq, rng, 2.0f);
    const Decomposition d = decompose_full(vq, f);
    const Tensor c = compose(vq, d.maps);
    for (std::size_t i = 0; i < f.numel(); ++i)
      ASSERT_NEAR(f.data()[i] - c.data()[i], d.residuals.back().data()[i], 1e-5);
  }
}

TEST(Compose, LinearInEachScale) {
  const VqModel vq = small_model();
  std::mt19937_64 rng(10);
  const auto maps = decompose(vq, random_features(vq, rng));
  VqModel scaled = vq;
  std::vector<float> cb(vq.codebook.data().begin(), vq.codebook.data().end());
  const float alpha = 1.7f;
  for (auto& x : cb) x *= alpha;
  scaled.codebook = Tensor(vq.codebook.shape(), cb);
  for (const auto& m : maps) {
    const Tensor base = eta_preconv(vq, m), sc = eta_preconv(scaled, m);
    for (std::size_t i = 0; i < base.numel(); ++i) ASSERT_NEAR(sc.data()[i], alpha * base.data()[i], 1e-5);
    // Removing one scale from the sum removes exactly its contribution.
    std::vector<TokenMap> rest;
    for (const auto& o : maps)
      if (o.scale != m.scale) rest.push_back(o);
    const Tensor full = compose(vq, maps), part = compose(vq, rest), one = eta(vq, m);
    for (std::size_t i = 0; i < full.numel(); ++i) ASSERT_NEAR(full.data()[i] - part.data()[i], one.data()[i], 1e-5);
  }
}

TEST(Compose, RejectsMapsOffSchedule) {
  const VqModel vq = small_model();
  EXPECT_THROW(compose(vq, {TokenMap{1, 3, 3, std::vector<int>(9, 0)}}), ScheduleError);
  EXPECT_THROW(compose(vq, {TokenMap{7, 8, 8, std::vector<int>(64, 0)}}), ScheduleError);
  const TokenMap m{0, 1, 1, {0}};
  EXPECT_THROW(compose(vq, {m, m}), ScheduleError);
}

TEST(Quantize, IdempotentAtLastScale) {
  const VqModel vq = small_model();
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<int> ui(0, 63);
  for (int rep = 0; rep < 20; ++rep) {
    TokenMap t{3, 8, 8, {}};
    for (int i = 0; i < 64; ++i) t.indices.push_back(ui(rng));
    EXPECT_EQ(quantize(eta(vq, t), vq.codebook, 3), t);
  }
}

TEST(Decompose, IsDeterministic) {
  const VqModel vq = small_model();
  std::mt19937_64 rng(13);
  const Tensor f = random_features(vq, rng);
  EXPECT_EQ(decompose(vq, f), decompose(vq, f));
}

TEST(Autoencoder, ShapesAndFiniteRoundTrip) {
  const VqModel vq = small_model();
  std::mt19937_64 rng(14);
  const Tensor x = testing::random_tensor({1, 32, 32}, rng, 0.5f, false);
  const Tensor f = encode(vq, x);
  EXPECT_EQ(f.shape(), (Shape{16, 8, 8}));
  const Tensor y = reconstruct(vq, x);
  EXPECT_EQ(y.shape(), (Shape{1, 32, 32}));
  for (float v : y.data()) ASSERT_TRUE(std::isfinite(v));
  EXPECT_THROW(encode(vq, Tensor::zeros({1, 16, 16})), DimensionError);
  EXPECT_THROW(decode(vq, Tensor::zeros({16, 4, 4})), DimensionError);
}

TEST(VqModel, CheckpointRoundTrip) {
  const VqModel a = small_model(5);
  Checkpoint ck;
  a.save(ck);
  const VqModel b = VqModel::load(deserialize_checkpoint(serialize_checkpoint(ck)));
  EXPECT_EQ(b.schedule(), a.schedule());
  std::mt19937_64 rng(15);
  const Tensor x = testing::random_tensor({1, 32, 32}, rng, 0.5f, false);
  const Tensor ya = reconstruct(a, x), yb = reconstruct(b, x);
  for (std::size_t i = 0; i < ya.numel(); ++i) ASSERT_EQ(ya.data()[i], yb.data()[i]);
  for (const auto& [name, t] : b.parameters()) EXPECT_FALSE(t.requires_grad()) << name;
}

TEST(ScheduleTest, ValidationAndText) {
  EXPECT_THROW(ScaleSchedule({{2, 2}, {1, 1}}), ScheduleError);
  EXPECT_THROW(ScaleSchedule(std::vector<ScaleSchedule::Extent>{}), ScheduleError);
  EXPECT_EQ(ScaleSchedule::standard().str(), "1x1,2x2,4x4,8x8");
  EXPECT_EQ(ScaleSchedule::standard().total_tokens(), 85u);
  EXPECT_EQ(ScaleSchedule::standard().offset(3), 21u);
  VqConfig cfg;
  cfg.schedule = ScaleSchedule({{1, 1}, {4, 4}});
  EXPECT_THROW(VqModel::init(cfg, 1), ScheduleError);
}

}  // namespace
}  // namespace depthart

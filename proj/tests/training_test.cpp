#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "depthart/training.hpp"
#include "support/fixtures.hpp"
#include "support/gradcheck.hpp"
#include "support/vq_oracle.hpp"

namespace depthart {

void PrintTo(Regime r, std::ostream* os) { *os << regime_name(r); }

namespace {

namespace fs = std::filesystem;

VqModel toy_vq(std::uint64_t seed = 21) {
  VqModel vq = VqModel::init(VqConfig{}, seed);
  vq.set_trainable(false);
  return vq;
}

Tensor random_features(const VqModel& vq, std::mt19937_64& rng) {
  const auto [h, w] = vq.schedule().last();
  return testing::random_tensor({vq.config.channels, h, w}, rng, 1.0f, false);
}

std::vector<TokenizedSample> toy_data(const VqModel& vq, std::size_t n, std::uint64_t seed = 3) {
  std::vector<DepthSample> s;
  for (std::size_t i = 0; i < n; ++i) s.push_back(generate_sample(scene_seed(seed, false, i)));
  return tokenize_all(vq, s);
}

Batch all_of(const std::vector<TokenizedSample>& d) {
  Batch b;
  for (const auto& s : d) b.push_back(&s);
  return b;
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("depthart_training_" + name);
  fs::remove_all(p);
  return p;
}

TrainConfig small_config(const fs::path& out, Regime regime, std::size_t steps = 20) {
  TrainConfig c;
  c.regime = regime;
  c.lr = 1e-3;
  c.batch = 2;
  c.steps = steps;
  c.decay_period = 10;
  c.checkpoint_every = 10;
  c.log_every = 5;
  c.seed = 4;
  c.out_dir = out.string();
  return c;
}

TEST(Targets, TeacherDecompositionReproducesItself) {
  const VqModel vq = toy_vq();
  std::mt19937_64 rng(1);
  for (int rep = 0; rep < 25; ++rep) {
    const Tensor f = random_features(vq, rng);
    const auto x = decompose(vq, f);
    EXPECT_EQ(depthart_targets(vq, x, f), x) << rep;
  }
}

TEST(Targets, SingleScaleIgnoresPredictions) {
  VqConfig cfg;
  cfg.schedule = ScaleSchedule({{8, 8}});
  const VqModel vq = VqModel::init(cfg, 5);
  std::mt19937_64 rng(2);
  const Tensor f = random_features(vq, rng);
  const TokenMap expect = quantize(resize_bilinear(f, 8, 8), vq.codebook, 0);
  EXPECT_EQ(depthart_targets(vq, {}, f), std::vector<TokenMap>{expect});
  const auto z = testing::random_maps(vq.schedule(), 64, rng, 1);
  EXPECT_EQ(depthart_targets(vq, z, f), std::vector<TokenMap>{expect});
}

TEST(Targets, MatchStraightLineOracle) {
  VqModel vq = toy_vq(22);
  std::mt19937_64 rng(3);
  {
    // A non-identity eta makes the oracle exercise the convolution.
    auto w = vq.eta.weight.mutable_data();
    std::normal_distribution<float> nd(0.0f, 0.05f);
    for (auto& x : w) x += nd(rng);
  }
  const auto& s = vq.schedule();
  std::vector<std::pair<std::size_t, std::size_t>> scales;
  for (std::size_t k = 0; k < s.size(); ++k) scales.push_back(s[k]);
  const std::vector<float> cb(vq.codebook.data().begin(), vq.codebook.data().end());
  const std::vector<float> ew(vq.eta.weight.data().begin(), vq.eta.weight.data().end());
  const std::vector<float> eb(vq.eta.bias.data().begin(), vq.eta.bias.data().end());
  for (int rep = 0; rep < 20; ++rep) {
    const Tensor f = random_features(vq, rng);
    const auto z = testing::random_maps(s, 64, rng, s.size());
    testing::Grid g = testing::make_grid(f.dim(0), f.dim(1), f.dim(2));
    g.v.assign(f.data().begin(), f.data().end());
    std::vector<std::vector<int>> zi;
    for (const auto& m : z) zi.push_back(m.indices);
    const auto want = testing::residual_targets(g, cb, 64, scales, ew, eb, zi);
    const auto got = depthart_targets(vq, z, f);
    ASSERT_EQ(got.size(), s.size());
    for (std::size_t k = 0; k < s.size(); ++k) {
      EXPECT_EQ(got[k].indices, want[k]) << "rep " << rep << " scale " << k;
      for (int t : got[k].indices) {
        EXPECT_GE(t, 0);
        EXPECT_LT(t, 64);
      }
    }
  }
}

TEST(Targets, FirstScaleDependsOnlyOnFeatures) {
  const VqModel vq = toy_vq();
  std::mt19937_64 rng(4);
  const Tensor f = random_features(vq, rng);
  const auto a = depthart_targets(vq, testing::random_maps(vq.schedule(), 64, rng, 4), f);
  const auto b = depthart_targets(vq, testing::random_maps(vq.schedule(), 64, rng, 4), f);
  EXPECT_EQ(a[0], b[0]);
}

TEST(Loss, EqualsSumOfPerScaleTerms) {
  const VqModel vq = toy_vq();
  const auto data = toy_data(vq, 2);
  const VarModel m = VarModel::init(testing::tiny_var_config(), 3);
  NoGradScope ng;
  const double total = teacher_forcing_loss(m, vq, data[0]).item();
  const std::vector<TokenMap> prev(data[0].teacher.begin(), data[0].teacher.end() - 1);
  const Tensor logits = forward(m, build_inputs(m, vq, prev, data[0].image), build_attention_mask(m.schedule()));
  double sum = 0.0;
  const auto& s = m.schedule();
  for (std::size_t k = 0; k < s.size(); ++k) {
    double ce = 0.0;
    for (std::size_t i = 0; i < s.tokens(k); ++i) {
      const float* row = logits.data().data() + (s.offset(k) + i) * 64;
      double mx = -1e300, z = 0.0;
      for (int v = 0; v < 64; ++v) mx = std::max(mx, static_cast<double>(row[v]));
      for (int v = 0; v < 64; ++v) z += std::exp(row[v] - mx);
      ce += std::log(z) + mx - row[data[0].teacher[k].indices[i]];
    }
    sum += ce / static_cast<double>(s.tokens(k));
  }
  EXPECT_NEAR(total, sum, 1e-6);
}

/// A model that puts logit 20 on token `c` and 0 elsewhere, at every position.
VarModel constant_predictor(int c) {
  VarModel m = VarModel::init(testing::tiny_var_config(), 9);
  for (auto& w : m.head.weight.mutable_data()) w = 0.0f;
  auto b = m.head.bias.mutable_data();
  for (auto& x : b) x = 0.0f;
  b[static_cast<std::size_t>(c)] = 20.0f;
  return m;
}

TEST(TeacherForcing, ConfidentCorrectModelHasNearZeroLoss) {
  const VqModel vq = toy_vq();
  auto data = toy_data(vq, 1);
  for (auto& m : data[0].teacher) m.indices.assign(m.indices.size(), 7);
  VarModel m = constant_predictor(7);
  AdamW opt(m.parameters(), {});
  const StepStats st = teacher_forcing_step(m, vq, opt, all_of(data));
  EXPECT_LT(st.loss, 1e-6);
}

TEST(TeacherForcing, OneForwardPassPerSample) {
  const VqModel vq = toy_vq();
  const auto data = toy_data(vq, 3);
  VarModel m = VarModel::init(testing::tiny_var_config(), 3);
  AdamW opt(m.parameters(), {});
  const StepStats st = teacher_forcing_step(m, vq, opt, all_of(data));
  EXPECT_EQ(st.forward_passes, 3u);
  EXPECT_EQ(st.infer_passes, 0u);
  EXPECT_EQ(opt.steps(), 1);
}

TEST(DepthArt, TeacherPredictionsGiveTeacherForcingLoss) {
  // With a constant codebook every residual quantizes to token 0, so a model
  // that always predicts 0 reproduces the teacher decomposition.
  VqModel vq = toy_vq();
  for (auto& x : vq.codebook.mutable_data()) x = 0.0f;
  const auto data = toy_data(vq, 2);
  for (const auto& m : data[0].teacher) EXPECT_EQ(m.indices, std::vector<int>(m.indices.size(), 0));
  const VarModel m = constant_predictor(0);
  NoGradScope ng;
  for (const auto& s : data) {
    const Inference inf = infer(m, vq, s.image);
    ASSERT_EQ(inf.maps, s.teacher);
    EXPECT_EQ(depthart_loss(m, vq, s).item(), teacher_forcing_loss(m, vq, s).item());
    EXPECT_EQ(depthart_loss(m, vq, s, false).item(), teacher_forcing_loss(m, vq, s).item());
  }
}

TEST(DepthArt, FusedAndUnfusedAgree) {
  const VqModel vq = toy_vq();
  const auto data = toy_data(vq, 2);
  VarModel a = VarModel::init(testing::tiny_var_config(), 5), b = VarModel::init(testing::tiny_var_config(), 5);
  AdamW oa(a.parameters(), {}), ob(b.parameters(), {});
  const StepStats sa = depthart_step(a, vq, oa, all_of(data), true);
  const StepStats sb = depthart_step(b, vq, ob, all_of(data), false);
  EXPECT_EQ(sa.loss, sb.loss);
  EXPECT_EQ(sa.targets, sb.targets);
  EXPECT_EQ(sa.infer_passes, 2u);
  EXPECT_EQ(sa.forward_passes, 0u);
  EXPECT_EQ(sb.forward_passes, 2u);
  const auto pa = a.parameters(), pb = b.parameters();
  for (std::size_t i = 0; i < pa.size(); ++i) {
    const auto ga = pa[i].second.grad(), gb = pb[i].second.grad();
    for (std::size_t j = 0; j < ga.size(); ++j) ASSERT_NEAR(ga[j], gb[j], 1e-6) << pa[i].first;
  }
}

TEST(DepthArt, TargetsFollowTheModel) {
  const VqModel vq = toy_vq();
  const auto data = toy_data(vq, 1);
  VarModel m = VarModel::init(testing::tiny_var_config(), 6);
  AdamW opt(m.parameters(), {1e-2, 0.9, 0.95, 1e-8, 0.0});
  std::vector<std::vector<TokenMap>> seen;
  for (int i = 0; i < 8; ++i) seen.push_back(depthart_step(m, vq, opt, all_of(data)).targets[0]);
  bool changed = false;
  for (std::size_t i = 1; i < seen.size(); ++i) changed |= seen[i] != seen[0];
  EXPECT_TRUE(changed);
  for (const auto& t : seen) EXPECT_EQ(t[0], seen[0][0]);
}

class Overfit : public ::testing::TestWithParam<Regime> {};

TEST_P(Overfit, LossHalvesOnEightSamples) {
  const VqModel vq = toy_vq();
  const auto data = toy_data(vq, 8);
  VarModel m = VarModel::init(VarConfig{}, 7);
  AdamW opt(m.parameters(), {1e-3, 0.9, 0.95, 1e-8, 0.0});
  double first = 0.0, last = 0.0;
  for (int step = 0; step < 200; ++step) {
    const Batch b = all_of(data);
    const StepStats st =
        GetParam() == Regime::depthart ? depthart_step(m, vq, opt, b) : teacher_forcing_step(m, vq, opt, b);
    if (step == 0) first = st.loss;
    last = st.loss;
  }
  EXPECT_LT(last, 0.5 * first);
  if (GetParam() == Regime::teacher_forcing) {
    NoGradScope ng;
    std::size_t hit = 0, total = 0;
    for (const auto& s : data) {
      const auto z = infer(m, vq, s.image).maps.back().indices;
      for (std::size_t i = 0; i < z.size(); ++i) hit += z[i] == s.teacher.back().indices[i];
      total += z.size();
    }
    EXPECT_GE(static_cast<double>(hit), 0.9 * static_cast<double>(total));
  }
}

INSTANTIATE_TEST_SUITE_P(Regimes, Overfit, ::testing::Values(Regime::teacher_forcing, Regime::depthart),
                         [](const auto& info) { return std::string(regime_name(info.param)); });

TEST(Fit, DeterministicAndRegimeSensitive) {
  const VqModel vq = toy_vq();
  const auto data = toy_data(vq, 6);
  const VarConfig arch = testing::tiny_var_config();
  const fs::path da = scratch("det_a"), db = scratch("det_b"), dc = scratch("det_c");
  const auto a = fit(vq, data, small_config(da, Regime::depthart), arch);
  const auto b = fit(vq, data, small_config(db, Regime::depthart), arch);
  const auto c = fit(vq, data, small_config(dc, Regime::teacher_forcing), arch);
  EXPECT_EQ(read_file(da / "loss.csv"), read_file(db / "loss.csv"));
  EXPECT_EQ(read_file(da / "var.dart"), read_file(db / "var.dart"));
  EXPECT_NE(read_file(da / "var.dart"), read_file(dc / "var.dart"));
  EXPECT_EQ(a.infer_passes, 40u);
  EXPECT_EQ(c.infer_passes, 0u);
  ASSERT_EQ(a.curve.size(), 4u);
  EXPECT_EQ(a.curve.back().step, 20u);
  EXPECT_DOUBLE_EQ(a.curve[0].lr, 1e-3);
  EXPECT_DOUBLE_EQ(a.curve.back().lr, 1e-3 * 0.8);
  EXPECT_EQ(parse_curve_csv(read_file(da / "loss.csv")).size(), 4u);
  (void)b;
}

TEST(Fit, ResumeAfterInterruptionMatchesUninterruptedRun) {
  const VqModel vq = toy_vq();
  const auto data = toy_data(vq, 6);
  const VarConfig arch = testing::tiny_var_config();
  const fs::path full = scratch("full"), cut = scratch("cut");
  fit(vq, data, small_config(full, Regime::depthart, 30), arch);

  FitOptions stop;
  stop.stop_after = 17;
  const auto partial = fit(vq, data, small_config(cut, Regime::depthart, 30), arch, stop);
  EXPECT_EQ(partial.steps_run, 17u);
  EXPECT_FALSE(fs::exists(cut / "var.dart"));
  const Checkpoint ck = load_checkpoint(cut / "checkpoint.dart");
  EXPECT_EQ(ck.scalar("train.step"), 10.0f);

  FitOptions resume;
  resume.resume = true;
  const auto rest = fit(vq, data, small_config(cut, Regime::depthart, 30), arch, resume);
  EXPECT_EQ(rest.start_step, 10u);
  EXPECT_EQ(rest.steps_run, 20u);
  EXPECT_EQ(read_file(full / "var.dart"), read_file(cut / "var.dart"));
  EXPECT_EQ(read_file(full / "loss.csv"), read_file(cut / "loss.csv"));
}

TEST(Fit, DivergenceKeepsLastCheckpoint) {
  VqModel vq = toy_vq();
  const auto data = toy_data(vq, 4);
  const VarConfig arch = testing::tiny_var_config();
  const fs::path dir = scratch("diverge");
  FitOptions stop;
  stop.stop_after = 12;
  fit(vq, data, small_config(dir, Regime::teacher_forcing), arch, stop);
  const std::string before = read_file(dir / "checkpoint.dart");

  for (auto& x : vq.codebook.mutable_data()) x = std::numeric_limits<float>::quiet_NaN();
  FitOptions resume;
  resume.resume = true;
  EXPECT_THROW(fit(vq, data, small_config(dir, Regime::teacher_forcing), arch, resume), DivergenceError);
  EXPECT_EQ(read_file(dir / "checkpoint.dart"), before);
  EXPECT_NO_THROW(VarModel::load(load_checkpoint(dir / "checkpoint.dart")));
}

TEST(Fit, ResumeRejectsForeignCheckpoint) {
  const VqModel vq = toy_vq();
  const auto data = toy_data(vq, 4);
  const fs::path dir = scratch("foreign");
  fit(vq, data, small_config(dir, Regime::teacher_forcing, 10), testing::tiny_var_config());
  FitOptions resume;
  resume.resume = true;
  EXPECT_THROW(fit(vq, data, small_config(dir, Regime::depthart, 10), testing::tiny_var_config(), resume),
               ConfigError);
}

TEST(Fit, ResumeAcceptsSeedsBeyondFloatPrecision) {
  const VqModel vq = toy_vq();
  const auto data = toy_data(vq, 4);
  const fs::path dir = scratch("bigseed");
  TrainConfig c = small_config(dir, Regime::teacher_forcing, 20);
  c.seed = 123456789;
  FitOptions fo;
  fo.stop_after = 12;
  fit(vq, data, c, testing::tiny_var_config(), fo);
  FitOptions resume;
  resume.resume = true;
  EXPECT_EQ(fit(vq, data, c, testing::tiny_var_config(), resume).start_step, c.checkpoint_every);
}

}  // namespace
}  // namespace depthart

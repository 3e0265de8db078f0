#pragma once

// The two training regimes for the transformer, and the resumable fit loop.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "depthart/config.hpp"
#include "depthart/data.hpp"
#include "depthart/errors.hpp"
#include "depthart/optim.hpp"
#include "depthart/var.hpp"
#include "depthart/vq.hpp"
#include "depthart/vq_train.hpp"

namespace depthart {

/// One training example in token space.
struct TokenizedSample {
  std::vector<TokenMap> image;    // image token maps, all K scales
  Tensor features;                // f_D, un-quantized depth features [C,h_K,w_K]
  std::vector<TokenMap> teacher;  // x_1..x_K
  std::vector<float> mask;        // validity mask of the depth raster
};

using Batch = std::vector<const TokenizedSample*>;

inline std::vector<TokenMap> image_tokens(const VqModel& vq, const DepthSample& s) {
  NoGradScope ng;
  return decompose(vq, encode(vq, raster_tensor(s.gray_normalized(), s.width)));
}

inline TokenizedSample tokenize(const VqModel& vq, const DepthSample& s) {
  NoGradScope ng;
  TokenizedSample t;
  t.image = image_tokens(vq, s);
  t.features = encode(vq, depth_target(s).raster);
  t.teacher = decompose(vq, t.features);
  t.mask.assign(s.mask.begin(), s.mask.end());
  return t;
}

inline std::vector<TokenizedSample> tokenize_all(const VqModel& vq, const std::vector<DepthSample>& samples) {
  std::vector<TokenizedSample> out(samples.size());
  parallel_for(samples.size(), [&](std::size_t i) { out[i] = tokenize(vq, samples[i]); });
  return out;
}

/// t_k = Q(S(f - sum_{i<k} eta(z_i), s_k)), the residual the model should have
/// predicted given its own earlier maps. Only z_1..z_{K-1} are read.
inline std::vector<TokenMap> depthart_targets(const VqModel& vq, const std::vector<TokenMap>& z, const Tensor& f) {
  NoGradScope ng;
  const auto& s = vq.schedule();
  if (z.size() + 1 < s.size())
    throw ScheduleError("depthart_targets: need " + std::to_string(s.size() - 1) + " predicted maps, got " +
                        std::to_string(z.size()));
  std::vector<TokenMap> t;
  Tensor acc = Tensor::zeros(f.shape());
  for (std::size_t k = 0; k < s.size(); ++k) {
    const Tensor delta = sub(f, acc);
    t.push_back(quantize(resize_bilinear(delta, s[k].first, s[k].second), vq.codebook, k));
    if (k + 1 == s.size()) break;
    check_map(vq, z[k]);
    if (z[k].scale != k) throw ScheduleError("depthart_targets: maps out of schedule order");
    acc = accumulate(vq, acc, z[k]);
  }
  return t;
}

/// Sum over scales of the token-averaged cross-entropy.
inline Tensor scale_loss(const std::vector<Tensor>& logits, const std::vector<TokenMap>& targets) {
  if (logits.size() != targets.size()) throw ScheduleError("scale_loss: logits and targets disagree on scale count");
  Tensor total;
  for (std::size_t k = 0; k < logits.size(); ++k) {
    const Tensor ce = softmax_cross_entropy(logits[k], targets[k].indices);
    total = total.defined() ? add(total, ce) : ce;
  }
  return total;
}

/// Splits [N_depth, V] logits into per-scale blocks.
inline std::vector<Tensor> split_scales(const Tensor& logits, const ScaleSchedule& s) {
  std::vector<Tensor> out;
  for (std::size_t k = 0; k < s.size(); ++k) out.push_back(slice_rows(logits, s.offset(k), s.offset(k) + s.tokens(k)));
  return out;
}

struct StepStats {
  double loss = 0.0;
  std::vector<double> scale_loss;  // batch mean per scale
  std::size_t forward_passes = 0;  // full-sequence evaluations with gradient
  std::size_t infer_passes = 0;    // greedy decodes
  std::vector<std::vector<TokenMap>> targets;
};

namespace detail {

inline void check_finite(double loss, const char* where) {
  if (!std::isfinite(loss)) throw DivergenceError(std::string(where) + ": loss is " + std::to_string(loss));
}

inline void record_scales(StepStats& st, const std::vector<Tensor>& logits, const std::vector<TokenMap>& targets) {
  NoGradScope ng;
  st.scale_loss.resize(logits.size(), 0.0);
  for (std::size_t k = 0; k < logits.size(); ++k)
    st.scale_loss[k] += softmax_cross_entropy(logits[k], targets[k].indices).item();
}

/// Backpropagates the batch mean of `per_sample` and applies one optimizer step.
inline void apply(AdamW& opt, Tape& tape, std::vector<Tensor>& per_sample, StepStats& st, const char* where) {
  Tensor total = per_sample[0];
  for (std::size_t i = 1; i < per_sample.size(); ++i) total = add(total, per_sample[i]);
  total = scale(total, 1.0f / static_cast<float>(per_sample.size()));
  st.loss = total.item();
  for (auto& v : st.scale_loss) v /= static_cast<double>(per_sample.size());
  check_finite(st.loss, where);
  tape.backward(total);
  opt.step();
}

}  // namespace detail

/// Per-sample losses of the teacher-forced pass, without touching the
/// optimizer.
inline std::vector<Tensor> teacher_forcing_losses(const VarModel& m, const VqModel& vq, const Batch& batch,
                                                  StepStats* st = nullptr) {
  const auto& sched = m.schedule();
  std::vector<SequenceInputs> inputs;
  for (const TokenizedSample* s : batch) {
    const std::vector<TokenMap> prev(s->teacher.begin(), s->teacher.end() - 1);
    inputs.push_back(build_inputs(m, vq, prev, s->image));
  }
  const auto logits = forward_batch(m, inputs, build_attention_mask(sched));
  std::vector<Tensor> losses;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto blocks = split_scales(logits[i], sched);
    if (st) {
      ++st->forward_passes;
      detail::record_scales(*st, blocks, batch[i]->teacher);
    }
    losses.push_back(scale_loss(blocks, batch[i]->teacher));
  }
  return losses;
}

inline Tensor teacher_forcing_loss(const VarModel& m, const VqModel& vq, const TokenizedSample& s,
                                   StepStats* st = nullptr) {
  return teacher_forcing_losses(m, vq, {&s}, st)[0];
}

inline StepStats teacher_forcing_step(const VarModel& m, const VqModel& vq, AdamW& opt, const Batch& batch) {
  if (batch.empty()) throw DataError("teacher_forcing_step: empty batch");
  StepStats st;
  opt.zero_grad();
  Tape tape;
  TapeScope scope(tape);
  auto losses = teacher_forcing_losses(m, vq, batch, &st);
  detail::apply(opt, tape, losses, st, "teacher_forcing_step");
  return st;
}

/// Per-sample DepthART losses. Fused (default): the greedy decode itself is
/// recorded and reused as the gradient pass, which evaluates exactly the same
/// inputs. Unfused: a gradient-free decode, then a separate full forward whose
/// depth inputs must hash equal to the decode's.
inline std::vector<Tensor> depthart_losses(const VarModel& m, const VqModel& vq, const Batch& batch,
                                           bool fused = true, StepStats* st = nullptr) {
  const auto& sched = m.schedule();
  std::vector<const std::vector<TokenMap>*> images;
  for (const TokenizedSample* s : batch) images.push_back(&s->image);
  std::vector<Inference> inf;
  if (fused) {
    inf = infer_batch(m, vq, images);
  } else {
    NoGradScope ng;
    inf = infer_batch(m, vq, images);
  }
  std::vector<std::vector<Tensor>> logits(batch.size());
  if (fused) {
    for (std::size_t i = 0; i < batch.size(); ++i) logits[i] = inf[i].logits;
  } else {
    std::vector<SequenceInputs> inputs;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const std::vector<TokenMap> prev(inf[i].maps.begin(), inf[i].maps.end() - 1);
      inputs.push_back(build_inputs(m, vq, prev, batch[i]->image));
      if (hash_tensors(inputs.back().depth) != hash_tensors(inf[i].depth_inputs))
        throw ScheduleError("depthart: gradient-pass inputs differ from the decoded ones");
    }
    const auto full = forward_batch(m, inputs, build_attention_mask(sched));
    for (std::size_t i = 0; i < batch.size(); ++i) logits[i] = split_scales(full[i], sched);
  }
  std::vector<Tensor> losses;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    auto targets = depthart_targets(vq, inf[i].maps, batch[i]->features);
    losses.push_back(scale_loss(logits[i], targets));
    if (st) {
      ++st->infer_passes;
      if (!fused) ++st->forward_passes;
      detail::record_scales(*st, logits[i], targets);
      st->targets.push_back(std::move(targets));
    }
  }
  return losses;
}

inline Tensor depthart_loss(const VarModel& m, const VqModel& vq, const TokenizedSample& s, bool fused = true,
                            StepStats* st = nullptr) {
  return depthart_losses(m, vq, {&s}, fused, st)[0];
}

inline StepStats depthart_step(const VarModel& m, const VqModel& vq, AdamW& opt, const Batch& batch,
                               bool fused = true) {
  if (batch.empty()) throw DataError("depthart_step: empty batch");
  StepStats st;
  opt.zero_grad();
  Tape tape;
  TapeScope scope(tape);
  auto losses = depthart_losses(m, vq, batch, fused, &st);
  detail::apply(opt, tape, losses, st, "depthart_step");
  return st;
}

// ---------------------------------------------------------------------- fit

struct CurvePoint {
  std::size_t step;
  double loss, lr;
};

inline std::string curve_csv(const std::vector<CurvePoint>& curve) {
  std::string out = "step,loss,lr\n";
  char buf[96];
  for (const auto& p : curve) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g\n", p.step, p.loss, p.lr);
    out += buf;
  }
  return out;
}

inline std::vector<CurvePoint> parse_curve_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != "step,loss,lr") throw DataError("loss curve: bad header");
  std::vector<CurvePoint> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    CurvePoint p{};
    if (std::sscanf(line.c_str(), "%zu,%lf,%lf", &p.step, &p.loss, &p.lr) != 3)
      throw DataError("loss curve: bad row '" + line + "'");
    out.push_back(p);
  }
  return out;
}

struct FitOptions {
  bool resume = false;
  bool fused = true;
  std::size_t stop_after = 0;  // if nonzero, return after this many steps (interruption drills)
  std::function<void(const CurvePoint&)> on_log;
};

struct FitResult {
  VarModel model;
  std::vector<CurvePoint> curve;
  std::size_t start_step = 0;  // > 0 when resumed
  std::size_t steps_run = 0;
  std::size_t infer_passes = 0;
};

inline std::filesystem::path checkpoint_path(const TrainConfig& c) {
  return std::filesystem::path(c.out_dir) / "checkpoint.dart";
}
inline std::filesystem::path model_path(const TrainConfig& c) { return std::filesystem::path(c.out_dir) / "var.dart"; }
inline std::filesystem::path curve_path(const TrainConfig& c) { return std::filesystem::path(c.out_dir) / "loss.csv"; }

/// Index of the sample consumed at position `i` of the seeded sample stream;
/// every epoch is a fresh permutation.
class SampleStream {
 public:
  SampleStream(std::size_t n, std::uint64_t seed) : n_(n), seed_(seed) {}

  std::size_t operator()(std::size_t i) {
    const std::size_t epoch = i / n_;
    if (epoch != epoch_ || order_.empty()) {
      order_.resize(n_);
      std::iota(order_.begin(), order_.end(), std::size_t{0});
      std::mt19937_64 rng(seed_ * 0x9E3779B97F4A7C15ULL + epoch + 1);
      std::shuffle(order_.begin(), order_.end(), rng);
      epoch_ = epoch;
    }
    return order_[i % n_];
  }

 private:
  std::size_t n_;
  std::uint64_t seed_;
  std::size_t epoch_ = 0;
  std::vector<std::size_t> order_;
};

inline void save_training_state(const TrainConfig& c, const VarModel& m, const AdamW& opt, std::size_t step,
                                 const std::vector<CurvePoint>& curve) {
  Checkpoint ck;
  m.save(ck);
  opt.save(ck, "adam.");
  ck.put_scalar("train.step", static_cast<double>(step));
  ck.put_scalar("train.seed", static_cast<double>(c.seed));
  ck.put_scalar("train.regime", c.regime == Regime::depthart ? 1.0 : 0.0);
  write_file_atomic(curve_path(c), curve_csv(curve));
  save_checkpoint(checkpoint_path(c), ck);
}

/// Trains from the seeded initialization (or the last checkpoint when
/// resuming). Writes checkpoint.dart every `checkpoint_every` steps, and
/// var.dart plus loss.csv at the end. A divergence propagates and leaves the
/// last checkpoint untouched.
inline FitResult fit(const VqModel& vq, const std::vector<TokenizedSample>& data, const TrainConfig& cfg,
                     const VarConfig& arch = {}, const FitOptions& fo = {}) {
  cfg.validate();
  if (data.empty()) throw DataError("fit: empty training set");
  VarConfig a = arch;
  a.schedule = vq.schedule();
  a.vocab = vq.config.codebook_size;
  a.codebook_dim = vq.config.channels;
  FitResult r{VarModel::init(a, cfg.seed), {}, 0, 0};
  AdamW opt(r.model.parameters(), {cfg.lr, 0.9, 0.95, 1e-8, cfg.weight_decay});
  std::filesystem::create_directories(cfg.out_dir);

  if (fo.resume && std::filesystem::exists(checkpoint_path(cfg))) {
    const Checkpoint ck = load_checkpoint(checkpoint_path(cfg));
    if (ck.scalar("train.seed") != static_cast<float>(cfg.seed) ||
        (ck.scalar("train.regime") == 1.0) != (cfg.regime == Regime::depthart))
      throw ConfigError("fit: checkpoint in " + cfg.out_dir + " belongs to a different seed or regime");
    r.model = VarModel::load(ck);
    opt = AdamW(r.model.parameters(), {cfg.lr, 0.9, 0.95, 1e-8, cfg.weight_decay});
    opt.load(ck, "adam.");
    r.start_step = static_cast<std::size_t>(ck.scalar("train.step"));
    for (const auto& p : parse_curve_csv(read_file(curve_path(cfg))))
      if (p.step <= r.start_step) r.curve.push_back(p);
  }

  SampleStream stream(data.size(), cfg.seed);
  double window = 0.0;
  std::size_t window_n = 0;
  for (std::size_t step = r.start_step; step < cfg.steps; ++step) {
    if (fo.stop_after && r.steps_run == fo.stop_after) return r;
    opt.set_lr(step_lr(cfg.lr, step, cfg.decay_period, cfg.decay_gamma));
    Batch batch;
    for (std::size_t b = 0; b < cfg.batch; ++b) batch.push_back(&data[stream(step * cfg.batch + b)]);
    const StepStats st = cfg.regime == Regime::depthart ? depthart_step(r.model, vq, opt, batch, fo.fused)
                                                         : teacher_forcing_step(r.model, vq, opt, batch);
    ++r.steps_run;
    r.infer_passes += st.infer_passes;
    window += st.loss;
    ++window_n;
    if ((step + 1) % cfg.log_every == 0 || step + 1 == cfg.steps) {
      r.curve.push_back({step + 1, window / static_cast<double>(window_n), opt.lr()});
      if (fo.on_log) fo.on_log(r.curve.back());
      window = 0.0;
      window_n = 0;
    }
    if ((step + 1) % cfg.checkpoint_every == 0 && step + 1 < cfg.steps)
      save_training_state(cfg, r.model, opt, step + 1, r.curve);
  }
  save_training_state(cfg, r.model, opt, cfg.steps, r.curve);
  Checkpoint final_ck;
  r.model.save(final_ck);
  save_checkpoint(model_path(cfg), final_ck);
  return r;
}

}  // namespace depthart

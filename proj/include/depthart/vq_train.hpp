#pragma once

// Autoencoder training: a short continuous warm-up, k-means codebook
// initialisation on encoder outputs, then multi-scale quantized training with
// straight-through gradients and EMA codebook updates.

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "depthart/data.hpp"
#include "depthart/errors.hpp"
#include "depthart/optim.hpp"
#include "depthart/vq.hpp"

namespace depthart {

struct VqTrainOptions {
  std::size_t steps = 3000;
  std::size_t batch = 16;
  double lr = 2e-3;
  double weight_decay = 0.0;
  std::size_t decay_period = 1000;
  double decay_gamma = 0.8;
  std::size_t warmup_steps = 300;
  std::size_t kmeans_samples = 512;
  std::size_t kmeans_iters = 20;
  double commitment = 0.25;
  double ema_decay = 0.99;
  double dead_count = 0.03;
  std::uint64_t seed = 1;
  std::size_t log_every = 50;
  std::function<void(std::size_t step, double loss)> on_log;
};

struct VqTrainResult {
  VqModel model;
  std::vector<std::pair<std::size_t, double>> losses;  // (step, mean batch loss)
  std::size_t restarts = 0;
};

/// Normalized depth raster and loss weights for one sample.
struct DepthTarget {
  Tensor raster;  // [1,R,R]
  std::vector<float> weights;
  double d98 = 0.0;
};

inline DepthTarget depth_target(const DepthSample& s) {
  const auto n = normalize_depth(s.depth, s.mask);
  DepthTarget t{raster_tensor(n.values, s.width), std::vector<float>(s.mask.begin(), s.mask.end()), n.d98};
  return t;
}

/// Lloyd iterations from a k-means++ start; rows of `points` are C-vectors.
inline std::vector<float> kmeans(const std::vector<float>& points, std::size_t c, std::size_t k, std::size_t iters,
                                 std::mt19937_64& rng) {
  const std::size_t n = points.size() / c;
  if (n < k) throw DataError("kmeans: fewer points than clusters");
  auto dist2 = [&](const float* a, const float* b) {
    double d = 0;
    for (std::size_t i = 0; i < c; ++i) d += (static_cast<double>(a[i]) - b[i]) * (static_cast<double>(a[i]) - b[i]);
    return d;
  };
  std::vector<float> centers;
  centers.reserve(k * c);
  const std::size_t first = std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
  centers.insert(centers.end(), points.begin() + static_cast<long>(first * c), points.begin() + static_cast<long>((first + 1) * c));
  std::vector<double> best(n, std::numeric_limits<double>::infinity());
  while (centers.size() < k * c) {
    const float* last = centers.data() + centers.size() - c;
    double total = 0;
    for (std::size_t i = 0; i < n; ++i) {
      best[i] = std::min(best[i], dist2(points.data() + i * c, last));
      total += best[i];
    }
    double r = std::uniform_real_distribution<double>(0.0, total)(rng);
    std::size_t pick = n - 1;
    for (std::size_t i = 0; i < n; ++i) {
      r -= best[i];
      if (r <= 0) {
        pick = i;
        break;
      }
    }
    centers.insert(centers.end(), points.begin() + static_cast<long>(pick * c), points.begin() + static_cast<long>((pick + 1) * c));
  }
  std::vector<int> assign(n);
  for (std::size_t it = 0; it < iters; ++it) {
    std::vector<double> sums(k * c, 0.0);
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t i = 0; i < n; ++i) {
      double bd = std::numeric_limits<double>::infinity();
      int arg = 0;
      for (std::size_t j = 0; j < k; ++j) {
        const double d = dist2(points.data() + i * c, centers.data() + j * c);
        if (d < bd) {
          bd = d;
          arg = static_cast<int>(j);
        }
      }
      assign[i] = arg;
      ++counts[static_cast<std::size_t>(arg)];
      for (std::size_t d = 0; d < c; ++d) sums[static_cast<std::size_t>(arg) * c + d] += points[i * c + d];
    }
    for (std::size_t j = 0; j < k; ++j) {
      if (counts[j] == 0) {
        const std::size_t p = std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
        for (std::size_t d = 0; d < c; ++d) centers[j * c + d] = points[p * c + d];
        continue;
      }
      for (std::size_t d = 0; d < c; ++d) centers[j * c + d] = static_cast<float>(sums[j * c + d] / static_cast<double>(counts[j]));
    }
  }
  return centers;
}

namespace detail {

/// Exponential moving averages of per-code assignment counts and vector sums.
struct EmaCodebook {
  std::vector<double> count, sum;
  std::size_t v, c;

  EmaCodebook(const Tensor& codebook) : v(codebook.dim(0)), c(codebook.dim(1)) {
    count.assign(v, 1.0);
    sum.assign(codebook.data().begin(), codebook.data().end());
  }

  /// `vectors` are rows of the quantized inputs, `tokens` their assignments.
  std::size_t update(Tensor& codebook, const std::vector<float>& vectors, const std::vector<int>& tokens, double decay,
                     double dead, std::mt19937_64& rng) {
    std::vector<double> bc(v, 0.0), bs(v * c, 0.0);
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      const auto t = static_cast<std::size_t>(tokens[i]);
      bc[t] += 1.0;
      for (std::size_t d = 0; d < c; ++d) bs[t * c + d] += vectors[i * c + d];
    }
    double n = 0;
    for (std::size_t j = 0; j < v; ++j) {
      count[j] = decay * count[j] + (1.0 - decay) * bc[j];
      for (std::size_t d = 0; d < c; ++d) sum[j * c + d] = decay * sum[j * c + d] + (1.0 - decay) * bs[j * c + d];
      n += count[j];
    }
    auto cb = codebook.mutable_data();
    std::size_t restarts = 0;
    const std::size_t rows = tokens.size();
    for (std::size_t j = 0; j < v; ++j) {
      if (count[j] < dead && rows > 0) {
        const std::size_t p = std::uniform_int_distribution<std::size_t>(0, rows - 1)(rng);
        count[j] = 1.0;
        for (std::size_t d = 0; d < c; ++d) sum[j * c + d] = vectors[p * c + d];
        ++restarts;
      }
      const double smoothed = (count[j] + 1e-5) / (n + static_cast<double>(v) * 1e-5) * n;
      for (std::size_t d = 0; d < c; ++d) cb[j * c + d] = static_cast<float>(sum[j * c + d] / smoothed);
    }
    return restarts;
  }
};

inline void append_rows(const Tensor& chw, std::vector<float>& rows) {
  const std::size_t c = chw.dim(0), n = chw.dim(1) * chw.dim(2);
  for (std::size_t p = 0; p < n; ++p)
    for (std::size_t ch = 0; ch < c; ++ch) rows.push_back(chw.data()[ch * n + p]);
}

}  // namespace detail

inline VqTrainResult train_vqvae(const std::vector<DepthSample>& train, const VqTrainOptions& opt,
                                 const VqConfig& cfg = {}) {
  if (train.empty()) throw DataError("train_vqvae: empty dataset");
  VqTrainResult result{VqModel::init(cfg, opt.seed), {}, 0};
  VqModel& vq = result.model;
  vq.set_trainable(true);
  std::vector<DepthTarget> targets;
  targets.reserve(train.size());
  for (const auto& s : train) targets.push_back(depth_target(s));

  AdamW adam(vq.parameters(), {opt.lr, 0.9, 0.95, 1e-8, opt.weight_decay});
  std::mt19937_64 rng(opt.seed ^ 0x5bd1e995ULL);
  std::vector<std::size_t> order(targets.size());
  std::size_t cursor = order.size();
  auto next_index = [&] {
    if (cursor == order.size()) {
      std::iota(order.begin(), order.end(), std::size_t{0});
      std::shuffle(order.begin(), order.end(), rng);
      cursor = 0;
    }
    return order[cursor++];
  };

  std::unique_ptr<detail::EmaCodebook> ema;
  const std::size_t warmup = std::min(opt.warmup_steps, opt.steps);
  double window = 0.0;
  std::size_t window_n = 0;

  for (std::size_t step = 0; step < opt.steps; ++step) {
    if (step == warmup) {
      NoGradScope ng;
      std::vector<float> pts;
      const std::size_t n = std::min(opt.kmeans_samples, targets.size());
      for (std::size_t i = 0; i < n; ++i) detail::append_rows(encode(vq, targets[i].raster), pts);
      const auto centers = kmeans(pts, cfg.channels, cfg.codebook_size, opt.kmeans_iters, rng);
      vq.codebook = Tensor(vq.codebook.shape(), centers);
      ema = std::make_unique<detail::EmaCodebook>(vq.codebook);
    }
    const bool quantized = step >= warmup;
    adam.set_lr(step_lr(opt.lr, step, opt.decay_period, opt.decay_gamma));
    adam.zero_grad();
    Tape tape;
    std::vector<float> ema_rows;
    std::vector<int> ema_tokens;
    double batch_loss = 0.0;
    {
      TapeScope scope(tape);
      Tensor total;
      for (std::size_t b = 0; b < opt.batch; ++b) {
        const DepthTarget& t = targets[next_index()];
        const Tensor f = encode(vq, t.raster);
        Tensor loss;
        if (!quantized) {
          loss = mse_loss(decode(vq, f), t.raster, t.weights);
        } else {
          const Decomposition d = decompose_full(vq, f.detach());
          const Tensor fhat = compose(vq, d.maps);
          const Tensor z = straight_through(f, fhat.detach());
          loss = mse_loss(decode(vq, z), t.raster, t.weights);
          loss = add(loss, mse_loss(fhat, f.detach()));
          loss = add(loss, scale(mse_loss(f, fhat.detach()), static_cast<float>(opt.commitment)));
          for (std::size_t k = 0; k < d.maps.size(); ++k) {
            detail::append_rows(d.scaled[k], ema_rows);
            ema_tokens.insert(ema_tokens.end(), d.maps[k].indices.begin(), d.maps[k].indices.end());
          }
        }
        total = total.defined() ? add(total, loss) : loss;
      }
      total = scale(total, 1.0f / static_cast<float>(opt.batch));
      batch_loss = total.item();
      if (!std::isfinite(batch_loss))
        throw DivergenceError("train_vqvae: loss became " + std::to_string(batch_loss) + " at step " + std::to_string(step));
      tape.backward(total);
    }
    adam.step();
    if (quantized) result.restarts += ema->update(vq.codebook, ema_rows, ema_tokens, opt.ema_decay, opt.dead_count, rng);
    window += batch_loss;
    ++window_n;
    if ((step + 1) % opt.log_every == 0 || step + 1 == opt.steps) {
      result.losses.emplace_back(step + 1, window / static_cast<double>(window_n));
      if (opt.on_log) opt.on_log(step + 1, window / static_cast<double>(window_n));
      window = 0.0;
      window_n = 0;
    }
  }
  vq.set_trainable(false);
  return result;
}

/// Fraction of codebook entries used by the decompositions of `samples`.
inline double codebook_utilization(const VqModel& vq, const std::vector<DepthSample>& samples) {
  NoGradScope ng;
  std::vector<char> used(vq.config.codebook_size, 0);
  for (const auto& s : samples)
    for (const auto& m : decompose(vq, encode(vq, depth_target(s).raster)))
      for (int t : m.indices) used[static_cast<std::size_t>(t)] = 1;
  return static_cast<double>(std::count(used.begin(), used.end(), 1)) / static_cast<double>(used.size());
}

}  // namespace depthart

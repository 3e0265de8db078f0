#pragma once

// Next-scale autoregressive transformer over depth token maps, conditioned on
// the image token maps of every scale.
//
// Sequence layout: [image scale 1 .. K][depth scale 1 .. K]. Image positions
// see only image positions; a depth position at scale k sees every image
// position and every depth position at scales <= k. The model is evaluated
// block by block (image block, then one block per depth scale), each block
// attending to the keys/values of itself and all earlier blocks, which is
// exactly that mask.

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "depthart/checkpoint.hpp"
#include "depthart/errors.hpp"
#include "depthart/optim.hpp"
#include "depthart/tensor.hpp"
#include "depthart/vq.hpp"

namespace depthart {

struct VarConfig {
  std::size_t width = 128;
  std::size_t layers = 4;
  std::size_t heads = 4;
  std::size_t mlp_ratio = 4;
  std::size_t vocab = 64;
  std::size_t codebook_dim = 16;
  ScaleSchedule schedule = ScaleSchedule::standard();
};

struct Linear {
  Tensor weight, bias;  // [in, out], [out]
  Tensor operator()(const Tensor& x) const { return linear(x, weight, bias); }

  static Linear init(std::size_t in, std::size_t out, double stddev, std::mt19937_64& rng) {
    std::normal_distribution<double> nd(0.0, stddev);
    std::vector<float> w(in * out);
    for (auto& x : w) x = static_cast<float>(nd(rng));
    return {Tensor({in, out}, w, true), Tensor::zeros({out}, true)};
  }
};

struct Norm {
  Tensor gamma, beta;
  Tensor operator()(const Tensor& x) const { return layer_norm(x, gamma, beta); }
  static Norm init(std::size_t d) {
    return {Tensor(Shape{d}, std::vector<float>(d, 1.0f), true), Tensor::zeros({d}, true)};
  }
};

struct Block {
  Norm ln1, ln2;
  Linear wq, wk, wv, proj, fc1, fc2;
};

inline Tensor random_table(std::size_t rows, std::size_t cols, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> nd(0.0, stddev);
  std::vector<float> v(rows * cols);
  for (auto& x : v) x = static_cast<float>(nd(rng));
  return Tensor({rows, cols}, v, true);
}

struct VarModel {
  VarConfig config;
  Linear image_in;    // codebook vector -> width
  Linear depth_in;    // accumulated feature vector -> width
  Tensor start;       // [1, D]
  Tensor scale_emb;   // [K, D]
  Tensor segment_emb; // [2, D]: image, depth
  Tensor pos_emb;     // [tokens of all scales, D], one row per 2-D position of every scale
  std::vector<Block> blocks;
  Norm ln_f;
  Linear head;

  const ScaleSchedule& schedule() const { return config.schedule; }

  static VarModel init(const VarConfig& cfg, std::uint64_t seed) {
    if (cfg.width % cfg.heads != 0) throw ConfigError("var: width must be divisible by heads");
    std::mt19937_64 rng(seed);
    const std::size_t d = cfg.width, k = cfg.schedule.size();
    const double s = 0.02, s_out = 0.02 / std::sqrt(2.0 * static_cast<double>(cfg.layers));
    VarModel m;
    m.config = cfg;
    m.image_in = Linear::init(cfg.codebook_dim, d, s, rng);
    m.depth_in = Linear::init(cfg.codebook_dim, d, s, rng);
    m.start = random_table(1, d, s, rng);
    m.scale_emb = random_table(k, d, s, rng);
    m.segment_emb = random_table(2, d, s, rng);
    m.pos_emb = random_table(cfg.schedule.total_tokens(), d, s, rng);
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      Block b{Norm::init(d), Norm::init(d),
              Linear::init(d, d, s, rng), Linear::init(d, d, s, rng), Linear::init(d, d, s, rng),
              Linear::init(d, d, s_out, rng), Linear::init(d, d * cfg.mlp_ratio, s, rng),
              Linear::init(d * cfg.mlp_ratio, d, s_out, rng)};
      m.blocks.push_back(std::move(b));
    }
    m.ln_f = Norm::init(d);
    m.head = Linear::init(d, cfg.vocab, s, rng);
    return m;
  }

  NamedParameters parameters() const {
    NamedParameters out;
    auto lin = [&](const std::string& n, const Linear& l) {
      out.emplace_back(n + ".weight", l.weight);
      out.emplace_back(n + ".bias", l.bias);
    };
    auto norm = [&](const std::string& n, const Norm& l) {
      out.emplace_back(n + ".gamma", l.gamma);
      out.emplace_back(n + ".beta", l.beta);
    };
    lin("image_in", image_in);
    lin("depth_in", depth_in);
    out.emplace_back("start", start);
    out.emplace_back("scale_emb", scale_emb);
    out.emplace_back("segment_emb", segment_emb);
    out.emplace_back("pos_emb", pos_emb);
    for (std::size_t l = 0; l < blocks.size(); ++l) {
      const std::string p = "blocks." + std::to_string(l) + ".";
      norm(p + "ln1", blocks[l].ln1);
      norm(p + "ln2", blocks[l].ln2);
      lin(p + "wq", blocks[l].wq);
      lin(p + "wk", blocks[l].wk);
      lin(p + "wv", blocks[l].wv);
      lin(p + "proj", blocks[l].proj);
      lin(p + "fc1", blocks[l].fc1);
      lin(p + "fc2", blocks[l].fc2);
    }
    norm("ln_f", ln_f);
    lin("head", head);
    return out;
  }

  void save(Checkpoint& ck, const std::string& prefix = "var.") const {
    ck.put_scalar(prefix + "hp.width", static_cast<double>(config.width));
    ck.put_scalar(prefix + "hp.layers", static_cast<double>(config.layers));
    ck.put_scalar(prefix + "hp.heads", static_cast<double>(config.heads));
    ck.put_scalar(prefix + "hp.mlp_ratio", static_cast<double>(config.mlp_ratio));
    ck.put_scalar(prefix + "hp.vocab", static_cast<double>(config.vocab));
    ck.put_scalar(prefix + "hp.codebook_dim", static_cast<double>(config.codebook_dim));
    ck.put(prefix + "schedule", config.schedule.to_tensor());
    for (const auto& [name, t] : parameters()) ck.put(prefix + name, t);
  }

  static VarModel load(const Checkpoint& ck, const std::string& prefix = "var.") {
    VarConfig cfg;
    auto hp = [&](const char* n) { return static_cast<std::size_t>(ck.scalar(prefix + "hp." + n)); };
    cfg.width = hp("width");
    cfg.layers = hp("layers");
    cfg.heads = hp("heads");
    cfg.mlp_ratio = hp("mlp_ratio");
    cfg.vocab = hp("vocab");
    cfg.codebook_dim = hp("codebook_dim");
    cfg.schedule = ScaleSchedule::from_tensor(ck.get(prefix + "schedule"));
    VarModel m = init(cfg, 0);
    for (auto& [name, t] : m.parameters()) {
      Tensor dst = t;
      ck.load_into(prefix + name, dst);
    }
    return m;
  }
};

/// Throws unless the transformer and the autoencoder agree on schedule and
/// token vocabulary.
inline void check_compatible(const VarModel& m, const VqModel& vq) {
  if (m.schedule() != vq.schedule())
    throw ScheduleError("schedule mismatch: transformer uses " + m.schedule().str() + ", autoencoder uses " +
                        vq.schedule().str());
  if (m.config.vocab != vq.config.codebook_size || m.config.codebook_dim != vq.config.channels)
    throw ScheduleError("transformer vocabulary " + std::to_string(m.config.vocab) + "x" +
                        std::to_string(m.config.codebook_dim) + " does not match codebook " +
                        std::to_string(vq.config.codebook_size) + "x" + std::to_string(vq.config.channels));
}

// ------------------------------------------------------------------- masks

struct AttentionMask {
  std::size_t length = 0;
  std::vector<std::uint8_t> allowed;  // row-major [length, length]

  bool operator()(std::size_t i, std::size_t j) const { return allowed[i * length + j] != 0; }
  bool operator==(const AttentionMask&) const = default;
};

/// Mask for the image prefix followed by the first `depth_scales` depth scales.
inline AttentionMask build_attention_mask(const ScaleSchedule& s, std::size_t depth_scales) {
  if (depth_scales > s.size()) throw ScheduleError("attention mask: more depth scales than the schedule has");
  std::vector<std::size_t> block;
  block.insert(block.end(), s.total_tokens(), 0);
  for (std::size_t k = 0; k < depth_scales; ++k) block.insert(block.end(), s.tokens(k), k + 1);
  AttentionMask m{block.size(), std::vector<std::uint8_t>(block.size() * block.size(), 0)};
  for (std::size_t i = 0; i < block.size(); ++i)
    for (std::size_t j = 0; j < block.size(); ++j)
      m.allowed[i * block.size() + j] = block[i] == 0 ? block[j] == 0 : block[j] <= block[i];
  return m;
}

inline AttentionMask build_attention_mask(const ScaleSchedule& s) { return build_attention_mask(s, s.size()); }

// ------------------------------------------------------------------ inputs

/// Embedded sequence: image block [N_img, D] and one block per depth scale.
struct SequenceInputs {
  Tensor image;
  std::vector<Tensor> depth;

  std::size_t length() const {
    std::size_t n = image.dim(0);
    for (const auto& d : depth) n += d.dim(0);
    return n;
  }
};

/// Rows [t, C] of a feature map [C,h,w].
inline Tensor feature_rows(const Tensor& chw) {
  return transpose(reshape(chw, {chw.dim(0), chw.dim(1) * chw.dim(2)}));
}

namespace detail {

/// Adds scale, segment and 2-D position embeddings to the rows of scale k.
inline Tensor add_position(const VarModel& m, const Tensor& rows, std::size_t k, int segment) {
  const std::size_t t = m.schedule().tokens(k), off = m.schedule().offset(k);
  const std::vector<int> scale_ids(t, static_cast<int>(k)), seg_ids(t, segment);
  Tensor x = add(rows, embedding_lookup(m.scale_emb, scale_ids));
  x = add(x, embedding_lookup(m.segment_emb, seg_ids));
  return add(x, slice_rows(m.pos_emb, off, off + t));
}

}  // namespace detail

inline Tensor embed_image(const VarModel& m, const VqModel& vq, const std::vector<TokenMap>& image_maps) {
  check_compatible(m, vq);
  const auto& s = m.schedule();
  if (image_maps.size() != s.size())
    throw ScheduleError("image maps: expected " + std::to_string(s.size()) + " scales, got " +
                        std::to_string(image_maps.size()));
  std::vector<Tensor> parts;
  for (std::size_t k = 0; k < s.size(); ++k) {
    check_map(vq, image_maps[k]);
    if (image_maps[k].scale != k) throw ScheduleError("image maps out of schedule order");
    const Tensor rows = m.image_in(embedding_lookup(vq.codebook, image_maps[k].indices));
    parts.push_back(detail::add_position(m, rows, k, 0));
  }
  return concat_rows(parts);
}

/// Input block of depth scale k built from the accumulated contributions of
/// the earlier scales, acc = sum_{i<k} eta(z_i) at the last scale.
inline Tensor embed_depth_scale(const VarModel& m, const Tensor& acc, std::size_t k) {
  if (k == 0) return detail::add_position(m, m.start, 0, 1);
  const auto [h, w] = m.schedule()[k];
  const Tensor rows = m.depth_in(feature_rows(resize_bilinear(acc, h, w)));
  return detail::add_position(m, rows, k, 1);
}

/// acc + eta(map): the single accumulation step shared by decomposition,
/// target construction and input building.
inline Tensor accumulate(const VqModel& vq, const Tensor& acc, const TokenMap& map) { return add(acc, eta(vq, map)); }

inline Tensor zero_accumulator(const VqModel& vq) {
  const auto [h, w] = vq.schedule().last();
  return Tensor::zeros({vq.config.channels, h, w});
}

/// Inputs for depth scales 1..k where k = prev_depth_maps.size() + 1.
inline SequenceInputs build_inputs(const VarModel& m, const VqModel& vq, const std::vector<TokenMap>& prev_depth_maps,
                                   const std::vector<TokenMap>& image_maps) {
  check_compatible(m, vq);
  if (prev_depth_maps.size() >= m.schedule().size())
    throw ScheduleError("build_inputs: " + std::to_string(prev_depth_maps.size()) +
                        " previous maps leave no scale to predict");
  SequenceInputs in;
  in.image = embed_image(m, vq, image_maps);
  Tensor acc = zero_accumulator(vq);
  for (std::size_t k = 0; k <= prev_depth_maps.size(); ++k) {
    in.depth.push_back(embed_depth_scale(m, acc, k));
    if (k == prev_depth_maps.size()) break;
    const TokenMap& z = prev_depth_maps[k];
    check_map(vq, z);
    if (z.scale != k) throw ScheduleError("build_inputs: previous maps out of schedule order");
    NoGradScope ng;
    acc = accumulate(vq, acc, z);
  }
  return in;
}

// ----------------------------------------------------------------- forward

/// Evaluates the transformer one block at a time, keeping the keys and values
/// of every finished block. Several independent sequences can advance in
/// lockstep: their blocks are stacked for the row-wise layers and split only
/// for attention. Every layer but attention is row-wise, so a sequence gets
/// the same bits whether it runs alone or in a batch.
class VarRunner {
 public:
  explicit VarRunner(const VarModel& m, std::size_t batch = 1)
      : m_(m), batch_(batch), keys_(m.blocks.size(), std::vector<std::vector<Tensor>>(batch)),
        values_(keys_) {}

  void push_image(const std::vector<Tensor>& x) {
    if (started_) throw ScheduleError("runner: image block must come first");
    started_ = true;
    run(x);
  }

  /// Logits [t, V] of each sequence for its pushed depth block.
  std::vector<Tensor> push_depth(const std::vector<Tensor>& x) {
    if (!started_) throw ScheduleError("runner: push the image block first");
    const std::vector<std::size_t> rows = row_counts(x);
    return split(m_.head(m_.ln_f(run(x))), rows);
  }

  void push_image(const Tensor& x) { push_image(std::vector<Tensor>{x}); }
  Tensor push_depth(const Tensor& x) { return push_depth(std::vector<Tensor>{x})[0]; }

 private:
  std::vector<std::size_t> row_counts(const std::vector<Tensor>& x) const {
    if (x.size() != batch_)
      throw DimensionError("runner: expected " + std::to_string(batch_) + " blocks, got " + std::to_string(x.size()));
    std::vector<std::size_t> rows;
    for (const auto& t : x) rows.push_back(t.dim(0));
    return rows;
  }

  static Tensor stack(const std::vector<Tensor>& parts) { return parts.size() == 1 ? parts[0] : concat_rows(parts); }

  static std::vector<Tensor> split(const Tensor& x, const std::vector<std::size_t>& rows) {
    if (rows.size() == 1) return {x};
    std::vector<Tensor> out;
    std::size_t off = 0;
    for (std::size_t r : rows) {
      out.push_back(slice_rows(x, off, off + r));
      off += r;
    }
    return out;
  }

  Tensor run(const std::vector<Tensor>& blocks) {
    const std::vector<std::size_t> rows = row_counts(blocks);
    Tensor x = stack(blocks);
    for (std::size_t l = 0; l < m_.blocks.size(); ++l) {
      const Block& b = m_.blocks[l];
      const Tensor h = b.ln1(x);
      const auto q = split(b.wq(h), rows), k = split(b.wk(h), rows), v = split(b.wv(h), rows);
      std::vector<Tensor> att;
      for (std::size_t i = 0; i < batch_; ++i) {
        keys_[l][i].push_back(k[i]);
        values_[l][i].push_back(v[i]);
        att.push_back(attention(q[i], stack(keys_[l][i]), stack(values_[l][i]), m_.config.heads));
      }
      x = add(x, b.proj(stack(att)));
      x = add(x, b.fc2(gelu(b.fc1(b.ln2(x)))));
    }
    return x;
  }

  const VarModel& m_;
  std::size_t batch_;
  std::vector<std::vector<std::vector<Tensor>>> keys_, values_;  // [layer][sequence][block]
  bool started_ = false;
};

inline void check_mask(const VarModel& m, const SequenceInputs& inputs, const AttentionMask& mask) {
  if (inputs.depth.empty()) throw ScheduleError("forward: no depth scale in the sequence");
  if (mask.length != inputs.length())
    throw DimensionError("forward: mask length " + std::to_string(mask.length) + " vs sequence " +
                         std::to_string(inputs.length()));
  if (mask != build_attention_mask(m.schedule(), inputs.depth.size()))
    throw ScheduleError("forward: mask is not the block-causal mask of the schedule");
}

/// Per-sequence logits [N_depth, V] for a batch of sequences that all carry
/// the same number of depth scales.
inline std::vector<Tensor> forward_batch(const VarModel& m, const std::vector<SequenceInputs>& inputs,
                                         const AttentionMask& mask) {
  if (inputs.empty()) throw DimensionError("forward: empty batch");
  for (const auto& in : inputs) check_mask(m, in, mask);
  VarRunner run(m, inputs.size());
  std::vector<Tensor> images;
  for (const auto& in : inputs) images.push_back(in.image);
  run.push_image(images);
  std::vector<std::vector<Tensor>> logits(inputs.size());
  for (std::size_t k = 0; k < inputs[0].depth.size(); ++k) {
    std::vector<Tensor> block;
    for (const auto& in : inputs) block.push_back(in.depth[k]);
    const auto out = run.push_depth(block);
    for (std::size_t i = 0; i < inputs.size(); ++i) logits[i].push_back(out[i]);
  }
  std::vector<Tensor> result;
  for (auto& l : logits) result.push_back(l.size() == 1 ? l[0] : concat_rows(l));
  return result;
}

/// Logits [N_depth, V] for every depth position present in `inputs`. The mask
/// must be the block-causal mask of that sequence.
inline Tensor forward(const VarModel& m, const SequenceInputs& inputs, const AttentionMask& mask) {
  return forward_batch(m, {inputs}, mask)[0];
}

/// Row-wise argmax; ties go to the lowest index.
inline std::vector<int> argmax_rows(const Tensor& logits) {
  const std::size_t n = logits.dim(0), v = logits.dim(1);
  std::vector<int> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const float* row = logits.data().data() + i * v;
    out[i] = static_cast<int>(std::max_element(row, row + v) - row);
  }
  return out;
}

struct Inference {
  std::vector<TokenMap> maps;        // z_1..z_K
  std::vector<Tensor> depth_inputs;  // embedded input block of every scale
  std::vector<Tensor> logits;        // [t_k, V] per scale
  std::size_t forward_blocks = 0;
};

/// Greedy next-scale decoding of several images in lockstep. Gradients are
/// recorded if a tape is active, so the same pass can serve as the forward
/// pass of a training step.
inline std::vector<Inference> infer_batch(const VarModel& m, const VqModel& vq,
                                          const std::vector<const std::vector<TokenMap>*>& image_maps) {
  check_compatible(m, vq);
  const auto& s = m.schedule();
  const std::size_t n = image_maps.size();
  if (n == 0) throw DimensionError("infer: empty batch");
  std::vector<Inference> out(n);
  VarRunner run(m, n);
  std::vector<Tensor> images;
  for (const auto* maps : image_maps) images.push_back(embed_image(m, vq, *maps));
  run.push_image(images);
  std::vector<Tensor> acc(n, zero_accumulator(vq));
  for (std::size_t k = 0; k < s.size(); ++k) {
    std::vector<Tensor> block;
    for (std::size_t i = 0; i < n; ++i) {
      out[i].depth_inputs.push_back(embed_depth_scale(m, acc[i], k));
      block.push_back(out[i].depth_inputs.back());
    }
    const auto logits = run.push_depth(block);
    for (std::size_t i = 0; i < n; ++i) {
      out[i].logits.push_back(logits[i]);
      ++out[i].forward_blocks;
      out[i].maps.push_back(TokenMap{k, s[k].first, s[k].second, argmax_rows(logits[i])});
      if (k + 1 < s.size()) {
        NoGradScope ng;
        acc[i] = accumulate(vq, acc[i], out[i].maps.back());
      }
    }
  }
  return out;
}

inline Inference infer(const VarModel& m, const VqModel& vq, const std::vector<TokenMap>& image_maps) {
  return infer_batch(m, vq, {&image_maps})[0];
}

/// FNV-1a over the float bit patterns of a list of tensors.
inline std::uint64_t hash_tensors(const std::vector<Tensor>& ts) {
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto& t : ts)
    for (float f : t.data()) {
      const auto bits = std::bit_cast<std::uint32_t>(f);
      for (int b = 0; b < 4; ++b) {
        h ^= (bits >> (8 * b)) & 0xFF;
        h *= 1099511628211ULL;
      }
    }
  return h;
}

}  // namespace depthart

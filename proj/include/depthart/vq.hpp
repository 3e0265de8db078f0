#pragma once

// Multi-scale residual vector-quantized autoencoder.
//
// Features f = E(x) at the last scale are split into K token maps by the
// residual recursion
//   r_1 = f,  x_k = Q(S(r_k, s_k)),  r_{k+1} = r_k - eta(x_k)
// and recovered as sum_k eta(x_k). eta looks the tokens up in the shared
// codebook, resizes them to the last scale and applies one shared 3x3 conv.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "depthart/checkpoint.hpp"
#include "depthart/errors.hpp"
#include "depthart/optim.hpp"
#include "depthart/tensor.hpp"

namespace depthart {

class ScaleSchedule {
 public:
  using Extent = std::pair<std::size_t, std::size_t>;

  ScaleSchedule() = default;
  explicit ScaleSchedule(std::vector<Extent> scales) : scales_(std::move(scales)) {
    if (scales_.empty()) throw ScheduleError("schedule: no scales");
    for (std::size_t k = 0; k < scales_.size(); ++k) {
      if (scales_[k].first == 0 || scales_[k].second == 0) throw ScheduleError("schedule: zero extent");
      if (k > 0 && (scales_[k].first < scales_[k - 1].first || scales_[k].second < scales_[k - 1].second))
        throw ScheduleError("schedule: extents must be non-decreasing: " + str());
    }
  }

  /// 1x1, 2x2, 4x4, 8x8.
  static ScaleSchedule standard() { return ScaleSchedule({{1, 1}, {2, 2}, {4, 4}, {8, 8}}); }

  std::size_t size() const { return scales_.size(); }
  const Extent& operator[](std::size_t k) const { return scales_.at(k); }
  const Extent& last() const { return scales_.back(); }
  std::size_t tokens(std::size_t k) const { return scales_.at(k).first * scales_.at(k).second; }
  std::size_t total_tokens() const {
    std::size_t n = 0;
    for (std::size_t k = 0; k < size(); ++k) n += tokens(k);
    return n;
  }
  /// Position of the first token of scale k in the flattened sequence.
  std::size_t offset(std::size_t k) const {
    std::size_t n = 0;
    for (std::size_t i = 0; i < k; ++i) n += tokens(i);
    return n;
  }
  bool operator==(const ScaleSchedule&) const = default;

  std::string str() const {
    std::string s;
    for (const auto& [h, w] : scales_) s += (s.empty() ? "" : ",") + std::to_string(h) + "x" + std::to_string(w);
    return s;
  }

  Tensor to_tensor() const {
    std::vector<float> v;
    for (const auto& [h, w] : scales_) {
      v.push_back(static_cast<float>(h));
      v.push_back(static_cast<float>(w));
    }
    return Tensor({scales_.size(), 2}, v);
  }

  static ScaleSchedule from_tensor(const Tensor& t) {
    if (t.rank() != 2 || t.dim(1) != 2) throw DataError("schedule tensor must be [K,2]");
    std::vector<Extent> s;
    for (std::size_t k = 0; k < t.dim(0); ++k)
      s.emplace_back(static_cast<std::size_t>(t.data()[2 * k]), static_cast<std::size_t>(t.data()[2 * k + 1]));
    return ScaleSchedule(std::move(s));
  }

 private:
  std::vector<Extent> scales_;
};

/// Codebook indices of one scale. `scale` is the 0-based schedule position.
struct TokenMap {
  std::size_t scale = 0;
  std::size_t height = 0, width = 0;
  std::vector<int> indices;

  bool operator==(const TokenMap&) const = default;
};

struct Conv {
  Tensor weight, bias;
  std::size_t stride = 1, pad = 1;

  Tensor operator()(const Tensor& x) const { return conv2d(x, weight, bias, stride, pad); }

  static Conv init(std::size_t cin, std::size_t cout, std::size_t k, std::size_t stride, std::size_t pad,
                   std::mt19937_64& rng) {
    const double fan_in = static_cast<double>(cin * k * k);
    std::normal_distribution<double> nd(0.0, std::sqrt(2.0 / fan_in));
    std::vector<float> w(cout * cin * k * k);
    for (auto& x : w) x = static_cast<float>(nd(rng));
    return {Tensor({cout, cin, k, k}, w, true), Tensor::zeros({cout}, true), stride, pad};
  }
};

struct VqConfig {
  std::size_t raster = 32;
  std::size_t channels = 16;  // C
  std::size_t codebook_size = 64;  // V
  std::size_t enc1 = 32, enc2 = 64;
  std::size_t dec1 = 64, dec2 = 32, dec3 = 16;
  ScaleSchedule schedule = ScaleSchedule::standard();
};

struct VqModel {
  VqConfig config;
  Conv enc1, enc2, enc3;
  Conv dec1, dec2, dec3, dec4;
  Conv eta;
  Tensor codebook;  // [V, C]; updated by EMA, never by gradients

  const ScaleSchedule& schedule() const { return config.schedule; }
  std::size_t latent() const { return config.raster / 4; }

  /// Encoder: two stride-2 3x3 convs (32 -> 16 -> 8) and a stride-1 projection
  /// to C channels. Decoder mirrors it with bilinear x2 upsampling.
  static VqModel init(const VqConfig& cfg, std::uint64_t seed) {
    if (cfg.raster % 4 != 0) throw ScheduleError("vq: raster must be divisible by 4");
    VqModel m;
    m.config = cfg;
    if (cfg.schedule.last() != ScaleSchedule::Extent{cfg.raster / 4, cfg.raster / 4})
      throw ScheduleError("vq: last scale " + cfg.schedule.str() + " must equal the encoder output " +
                          std::to_string(cfg.raster / 4) + "x" + std::to_string(cfg.raster / 4));
    std::mt19937_64 rng(seed);
    m.enc1 = Conv::init(1, cfg.enc1, 3, 2, 1, rng);
    m.enc2 = Conv::init(cfg.enc1, cfg.enc2, 3, 2, 1, rng);
    m.enc3 = Conv::init(cfg.enc2, cfg.channels, 3, 1, 1, rng);
    m.dec1 = Conv::init(cfg.channels, cfg.dec1, 3, 1, 1, rng);
    m.dec2 = Conv::init(cfg.dec1, cfg.dec2, 3, 1, 1, rng);
    m.dec3 = Conv::init(cfg.dec2, cfg.dec3, 3, 1, 1, rng);
    m.dec4 = Conv::init(cfg.dec3, 1, 3, 1, 1, rng);
    m.eta = Conv::init(cfg.channels, cfg.channels, 3, 1, 1, rng);
    m.set_identity_eta();
    std::normal_distribution<double> nd(0.0, 1.0);
    std::vector<float> cb(cfg.codebook_size * cfg.channels);
    for (auto& x : cb) x = static_cast<float>(nd(rng));
    m.codebook = Tensor({cfg.codebook_size, cfg.channels}, cb);
    return m;
  }

  void set_identity_eta() {
    auto w = eta.weight.mutable_data();
    std::fill(w.begin(), w.end(), 0.0f);
    const std::size_t c = config.channels;
    for (std::size_t i = 0; i < c; ++i) w[((i * c + i) * 3 + 1) * 3 + 1] = 1.0f;
    auto b = eta.bias.mutable_data();
    std::fill(b.begin(), b.end(), 0.0f);
  }

  void set_trainable(bool on) {
    for (auto& [name, t] : parameters()) {
      Tensor h = t;
      h.set_requires_grad(on);
      h.zero_grad();
    }
  }

  NamedParameters parameters() const {
    NamedParameters out;
    auto add_conv = [&](const std::string& name, const Conv& c) {
      out.emplace_back(name + ".weight", c.weight);
      out.emplace_back(name + ".bias", c.bias);
    };
    add_conv("enc1", enc1);
    add_conv("enc2", enc2);
    add_conv("enc3", enc3);
    add_conv("dec1", dec1);
    add_conv("dec2", dec2);
    add_conv("dec3", dec3);
    add_conv("dec4", dec4);
    add_conv("eta", eta);
    return out;
  }

  void save(Checkpoint& ck, const std::string& prefix = "vq.") const {
    ck.put_scalar(prefix + "hp.raster", static_cast<double>(config.raster));
    ck.put_scalar(prefix + "hp.channels", static_cast<double>(config.channels));
    ck.put_scalar(prefix + "hp.codebook_size", static_cast<double>(config.codebook_size));
    ck.put_scalar(prefix + "hp.enc1", static_cast<double>(config.enc1));
    ck.put_scalar(prefix + "hp.enc2", static_cast<double>(config.enc2));
    ck.put_scalar(prefix + "hp.dec1", static_cast<double>(config.dec1));
    ck.put_scalar(prefix + "hp.dec2", static_cast<double>(config.dec2));
    ck.put_scalar(prefix + "hp.dec3", static_cast<double>(config.dec3));
    ck.put(prefix + "schedule", config.schedule.to_tensor());
    for (const auto& [name, t] : parameters()) ck.put(prefix + name, t);
    ck.put(prefix + "codebook", codebook);
  }

  static VqModel load(const Checkpoint& ck, const std::string& prefix = "vq.") {
    VqConfig cfg;
    auto hp = [&](const char* n) { return static_cast<std::size_t>(ck.scalar(prefix + "hp." + n)); };
    cfg.raster = hp("raster");
    cfg.channels = hp("channels");
    cfg.codebook_size = hp("codebook_size");
    cfg.enc1 = hp("enc1");
    cfg.enc2 = hp("enc2");
    cfg.dec1 = hp("dec1");
    cfg.dec2 = hp("dec2");
    cfg.dec3 = hp("dec3");
    cfg.schedule = ScaleSchedule::from_tensor(ck.get(prefix + "schedule"));
    VqModel m = init(cfg, 0);
    for (auto& [name, t] : m.parameters()) {
      Tensor dst = t;
      ck.load_into(prefix + name, dst);
    }
    ck.load_into(prefix + "codebook", m.codebook);
    m.set_trainable(false);
    return m;
  }
};

// ------------------------------------------------------------ quantization

/// Index of the L2-nearest codebook row for every location of features[C,h,w];
/// the lowest index wins ties.
inline TokenMap quantize(const Tensor& features, const Tensor& codebook, std::size_t scale = 0) {
  if (features.rank() != 3 || codebook.rank() != 2 || features.dim(0) != codebook.dim(1))
    throw DimensionError("quantize: features " + shape_str(features.shape()) + " vs codebook " +
                         shape_str(codebook.shape()));
  const std::size_t c = features.dim(0), h = features.dim(1), w = features.dim(2), v = codebook.dim(0);
  TokenMap map{scale, h, w, std::vector<int>(h * w)};
  const float* f = features.data().data();
  const float* e = codebook.data().data();
  for (std::size_t p = 0; p < h * w; ++p) {
    double best = std::numeric_limits<double>::infinity();
    int arg = 0;
    for (std::size_t j = 0; j < v; ++j) {
      double d = 0.0;
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double diff = static_cast<double>(f[ch * h * w + p]) - e[j * c + ch];
        d += diff * diff;
      }
      if (d < best) {
        best = d;
        arg = static_cast<int>(j);
      }
    }
    map.indices[p] = arg;
  }
  return map;
}

/// Codebook vectors of a token map laid out as features [C,h,w].
inline Tensor embed_tokens(const TokenMap& map, const Tensor& codebook) {
  const Tensor rows = embedding_lookup(codebook, map.indices);  // [h*w, C]
  return reshape(transpose(rows), {codebook.dim(1), map.height, map.width});
}

/// eta without its convolution: embedding lookup resized to the last scale.
inline Tensor eta_preconv(const VqModel& vq, const TokenMap& map) {
  const auto [h, w] = vq.schedule().last();
  return resize_bilinear(embed_tokens(map, vq.codebook), h, w);
}

inline Tensor eta(const VqModel& vq, const TokenMap& map) { return vq.eta(eta_preconv(vq, map)); }

inline void check_map(const VqModel& vq, const TokenMap& map) {
  const auto& s = vq.schedule();
  if (map.scale >= s.size() || s[map.scale] != ScaleSchedule::Extent{map.height, map.width})
    throw ScheduleError("token map " + std::to_string(map.height) + "x" + std::to_string(map.width) + " at scale " +
                        std::to_string(map.scale + 1) + " does not fit schedule " + s.str());
  if (map.indices.size() != map.height * map.width) throw ScheduleError("token map: index count mismatch");
}

struct Decomposition {
  std::vector<TokenMap> maps;       // x_1..x_K
  std::vector<Tensor> residuals;    // r_1..r_{K+1} at the last scale
  std::vector<Tensor> scaled;       // S(r_k, s_k), the vectors that were quantized
  Tensor composed;                  // sum_k eta(x_k)
};

/// Runs the residual recursion without recording gradients.
inline Decomposition decompose_full(const VqModel& vq, const Tensor& features) {
  NoGradScope ng;
  const auto& s = vq.schedule();
  const auto [hk, wk] = s.last();
  if (features.shape() != Shape{vq.config.channels, hk, wk})
    throw DimensionError("decompose: features " + shape_str(features.shape()) + ", expected " +
                         shape_str({vq.config.channels, hk, wk}));
  Decomposition d;
  Tensor acc = Tensor::zeros(features.shape());
  for (std::size_t k = 0; k < s.size(); ++k) {
    const Tensor r = sub(features, acc);
    const Tensor rs = resize_bilinear(r, s[k].first, s[k].second);
    d.maps.push_back(quantize(rs, vq.codebook, k));
    d.residuals.push_back(r);
    d.scaled.push_back(rs);
    acc = add(acc, eta(vq, d.maps.back()));
  }
  d.residuals.push_back(sub(features, acc));
  d.composed = acc;
  return d;
}

inline std::vector<TokenMap> decompose(const VqModel& vq, const Tensor& features) {
  return decompose_full(vq, features).maps;
}

/// Sum of eta over the given maps, added in schedule order whatever the order
/// of `maps`. Any subset of distinct scales is accepted.
inline Tensor compose(const VqModel& vq, const std::vector<TokenMap>& maps) {
  std::vector<const TokenMap*> order;
  for (const auto& m : maps) {
    check_map(vq, m);
    order.push_back(&m);
  }
  std::sort(order.begin(), order.end(), [](auto* a, auto* b) { return a->scale < b->scale; });
  for (std::size_t i = 1; i < order.size(); ++i)
    if (order[i]->scale == order[i - 1]->scale) throw ScheduleError("compose: scale given twice");
  const auto [hk, wk] = vq.schedule().last();
  Tensor acc = Tensor::zeros({vq.config.channels, hk, wk});
  for (const TokenMap* m : order) acc = add(acc, eta(vq, *m));
  return acc;
}

// ---------------------------------------------------------- encode / decode

inline Tensor encode(const VqModel& vq, const Tensor& raster) {
  const std::size_t r = vq.config.raster;
  if (raster.shape() != Shape{1, r, r})
    throw DimensionError("encode: raster " + shape_str(raster.shape()) + ", expected " + shape_str({1, r, r}));
  Tensor h = gelu(vq.enc1(raster));
  h = gelu(vq.enc2(h));
  return vq.enc3(h);
}

inline Tensor decode(const VqModel& vq, const Tensor& features) {
  const std::size_t l = vq.latent();
  if (features.shape() != Shape{vq.config.channels, l, l})
    throw DimensionError("decode: features " + shape_str(features.shape()));
  Tensor h = gelu(vq.dec1(features));
  h = resize_bilinear(h, 2 * l, 2 * l);
  h = gelu(vq.dec2(h));
  h = resize_bilinear(h, 4 * l, 4 * l);
  h = gelu(vq.dec3(h));
  return vq.dec4(h);
}

inline Tensor raster_tensor(std::span<const float> values, std::size_t size) {
  return Tensor({1, size, size}, std::vector<float>(values.begin(), values.end()));
}

/// decode(compose(decompose(encode(x)))) without gradients.
inline Tensor reconstruct(const VqModel& vq, const Tensor& raster) {
  NoGradScope ng;
  return decode(vq, decompose_full(vq, encode(vq, raster)).composed);
}

}  // namespace depthart

#pragma once

// Turning normalized raster predictions into metric depth and scoring them.

#include <cstdio>
#include <sstream>
#include <string>
#include <vector>

#include "depthart/data.hpp"
#include "depthart/metrics.hpp"
#include "depthart/parallel.hpp"
#include "depthart/training.hpp"
#include "depthart/var.hpp"
#include "depthart/vq.hpp"
#include "depthart/vq_train.hpp"

namespace depthart {

struct SampleScores {
  double absrel = 0.0, delta1_err = 0.0, scale = 1.0;
  double pe_fla = 0.0, pe_ori = 0.0;
  bool has_planes = false;
};

/// Un-normalizes with the sample's ground-truth D98, aligns the scale and
/// evaluates every metric.
inline SampleScores score_prediction(const Tensor& normalized, const DepthSample& s) {
  const auto d98 = normalize_depth(s.depth, s.mask).d98;
  const std::vector<double> pred = denormalize_depth(normalized.data(), d98);
  const std::vector<double> gt(s.depth.begin(), s.depth.end());
  SampleScores out;
  out.scale = align_scale(pred, gt, s.mask);
  const auto aligned = apply_scale(pred, out.scale);
  out.absrel = absrel(aligned, gt, s.mask);
  out.delta1_err = delta1_err(aligned, gt, s.mask);
  try {
    const PlaneErrors pe = plane_metrics(aligned, s);
    out.pe_fla = pe.pe_fla_cm;
    out.pe_ori = pe.pe_ori_deg;
    out.has_planes = true;
  } catch (const DataError&) {
  }
  return out;
}

/// Mean scores over samples, reduced in sample order.
inline MetricsRow mean_scores(const std::string& dataset, const std::vector<SampleScores>& scores) {
  MetricsRow row;
  row.dataset = dataset;
  row.scale = 0.0;
  double fla = 0.0, ori = 0.0;
  std::size_t planes = 0;
  for (const auto& s : scores) {
    row.absrel += s.absrel;
    row.delta1_err += s.delta1_err;
    row.scale += s.scale;
    if (s.has_planes) {
      fla += s.pe_fla;
      ori += s.pe_ori;
      ++planes;
    }
  }
  const double n = static_cast<double>(scores.size());
  row.absrel /= n;
  row.delta1_err /= n;
  row.scale /= n;
  if (planes) {
    row.pe_fla = fla / static_cast<double>(planes);
    row.pe_ori = ori / static_cast<double>(planes);
  }
  return row;
}

/// End-to-end autoencoder reconstruction AbsRel, the floor for any model that
/// predicts its tokens.
inline double vq_floor(const VqModel& vq, const std::vector<DepthSample>& samples) {
  std::vector<double> a(samples.size());
  parallel_for(samples.size(), [&](std::size_t i) {
    a[i] = score_prediction(reconstruct(vq, depth_target(samples[i]).raster), samples[i]).absrel;
  });
  double s = 0.0;
  for (double x : a) s += x;
  return s / static_cast<double>(a.size());
}

/// Greedy depth token maps for every sample, decoded in lockstep chunks.
inline std::vector<std::vector<TokenMap>> predict_maps(const VarModel& m, const VqModel& vq,
                                                       const std::vector<DepthSample>& samples, std::size_t chunk = 8) {
  NoGradScope ng;
  std::vector<std::vector<TokenMap>> image(samples.size()), out(samples.size());
  parallel_for(samples.size(), [&](std::size_t i) { image[i] = image_tokens(vq, samples[i]); });
  const std::size_t chunks = (samples.size() + chunk - 1) / chunk;
  parallel_for(chunks, [&](std::size_t c) {
    NoGradScope inner;
    std::vector<const std::vector<TokenMap>*> ptrs;
    for (std::size_t i = c * chunk; i < std::min(samples.size(), (c + 1) * chunk); ++i) ptrs.push_back(&image[i]);
    auto inf = infer_batch(m, vq, ptrs);
    for (std::size_t j = 0; j < inf.size(); ++j) out[c * chunk + j] = std::move(inf[j].maps);
  });
  return out;
}

/// Decodes the first `k` maps and scores the result against the sample.
inline SampleScores score_maps(const VqModel& vq, const std::vector<TokenMap>& maps, std::size_t k,
                               const DepthSample& s) {
  NoGradScope ng;
  const std::vector<TokenMap> head(maps.begin(), maps.begin() + static_cast<long>(k));
  return score_prediction(decode(vq, compose(vq, head)), s);
}

inline MetricsRow evaluate_maps(const VqModel& vq, const std::vector<std::vector<TokenMap>>& maps,
                                const std::vector<DepthSample>& samples, const std::string& dataset) {
  if (samples.empty()) throw DataError("evaluate: no samples");
  std::vector<SampleScores> scores(samples.size());
  parallel_for(samples.size(), [&](std::size_t i) { scores[i] = score_maps(vq, maps[i], maps[i].size(), samples[i]); });
  return mean_scores(dataset, scores);
}

/// Final-scale metrics of greedy predictions.
inline MetricsRow evaluate(const VarModel& m, const VqModel& vq, const std::vector<DepthSample>& samples,
                           const std::string& dataset = "synthetic") {
  return evaluate_maps(vq, predict_maps(m, vq, samples), samples, dataset);
}

struct ScaleCurve {
  std::vector<double> absrel;  // entry k-1 decodes the first k maps
  double floor = 0.0;
};

/// Mean AbsRel of the cumulative decodes at every scale, plus the autoencoder floor.
inline ScaleCurve scale_curve_of(const VqModel& vq, const std::vector<std::vector<TokenMap>>& maps,
                                 const std::vector<DepthSample>& samples) {
  if (samples.empty()) throw DataError("scale curve: no samples");
  const std::size_t K = vq.schedule().size();
  std::vector<std::vector<double>> per(samples.size(), std::vector<double>(K));
  parallel_for(samples.size(), [&](std::size_t i) {
    for (std::size_t k = 1; k <= K; ++k) per[i][k - 1] = score_maps(vq, maps[i], k, samples[i]).absrel;
  });
  ScaleCurve c{std::vector<double>(K, 0.0), vq_floor(vq, samples)};
  for (const auto& row : per)
    for (std::size_t k = 0; k < K; ++k) c.absrel[k] += row[k];
  for (double& a : c.absrel) a /= static_cast<double>(samples.size());
  return c;
}

inline ScaleCurve per_scale_curve(const VarModel& m, const VqModel& vq, const std::vector<DepthSample>& samples) {
  return scale_curve_of(vq, predict_maps(m, vq, samples), samples);
}

/// The same curve for the autoencoder's own decomposition.
inline ScaleCurve teacher_scale_curve(const VqModel& vq, const std::vector<DepthSample>& samples) {
  std::vector<std::vector<TokenMap>> maps(samples.size());
  parallel_for(samples.size(), [&](std::size_t i) {
    NoGradScope ng;
    maps[i] = decompose(vq, encode(vq, depth_target(samples[i]).raster));
  });
  return scale_curve_of(vq, maps, samples);
}

inline std::string scale_curve_csv(const ScaleCurve& c) {
  std::string out = "k,absrel,floor\n";
  for (std::size_t k = 0; k < c.absrel.size(); ++k)
    out += std::to_string(k + 1) + "," + format_double(c.absrel[k]) + "," + format_double(c.floor) + "\n";
  return out;
}

inline ScaleCurve parse_scale_curve_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != "k,absrel,floor") throw DataError("scale curve: bad header");
  ScaleCurve c;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::size_t k = 0;
    double a = 0, f = 0;
    if (std::sscanf(line.c_str(), "%zu,%lf,%lf", &k, &a, &f) != 3 || k != c.absrel.size() + 1)
      throw DataError("scale curve: bad row '" + line + "'");
    c.absrel.push_back(a);
    c.floor = f;
  }
  return c;
}

}  // namespace depthart

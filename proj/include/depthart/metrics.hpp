#pragma once

// Scale-invariant depth metrics: L1 scale alignment, AbsRel, delta1 error,
// planarity errors on annotated planes, and rank aggregation across models.

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "depthart/data.hpp"
#include "depthart/errors.hpp"

namespace depthart {

namespace detail {

inline void check_sizes(std::size_t a, std::size_t b, std::size_t m, const char* what) {
  if (a != b || a != m) throw DataError(std::string(what) + ": pred/gt/mask size mismatch");
}

}  // namespace detail

/// L1-optimal global scale: the pred-weighted median of gt/pred over valid
/// pixels with pred > 0. When the cumulative weight hits exactly half at a
/// candidate, that (lower) candidate is returned.
inline double align_scale(std::span<const double> pred, std::span<const double> gt,
                          std::span<const std::uint8_t> mask) {
  detail::check_sizes(pred.size(), gt.size(), mask.size(), "align_scale");
  std::vector<std::pair<double, double>> cand;  // (ratio, weight)
  for (std::size_t i = 0; i < pred.size(); ++i)
    if (mask[i] && pred[i] > 0.0) cand.emplace_back(gt[i] / pred[i], pred[i]);
  if (cand.empty()) throw DataError("align_scale: no valid pixel with positive prediction");
  std::sort(cand.begin(), cand.end());
  double total = 0.0;
  for (const auto& c : cand) total += c.second;
  double acc = 0.0;
  for (const auto& c : cand) {
    acc += c.second;
    if (acc >= 0.5 * total) return c.first;
  }
  return cand.back().first;
}

inline std::vector<double> apply_scale(std::span<const double> pred, double s) {
  std::vector<double> out(pred.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = s * pred[i];
  return out;
}

/// Mean of |pred - gt| / gt over the mask.
inline double absrel(std::span<const double> pred, std::span<const double> gt, std::span<const std::uint8_t> mask) {
  detail::check_sizes(pred.size(), gt.size(), mask.size(), "absrel");
  double acc = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (!mask[i]) continue;
    if (!(gt[i] > 0.0)) throw DataError("absrel: non-positive ground truth on mask");
    acc += std::abs(pred[i] - gt[i]) / gt[i];
    ++n;
  }
  if (n == 0) throw DataError("absrel: empty mask");
  return acc / static_cast<double>(n);
}

/// Fraction of valid pixels with max(pred/gt, gt/pred) >= 1.25, i.e. one
/// minus the usual delta1 accuracy. A non-positive prediction counts as a miss.
inline double delta1_err(std::span<const double> pred, std::span<const double> gt,
                         std::span<const std::uint8_t> mask) {
  detail::check_sizes(pred.size(), gt.size(), mask.size(), "delta1_err");
  std::size_t n = 0, bad = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (!mask[i]) continue;
    ++n;
    if (!(pred[i] > 0.0) || !(gt[i] > 0.0) || std::max(pred[i] / gt[i], gt[i] / pred[i]) >= 1.25) ++bad;
  }
  if (n == 0) throw DataError("delta1_err: empty mask");
  return static_cast<double>(bad) / static_cast<double>(n);
}

struct PlaneErrors {
  double pe_fla_cm = 0.0;
  double pe_ori_deg = 0.0;
  std::size_t planes = 0;
};

struct PlaneFit {
  Eigen::Vector3d normal;
  double rms = 0.0;
  bool degenerate = true;
};

/// Total-least-squares plane through 3-D points.
inline PlaneFit fit_plane(const std::vector<Eigen::Vector3d>& pts) {
  PlaneFit fit;
  if (pts.size() < 3) return fit;
  Eigen::Vector3d mean = Eigen::Vector3d::Zero();
  for (const auto& p : pts) mean += p;
  mean /= static_cast<double>(pts.size());
  Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
  for (const auto& p : pts) cov += (p - mean) * (p - mean).transpose();
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> es(cov);
  const auto& ev = es.eigenvalues();  // ascending
  if (!(ev[2] > 0.0) || ev[1] <= 1e-12 * ev[2]) return fit;
  fit.normal = es.eigenvectors().col(0);
  double ss = 0.0;
  for (const auto& p : pts) {
    const double d = fit.normal.dot(p - mean);
    ss += d * d;
  }
  fit.rms = std::sqrt(ss / static_cast<double>(pts.size()));
  fit.degenerate = false;
  return fit;
}

/// Back-projects each annotated plane (>= 16 pixels) with the predicted depth,
/// fits a plane and averages RMS flatness (cm) and normal angle (degrees,
/// folded to [0, 90]) over planes. Degenerate fits are skipped.
inline PlaneErrors plane_metrics(std::span<const double> pred, const DepthSample& sample) {
  if (pred.size() != sample.pixels()) throw DataError("plane_metrics: prediction size mismatch");
  PlaneErrors out;
  for (const auto& plane : sample.planes) {
    std::vector<Eigen::Vector3d> pts;
    for (std::size_t i = 0; i < sample.pixels(); ++i) {
      if (!plane.mask[i]) continue;
      const Vec3 p = sample.back_project(i % sample.width, i / sample.width, pred[i]);
      pts.emplace_back(p[0], p[1], p[2]);
    }
    if (pts.size() < 16) continue;
    const PlaneFit fit = fit_plane(pts);
    if (fit.degenerate) continue;
    const Eigen::Vector3d gt(plane.normal[0], plane.normal[1], plane.normal[2]);
    const double c = std::min(1.0, std::abs(fit.normal.dot(gt.normalized())));
    out.pe_fla_cm += 100.0 * fit.rms;
    out.pe_ori_deg += std::acos(c) * 180.0 / M_PI;
    ++out.planes;
  }
  if (out.planes == 0) throw DataError("plane_metrics: no usable plane");
  out.pe_fla_cm /= static_cast<double>(out.planes);
  out.pe_ori_deg /= static_cast<double>(out.planes);
  return out;
}

// -------------------------------------------------------------- reports

struct MetricsRow {
  std::string dataset;
  double absrel = 0.0;
  double delta1_err = 0.0;
  double pe_fla = std::numeric_limits<double>::quiet_NaN();
  double pe_ori = std::numeric_limits<double>::quiet_NaN();
  double scale = 1.0;
};

struct MetricsReport {
  std::string model;
  std::vector<MetricsRow> rows;
  double rank = std::numeric_limits<double>::quiet_NaN();
};

namespace detail {

inline std::array<double, 4> ranked_columns(const MetricsRow& r) { return {r.absrel, r.delta1_err, r.pe_fla, r.pe_ori}; }

inline bool same_bits(double a, double b) {
  return (std::isnan(a) && std::isnan(b)) || a == b;
}

}  // namespace detail

/// Mean rank of each model over every (dataset, metric) cell; rank 1 is the
/// lowest value and tied models share the mean of their ranks. A metric that
/// is NaN for every model on a dataset is left out.
inline std::vector<double> rank_models(const std::vector<MetricsReport>& reports) {
  if (reports.size() < 2) throw DataError("rank_models: need at least two reports");
  const auto& ref = reports.front().rows;
  for (const auto& r : reports) {
    if (r.rows.size() != ref.size()) throw DataError("rank_models: reports cover different datasets");
    for (std::size_t d = 0; d < ref.size(); ++d) {
      if (r.rows[d].dataset != ref[d].dataset) throw DataError("rank_models: dataset order differs");
      const auto a = detail::ranked_columns(r.rows[d]), b = detail::ranked_columns(ref[d]);
      for (std::size_t c = 0; c < a.size(); ++c)
        if (std::isnan(a[c]) != std::isnan(b[c])) throw DataError("rank_models: inconsistent metric columns");
    }
  }
  const std::size_t m = reports.size();
  std::vector<double> total(m, 0.0);
  std::size_t cells = 0;
  for (std::size_t d = 0; d < ref.size(); ++d)
    for (std::size_t c = 0; c < 4; ++c) {
      if (std::isnan(detail::ranked_columns(ref[d])[c])) continue;
      std::vector<double> v(m);
      for (std::size_t i = 0; i < m; ++i) v[i] = detail::ranked_columns(reports[i].rows[d])[c];
      for (std::size_t i = 0; i < m; ++i) {
        std::size_t less = 0, equal = 0;
        for (std::size_t j = 0; j < m; ++j) {
          if (v[j] < v[i]) ++less;
          if (v[j] == v[i]) ++equal;
        }
        total[i] += static_cast<double>(less) + (static_cast<double>(equal) + 1.0) / 2.0;
      }
      ++cells;
    }
  if (cells == 0) throw DataError("rank_models: no metric to rank");
  for (auto& t : total) t /= static_cast<double>(cells);
  return total;
}

inline constexpr const char* kMetricsHeader = "model,dataset,absrel,delta1_err,pe_fla,pe_ori,scale,rank";

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string metrics_csv(const std::vector<MetricsReport>& reports) {
  std::string out = std::string(kMetricsHeader) + "\n";
  for (const auto& rep : reports)
    for (const auto& r : rep.rows)
      out += rep.model + "," + r.dataset + "," + format_double(r.absrel) + "," + format_double(r.delta1_err) + "," +
             format_double(r.pe_fla) + "," + format_double(r.pe_ori) + "," + format_double(r.scale) + "," +
             format_double(rep.rank) + "\n";
  return out;
}

inline std::vector<MetricsReport> parse_metrics_csv(std::string_view text) {
  std::istringstream in{std::string(text)};
  std::string line;
  if (!std::getline(in, line) || line != kMetricsHeader) throw DataError("metrics csv: unexpected header");
  std::vector<MetricsReport> reports;
  auto num = [](const std::string& s) {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw DataError("metrics csv: bad number '" + s + "'");
    return v;
  };
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::istringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) f.push_back(cell);
    if (f.size() != 8) throw DataError("metrics csv: expected 8 fields in '" + line + "'");
    try {
      MetricsRow r{f[1], num(f[2]), num(f[3]), num(f[4]), num(f[5]), num(f[6])};
      const double rank = num(f[7]);
      if (reports.empty() || reports.back().model != f[0]) reports.push_back({f[0], {}, rank});
      reports.back().rows.push_back(r);
    } catch (const std::logic_error&) {
      throw DataError("metrics csv: bad number in '" + line + "'");
    }
  }
  return reports;
}

}  // namespace depthart

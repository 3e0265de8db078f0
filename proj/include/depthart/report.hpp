#pragma once

// Run manifests and a dependency-free SVG line chart.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "depthart/checkpoint.hpp"
#include "depthart/config.hpp"
#include "depthart/errors.hpp"

#ifndef DEPTHART_BUILD_ID
#define DEPTHART_BUILD_ID "unknown"
#endif

namespace depthart {

inline constexpr const char* kBuildId = DEPTHART_BUILD_ID;

struct RunManifest {
  std::string subcommand;
  KeyValueConfig config;  // resolved, after flag overrides
  std::uint64_t seed = 0;
  std::vector<std::string> outputs;
  nlohmann::ordered_json results = nlohmann::ordered_json::object();
  double wall_time_s = 0.0;

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["subcommand"] = subcommand;
    j["config"] = nlohmann::ordered_json::object();
    for (const auto& [k, v] : config.values()) j["config"][k] = v;
    j["seed"] = seed;
    j["build"] = kBuildId;
    j["outputs"] = outputs;
    j["results"] = results;
    j["wall_time_s"] = wall_time_s;
    const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    char stamp[32];
    std::strftime(stamp, sizeof stamp, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
    j["finished_at"] = stamp;
    return j;
  }

  /// Refuses to list an output that does not exist.
  void write(const std::filesystem::path& path) const {
    for (const auto& o : outputs)
      if (!std::filesystem::exists(o)) throw DataError("run manifest: listed output " + o + " is missing");
    write_file_atomic(path, to_json().dump(2) + "\n");
  }
};

struct Series {
  std::string label;
  std::vector<std::pair<double, double>> points;
};

/// Plain polyline chart with axis extents printed at the corners.
inline std::string svg_line_chart(const std::string& title, const std::string& xlabel, const std::string& ylabel,
                                  const std::vector<Series>& series, bool log_y = false) {
  const double W = 640, H = 400, L = 70, R = 150, T = 40, B = 50;
  double x0 = INFINITY, x1 = -INFINITY, y0 = INFINITY, y1 = -INFINITY;
  auto ty = [&](double y) { return log_y ? std::log10(std::max(y, 1e-12)) : y; };
  for (const auto& s : series)
    for (auto [x, y] : s.points) {
      if (!std::isfinite(y)) continue;
      x0 = std::min(x0, x), x1 = std::max(x1, x);
      y0 = std::min(y0, ty(y)), y1 = std::max(y1, ty(y));
    }
  if (!(x1 > x0)) x0 -= 0.5, x1 += 0.5;
  if (!(y1 > y0)) y0 -= 0.5, y1 += 0.5;
  auto px = [&](double x) { return L + (x - x0) / (x1 - x0) * (W - L - R); };
  auto py = [&](double y) { return H - B - (ty(y) - y0) / (y1 - y0) * (H - T - B); };
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};
  char buf[256];
  std::string out;
  std::snprintf(buf, sizeof buf, "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"%g\" height=\"%g\" font-family=\"sans-serif\" font-size=\"12\">\n", W, H);
  out += buf;
  out += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  std::snprintf(buf, sizeof buf, "<text x=\"%g\" y=\"24\" font-size=\"15\">%s</text>\n", L, title.c_str());
  out += buf;
  std::snprintf(buf, sizeof buf, "<rect x=\"%g\" y=\"%g\" width=\"%g\" height=\"%g\" fill=\"none\" stroke=\"#444\"/>\n", L, T,
                W - L - R, H - T - B);
  out += buf;
  auto ylab = [&](double v) { return log_y ? std::pow(10.0, v) : v; };
  std::snprintf(buf, sizeof buf, "<text x=\"%g\" y=\"%g\" text-anchor=\"end\">%.4g</text>\n", L - 4, T + 4, ylab(y1));
  out += buf;
  std::snprintf(buf, sizeof buf, "<text x=\"%g\" y=\"%g\" text-anchor=\"end\">%.4g</text>\n", L - 4, H - B, ylab(y0));
  out += buf;
  std::snprintf(buf, sizeof buf, "<text x=\"%g\" y=\"%g\">%.6g</text>\n", L, H - B + 16, x0);
  out += buf;
  std::snprintf(buf, sizeof buf, "<text x=\"%g\" y=\"%g\" text-anchor=\"end\">%.6g</text>\n", W - R, H - B + 16, x1);
  out += buf;
  std::snprintf(buf, sizeof buf, "<text x=\"%g\" y=\"%g\" text-anchor=\"middle\">%s</text>\n", (L + W - R) / 2, H - 12,
                xlabel.c_str());
  out += buf;
  std::snprintf(buf, sizeof buf, "<text x=\"14\" y=\"%g\" transform=\"rotate(-90 14 %g)\" text-anchor=\"middle\">%s%s</text>\n",
                (T + H - B) / 2, (T + H - B) / 2, ylabel.c_str(), log_y ? " (log)" : "");
  out += buf;
  for (std::size_t i = 0; i < series.size(); ++i) {
    const char* color = colors[i % 6];
    out += "<polyline fill=\"none\" stroke-width=\"1.5\" stroke=\"" + std::string(color) + "\" points=\"";
    for (auto [x, y] : series[i].points) {
      if (!std::isfinite(y)) continue;
      std::snprintf(buf, sizeof buf, "%.2f,%.2f ", px(x), py(y));
      out += buf;
    }
    out += "\"/>\n";
    std::snprintf(buf, sizeof buf, "<text x=\"%g\" y=\"%g\" fill=\"%s\">%s</text>\n", W - R + 8, T + 16 + 18.0 * static_cast<double>(i),
                  color, series[i].label.c_str());
    out += buf;
  }
  out += "</svg>\n";
  return out;
}

}  // namespace depthart

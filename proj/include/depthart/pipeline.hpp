#pragma once

// The end-to-end runs behind the command-line subcommands. Each returns the
// manifest it wrote.

#include <chrono>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "depthart/config.hpp"
#include "depthart/data.hpp"
#include "depthart/eval.hpp"
#include "depthart/report.hpp"
#include "depthart/training.hpp"
#include "depthart/vq_train.hpp"

namespace depthart {

namespace fs = std::filesystem;

class Stopwatch {
 public:
  double seconds() const { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0_).count(); }

 private:
  std::chrono::steady_clock::time_point t0_ = std::chrono::steady_clock::now();
};

inline VqModel load_vq(const fs::path& p) { return VqModel::load(load_checkpoint(p)); }
inline VarModel load_var(const fs::path& p) { return VarModel::load(load_checkpoint(p)); }

inline std::vector<DepthSample> require_split(const fs::path& dir, const std::string& split) {
  auto s = load_split(dir, split);
  if (s.empty()) throw DataError("dataset " + dir.string() + " has no '" + split + "' samples");
  return s;
}

inline RunManifest gen_data_run(const fs::path& out, std::size_t n_train, std::size_t n_eval, std::uint64_t seed) {
  Stopwatch sw;
  const Manifest m = make_dataset(n_train, n_eval, seed, out);
  RunManifest rm;
  rm.subcommand = "gen-data";
  rm.config.set("out", out.string());
  rm.config.set("train", std::to_string(n_train));
  rm.config.set("eval", std::to_string(n_eval));
  rm.config.set("seed", std::to_string(seed));
  rm.seed = seed;
  rm.outputs.push_back((out / "manifest.tsv").string());
  rm.results["samples"] = m.entries.size();
  rm.wall_time_s = sw.seconds();
  rm.write(out / "gen-data.manifest.json");
  return rm;
}

inline VqTrainOptions vq_options(const TrainConfig& c) {
  VqTrainOptions o;
  o.steps = c.steps;
  o.batch = c.batch;
  o.lr = c.lr;
  o.weight_decay = c.weight_decay;
  o.decay_period = c.decay_period;
  o.decay_gamma = c.decay_gamma;
  o.seed = c.seed;
  o.log_every = c.log_every;
  return o;
}

inline fs::path vq_model_path(const TrainConfig& c) { return fs::path(c.out_dir) / "vq.dart"; }

/// Trains the autoencoder on the train split and reports its held-out floor.
inline RunManifest train_vqvae_run(const TrainConfig& c, std::function<void(std::size_t, double)> on_log = {}) {
  Stopwatch sw;
  const auto train = require_split(c.data_dir, "train");
  const auto held = require_split(c.data_dir, "eval");
  VqTrainOptions o = vq_options(c);
  o.on_log = std::move(on_log);
  const VqTrainResult r = train_vqvae(train, o);
  const double train_s = sw.seconds();
  fs::create_directories(c.out_dir);
  Checkpoint ck;
  r.model.save(ck);
  save_checkpoint(vq_model_path(c), ck);
  std::vector<CurvePoint> curve;
  for (auto [step, loss] : r.losses) curve.push_back({step, loss, step_lr(c.lr, step - 1, c.decay_period, c.decay_gamma)});
  const fs::path curve_file = fs::path(c.out_dir) / "vq_loss.csv";
  write_file_atomic(curve_file, curve_csv(curve));

  RunManifest rm;
  rm.subcommand = "train-vqvae";
  rm.config = c.to_kv();
  rm.seed = c.seed;
  rm.outputs = {vq_model_path(c).string(), curve_file.string()};
  rm.results["train_seconds"] = train_s;
  rm.results["restarts"] = r.restarts;
  rm.results["heldout_floor_absrel"] = vq_floor(r.model, held);
  rm.results["codebook_utilization"] = codebook_utilization(r.model, held);
  rm.wall_time_s = sw.seconds();
  rm.write(fs::path(c.out_dir) / "train-vqvae.manifest.json");
  return rm;
}

inline std::vector<Series> loss_series(const std::vector<CurvePoint>& curve, const std::string& label) {
  Series s{label, {}};
  for (const auto& p : curve) s.points.emplace_back(static_cast<double>(p.step), p.loss);
  return {s};
}

/// Tokenizes the train split with the autoencoder at `vq_path` and fits the
/// transformer under the configured regime.
inline RunManifest train_var_run(const TrainConfig& c, const fs::path& vq_path, const FitOptions& fo = {},
                                 const VarConfig& arch = {}, const fs::path& svg = {}) {
  Stopwatch sw;
  const VqModel vq = load_vq(vq_path);
  const auto data = tokenize_all(vq, require_split(c.data_dir, "train"));
  const FitResult r = fit(vq, data, c, arch, fo);
  RunManifest rm;
  rm.subcommand = "train-var";
  rm.config = c.to_kv();
  rm.config.set("vq", vq_path.string());
  rm.seed = c.seed;
  rm.outputs = {model_path(c).string(), curve_path(c).string(), checkpoint_path(c).string()};
  if (!svg.empty()) {
    write_file_atomic(svg, svg_line_chart("training loss (" + regime_name(c.regime) + ")", "step", "loss",
                                          loss_series(r.curve, regime_name(c.regime)), true));
    rm.outputs.push_back(svg.string());
  }
  rm.results["start_step"] = r.start_step;
  rm.results["steps_run"] = r.steps_run;
  rm.results["final_loss"] = r.curve.empty() ? 0.0 : r.curve.back().loss;
  rm.wall_time_s = sw.seconds();
  rm.write(fs::path(c.out_dir) / "train-var.manifest.json");
  return rm;
}

inline std::string model_label(const fs::path& p) {
  const std::string parent = p.parent_path().filename().string();
  return parent.empty() ? p.stem().string() : parent + "/" + p.stem().string();
}

/// Scores every model on a split. Ranks are filled in when there are at
/// least two models.
inline RunManifest eval_run(const std::vector<fs::path>& models, const fs::path& vq_path, const fs::path& data_dir,
                            const fs::path& out_csv, const std::string& split = "eval") {
  Stopwatch sw;
  if (models.empty()) throw ConfigError("eval: no model given");
  const VqModel vq = load_vq(vq_path);
  const auto samples = require_split(data_dir, split);
  std::vector<MetricsReport> reports;
  for (const auto& p : models) {
    const VarModel m = load_var(p);
    check_compatible(m, vq);
    reports.push_back({model_label(p), {evaluate(m, vq, samples, split)}});
  }
  if (reports.size() >= 2) {
    const auto ranks = rank_models(reports);
    for (std::size_t i = 0; i < reports.size(); ++i) reports[i].rank = ranks[i];
  }
  if (out_csv.has_parent_path()) fs::create_directories(out_csv.parent_path());
  write_file_atomic(out_csv, metrics_csv(reports));
  RunManifest rm;
  rm.subcommand = "eval";
  rm.config.set("vq", vq_path.string());
  rm.config.set("data", data_dir.string());
  rm.config.set("split", split);
  for (std::size_t i = 0; i < models.size(); ++i) rm.config.set("model." + std::to_string(i), models[i].string());
  rm.outputs = {out_csv.string()};
  for (const auto& r : reports) rm.results[r.model] = r.rows[0].absrel;
  rm.wall_time_s = sw.seconds();
  rm.write(out_csv.string() + ".manifest.json");
  return rm;
}

inline std::vector<Series> curve_series(const ScaleCurve& c, const std::string& label) {
  Series s{label, {}}, f{"VQ floor", {}};
  for (std::size_t k = 0; k < c.absrel.size(); ++k) {
    s.points.emplace_back(static_cast<double>(k + 1), c.absrel[k]);
    f.points.emplace_back(static_cast<double>(k + 1), c.floor);
  }
  return {s, f};
}

/// Per-scale AbsRel of a model's cumulative predictions, or of the
/// autoencoder's own decomposition when `model` is empty.
inline RunManifest scale_curve_run(const fs::path& model, const fs::path& vq_path, const fs::path& data_dir,
                                   const fs::path& out_csv, const fs::path& svg = {}, const std::string& split = "eval") {
  Stopwatch sw;
  const VqModel vq = load_vq(vq_path);
  const auto samples = require_split(data_dir, split);
  ScaleCurve c;
  std::string label = "VQ decomposition";
  if (model.empty()) {
    c = teacher_scale_curve(vq, samples);
  } else {
    const VarModel m = load_var(model);
    check_compatible(m, vq);
    c = per_scale_curve(m, vq, samples);
    label = model_label(model);
  }
  if (out_csv.has_parent_path()) fs::create_directories(out_csv.parent_path());
  write_file_atomic(out_csv, scale_curve_csv(c));
  RunManifest rm;
  rm.subcommand = "scale-curve";
  rm.config.set("model", model.string());
  rm.config.set("vq", vq_path.string());
  rm.config.set("data", data_dir.string());
  rm.config.set("split", split);
  rm.outputs = {out_csv.string()};
  if (!svg.empty()) {
    write_file_atomic(svg, svg_line_chart("AbsRel of cumulative predictions", "scale k", "AbsRel", curve_series(c, label)));
    rm.outputs.push_back(svg.string());
  }
  rm.results["absrel"] = c.absrel;
  rm.results["floor"] = c.floor;
  rm.wall_time_s = sw.seconds();
  rm.write(out_csv.string() + ".manifest.json");
  return rm;
}

}  // namespace depthart

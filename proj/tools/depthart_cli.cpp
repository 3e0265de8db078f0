// depthart: dataset generation, autoencoder and transformer training,
// evaluation and per-scale curves.

#include <cstdio>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "depthart/pipeline.hpp"

using namespace depthart;
namespace fs = std::filesystem;

namespace {

enum Exit { kOk = 0, kUsage = 2, kData = 3, kDiverged = 4 };

/// Config keys that may also be given as flags; flags win over the file.
struct Overrides {
  std::map<std::string, std::string> values;

  void add(CLI::App* app, bool with_regime) {
    static const std::vector<std::pair<std::string, std::string>> keys{
        {"lr", "--lr"},           {"wd", "--wd"},
        {"batch", "--batch"},     {"steps", "--steps"},
        {"decay_period", "--decay-period"}, {"decay_gamma", "--decay-gamma"},
        {"seed", "--seed"},       {"data_dir", "--data-dir"},
        {"out_dir", "--out-dir"}, {"checkpoint_every", "--checkpoint-every"},
        {"log_every", "--log-every"}};
    for (const auto& [key, flag] : keys) app->add_option(flag, values[key], "overrides config key " + key);
    if (with_regime) app->add_option("--regime", values["regime"], "tf | depthart")->check(CLI::IsMember({"tf", "teacher_forcing", "depthart"}));
  }

  TrainConfig resolve(const std::string& config_file, bool need_regime) const {
    KeyValueConfig kv = config_file.empty() ? KeyValueConfig{} : KeyValueConfig::from_file(config_file);
    for (const auto& [k, v] : values)
      if (!v.empty()) kv.set(k, v);
    return TrainConfig::from(kv, need_regime);
  }
};

void progress(const char* what, std::size_t step, std::size_t total, double loss) {
  std::fprintf(stderr, "[%s] step %zu/%zu loss %.5f\n", what, step, total, loss);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Depth estimation as next-scale token prediction: data, training and evaluation."};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string("depthart ") + kBuildId);

  auto* gen = app.add_subcommand("gen-data", "render a synthetic train/eval dataset");
  std::string gen_out;
  std::size_t n_train = 2000, n_eval = 200;
  std::uint64_t gen_seed = 1;
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--train", n_train, "training scenes")->capture_default_str();
  gen->add_option("--eval", n_eval, "held-out scenes")->capture_default_str();
  gen->add_option("--seed", gen_seed, "dataset seed")->capture_default_str();

  auto* tvq = app.add_subcommand("train-vqvae", "train the multi-scale depth autoencoder");
  std::string tvq_config;
  Overrides tvq_over;
  tvq->add_option("--config", tvq_config, "key=value config file")->check(CLI::ExistingFile);
  tvq_over.add(tvq, false);

  auto* tvar = app.add_subcommand("train-var", "train the next-scale transformer");
  std::string tvar_config, tvar_vq, tvar_svg;
  bool resume = false;
  Overrides tvar_over;
  tvar->add_option("--config", tvar_config, "key=value config file")->check(CLI::ExistingFile);
  tvar->add_option("--vq", tvar_vq, "autoencoder checkpoint")->required()->check(CLI::ExistingFile);
  tvar->add_flag("--resume", resume, "continue from out_dir/checkpoint.dart if present");
  tvar->add_option("--svg", tvar_svg, "also write the loss curve as an SVG chart");
  tvar_over.add(tvar, true);

  auto* ev = app.add_subcommand("eval", "score models on a dataset split");
  std::vector<std::string> ev_models;
  std::string ev_vq, ev_data, ev_out, ev_split = "eval";
  ev->add_option("--model", ev_models, "transformer checkpoint (repeatable; two or more are ranked)")->required();
  ev->add_option("--vq", ev_vq, "autoencoder checkpoint")->required();
  ev->add_option("--data", ev_data, "dataset directory")->required();
  ev->add_option("--out", ev_out, "metrics CSV")->required();
  ev->add_option("--split", ev_split, "train | eval")->capture_default_str();

  auto* sc = app.add_subcommand("scale-curve", "AbsRel after each scale of cumulative predictions");
  std::string sc_model, sc_vq, sc_data, sc_out, sc_svg, sc_split = "eval";
  sc->add_option("--model", sc_model, "transformer checkpoint; omit for the autoencoder's own decomposition");
  sc->add_option("--vq", sc_vq, "autoencoder checkpoint")->required();
  sc->add_option("--data", sc_data, "dataset directory")->required();
  sc->add_option("--out", sc_out, "curve CSV")->required();
  sc->add_option("--svg", sc_svg, "also write an SVG chart");
  sc->add_option("--split", sc_split, "train | eval")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    RunManifest rm;
    if (gen->parsed()) {
      rm = gen_data_run(gen_out, n_train, n_eval, gen_seed);
    } else if (tvq->parsed()) {
      const TrainConfig c = tvq_over.resolve(tvq_config, false);
      rm = train_vqvae_run(c, [&](std::size_t step, double loss) {
        if (step % (c.log_every * 10) == 0) progress("train-vqvae", step, c.steps, loss);
      });
    } else if (tvar->parsed()) {
      const TrainConfig c = tvar_over.resolve(tvar_config, true);
      FitOptions fo;
      fo.resume = resume;
      fo.on_log = [&](const CurvePoint& p) {
        if (p.step % c.checkpoint_every == 0) progress("train-var", p.step, c.steps, p.loss);
      };
      rm = train_var_run(c, tvar_vq, fo, {}, tvar_svg);
    } else if (ev->parsed()) {
      std::vector<fs::path> models(ev_models.begin(), ev_models.end());
      rm = eval_run(models, ev_vq, ev_data, ev_out, ev_split);
    } else if (sc->parsed()) {
      rm = scale_curve_run(sc_model, sc_vq, sc_data, sc_out, sc_svg, sc_split);
    }
    std::printf("%s\n", rm.to_json().dump(2).c_str());
    return kOk;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kUsage;
  } catch (const DivergenceError& e) {
    std::fprintf(stderr, "diverged: %s\n", e.what());
    return kDiverged;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kData;
  }
}

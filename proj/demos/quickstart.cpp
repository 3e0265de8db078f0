// Library tour on a toy budget: render scenes, fit the autoencoder, train the
// transformer with both regimes for a few hundred steps and compare them.

#include <cstdio>
#include <filesystem>

#include "depthart/pipeline.hpp"

using namespace depthart;

int main(int argc, char** argv) {
  const std::filesystem::path dir = argc > 1 ? argv[1] : "quickstart_out";
  std::vector<DepthSample> train, held;
  for (std::uint64_t i = 0; i < 64; ++i) train.push_back(generate_sample(scene_seed(7, false, i)));
  for (std::uint64_t i = 0; i < 16; ++i) held.push_back(generate_sample(scene_seed(7, true, i)));

  VqTrainOptions vo;
  vo.steps = 400;
  vo.warmup_steps = 100;
  vo.on_log = [](std::size_t step, double loss) {
    if (step % 100 == 0) std::printf("vq step %zu loss %.4f\n", step, loss);
  };
  const VqModel vq = train_vqvae(train, vo).model;
  std::printf("autoencoder floor on held-out scenes: %.4f\n", vq_floor(vq, held));

  const auto data = tokenize_all(vq, train);
  VarConfig arch;
  arch.width = 64;
  arch.layers = 2;
  arch.heads = 2;
  for (Regime r : {Regime::teacher_forcing, Regime::depthart}) {
    TrainConfig c;
    c.regime = r;
    c.lr = 1e-3;
    c.steps = 300;
    c.decay_period = 100;
    c.checkpoint_every = 100;
    c.out_dir = (dir / regime_name(r)).string();
    const FitResult fr = fit(vq, data, c, arch);
    const ScaleCurve curve = per_scale_curve(fr.model, vq, held);
    std::printf("%-16s final loss %.3f  AbsRel per scale:", regime_name(r).c_str(), fr.curve.back().loss);
    for (double a : curve.absrel) std::printf(" %.4f", a);
    std::printf("\n");
  }
}

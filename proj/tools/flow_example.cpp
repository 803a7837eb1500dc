// Short training run, then inter-modality flow and NMI per fusion layer,
// before and after training.
#include <cstdio>

#include "vlp/vlp.hpp"

int main() {
  vlp::TrainConfig cfg;
  cfg.steps = 60;
  cfg.dataset_size = 128;

  const auto data = vlp::training_data(cfg);
  const auto held = vlp::held_out_data(cfg, 64);
  const auto run = vlp::train(cfg, data);

  vlp::ProbeOptions opt;
  opt.max_examples = 16;
  const auto before = vlp::probe(run.initial, held, opt);
  const auto after = vlp::probe(run.params, held, opt);

  std::printf("layer  F(1,j) before  F(1,j) after  NMI before  NMI after\n");
  for (std::size_t j = 0; j < after.imf.from_first.size(); ++j)
    std::printf("%5zu  %13.4f  %12.4f  %10.4f  %9.4f\n", j + 1, before.imf.from_first[j],
                after.imf.from_first[j], before.nmi.mean[j], after.nmi.mean[j]);
  std::printf("final loss %.4f\n", run.log.rows.back().values.total);
}

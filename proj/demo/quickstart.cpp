// Small end-to-end run: simulate three subjects, train PITN-Base, pre-train a
// PI-DeepONet, then distill a PITN-Base under the frozen operator.

#include <cstdio>

#include "opsup/opsup.hpp"

int main() {
  using namespace opsup;

  CohortSpec cs;
  cs.duration_s = 40.0;
  const Cohort cohort = make_cohort(3, 7, cs);

  WindowSpec window;
  window.length = 128;
  const Dataset data = materialize(cohort.records, SplitSpec{}, window);
  std::printf("%zu training and %zu test beats\n", data.train.size(), data.test.size());

  TrainConfig cfg;
  cfg.epochs = 5;
  cfg.lr = 3e-3;
  cfg.pitn.window = cfg.deeponet.window = window.length;
  cfg.pitn.channels = cfg.pitn.branch_channels = 8;
  cfg.pitn.head_hidden = {32, 16};
  cfg.deeponet.branch_hidden = {64};
  cfg.deeponet.trunk_hidden = {32};
  cfg.deeponet.latent = 32;

  auto show = [](const RunRecord& r) {
    const auto& m = r.eval->pooled;
    std::printf("%-16s corr %.4f  rmse %.3f mmHg  bias %+.3f  LoA [%.3f, %.3f]\n", r.model.c_str(), m.corr, m.rmse,
                m.bland_altman.mean_diff, m.bland_altman.loa_low, m.bland_altman.loa_high);
  };

  const TrainResult base = train(TrainModel::pitn_base, data, cfg);
  show(base.record);

  const TrainResult osm = train(TrainModel::pi_deeponet, data, cfg);
  show(osm.record);

  cfg.variant = SupVariant::B;
  cfg.weights.beta = 1.0;
  const TrainResult aug = distill(osm.model, data, cfg);
  show(aug.record);
  return 0;
}

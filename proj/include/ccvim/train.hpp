#pragma once

#include <string>
#include <vector>

#include "ccvim/config.hpp"
#include "ccvim/data.hpp"
#include "ccvim/metrics.hpp"
#include "ccvim/network.hpp"

namespace ccvim {

struct AdamWState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  int64_t step = 0;

  void init(const ParamSet& params);
};

// Decoupled-weight-decay Adam step (beta1 0.9, beta2 0.999, eps 1e-8).
// Throws NumericError naming the parameter on a non-finite gradient.
void adamw_step(ParamSet& params, AdamWState& state, double lr, double weight_decay);

// lr * (1 + cos(pi * step / t_max)) / 2, clamped to the floor past t_max.
double cosine_lr(int64_t step, const TrainConfig& cfg);

struct TrainResult {
  std::vector<double> epoch_losses;
  std::string checkpoint_dir;
};

// Seeded end-to-end loop over an on-disk scene directory. Writes the
// checkpoint (weights + config) and a per-epoch loss log under out_dir.
TrainResult train(const FullConfig& cfg, const std::string& data_dir, const std::string& out_dir);

// Per-image metrics for a prediction/ground-truth pair; instance metrics are
// included when both instance maps are given.
MetricsReport evaluate_maps(const IntMap& pred_sem, const IntMap& gt_sem,
                            const IntMap* pred_inst, const IntMap* gt_inst);

struct EvalResult {
  std::vector<std::string> names;
  std::vector<MetricsReport> rows;
  double mean(const std::string& name) const;
};

EvalResult evaluate_dataset(const FullConfig& cfg, NetworkWeights& weights,
                            const std::string& data_dir);

// Checkpoint-driven evaluation; writes the per-image + mean CSV report.
EvalResult evaluate(const std::string& checkpoint_dir, const std::string& data_dir,
                    const std::string& report_csv);

FullConfig load_checkpoint_config(const std::string& checkpoint_dir);
NetworkWeights load_checkpoint_weights(const std::string& checkpoint_dir, const FullConfig& cfg);

// Sliding-window inference with averaged logits; tile 0 means single shot.
Tensor infer_logits(const Tensor& image, const NetworkConfig& cfg, const NetworkWeights& weights,
                    int64_t tile = 0, int64_t overlap = 0, Tensor* hv_out = nullptr);

}  // namespace ccvim

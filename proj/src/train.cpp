#include "ccvim/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "ccvim/losses.hpp"

namespace ccvim {

void AdamWState::init(const ParamSet& params) {
  m.clear();
  v.clear();
  step = 0;
  for (const auto& [name, t] : params.items) {
    m.emplace_back(static_cast<size_t>(t.numel()), 0.0);
    v.emplace_back(static_cast<size_t>(t.numel()), 0.0);
  }
}

void adamw_step(ParamSet& params, AdamWState& state, double lr, double weight_decay) {
  constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;
  if (state.m.size() != params.items.size()) state.init(params);
  state.step++;
  double bc1 = 1.0 - std::pow(kBeta1, static_cast<double>(state.step));
  double bc2 = 1.0 - std::pow(kBeta2, static_cast<double>(state.step));
  for (size_t pi = 0; pi < params.items.size(); ++pi) {
    auto& [name, t] = params.items[pi];
    auto& data = t.data();
    const std::vector<double>& grad = t.grad();
    auto& mm = state.m[pi];
    auto& vv = state.v[pi];
    for (size_t i = 0; i < data.size(); ++i) {
      double g = grad.empty() ? 0.0 : grad[i];
      if (!std::isfinite(g)) {
        throw NumericError("adamw_step: non-finite gradient in parameter '" + name + "'");
      }
      mm[i] = kBeta1 * mm[i] + (1.0 - kBeta1) * g;
      vv[i] = kBeta2 * vv[i] + (1.0 - kBeta2) * g * g;
      double mhat = mm[i] / bc1;
      double vhat = vv[i] / bc2;
      data[i] -= lr * (mhat / (std::sqrt(vhat) + kEps) + weight_decay * data[i]);
    }
  }
}

double cosine_lr(int64_t step, const TrainConfig& cfg) {
  if (step < 0) throw ContractError("cosine_lr: step must be >= 0");
  int64_t t_max = cfg.t_max > 0 ? cfg.t_max : cfg.epochs;
  if (step > t_max) return 0.0;  // clamp to the floor value
  return cfg.lr * (1.0 + std::cos(M_PI * static_cast<double>(step) / static_cast<double>(t_max))) /
         2.0;
}

namespace {

Tensor hv_tensor(const DistanceMaps& hv) {
  int64_t h = hv.ph.h, w = hv.ph.w;
  std::vector<double> data(static_cast<size_t>(2 * h * w));
  std::copy(hv.ph.v.begin(), hv.ph.v.end(), data.begin());
  std::copy(hv.pv.v.begin(), hv.pv.v.end(), data.begin() + h * w);
  return Tensor::from_data({2, h, w}, std::move(data));
}

DistanceMaps hv_maps(const Tensor& hv) {
  int64_t h = hv.shape()[1], w = hv.shape()[2];
  DistanceMaps d{RealMap(h, w), RealMap(h, w)};
  std::copy(hv.data().begin(), hv.data().begin() + h * w, d.ph.v.begin());
  std::copy(hv.data().begin() + h * w, hv.data().end(), d.pv.v.begin());
  return d;
}

void write_loss_log(const std::string& path, const std::vector<double>& losses,
                    const std::vector<double>& lrs) {
  std::ofstream os(path);
  if (!os) throw ConfigError("cannot write loss log: " + path);
  os << "epoch,mean_loss,lr\n";
  char buf[64];
  for (size_t e = 0; e < losses.size(); ++e) {
    std::snprintf(buf, sizeof buf, "%.17g", losses[e]);
    os << (e + 1) << "," << buf;
    std::snprintf(buf, sizeof buf, "%.17g", lrs[e]);
    os << "," << buf << "\n";
  }
}

}  // namespace

TrainResult train(const FullConfig& cfg, const std::string& data_dir, const std::string& out_dir) {
  cfg.network.validate();
  cfg.train.validate();
  int64_t n = count_scenes(data_dir);
  if (n < 1) throw ConfigError("train: no scenes found in " + data_dir);
  std::vector<SynthScene> scenes;
  scenes.reserve(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) scenes.push_back(load_scene(data_dir, i));

  bool instance_mode = cfg.train.mode == "nuclei";
  FullConfig effective = cfg;
  effective.network.instance_head = instance_mode ? true : cfg.network.instance_head;
  NetworkWeights weights = make_network_weights(effective.network, cfg.train.seed);
  ParamSet params = collect_parameters(weights, effective.network);
  AdamWState state;
  state.init(params);

  std::filesystem::create_directories(out_dir);
  TrainResult result;
  result.checkpoint_dir = out_dir;
  std::vector<double> lrs;
  SplitMix64 shuffle_rng(mix_seed(cfg.train.seed, 0x5481));
  for (int64_t epoch = 0; epoch < cfg.train.epochs; ++epoch) {
    double lr = cosine_lr(epoch, cfg.train);
    std::vector<int64_t> order(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;
    for (int64_t i = n - 1; i > 0; --i) {
      std::swap(order[static_cast<size_t>(i)],
                order[static_cast<size_t>(shuffle_rng.uniform_int(0, i))]);
    }
    double epoch_loss = 0.0;
    int64_t seen = 0;
    for (int64_t start = 0; start < n; start += cfg.train.batch_size) {
      int64_t stop = std::min(n, start + cfg.train.batch_size);
      double batch_scale = 1.0 / static_cast<double>(stop - start);
      for (auto& [name, t] : params.items) t.zero_grad();
      for (int64_t bi = start; bi < stop; ++bi) {
        int64_t idx = order[static_cast<size_t>(bi)];
        SynthScene scene = augment(
            scenes[static_cast<size_t>(idx)],
            mix_seed(cfg.train.seed, static_cast<uint64_t>(epoch * 131071 + idx + 1)));
        GradTape tape;
        ForwardResult fwd = forward(scene.image, effective.network, weights);
        Tensor loss;
        if (instance_mode) {
          loss = combined_loss(fwd.logits, scene.semantic, fwd.hv, hv_tensor(scene.hv));
        } else {
          loss = combined_loss(fwd.logits, scene.semantic);
        }
        double lv = loss.value();
        if (!std::isfinite(lv)) {
          throw NumericError("train: non-finite loss at epoch " + std::to_string(epoch + 1) +
                             "; last saved checkpoint retained");
        }
        epoch_loss += lv;
        ++seen;
        tape.backward(mul(loss, batch_scale));
      }
      adamw_step(params, state, lr, cfg.train.weight_decay);
    }
    result.epoch_losses.push_back(epoch_loss / static_cast<double>(seen));
    lrs.push_back(lr);
    save_weights(out_dir, params);
    save_full_config(out_dir + "/config.conf", effective);
    write_loss_log(out_dir + "/loss_log.csv", result.epoch_losses, lrs);
  }
  return result;
}

MetricsReport evaluate_maps(const IntMap& pred_sem, const IntMap& gt_sem,
                            const IntMap* pred_inst, const IntMap* gt_inst) {
  MetricsReport report;
  BinaryStats bs = binary_stats(pred_sem, gt_sem);
  report.add("mIoU", bs.miou);
  report.add("DSC", bs.dsc);
  report.add("Acc", bs.acc);
  report.add("Sen", bs.sen);
  report.add("Spe", bs.spe);
  HD95Result hd = hd95(pred_sem, gt_sem);
  report.add("HD95", hd.value);
  if (hd.empty_mask) report.flags.insert("hd95_empty_mask_sentinel");
  report.flags.insert("miou_foreground_only");
  if (pred_inst && gt_inst) {
    report.add("Dice", ensemble_dice(*pred_inst, *gt_inst));
    report.add("AJI", aji(*pred_inst, *gt_inst));
    PQResult pq = pq_dq_sq(*pred_inst, *gt_inst);
    report.add("PQ", pq.pq);
    report.add("DQ", pq.dq);
    report.add("SQ", pq.sq);
  }
  return report;
}

double EvalResult::mean(const std::string& name) const {
  if (rows.empty()) throw ContractError("EvalResult: no rows");
  double s = 0.0;
  for (const auto& r : rows) s += r.get(name);
  return s / static_cast<double>(rows.size());
}

EvalResult evaluate_dataset(const FullConfig& cfg, NetworkWeights& weights,
                            const std::string& data_dir) {
  int64_t n = count_scenes(data_dir);
  if (n < 1) throw ConfigError("evaluate: no scenes found in " + data_dir);
  bool instance_mode = cfg.train.mode == "nuclei" && cfg.network.instance_head;
  EvalResult result;
  result.names = {"mIoU", "DSC", "Acc", "Sen", "Spe", "HD95"};
  if (instance_mode) {
    result.names.insert(result.names.end(), {"Dice", "AJI", "PQ", "DQ", "SQ"});
  }
  for (int64_t i = 0; i < n; ++i) {
    SynthScene scene = load_scene(data_dir, i);
    ForwardResult fwd = forward(scene.image, cfg.network, weights);
    int64_t classes = fwd.logits.shape()[0];
    int64_t h = fwd.logits.shape()[1], w = fwd.logits.shape()[2];
    IntMap pred_sem(h, w);
    const auto& ld = fwd.logits.data();
    for (int64_t p = 0; p < h * w; ++p) {
      int32_t best = 0;
      double bv = ld[p];
      for (int64_t c = 1; c < classes; ++c) {
        if (ld[c * h * w + p] > bv) {
          bv = ld[c * h * w + p];
          best = static_cast<int32_t>(c);
        }
      }
      pred_sem.v[static_cast<size_t>(p)] = best != 0 ? 1 : 0;
    }
    if (instance_mode) {
      Tensor prob_t = foreground_prob(fwd.logits);
      RealMap prob(h, w);
      prob.v = prob_t.data();
      IntMap pred_inst = postprocess(prob, hv_maps(fwd.hv), cfg.watershed);
      result.rows.push_back(evaluate_maps(pred_sem, scene.semantic, &pred_inst, &scene.instances));
    } else {
      result.rows.push_back(evaluate_maps(pred_sem, scene.semantic, nullptr, nullptr));
    }
  }
  return result;
}

FullConfig load_checkpoint_config(const std::string& checkpoint_dir) {
  return load_full_config(checkpoint_dir + "/config.conf");
}

NetworkWeights load_checkpoint_weights(const std::string& checkpoint_dir, const FullConfig& cfg) {
  NetworkWeights weights = make_network_weights(cfg.network, 0);
  ParamSet params = collect_parameters(weights, cfg.network);
  load_weights(checkpoint_dir, params);
  return weights;
}

EvalResult evaluate(const std::string& checkpoint_dir, const std::string& data_dir,
                    const std::string& report_csv) {
  FullConfig cfg = load_checkpoint_config(checkpoint_dir);
  NetworkWeights weights = load_checkpoint_weights(checkpoint_dir, cfg);
  EvalResult result = evaluate_dataset(cfg, weights, data_dir);
  write_report_csv(report_csv, result.names, result.rows);
  return result;
}

Tensor infer_logits(const Tensor& image, const NetworkConfig& cfg, const NetworkWeights& weights,
                    int64_t tile, int64_t overlap, Tensor* hv_out) {
  int64_t h = image.shape()[1], w = image.shape()[2];
  if (tile <= 0) {
    ForwardResult fwd = forward(image, cfg, weights);
    if (hv_out) *hv_out = fwd.hv;
    return fwd.logits;
  }
  if (tile % 32 != 0) throw ConfigError("infer: tile size must be divisible by 32");
  if (overlap < 0 || overlap >= tile) throw ConfigError("infer: overlap must be in [0, tile)");
  if (tile > h || tile > w) throw ConfigError("infer: tile larger than the image");
  int64_t stride = tile - overlap;
  Tensor acc = Tensor::zeros({cfg.num_classes, h, w});
  Tensor hv_acc = cfg.instance_head ? Tensor::zeros({2, h, w}) : Tensor();
  std::vector<double> count(static_cast<size_t>(h * w), 0.0);
  for (int64_t y0 = 0;; y0 += stride) {
    y0 = std::min(y0, h - tile);
    for (int64_t x0 = 0;; x0 += stride) {
      x0 = std::min(x0, w - tile);
      Tensor crop = Tensor::zeros({3, tile, tile});
      for (int64_t c = 0; c < 3; ++c) {
        for (int64_t y = 0; y < tile; ++y) {
          for (int64_t x = 0; x < tile; ++x) {
            crop.data()[c * tile * tile + y * tile + x] =
                image.data()[c * h * w + (y0 + y) * w + (x0 + x)];
          }
        }
      }
      ForwardResult fwd = forward(crop, cfg, weights);
      for (int64_t c = 0; c < cfg.num_classes; ++c) {
        for (int64_t y = 0; y < tile; ++y) {
          for (int64_t x = 0; x < tile; ++x) {
            acc.data()[c * h * w + (y0 + y) * w + (x0 + x)] +=
                fwd.logits.data()[c * tile * tile + y * tile + x];
          }
        }
      }
      if (hv_acc.defined() && fwd.hv.defined()) {
        for (int64_t c = 0; c < 2; ++c) {
          for (int64_t y = 0; y < tile; ++y) {
            for (int64_t x = 0; x < tile; ++x) {
              hv_acc.data()[c * h * w + (y0 + y) * w + (x0 + x)] +=
                  fwd.hv.data()[c * tile * tile + y * tile + x];
            }
          }
        }
      }
      for (int64_t y = 0; y < tile; ++y) {
        for (int64_t x = 0; x < tile; ++x) count[(y0 + y) * w + (x0 + x)] += 1.0;
      }
      if (x0 >= w - tile) break;
    }
    if (y0 >= h - tile) break;
  }
  for (int64_t c = 0; c < cfg.num_classes; ++c) {
    for (int64_t p = 0; p < h * w; ++p) acc.data()[c * h * w + p] /= count[p];
  }
  if (hv_acc.defined()) {
    for (int64_t c = 0; c < 2; ++c) {
      for (int64_t p = 0; p < h * w; ++p) hv_acc.data()[c * h * w + p] /= count[p];
    }
  }
  if (hv_out) *hv_out = hv_acc;
  return acc;
}

}  // namespace ccvim

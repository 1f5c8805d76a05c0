#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "ccvim/config.hpp"
#include "ccvim/data.hpp"
#include "ccvim/image_io.hpp"
#include "ccvim/losses.hpp"
#include "ccvim/train.hpp"

namespace {

using namespace ccvim;

int cmd_synth(int64_t n, int64_t size, uint64_t seed, const std::string& mode,
              const std::string& out) {
  auto scenes = synth_dataset(n, size, seed, parse_synth_mode(mode));
  for (size_t i = 0; i < scenes.size(); ++i) {
    save_scene(out, static_cast<int64_t>(i), scenes[i]);
  }
  std::cout << "wrote " << scenes.size() << " scenes to " << out << "\n";
  return 0;
}

int cmd_train(const std::string& config, const std::string& data, const std::string& out) {
  FullConfig cfg = load_full_config(config);
  TrainResult result = train(cfg, data, out);
  std::printf("trained %zu epochs, final loss %.6f, checkpoint in %s\n",
              result.epoch_losses.size(), result.epoch_losses.back(), out.c_str());
  return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& data, const std::string& out) {
  EvalResult result = evaluate(checkpoint, data, out);
  std::printf("evaluated %zu images; mean mIoU %.4f; report: %s\n", result.rows.size(),
              result.mean("mIoU"), out.c_str());
  return 0;
}

int cmd_infer(const std::string& checkpoint, const std::string& image_path,
              const std::string& out, const std::string& instances_out, int64_t tile,
              int64_t overlap) {
  FullConfig cfg = load_checkpoint_config(checkpoint);
  NetworkWeights weights = load_checkpoint_weights(checkpoint, cfg);
  Tensor image = read_ppm(image_path);
  Tensor hv;
  Tensor logits = infer_logits(image, cfg.network, weights, tile, overlap, &hv);
  int64_t classes = logits.shape()[0], h = logits.shape()[1], w = logits.shape()[2];
  IntMap pred(h, w);
  for (int64_t p = 0; p < h * w; ++p) {
    int32_t best = 0;
    double bv = logits.data()[p];
    for (int64_t c = 1; c < classes; ++c) {
      if (logits.data()[c * h * w + p] > bv) {
        bv = logits.data()[c * h * w + p];
        best = static_cast<int32_t>(c);
      }
    }
    pred.v[static_cast<size_t>(p)] = best != 0 ? 1 : 0;
  }
  write_pgm8(out, pred);
  if (!instances_out.empty()) {
    if (!hv.defined()) {
      throw ConfigError("infer: checkpoint has no instance head, cannot write instances");
    }
    Tensor prob_t = foreground_prob(logits);
    RealMap prob(h, w);
    prob.v = prob_t.data();
    DistanceMaps d{RealMap(h, w), RealMap(h, w)};
    std::copy(hv.data().begin(), hv.data().begin() + h * w, d.ph.v.begin());
    std::copy(hv.data().begin() + h * w, hv.data().end(), d.pv.v.begin());
    IntMap inst = postprocess(prob, d, cfg.watershed);
    write_pgm16(instances_out, inst);
  }
  std::cout << "wrote " << out << "\n";
  return 0;
}

int cmd_gradcheck(const std::string& module, uint64_t seed) {
  double worst = 0.0;
  auto report = [&worst](const std::string& name, double err) {
    std::printf("%-24s max rel err %.3e %s\n", name.c_str(), err, err <= 1e-4 ? "ok" : "FAIL");
    worst = std::max(worst, err);
  };
  SplitMix64 rng(seed);
  auto randn = [&rng](Shape shape) {
    Tensor t = Tensor::zeros(shape, true);
    for (double& v : t.data()) v = rng.uniform(-1.0, 1.0);
    return t;
  };
  bool all = module.empty() || module == "all";
  if (all || module == "tensor") {
    Tensor a = randn({3, 4}), b = randn({4, 2});
    report("tensor.matmul",
           finite_diff_check([&] { return sum(matmul(a, b)); }, {a, b}, 1e-5));
    Tensor x = randn({2, 8});
    Tensor gamma = randn({8}), beta = randn({8});
    report("tensor.layer_norm", finite_diff_check(
        [&] { return sum(layer_norm(x, gamma, beta)); }, {x, gamma, beta}, 1e-5));
    Tensor img = randn({2, 5, 5}), ker = randn({2, 3, 3});
    report("tensor.depthwise_conv", finite_diff_check(
        [&] { return sum(mul(depthwise_conv2d(img, ker, 1), img)); }, {img, ker}, 1e-5));
    Tensor u = randn({6});
    report("tensor.silu", finite_diff_check([&] { return sum(silu(u)); }, {u}, 1e-5));
  }
  if (all || module == "ssm") {
    SSMParams p = make_ssm_params(3, 4, rng);
    Tensor x = randn({6, 3});
    std::vector<Tensor> params = {x, p.a_log, p.d_skip, p.w_b, p.w_c, p.w_dt, p.dt_bias};
    report("ssm.selective_scan",
           finite_diff_check([&] { return sum(selective_scan(x, p)); }, params, 1e-5));
  }
  if (all || module == "context-cluster") {
    CCLayerConfig cc;
    cc.centers = 4;
    cc.window_size = 4;
    cc.knn_k = 2;
    CCLayerWeights w = make_cc_weights(3, cc, rng);
    FeatureMap f(randn({3, 6, 6}));
    std::vector<Tensor> params = {f.tensor, w.sim_proj.w, w.sim_proj.b, w.val_proj.w,
                                  w.val_proj.b, w.fc.w, w.fc.b, w.alpha, w.beta};
    report("cc.cc_layer", finite_diff_check(
        [&] { return sum(cc_layer(f, cc, w).tensor); }, params, 1e-5));
  }
  if (all || module == "network") {
    NetworkConfig cfg;
    cfg.base_channels = 2;
    cfg.state_size = 2;
    cfg.enc_depths = {1, 1, 1, 1};
    cfg.dec_depths = {1, 1, 1, 1};
    fill_default_plan(cfg);
    cfg.cc_window = 4;
    cfg.cc_knn = 2;
    NetworkWeights w = make_network_weights(cfg, seed);
    ParamSet params = collect_parameters(w, cfg);
    Tensor image = randn({3, 32, 32});
    IntMap labels(32, 32);
    for (int64_t i = 0; i < 32 * 32; ++i) labels.v[i] = (i % 7) == 0 ? 1 : 0;
    std::vector<Tensor> ts;
    for (auto& [name, t] : params.items) ts.push_back(t);
    ts.push_back(image);
    auto f = [&] {
      ForwardResult fwd = forward(image, cfg, w);
      return combined_loss(fwd.logits, labels);
    };
    report("network.forward+loss", finite_diff_check(f, ts, 1e-5, 3, seed));
  }
  if (worst > 1e-4) {
    std::cerr << "gradient check failed\n";
    return 2;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"CCViM segmentation toolkit"};
  app.require_subcommand(1);

  auto* synth = app.add_subcommand("synth", "generate a synthetic dataset");
  int64_t n = 16, size = 64, tile = 0, overlap = 0;
  uint64_t seed = 42;
  std::string mode = "lesion", out, config, data, checkpoint, image, instances, module;
  synth->add_option("--n", n, "number of scenes")->required();
  synth->add_option("--size", size, "square scene size (divisible by 32)")->required();
  synth->add_option("--seed", seed, "RNG seed")->required();
  synth->add_option("--mode", mode, "nuclei|lesion")->required();
  synth->add_option("--out", out, "output directory")->required();

  auto* train_cmd = app.add_subcommand("train", "train a model");
  train_cmd->add_option("--config", config, "config file")->required();
  train_cmd->add_option("--data", data, "scene directory")->required();
  train_cmd->add_option("--out", out, "checkpoint directory")->required();

  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
  eval_cmd->add_option("--checkpoint", checkpoint, "checkpoint directory")->required();
  eval_cmd->add_option("--data", data, "scene directory")->required();
  eval_cmd->add_option("--out", out, "report CSV path")->required();

  auto* infer_cmd = app.add_subcommand("infer", "segment one image");
  infer_cmd->add_option("--checkpoint", checkpoint, "checkpoint directory")->required();
  infer_cmd->add_option("--image", image, "input PPM image")->required();
  infer_cmd->add_option("--out", out, "output PGM mask")->required();
  infer_cmd->add_option("--instances", instances, "optional 16-bit PGM instance output");
  infer_cmd->add_option("--tile", tile, "sliding-window tile size (0 = whole image)");
  infer_cmd->add_option("--overlap", overlap, "sliding-window overlap");

  auto* grad_cmd = app.add_subcommand("gradcheck", "finite-difference gradient checks");
  grad_cmd->add_option("--module", module, "tensor|ssm|context-cluster|network|all");
  grad_cmd->add_option("--seed", seed, "RNG seed");

  CLI11_PARSE(app, argc, argv);

  try {
    if (synth->parsed()) return cmd_synth(n, size, seed, mode, out);
    if (train_cmd->parsed()) return cmd_train(config, data, out);
    if (eval_cmd->parsed()) return cmd_eval(checkpoint, data, out);
    if (infer_cmd->parsed()) return cmd_infer(checkpoint, image, out, instances, tile, overlap);
    if (grad_cmd->parsed()) return cmd_gradcheck(module, seed);
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

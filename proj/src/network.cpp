#include "ccvim/network.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "ccvim/config.hpp"
#include "ccvim/tensor_io.hpp"

namespace ccvim {

namespace {
constexpr int64_t kExpand = 2;  // inner dim of a CCViM block is 2x the stage dim
}

BranchSpec parse_branch_token(const std::string& token) {
  std::string t;
  for (char c : token) t.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  BranchSpec spec;
  if (t == "h") {
    spec = {BranchSpec::Kind::Scan, ScanDirection::H, 0};
  } else if (t == "hflip") {
    spec = {BranchSpec::Kind::Scan, ScanDirection::HFlip, 0};
  } else if (t == "v") {
    spec = {BranchSpec::Kind::Scan, ScanDirection::V, 0};
  } else if (t == "vflip") {
    spec = {BranchSpec::Kind::Scan, ScanDirection::VFlip, 0};
  } else if (t == "cc4" || t == "c4") {
    spec = {BranchSpec::Kind::CC, ScanDirection::H, 4};
  } else if (t == "cc25" || t == "c25") {
    spec = {BranchSpec::Kind::CC, ScanDirection::H, 25};
  } else {
    throw ConfigError("unknown branch token '" + token + "'");
  }
  return spec;
}

std::string branch_token(const BranchSpec& spec) {
  if (spec.kind == BranchSpec::Kind::Scan) return direction_name(spec.direction);
  return "cc" + std::to_string(spec.centers);
}

void NetworkConfig::validate() const {
  if (base_channels < 1) throw ConfigError("network: base_channels must be >= 1");
  if (state_size < 1) throw ConfigError("network: state_size must be >= 1");
  if (num_classes < 2) throw ConfigError("network: num_classes must be >= 2");
  if (enc_plan.size() != 4 || dec_plan.size() != 4) {
    throw ConfigError("network: branch plan must cover 4 encoder and 4 decoder stages");
  }
  for (int s = 0; s < 4; ++s) {
    if (enc_depths[s] < 1 || dec_depths[s] < 1) throw ConfigError("network: stage depth must be >= 1");
    if (static_cast<int>(enc_plan[s].size()) != enc_depths[s] ||
        static_cast<int>(dec_plan[s].size()) != dec_depths[s]) {
      throw ConfigError("network: branch plan does not match stage depths");
    }
    for (const BranchList& b : enc_plan[s]) {
      if (b.empty() || b.size() > 4) throw ConfigError("network: a CCS6 layer holds 1..4 branches");
    }
    for (const BranchList& b : dec_plan[s]) {
      if (b.empty() || b.size() > 4) throw ConfigError("network: a CCS6 layer holds 1..4 branches");
    }
  }
}

void fill_default_plan(NetworkConfig& cfg) {
  BranchList enc = {parse_branch_token("h"), parse_branch_token("hflip"), parse_branch_token("cc4"),
                    parse_branch_token("cc25")};
  BranchList dec = {parse_branch_token("v"), parse_branch_token("vflip"), parse_branch_token("cc4"),
                    parse_branch_token("cc25")};
  cfg.enc_plan.assign(4, {});
  cfg.dec_plan.assign(4, {});
  for (int s = 0; s < 4; ++s) {
    cfg.enc_plan[s].assign(cfg.enc_depths[s], enc);
    cfg.dec_plan[s].assign(cfg.dec_depths[s], dec);
  }
}

BranchPlan load_branch_plan(const std::string& path) {
  ConfigFile file = parse_config_file(path);
  NetworkConfig scratch;
  scratch.enc_depths = {2, 2, 2, 2};
  scratch.dec_depths = {2, 2, 2, 2};
  fill_default_plan(scratch);
  apply_branch_section(file, scratch);
  return BranchPlan{scratch.enc_plan, scratch.dec_plan};
}

// ---------------------------------------------------------------------------
// Weight construction

namespace {

LinearWeights make_linear(int64_t in, int64_t out, SplitMix64& rng) {
  double scale = 1.0 / std::sqrt(static_cast<double>(in));
  LinearWeights fc;
  fc.w = Tensor::zeros({in, out}, true);
  for (double& v : fc.w.data()) v = rng.uniform(-scale, scale);
  fc.b = Tensor::zeros({out}, true);
  return fc;
}

LayerNormWeights make_norm(int64_t d) {
  return {Tensor::full({d}, 1.0, true), Tensor::zeros({d}, true)};
}

BlockWeights make_block(int64_t dim, const BranchList& branches, const NetworkConfig& cfg,
                        SplitMix64& rng) {
  int64_t inner = dim * kExpand;
  BlockWeights b;
  b.norm_in = make_norm(dim);
  b.lin_gate = make_linear(dim, inner, rng);
  b.lin_main = make_linear(dim, inner, rng);
  b.dw_kernel = Tensor::zeros({inner, 3, 3}, true);
  for (double& v : b.dw_kernel.data()) v = rng.uniform(-1.0 / 3.0, 1.0 / 3.0);
  b.dw_bias = Tensor::zeros({inner}, true);
  for (const BranchSpec& spec : branches) {
    CCS6BranchWeights bw;
    bw.spec = spec;
    if (spec.kind == BranchSpec::Kind::Scan) {
      bw.ssm = make_ssm_params(inner, cfg.state_size, rng);
    } else {
      CCLayerConfig cc;
      cc.centers = spec.centers;
      cc.window_size = cfg.cc_window;
      cc.knn_k = cfg.cc_knn;
      bw.cc = make_cc_weights(inner, cc, rng);
    }
    b.ccs6.branches.push_back(std::move(bw));
  }
  b.ccs6.out_norm = make_norm(inner);
  b.norm_mid = make_norm(inner);
  b.out_proj = make_linear(inner, dim, rng);
  return b;
}

}  // namespace

NetworkWeights make_network_weights(const NetworkConfig& cfg, uint64_t seed) {
  cfg.validate();
  SplitMix64 rng(mix_seed(seed, 0xccf1));
  NetworkWeights w;
  int64_t c = cfg.base_channels;
  w.embed = make_linear(48, c, rng);
  w.embed_norm = make_norm(c);
  w.enc.resize(4);
  int64_t dim = c;
  for (int s = 0; s < 4; ++s) {
    for (int k = 0; k < cfg.enc_depths[s]; ++k) {
      w.enc[s].push_back(make_block(dim, cfg.enc_plan[s][k], cfg, rng));
    }
    if (s < 3) {
      w.merge[s] = make_linear(4 * dim, 2 * dim, rng);
      w.merge_norm[s] = make_norm(2 * dim);
      dim *= 2;
    }
  }
  w.dec.resize(4);
  for (int s = 0; s < 4; ++s) {
    if (s > 0) {
      w.expand[s - 1] = make_linear(dim, 2 * dim, rng);
      dim /= 2;
    }
    for (int k = 0; k < cfg.dec_depths[s]; ++k) {
      w.dec[s].push_back(make_block(dim, cfg.dec_plan[s][k], cfg, rng));
    }
  }
  w.final_expand = make_linear(c, 16 * c, rng);
  w.head_seg = make_linear(c, cfg.num_classes, rng);
  if (cfg.instance_head) w.head_hv = make_linear(c, 2, rng);
  return w;
}

// ---------------------------------------------------------------------------
// Parameter registry

Tensor* ParamSet::find(const std::string& name) {
  for (auto& [n, t] : items) {
    if (n == name) return &t;
  }
  return nullptr;
}

int64_t ParamSet::total_elements() const {
  int64_t n = 0;
  for (const auto& [name, t] : items) n += t.numel();
  return n;
}

namespace {

void add_linear(ParamSet& ps, const std::string& prefix, LinearWeights& fc) {
  ps.add(prefix + ".w", fc.w);
  ps.add(prefix + ".b", fc.b);
}

void add_norm(ParamSet& ps, const std::string& prefix, LayerNormWeights& n) {
  ps.add(prefix + ".gamma", n.gamma);
  ps.add(prefix + ".beta", n.beta);
}

void add_block(ParamSet& ps, const std::string& prefix, BlockWeights& b) {
  add_norm(ps, prefix + ".norm_in", b.norm_in);
  add_linear(ps, prefix + ".gate", b.lin_gate);
  add_linear(ps, prefix + ".main", b.lin_main);
  ps.add(prefix + ".dw.kernel", b.dw_kernel);
  ps.add(prefix + ".dw.bias", b.dw_bias);
  for (size_t i = 0; i < b.ccs6.branches.size(); ++i) {
    CCS6BranchWeights& bw = b.ccs6.branches[i];
    std::string bp = prefix + ".ccs6.b" + std::to_string(i + 1);
    if (bw.spec.kind == BranchSpec::Kind::Scan) {
      ps.add(bp + ".a_log", bw.ssm.a_log);
      ps.add(bp + ".d_skip", bw.ssm.d_skip);
      ps.add(bp + ".w_b", bw.ssm.w_b);
      ps.add(bp + ".w_c", bw.ssm.w_c);
      ps.add(bp + ".w_dt", bw.ssm.w_dt);
      ps.add(bp + ".dt_bias", bw.ssm.dt_bias);
    } else {
      add_linear(ps, bp + ".sim", bw.cc.sim_proj);
      add_linear(ps, bp + ".val", bw.cc.val_proj);
      add_linear(ps, bp + ".fc", bw.cc.fc);
      ps.add(bp + ".alpha", bw.cc.alpha);
      ps.add(bp + ".beta", bw.cc.beta);
    }
  }
  add_norm(ps, prefix + ".ccs6.norm", b.ccs6.out_norm);
  add_norm(ps, prefix + ".norm_mid", b.norm_mid);
  add_linear(ps, prefix + ".out", b.out_proj);
}

}  // namespace

ParamSet collect_parameters(NetworkWeights& w, const NetworkConfig& cfg) {
  ParamSet ps;
  add_linear(ps, "embed", w.embed);
  add_norm(ps, "embed_norm", w.embed_norm);
  for (int s = 0; s < 4; ++s) {
    for (size_t k = 0; k < w.enc[s].size(); ++k) {
      add_block(ps, "enc" + std::to_string(s + 1) + ".block" + std::to_string(k + 1), w.enc[s][k]);
    }
    if (s < 3) {
      add_linear(ps, "merge" + std::to_string(s + 1), w.merge[s]);
      add_norm(ps, "merge" + std::to_string(s + 1) + "_norm", w.merge_norm[s]);
    }
  }
  for (int s = 0; s < 4; ++s) {
    if (s > 0) add_linear(ps, "expand" + std::to_string(s), w.expand[s - 1]);
    for (size_t k = 0; k < w.dec[s].size(); ++k) {
      add_block(ps, "dec" + std::to_string(s + 1) + ".block" + std::to_string(k + 1), w.dec[s][k]);
    }
  }
  add_linear(ps, "final_expand", w.final_expand);
  add_linear(ps, "head_seg", w.head_seg);
  if (cfg.instance_head) add_linear(ps, "head_hv", w.head_hv);
  return ps;
}

void save_weights(const std::string& dir, const ParamSet& params) {
  std::filesystem::create_directories(dir);
  std::ofstream manifest(dir + "/manifest.txt");
  if (!manifest) throw ConfigError("cannot write manifest in " + dir);
  for (const auto& [name, t] : params.items) {
    manifest << name;
    for (int64_t d : t.shape()) manifest << " " << d;
    manifest << "\n";
    write_ccvt(dir + "/" + name + ".ccvt", t);
  }
}

void load_weights(const std::string& dir, ParamSet& params) {
  std::ifstream manifest(dir + "/manifest.txt");
  if (!manifest) throw ConfigError("cannot read manifest in " + dir);
  size_t count = 0;
  std::string line;
  while (std::getline(manifest, line)) {
    if (line.empty()) continue;
    std::istringstream is(line);
    std::string name;
    is >> name;
    Shape shape;
    int64_t d;
    while (is >> d) shape.push_back(d);
    Tensor* dst = params.find(name);
    if (!dst) throw ConfigError("checkpoint tensor '" + name + "' has no matching parameter");
    if (dst->shape() != shape) {
      throw ConfigError("checkpoint tensor '" + name + "' has shape " + shape_str(shape) +
                        ", expected " + shape_str(dst->shape()));
    }
    Tensor loaded = read_ccvt(dir + "/" + name + ".ccvt");
    if (loaded.shape() != shape) {
      throw ConfigError("checkpoint tensor file '" + name + "' disagrees with manifest");
    }
    dst->data() = loaded.data();
    ++count;
  }
  if (count != params.items.size()) {
    throw ConfigError("checkpoint holds " + std::to_string(count) + " tensors, network needs " +
                      std::to_string(params.items.size()));
  }
}

// ---------------------------------------------------------------------------
// Spatial rearrangements

FeatureMap patch_embed(const Tensor& image, const NetworkConfig&, const NetworkWeights& w) {
  if (image.rank() != 3 || image.shape()[0] != 3) {
    throw DimensionError("patch_embed: image must be [3,H,W], got " + shape_str(image.shape()));
  }
  int64_t h = image.shape()[1], wd = image.shape()[2];
  if (h % 4 != 0 || wd % 4 != 0) {
    throw ConfigError("patch_embed: H and W must be divisible by 4");
  }
  int64_t hp = h / 4, wp = wd / 4;
  std::vector<int64_t> idx(static_cast<size_t>(hp * wp * 48));
  int64_t out = 0;
  for (int64_t py = 0; py < hp; ++py) {
    for (int64_t px = 0; px < wp; ++px) {
      for (int64_t c = 0; c < 3; ++c) {
        for (int64_t dy = 0; dy < 4; ++dy) {
          for (int64_t dx = 0; dx < 4; ++dx) {
            idx[out++] = c * h * wd + (py * 4 + dy) * wd + (px * 4 + dx);
          }
        }
      }
    }
  }
  Tensor patches = take(image, idx, {hp * wp, 48});
  Tensor tokens = layer_norm(linear(patches, w.embed), w.embed_norm.gamma, w.embed_norm.beta);
  return unflatten_direction(tokens, ScanDirection::H, hp, wp);
}

FeatureMap patch_merge(const FeatureMap& f, const LinearWeights& lin, const LayerNormWeights& norm) {
  int64_t d = f.channels(), h = f.height(), wd = f.width();
  if (h % 2 != 0 || wd % 2 != 0) throw ConfigError("patch_merge: spatial dims must be even");
  int64_t ht = h / 2, wt = wd / 2;
  std::vector<int64_t> idx(static_cast<size_t>(ht * wt * 4 * d));
  int64_t out = 0;
  for (int64_t ty = 0; ty < ht; ++ty) {
    for (int64_t tx = 0; tx < wt; ++tx) {
      for (int64_t q = 0; q < 4; ++q) {
        int64_t dy = q / 2, dx = q % 2;
        for (int64_t c = 0; c < d; ++c) {
          idx[out++] = c * h * wd + (2 * ty + dy) * wd + (2 * tx + dx);
        }
      }
    }
  }
  Tensor grouped = take(f.tensor, idx, {ht * wt, 4 * d});
  Tensor tokens = layer_norm(linear(grouped, lin), norm.gamma, norm.beta);
  return unflatten_direction(tokens, ScanDirection::H, ht, wt);
}

FeatureMap patch_expand(const FeatureMap& f, const LinearWeights& lin) {
  int64_t d = f.channels(), h = f.height(), wd = f.width();
  if (d % 2 != 0) throw ConfigError("patch_expand: channel count must be even");
  Tensor tokens = flatten_direction(f, ScanDirection::H);   // [HW, D]
  Tensor wide = linear(tokens, lin);                        // [HW, 2D]
  int64_t half = d / 2;
  std::vector<int64_t> idx(static_cast<size_t>(4 * h * wd * half));
  int64_t out = 0;
  for (int64_t y = 0; y < 2 * h; ++y) {
    for (int64_t x = 0; x < 2 * wd; ++x) {
      int64_t sy = y / 2, sx = x / 2, q = (y % 2) * 2 + (x % 2);
      for (int64_t c = 0; c < half; ++c) {
        idx[out++] = (sy * wd + sx) * 2 * d + q * half + c;
      }
    }
  }
  Tensor shuffled = take(wide, idx, {4 * h * wd, half});
  return unflatten_direction(shuffled, ScanDirection::H, 2 * h, 2 * wd);
}

// ---------------------------------------------------------------------------
// CCS6 layer and CCViM block

FeatureMap ccs6_merge_branches(const FeatureMap& f, const CCS6Weights& w,
                               const NetworkConfig& cfg) {
  if (w.branches.empty() || w.branches.size() > 4) {
    throw ConfigError("ccs6_layer: needs 1..4 branches");
  }
  std::vector<FeatureMap> outputs;
  outputs.reserve(w.branches.size());
  for (const CCS6BranchWeights& b : w.branches) {
    if (b.spec.kind == BranchSpec::Kind::Scan) {
      Tensor seq = flatten_direction(f, b.spec.direction);
      Tensor y = selective_scan(seq, b.ssm);
      outputs.push_back(unflatten_direction(y, b.spec.direction, f.height(), f.width()));
    } else {
      CCLayerConfig cc;
      cc.centers = b.spec.centers;
      cc.window_size = cfg.cc_window;
      cc.knn_k = cfg.cc_knn;
      outputs.push_back(cc_layer(f, cc, b.cc));
    }
  }
  return cross_merge(outputs);
}

FeatureMap ccs6_layer(const FeatureMap& f, const CCS6Weights& w, const NetworkConfig& cfg) {
  FeatureMap merged = ccs6_merge_branches(f, w, cfg);
  Tensor tokens = flatten_direction(merged, ScanDirection::H);
  Tensor normed = layer_norm(tokens, w.out_norm.gamma, w.out_norm.beta);
  return unflatten_direction(normed, ScanDirection::H, f.height(), f.width());
}

FeatureMap ccvim_block(const FeatureMap& f, const BlockWeights& w, const NetworkConfig& cfg) {
  int64_t h = f.height(), wd = f.width();
  Tensor tokens = flatten_direction(f, ScanDirection::H);
  Tensor u = layer_norm(tokens, w.norm_in.gamma, w.norm_in.beta);
  Tensor gate = silu(linear(u, w.lin_gate));  // [HW, E]
  Tensor main_tok = linear(u, w.lin_main);
  FeatureMap main_map = unflatten_direction(main_tok, ScanDirection::H, h, wd);
  Tensor conv = depthwise_conv2d(main_map.tensor, w.dw_kernel, 1);
  conv = add(conv, reshape(w.dw_bias, {w.dw_bias.shape()[0], 1, 1}));
  Tensor activated = silu(conv);
  FeatureMap s6 = ccs6_layer(FeatureMap(activated), w.ccs6, cfg);
  Tensor s6_tokens = flatten_direction(s6, ScanDirection::H);
  Tensor normed = layer_norm(s6_tokens, w.norm_mid.gamma, w.norm_mid.beta);
  Tensor merged = mul(normed, gate);
  Tensor out_tokens = add(linear(merged, w.out_proj), tokens);
  return unflatten_direction(out_tokens, ScanDirection::H, h, wd);
}

// ---------------------------------------------------------------------------
// Full forward

ForwardResult forward(const Tensor& image, const NetworkConfig& cfg, const NetworkWeights& w) {
  cfg.validate();
  if (image.rank() != 3 || image.shape()[0] != 3) {
    throw DimensionError("forward: image must be [3,H,W]");
  }
  int64_t h = image.shape()[1], wd = image.shape()[2];
  if (h % 32 != 0 || wd % 32 != 0) {
    throw ConfigError("forward: H and W must be divisible by 32");
  }
  FeatureMap f = patch_embed(image, cfg, w);
  std::vector<FeatureMap> skips;
  for (int s = 0; s < 4; ++s) {
    for (const BlockWeights& b : w.enc[s]) f = ccvim_block(f, b, cfg);
    if (s < 3) {
      skips.push_back(f);
      f = patch_merge(f, w.merge[s], w.merge_norm[s]);
    }
  }
  for (int s = 0; s < 4; ++s) {
    if (s > 0) {
      f = patch_expand(f, w.expand[s - 1]);
      f = FeatureMap(add(f.tensor, skips[3 - s].tensor));  // addition skip connection
    }
    for (const BlockWeights& b : w.dec[s]) f = ccvim_block(f, b, cfg);
  }
  // Final projection: one-step 4x expansion, then per-pixel heads.
  int64_t hp = f.height(), wp = f.width(), c = f.channels();
  Tensor tokens = flatten_direction(f, ScanDirection::H);
  Tensor wide = linear(tokens, w.final_expand);  // [HW, 16C]
  std::vector<int64_t> idx(static_cast<size_t>(16 * hp * wp * c));
  int64_t out = 0;
  for (int64_t y = 0; y < 4 * hp; ++y) {
    for (int64_t x = 0; x < 4 * wp; ++x) {
      int64_t sy = y / 4, sx = x / 4, q = (y % 4) * 4 + (x % 4);
      for (int64_t ch = 0; ch < c; ++ch) {
        idx[out++] = (sy * wp + sx) * 16 * c + q * c + ch;
      }
    }
  }
  Tensor pixels = take(wide, idx, {16 * hp * wp, c});  // [H*W, C]
  ForwardResult result;
  Tensor logits_tok = linear(pixels, w.head_seg);
  result.logits = unflatten_direction(logits_tok, ScanDirection::H, h, wd).tensor;
  if (cfg.instance_head) {
    Tensor hv_tok = linear(pixels, w.head_hv);
    result.hv = unflatten_direction(hv_tok, ScanDirection::H, h, wd).tensor;
  }
  return result;
}

}  // namespace ccvim

#pragma once

#include <array>
#include <string>
#include <vector>

#include "ccvim/context_cluster.hpp"
#include "ccvim/scan_paths.hpp"
#include "ccvim/ssm.hpp"
#include "ccvim/tensor.hpp"

namespace ccvim {

// One slot of a CCS6 layer: a directional scan or a CC layer variant.
struct BranchSpec {
  enum class Kind { Scan, CC };
  Kind kind = Kind::Scan;
  ScanDirection direction = ScanDirection::H;
  int64_t centers = 4;  // CC only: 4 or 25
};

// Tokens: h, hflip, v, vflip, cc4, cc25 (c4/c25 accepted as aliases).
BranchSpec parse_branch_token(const std::string& token);
std::string branch_token(const BranchSpec& spec);

using BranchList = std::vector<BranchSpec>;          // 1..4 slots per layer
using StagePlan = std::vector<BranchList>;           // per block of a stage

struct NetworkConfig {
  int64_t base_channels = 8;
  std::array<int, 4> enc_depths{2, 2, 2, 2};
  std::array<int, 4> dec_depths{2, 2, 2, 2};
  std::vector<StagePlan> enc_plan;  // [4][depth][branches]
  std::vector<StagePlan> dec_plan;
  int64_t state_size = 8;
  int64_t num_classes = 2;
  bool instance_head = false;
  int64_t cc_window = 8;
  int64_t cc_knn = 4;

  void validate() const;
};

// Default plan: encoder layers scan h/hflip plus both CC variants, decoder
// layers mirror with v/vflip.
void fill_default_plan(NetworkConfig& cfg);

struct BranchPlan {
  std::vector<StagePlan> enc;
  std::vector<StagePlan> dec;
};

// Parse the [branches] section of a plain-text config file. Per-layer lines
// "encK.layerJ = a,b,c,d" (or stageK/decK) require exactly four tokens; the
// "plan = h-hflip-C4-C25" shorthand (1..4 tokens) applies to every layer.
BranchPlan load_branch_plan(const std::string& path);

struct LayerNormWeights {
  Tensor gamma;
  Tensor beta;
};

struct CCS6BranchWeights {
  BranchSpec spec;
  SSMParams ssm;      // Scan branches
  CCLayerWeights cc;  // CC branches
};

struct CCS6Weights {
  std::vector<CCS6BranchWeights> branches;
  LayerNormWeights out_norm;
};

struct BlockWeights {
  LayerNormWeights norm_in;
  LinearWeights lin_gate;  // D -> E, first branch
  LinearWeights lin_main;  // D -> E, second branch
  Tensor dw_kernel;        // [E,3,3]
  Tensor dw_bias;          // [E]
  CCS6Weights ccs6;
  LayerNormWeights norm_mid;
  LinearWeights out_proj;  // E -> D
};

struct NetworkWeights {
  LinearWeights embed;  // 48 -> C
  LayerNormWeights embed_norm;
  std::vector<std::vector<BlockWeights>> enc;
  std::array<LinearWeights, 3> merge;
  std::array<LayerNormWeights, 3> merge_norm;
  std::vector<std::vector<BlockWeights>> dec;
  std::array<LinearWeights, 3> expand;
  LinearWeights final_expand;  // C -> 16C
  LinearWeights head_seg;      // C -> num_classes
  LinearWeights head_hv;       // C -> 2 when instance_head
};

NetworkWeights make_network_weights(const NetworkConfig& cfg, uint64_t seed);

// Named parameter registry in a fixed construction order.
struct ParamSet {
  std::vector<std::pair<std::string, Tensor>> items;
  void add(const std::string& name, const Tensor& t) { items.emplace_back(name, t); }
  Tensor* find(const std::string& name);
  int64_t total_elements() const;
};

ParamSet collect_parameters(NetworkWeights& w, const NetworkConfig& cfg);

// Checkpoint directory: manifest.txt of "name dims..." plus one CCVT file
// per tensor.
void save_weights(const std::string& dir, const ParamSet& params);
void load_weights(const std::string& dir, ParamSet& params);

// 4x4 patch embedding to base channels with layer norm. image: [3,H,W].
FeatureMap patch_embed(const Tensor& image, const NetworkConfig& cfg, const NetworkWeights& w);

// 2x2 neighborhood concatenation, then linear 4D -> 2D with layer norm.
FeatureMap patch_merge(const FeatureMap& f, const LinearWeights& lin, const LayerNormWeights& norm);

// Linear D -> 2D then pixel shuffle to D/2 x 2H x 2W.
FeatureMap patch_expand(const FeatureMap& f, const LinearWeights& lin);

// Sum of the branch outputs before the trailing layer norm.
FeatureMap ccs6_merge_branches(const FeatureMap& f, const CCS6Weights& w, const NetworkConfig& cfg);

// Four-branch selective layer: scans and CC layers merged by summation,
// then layer norm.
FeatureMap ccs6_layer(const FeatureMap& f, const CCS6Weights& w, const NetworkConfig& cfg);

// Gated residual block around the CCS6 layer.
FeatureMap ccvim_block(const FeatureMap& f, const BlockWeights& w, const NetworkConfig& cfg);

struct ForwardResult {
  Tensor logits;  // [num_classes, H, W]
  Tensor hv;      // [2, H, W] when instance_head, else undefined
};

ForwardResult forward(const Tensor& image, const NetworkConfig& cfg, const NetworkWeights& w);

}  // namespace ccvim

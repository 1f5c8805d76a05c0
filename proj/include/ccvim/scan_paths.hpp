#pragma once

#include <vector>

#include "ccvim/tensor.hpp"

namespace ccvim {

// Spatial feature carrier: channels-first [D,H,W].
struct FeatureMap {
  Tensor tensor;

  FeatureMap() = default;
  explicit FeatureMap(Tensor t);

  int64_t channels() const { return tensor.shape()[0]; }
  int64_t height() const { return tensor.shape()[1]; }
  int64_t width() const { return tensor.shape()[2]; }
};

// The four cross-scan orderings. H walks rows (y then x), V walks columns
// (x then y); the flipped variants reverse the respective traversal.
enum class ScanDirection { H, HFlip, V, VFlip };

constexpr ScanDirection kAllDirections[] = {ScanDirection::H, ScanDirection::HFlip,
                                            ScanDirection::V, ScanDirection::VFlip};

const char* direction_name(ScanDirection d);

// Sequence position -> spatial index (y*W + x) for a given direction.
std::vector<int64_t> scan_order(ScanDirection d, int64_t h, int64_t w);

// Flatten a [D,H,W] map into an [HW,D] token sequence along a direction.
Tensor flatten_direction(const FeatureMap& f, ScanDirection d);

// Exact inverse permutation of flatten_direction.
FeatureMap unflatten_direction(const Tensor& seq, ScanDirection d, int64_t h, int64_t w);

// Elementwise sum of same-shape branch outputs.
FeatureMap cross_merge(const std::vector<FeatureMap>& branches);

}  // namespace ccvim

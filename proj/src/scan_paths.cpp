#include "ccvim/scan_paths.hpp"

#include <algorithm>

namespace ccvim {

FeatureMap::FeatureMap(Tensor t) : tensor(std::move(t)) {
  if (tensor.rank() != 3) {
    throw DimensionError("FeatureMap expects [D,H,W], got " + shape_str(tensor.shape()));
  }
}

const char* direction_name(ScanDirection d) {
  switch (d) {
    case ScanDirection::H: return "h";
    case ScanDirection::HFlip: return "hflip";
    case ScanDirection::V: return "v";
    case ScanDirection::VFlip: return "vflip";
  }
  return "?";
}

std::vector<int64_t> scan_order(ScanDirection d, int64_t h, int64_t w) {
  std::vector<int64_t> order(static_cast<size_t>(h * w));
  switch (d) {
    case ScanDirection::H:
      for (int64_t s = 0; s < h * w; ++s) order[s] = s;
      break;
    case ScanDirection::HFlip:
      for (int64_t s = 0; s < h * w; ++s) order[s] = h * w - 1 - s;
      break;
    case ScanDirection::V: {
      int64_t s = 0;
      for (int64_t x = 0; x < w; ++x) {
        for (int64_t y = 0; y < h; ++y) order[s++] = y * w + x;
      }
      break;
    }
    case ScanDirection::VFlip: {
      int64_t s = 0;
      for (int64_t x = w - 1; x >= 0; --x) {
        for (int64_t y = h - 1; y >= 0; --y) order[s++] = y * w + x;
      }
      break;
    }
  }
  return order;
}

Tensor flatten_direction(const FeatureMap& f, ScanDirection d) {
  int64_t ch = f.channels(), h = f.height(), w = f.width();
  std::vector<int64_t> order = scan_order(d, h, w);
  std::vector<int64_t> idx(static_cast<size_t>(h * w * ch));
  for (int64_t s = 0; s < h * w; ++s) {
    for (int64_t c = 0; c < ch; ++c) idx[s * ch + c] = c * h * w + order[s];
  }
  return take(f.tensor, idx, {h * w, ch});
}

FeatureMap unflatten_direction(const Tensor& seq, ScanDirection d, int64_t h, int64_t w) {
  if (seq.rank() != 2 || seq.shape()[0] != h * w) {
    throw DimensionError("unflatten_direction: sequence " + shape_str(seq.shape()) +
                         " does not cover " + std::to_string(h) + "x" + std::to_string(w));
  }
  int64_t ch = seq.shape()[1];
  std::vector<int64_t> order = scan_order(d, h, w);
  std::vector<int64_t> inv(static_cast<size_t>(h * w));
  for (int64_t s = 0; s < h * w; ++s) inv[order[s]] = s;
  std::vector<int64_t> idx(static_cast<size_t>(h * w * ch));
  for (int64_t c = 0; c < ch; ++c) {
    for (int64_t p = 0; p < h * w; ++p) idx[c * h * w + p] = inv[p] * ch + c;
  }
  return FeatureMap(take(seq, idx, {ch, h, w}));
}

FeatureMap cross_merge(const std::vector<FeatureMap>& branches) {
  if (branches.empty()) throw DimensionError("cross_merge: no branches");
  Tensor acc = branches[0].tensor;
  for (size_t i = 1; i < branches.size(); ++i) {
    if (branches[i].tensor.shape() != acc.shape()) {
      throw DimensionError("cross_merge: branch shapes differ: " + shape_str(acc.shape()) +
                           " vs " + shape_str(branches[i].tensor.shape()));
    }
    acc = add(acc, branches[i].tensor);
  }
  return FeatureMap(acc);
}

}  // namespace ccvim

#pragma once

#include <cstdint>
#include <vector>

#include "ccvim/errors.hpp"

namespace ccvim {

// 2D integer label image: 0 = background, k > 0 = instance id. Ids need not
// be contiguous; each connected region of one id counts as one instance.
struct IntMap {
  int64_t h = 0, w = 0;
  std::vector<int32_t> v;

  IntMap() = default;
  IntMap(int64_t height, int64_t width, int32_t fill = 0)
      : h(height), w(width), v(static_cast<size_t>(height * width), fill) {}

  int32_t& at(int64_t y, int64_t x) { return v[static_cast<size_t>(y * w + x)]; }
  int32_t at(int64_t y, int64_t x) const { return v[static_cast<size_t>(y * w + x)]; }
  bool same_shape(const IntMap& o) const { return h == o.h && w == o.w; }
};

struct RealMap {
  int64_t h = 0, w = 0;
  std::vector<double> v;

  RealMap() = default;
  RealMap(int64_t height, int64_t width, double fill = 0.0)
      : h(height), w(width), v(static_cast<size_t>(height * width), fill) {}

  double& at(int64_t y, int64_t x) { return v[static_cast<size_t>(y * w + x)]; }
  double at(int64_t y, int64_t x) const { return v[static_cast<size_t>(y * w + x)]; }
};

// Hard threshold: 1 where value > thr, else 0.
IntMap threshold_map(const RealMap& p, double thr);

// 4-connected components over equal nonzero values, relabeled 1..K in
// row-major discovery order.
IntMap label_components(const IntMap& m);

}  // namespace ccvim

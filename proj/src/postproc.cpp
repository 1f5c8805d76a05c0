#include "ccvim/postproc.hpp"

#include <algorithm>
#include <cmath>
#include <queue>
#include <tuple>
#include <vector>

namespace ccvim {

DistanceMaps distance_targets(const IntMap& instances) {
  IntMap labels = label_components(instances);
  int32_t count = 0;
  for (int32_t v : labels.v) count = std::max(count, v);
  DistanceMaps d{RealMap(instances.h, instances.w), RealMap(instances.h, instances.w)};
  if (count == 0) return d;
  std::vector<double> cx(static_cast<size_t>(count) + 1, 0.0);
  std::vector<double> cy(static_cast<size_t>(count) + 1, 0.0);
  std::vector<int64_t> n(static_cast<size_t>(count) + 1, 0);
  for (int64_t y = 0; y < labels.h; ++y) {
    for (int64_t x = 0; x < labels.w; ++x) {
      int32_t id = labels.at(y, x);
      if (id == 0) continue;
      cx[id] += static_cast<double>(x);
      cy[id] += static_cast<double>(y);
      n[id]++;
    }
  }
  for (int32_t id = 1; id <= count; ++id) {
    cx[id] /= static_cast<double>(n[id]);
    cy[id] /= static_cast<double>(n[id]);
  }
  std::vector<double> max_dx(static_cast<size_t>(count) + 1, 0.0);
  std::vector<double> max_dy(static_cast<size_t>(count) + 1, 0.0);
  for (int64_t y = 0; y < labels.h; ++y) {
    for (int64_t x = 0; x < labels.w; ++x) {
      int32_t id = labels.at(y, x);
      if (id == 0) continue;
      max_dx[id] = std::max(max_dx[id], std::abs(static_cast<double>(x) - cx[id]));
      max_dy[id] = std::max(max_dy[id], std::abs(static_cast<double>(y) - cy[id]));
    }
  }
  for (int64_t y = 0; y < labels.h; ++y) {
    for (int64_t x = 0; x < labels.w; ++x) {
      int32_t id = labels.at(y, x);
      if (id == 0) continue;
      double dx = static_cast<double>(x) - cx[id];
      double dy = static_cast<double>(y) - cy[id];
      d.ph.at(y, x) = max_dx[id] > 0.0 ? dx / max_dx[id] : 0.0;
      d.pv.at(y, x) = max_dy[id] > 0.0 ? dy / max_dy[id] : 0.0;
    }
  }
  return d;
}

namespace {

// 3x3 Sobel magnitude with replicate-padded borders.
RealMap sobel_magnitude(const RealMap& m) {
  static const double gx[9] = {-1, 0, 1, -2, 0, 2, -1, 0, 1};
  static const double gy[9] = {-1, -2, -1, 0, 0, 0, 1, 2, 1};
  RealMap out(m.h, m.w);
  for (int64_t y = 0; y < m.h; ++y) {
    for (int64_t x = 0; x < m.w; ++x) {
      double sx = 0.0, sy = 0.0;
      for (int64_t u = -1; u <= 1; ++u) {
        for (int64_t v = -1; v <= 1; ++v) {
          int64_t yy = std::clamp<int64_t>(y + u, 0, m.h - 1);
          int64_t xx = std::clamp<int64_t>(x + v, 0, m.w - 1);
          double w = m.at(yy, xx);
          sx += gx[(u + 1) * 3 + (v + 1)] * w;
          sy += gy[(u + 1) * 3 + (v + 1)] * w;
        }
      }
      out.at(y, x) = std::sqrt(sx * sx + sy * sy);
    }
  }
  return out;
}

void minmax_normalize(RealMap& m) {
  double lo = m.v.empty() ? 0.0 : m.v[0], hi = lo;
  for (double v : m.v) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  if (hi - lo <= 0.0) {
    std::fill(m.v.begin(), m.v.end(), 0.0);
    return;
  }
  for (double& v : m.v) v = (v - lo) / (hi - lo);
}

}  // namespace

RealMap fused_gradient(const DistanceMaps& d) {
  RealMap gh = sobel_magnitude(d.ph);
  RealMap gv = sobel_magnitude(d.pv);
  minmax_normalize(gh);
  minmax_normalize(gv);
  RealMap out(d.ph.h, d.ph.w);
  for (size_t i = 0; i < out.v.size(); ++i) out.v[i] = std::max(gh.v[i], gv.v[i]);
  return out;
}

IntMap extract_markers(const RealMap& prob, const RealMap& ms, const WatershedParams& params) {
  params.validate();
  IntMap tp = threshold_map(prob, params.r);
  IntMap tm = threshold_map(ms, params.k_grad);
  IntMap marker_mask(prob.h, prob.w);
  for (size_t i = 0; i < marker_mask.v.size(); ++i) {
    int32_t diff = tp.v[i] - tm.v[i];  // delta() zeroes the negatives
    marker_mask.v[i] = diff > 0 ? 1 : 0;
  }
  return label_components(marker_mask);
}

RealMap energy_landscape(const RealMap& prob, const RealMap& ms, const WatershedParams& params) {
  params.validate();
  IntMap tm = threshold_map(ms, params.k_grad);
  IntMap tp = threshold_map(prob, params.h_prob);
  RealMap out(prob.h, prob.w);
  for (size_t i = 0; i < out.v.size(); ++i) {
    out.v[i] = static_cast<double>((1 - tm.v[i]) * tp.v[i]);
  }
  return out;
}

IntMap marker_watershed(const IntMap& markers, const RealMap& energy, const IntMap& mask,
                        bool* dropped_marker) {
  if (!markers.same_shape(mask) || markers.h != energy.h || markers.w != energy.w) {
    throw DimensionError("marker_watershed: shapes disagree");
  }
  if (dropped_marker) *dropped_marker = false;
  IntMap result(markers.h, markers.w);
  // Pop order: higher energy first, then lower label, then pixel index.
  using Item = std::tuple<double, int32_t, int64_t>;
  auto cmp = [](const Item& a, const Item& b) {
    if (std::get<0>(a) != std::get<0>(b)) return std::get<0>(a) < std::get<0>(b);
    if (std::get<1>(a) != std::get<1>(b)) return std::get<1>(a) > std::get<1>(b);
    return std::get<2>(a) > std::get<2>(b);
  };
  std::priority_queue<Item, std::vector<Item>, decltype(cmp)> queue(cmp);
  int32_t max_label = 0;
  for (int32_t v : markers.v) max_label = std::max(max_label, v);
  std::vector<bool> seen_inside(static_cast<size_t>(max_label) + 1, false);
  std::vector<bool> seen_at_all(static_cast<size_t>(max_label) + 1, false);
  for (int64_t p = 0; p < markers.h * markers.w; ++p) {
    int32_t label = markers.v[p];
    if (label == 0) continue;
    seen_at_all[label] = true;
    if (mask.v[p] == 0) continue;  // markers are clipped to the mask
    seen_inside[label] = true;
    if (result.v[p] == 0) {
      result.v[p] = label;
      queue.push({energy.v[p], label, p});
    }
  }
  if (dropped_marker) {
    for (int32_t l = 1; l <= max_label; ++l) {
      if (seen_at_all[l] && !seen_inside[l]) *dropped_marker = true;
    }
  }
  while (!queue.empty()) {
    auto [e, label, p] = queue.top();
    queue.pop();
    int64_t y = p / markers.w, x = p % markers.w;
    const int64_t ny[4] = {y - 1, y + 1, y, y};
    const int64_t nx[4] = {x, x, x - 1, x + 1};
    for (int k = 0; k < 4; ++k) {
      if (ny[k] < 0 || ny[k] >= markers.h || nx[k] < 0 || nx[k] >= markers.w) continue;
      int64_t q = ny[k] * markers.w + nx[k];
      if (mask.v[q] == 0 || result.v[q] != 0) continue;
      result.v[q] = label;
      queue.push({energy.v[q], label, q});
    }
  }
  return result;
}

IntMap postprocess(const RealMap& prob, const DistanceMaps& d, const WatershedParams& params) {
  if (prob.h != d.ph.h || prob.w != d.ph.w || prob.h != d.pv.h || prob.w != d.pv.w) {
    throw DimensionError("postprocess: map shapes disagree");
  }
  RealMap ms = fused_gradient(d);
  IntMap markers = extract_markers(prob, ms, params);
  RealMap energy = energy_landscape(prob, ms, params);
  IntMap mask = threshold_map(prob, params.h_prob);
  return marker_watershed(markers, energy, mask, nullptr);
}

}  // namespace ccvim

#include "ccvim/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>

namespace ccvim {

namespace {

void require_same_shape(const IntMap& a, const IntMap& b, const char* who) {
  if (!a.same_shape(b)) {
    throw DimensionError(std::string(who) + ": map shapes differ (" + std::to_string(a.h) + "x" +
                         std::to_string(a.w) + " vs " + std::to_string(b.h) + "x" +
                         std::to_string(b.w) + ")");
  }
}

double safe_ratio(double num, double den, bool vacuous_ok) {
  if (den > 0.0) return num / den;
  return vacuous_ok ? 1.0 : 0.0;
}

struct InstanceIndex {
  IntMap labels;                 // components 1..count
  int32_t count = 0;
  std::vector<int64_t> area;     // [count+1]
};

InstanceIndex build_instances(const IntMap& m) {
  InstanceIndex idx;
  idx.labels = label_components(m);
  for (int32_t v : idx.labels.v) idx.count = std::max(idx.count, v);
  idx.area.assign(static_cast<size_t>(idx.count) + 1, 0);
  for (int32_t v : idx.labels.v) {
    if (v > 0) idx.area[static_cast<size_t>(v)]++;
  }
  return idx;
}

// intersection[(g,p)] for overlapping instance pairs.
std::map<std::pair<int32_t, int32_t>, int64_t> intersections(const InstanceIndex& gt,
                                                             const InstanceIndex& pred) {
  std::map<std::pair<int32_t, int32_t>, int64_t> inter;
  for (size_t i = 0; i < gt.labels.v.size(); ++i) {
    int32_t g = gt.labels.v[i], p = pred.labels.v[i];
    if (g > 0 && p > 0) inter[{g, p}]++;
  }
  return inter;
}

}  // namespace

BinaryStats binary_stats(const IntMap& pred, const IntMap& gt) {
  require_same_shape(pred, gt, "binary_stats");
  int64_t tp = 0, fp = 0, fn = 0, tn = 0;
  for (size_t i = 0; i < pred.v.size(); ++i) {
    bool p = pred.v[i] != 0, g = gt.v[i] != 0;
    if (p && g) ++tp;
    else if (p && !g) ++fp;
    else if (!p && g) ++fn;
    else ++tn;
  }
  BinaryStats s;
  s.miou = safe_ratio(static_cast<double>(tp), static_cast<double>(tp + fp + fn), true);
  s.dsc = safe_ratio(2.0 * static_cast<double>(tp), static_cast<double>(2 * tp + fp + fn), true);
  s.acc = safe_ratio(static_cast<double>(tp + tn), static_cast<double>(tp + fp + fn + tn), true);
  s.sen = safe_ratio(static_cast<double>(tp), static_cast<double>(tp + fn), true);
  s.spe = safe_ratio(static_cast<double>(tn), static_cast<double>(tn + fp), true);
  return s;
}

PQResult pq_dq_sq(const IntMap& pred, const IntMap& gt) {
  require_same_shape(pred, gt, "pq_dq_sq");
  InstanceIndex gi = build_instances(gt);
  InstanceIndex pi = build_instances(pred);
  auto inter = intersections(gi, pi);
  int64_t tp = 0;
  double iou_sum = 0.0;
  for (const auto& [pair, cnt] : inter) {
    auto [g, p] = pair;
    double uni = static_cast<double>(gi.area[g] + pi.area[p] - cnt);
    double iou = static_cast<double>(cnt) / uni;
    if (iou > 0.5) {  // IoU > 0.5 matches are unique by construction
      ++tp;
      iou_sum += iou;
    }
  }
  int64_t fp = pi.count - tp;
  int64_t fn = gi.count - tp;
  PQResult r;
  double den = static_cast<double>(tp) + 0.5 * static_cast<double>(fp) + 0.5 * static_cast<double>(fn);
  r.dq = den > 0.0 ? static_cast<double>(tp) / den : 1.0;
  if (tp > 0) {
    r.sq = iou_sum / static_cast<double>(tp);
  } else {
    r.sq = (gi.count == 0 && pi.count == 0) ? 1.0 : 0.0;
  }
  r.pq = r.dq * r.sq;
  return r;
}

double aji(const IntMap& pred, const IntMap& gt) {
  require_same_shape(pred, gt, "aji");
  InstanceIndex gi = build_instances(gt);
  InstanceIndex pi = build_instances(pred);
  if (gi.count == 0 && pi.count == 0) return 1.0;
  auto inter = intersections(gi, pi);
  // Overlaps per gt instance, ordered by pred id for deterministic ties.
  std::vector<std::vector<std::pair<int32_t, int64_t>>> overlaps(static_cast<size_t>(gi.count) + 1);
  for (const auto& [pair, cnt] : inter) overlaps[static_cast<size_t>(pair.first)].push_back({pair.second, cnt});
  std::vector<bool> used(static_cast<size_t>(pi.count) + 1, false);
  int64_t c_sum = 0;
  int64_t u_sum = 0;
  for (int32_t g = 1; g <= gi.count; ++g) {
    double best_iou = -1.0;
    int32_t best_p = 0;
    int64_t best_i = 0;
    for (const auto& [p, cnt] : overlaps[static_cast<size_t>(g)]) {
      if (used[static_cast<size_t>(p)]) continue;
      double iou = static_cast<double>(cnt) /
                   static_cast<double>(gi.area[g] + pi.area[p] - cnt);
      if (iou > best_iou) {
        best_iou = iou;
        best_p = p;
        best_i = cnt;
      }
    }
    if (best_p > 0) {
      used[static_cast<size_t>(best_p)] = true;
      c_sum += best_i;
      u_sum += gi.area[g] + pi.area[best_p] - best_i;
    } else {
      u_sum += gi.area[g];  // unmatched ground truth, union with nothing
    }
  }
  for (int32_t p = 1; p <= pi.count; ++p) {
    if (!used[static_cast<size_t>(p)]) u_sum += pi.area[p];
  }
  if (u_sum == 0) return 1.0;
  return static_cast<double>(c_sum) / static_cast<double>(u_sum);
}

double ensemble_dice(const IntMap& pred, const IntMap& gt) {
  require_same_shape(pred, gt, "ensemble_dice");
  int64_t inter = 0, a = 0, b = 0;
  for (size_t i = 0; i < pred.v.size(); ++i) {
    bool p = pred.v[i] != 0, g = gt.v[i] != 0;
    a += p;
    b += g;
    inter += p && g;
  }
  if (a + b == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(a + b);
}

namespace {

std::vector<std::pair<int64_t, int64_t>> boundary_pixels(const IntMap& m) {
  std::vector<std::pair<int64_t, int64_t>> out;
  for (int64_t y = 0; y < m.h; ++y) {
    for (int64_t x = 0; x < m.w; ++x) {
      if (m.at(y, x) == 0) continue;
      bool edge = y == 0 || y == m.h - 1 || x == 0 || x == m.w - 1;
      if (!edge) {
        edge = m.at(y - 1, x) == 0 || m.at(y + 1, x) == 0 || m.at(y, x - 1) == 0 ||
               m.at(y, x + 1) == 0;
      }
      if (edge) out.emplace_back(y, x);
    }
  }
  return out;
}

double percentile95(std::vector<double>& values) {
  std::sort(values.begin(), values.end());
  double pos = 0.95 * static_cast<double>(values.size() - 1);
  size_t lo = static_cast<size_t>(pos);
  double frac = pos - static_cast<double>(lo);
  if (lo + 1 >= values.size()) return values.back();
  return values[lo] * (1.0 - frac) + values[lo + 1] * frac;
}

double directed_hd95(const std::vector<std::pair<int64_t, int64_t>>& from,
                     const std::vector<std::pair<int64_t, int64_t>>& to) {
  std::vector<double> dist;
  dist.reserve(from.size());
  for (auto [ya, xa] : from) {
    double best = std::numeric_limits<double>::infinity();
    for (auto [yb, xb] : to) {
      double d2 = static_cast<double>((ya - yb) * (ya - yb) + (xa - xb) * (xa - xb));
      best = std::min(best, d2);
    }
    dist.push_back(std::sqrt(best));
  }
  return percentile95(dist);
}

}  // namespace

HD95Result hd95(const IntMap& pred, const IntMap& gt, double spacing) {
  require_same_shape(pred, gt, "hd95");
  HD95Result r;
  auto bp = boundary_pixels(pred);
  auto bg = boundary_pixels(gt);
  if (bp.empty() || bg.empty()) {
    r.empty_mask = true;
    r.value = std::sqrt(static_cast<double>(pred.h * pred.h + pred.w * pred.w)) * spacing;
    return r;
  }
  r.value = std::max(directed_hd95(bp, bg), directed_hd95(bg, bp)) * spacing;
  return r;
}

double MetricsReport::get(const std::string& name) const {
  for (const auto& [n, v] : values) {
    if (n == name) return v;
  }
  throw ContractError("MetricsReport: no metric named '" + name + "'");
}

void write_report_csv(const std::string& path, const std::vector<std::string>& names,
                      const std::vector<MetricsReport>& rows) {
  std::ofstream os(path);
  if (!os) throw ConfigError("cannot write report: " + path);
  os << "image";
  for (const auto& n : names) os << "," << n;
  os << "\n";
  char buf[64];
  std::vector<double> sums(names.size(), 0.0);
  for (size_t i = 0; i < rows.size(); ++i) {
    os << i;
    for (size_t j = 0; j < names.size(); ++j) {
      double v = rows[i].get(names[j]);
      sums[j] += v;
      std::snprintf(buf, sizeof buf, "%.10g", v);
      os << "," << buf;
    }
    os << "\n";
  }
  os << "mean";
  for (size_t j = 0; j < names.size(); ++j) {
    double m = rows.empty() ? 0.0 : sums[j] / static_cast<double>(rows.size());
    std::snprintf(buf, sizeof buf, "%.10g", m);
    os << "," << buf;
  }
  os << "\n";
}

}  // namespace ccvim

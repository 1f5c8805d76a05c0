#pragma once

#include <map>
#include <set>
#include <string>
#include <vector>

#include "ccvim/maps.hpp"

namespace ccvim {

struct BinaryStats {
  double miou = 0.0;  // foreground IoU
  double dsc = 0.0;
  double acc = 0.0;
  double sen = 0.0;
  double spe = 0.0;
};

// Confusion-matrix metrics over binary maps. Vacuously satisfied zero
// denominators score 1.0, impossible ones 0.0.
BinaryStats binary_stats(const IntMap& pred, const IntMap& gt);

struct PQResult {
  double pq = 0.0;
  double dq = 0.0;
  double sq = 0.0;
};

// Panoptic quality with the IoU > 0.5 unique-matching rule.
PQResult pq_dq_sq(const IntMap& pred, const IntMap& gt);

// Aggregated Jaccard index: greedy best-IoU match per ground-truth instance,
// unmatched prediction pixels are added to the denominator.
double aji(const IntMap& pred, const IntMap& gt);

// Pixel-level Dice of the binarized any-instance masks.
double ensemble_dice(const IntMap& pred, const IntMap& gt);

struct HD95Result {
  double value = 0.0;
  bool empty_mask = false;  // a mask was empty; value is the image diagonal
};

// 95th-percentile symmetric boundary Hausdorff distance, Euclidean, with
// linear-interpolation percentiles. spacing scales pixel distances.
HD95Result hd95(const IntMap& pred, const IntMap& gt, double spacing = 1.0);

// Named scalar results for one image, plus convention flags.
struct MetricsReport {
  std::vector<std::pair<std::string, double>> values;
  std::set<std::string> flags;

  void add(const std::string& name, double value) { values.emplace_back(name, value); }
  double get(const std::string& name) const;
};

// CSV: header of metric names, one row per image, final mean row.
void write_report_csv(const std::string& path, const std::vector<std::string>& names,
                      const std::vector<MetricsReport>& rows);

}  // namespace ccvim

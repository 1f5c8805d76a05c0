#include "ccvim/context_cluster.hpp"

#include <limits>
#include <algorithm>
#include <cmath>
#include <numeric>

namespace ccvim {

void CCLayerConfig::validate() const {
  int64_t sq = static_cast<int64_t>(std::llround(std::sqrt(static_cast<double>(centers))));
  if (centers < 1 || sq * sq != centers) {
    throw ConfigError("CC layer: centers must be a perfect square, got " + std::to_string(centers));
  }
  if (window_size < 1 || window_size * window_size < centers) {
    throw ConfigError("CC layer: window^2 must cover the centers");
  }
  if (knn_k < 1) throw ConfigError("CC layer: knn_k must be >= 1");
}

WindowPartition partition_grid(int64_t h, int64_t w, const CCLayerConfig& cfg) {
  cfg.validate();
  WindowPartition part;
  part.map_h = h;
  part.map_w = w;
  part.window = cfg.window_size;
  int64_t win = cfg.window_size;
  int64_t tiles_y = (h + win - 1) / win;
  int64_t tiles_x = (w + win - 1) / win;
  for (int64_t ty = 0; ty < tiles_y; ++ty) {
    for (int64_t tx = 0; tx < tiles_x; ++tx) {
      WindowPartition::Window window;
      for (int64_t ly = 0; ly < win; ++ly) {
        int64_t y = ty * win + ly;
        if (y >= h) break;
        for (int64_t lx = 0; lx < win; ++lx) {
          int64_t x = tx * win + lx;
          if (x >= w) break;
          window.spatial.push_back(y * w + x);
          window.pos.push_back({ly, lx});
        }
      }
      part.windows.push_back(std::move(window));
    }
  }
  return part;
}

std::vector<Tensor> partition_windows(const FeatureMap& f, const CCLayerConfig& cfg,
                                      WindowPartition* descriptor) {
  WindowPartition desc = partition_grid(f.height(), f.width(), cfg);
  Tensor tokens = flatten_direction(f, ScanDirection::H);  // [HW, D]
  int64_t d = f.channels();
  std::vector<Tensor> out;
  for (const auto& win : desc.windows) {
    std::vector<int64_t> idx;
    idx.reserve(win.spatial.size() * d);
    for (int64_t row : win.spatial) {
      for (int64_t c = 0; c < d; ++c) idx.push_back(row * d + c);
    }
    out.push_back(take(tokens, idx, {static_cast<int64_t>(win.spatial.size()), d}));
  }
  if (descriptor) *descriptor = std::move(desc);
  return out;
}

FeatureMap reassemble_windows(const std::vector<Tensor>& windows, const WindowPartition& desc,
                              int64_t channels) {
  if (windows.size() != desc.windows.size()) {
    throw DimensionError("reassemble_windows: window count mismatch");
  }
  Tensor all = concat0(windows);  // [sum(n_w), D]
  int64_t hw = desc.map_h * desc.map_w;
  std::vector<int64_t> row_of(static_cast<size_t>(hw), -1);
  int64_t offset = 0;
  for (const auto& win : desc.windows) {
    for (size_t i = 0; i < win.spatial.size(); ++i) {
      row_of[win.spatial[i]] = offset + static_cast<int64_t>(i);
    }
    offset += static_cast<int64_t>(win.spatial.size());
  }
  std::vector<int64_t> idx(static_cast<size_t>(channels * hw));
  for (int64_t c = 0; c < channels; ++c) {
    for (int64_t p = 0; p < hw; ++p) {
      if (row_of[p] < 0) throw DimensionError("reassemble_windows: uncovered position");
      idx[c * hw + p] = row_of[p] * channels + c;
    }
  }
  return FeatureMap(take(all, idx, {channels, desc.map_h, desc.map_w}));
}

std::vector<std::vector<int64_t>> center_knn_indices(
    const std::vector<std::array<int64_t, 2>>& positions, const CCLayerConfig& cfg) {
  cfg.validate();
  int64_t n = static_cast<int64_t>(positions.size());
  if (n < 1) throw ContractError("center_knn_indices: empty window");
  int64_t sq = static_cast<int64_t>(std::llround(std::sqrt(static_cast<double>(cfg.centers))));
  int64_t k = std::min<int64_t>(cfg.knn_k, n);
  std::vector<std::vector<int64_t>> groups;
  groups.reserve(static_cast<size_t>(cfg.centers));
  std::vector<int64_t> order(static_cast<size_t>(n));
  for (int64_t gy = 0; gy < sq; ++gy) {
    for (int64_t gx = 0; gx < sq; ++gx) {
      double ay = (static_cast<double>(gy) + 0.5) / static_cast<double>(sq) *
                      static_cast<double>(cfg.window_size) - 0.5;
      double ax = (static_cast<double>(gx) + 0.5) / static_cast<double>(sq) *
                      static_cast<double>(cfg.window_size) - 0.5;
      std::iota(order.begin(), order.end(), 0);
      std::sort(order.begin(), order.end(), [&](int64_t lhs, int64_t rhs) {
        double dl = (positions[lhs][0] - ay) * (positions[lhs][0] - ay) +
                    (positions[lhs][1] - ax) * (positions[lhs][1] - ax);
        double dr = (positions[rhs][0] - ay) * (positions[rhs][0] - ay) +
                    (positions[rhs][1] - ax) * (positions[rhs][1] - ax);
        if (dl != dr) return dl < dr;
        return lhs < rhs;  // tie-break: lowest flat point index
      });
      std::vector<int64_t> group(order.begin(), order.begin() + k);
      // Summation in index order, so anchors with the same k-NN set produce
      // bitwise-identical centers.
      std::sort(group.begin(), group.end());
      groups.push_back(std::move(group));
    }
  }
  return groups;
}

Tensor group_mean(const Tensor& points, const std::vector<std::vector<int64_t>>& groups) {
  if (points.rank() != 2) throw DimensionError("group_mean: points must be [n,d]");
  int64_t n = points.shape()[0], d = points.shape()[1];
  int64_t t = static_cast<int64_t>(groups.size());
  Tensor out = Tensor::zeros({t, d}, points.requires_grad());
  const auto& src = points.data();
  auto& dst = out.data();
  for (int64_t g = 0; g < t; ++g) {
    if (groups[g].empty()) throw ContractError("group_mean: empty group");
    for (int64_t i : groups[g]) {
      if (i < 0 || i >= n) throw DimensionError("group_mean: index out of range");
      for (int64_t c = 0; c < d; ++c) dst[g * d + c] += src[i * d + c];
    }
    double inv = 1.0 / static_cast<double>(groups[g].size());
    for (int64_t c = 0; c < d; ++c) dst[g * d + c] *= inv;
  }
  auto pn = points.node(), on = out.node();
  GradTape* tape = GradTape::active();
  if (tape && out.requires_grad()) {
    tape->record([pn, on, groups, d](GradStore& gs) {
      auto* go = gs.find(on.get());
      if (!go || !pn->requires_grad) return;
      auto& gp = gs.accum(pn);
      for (size_t g = 0; g < groups.size(); ++g) {
        double inv = 1.0 / static_cast<double>(groups[g].size());
        for (int64_t i : groups[g]) {
          for (int64_t c = 0; c < d; ++c) gp[i * d + c] += (*go)[g * d + c] * inv;
        }
      }
    });
  }
  return out;
}

Tensor propose_centers(const Tensor& points, const std::vector<std::array<int64_t, 2>>& positions,
                       const CCLayerConfig& cfg) {
  if (points.rank() != 2 || static_cast<int64_t>(positions.size()) != points.shape()[0]) {
    throw DimensionError("propose_centers: positions do not match points");
  }
  return group_mean(points, center_knn_indices(positions, cfg));
}

Tensor similarity_matrix(const Tensor& centers, const Tensor& points) {
  if (centers.rank() != 2 || points.rank() != 2 || centers.shape()[1] != points.shape()[1]) {
    throw DimensionError("similarity_matrix: feature dims differ: " + shape_str(centers.shape()) +
                         " vs " + shape_str(points.shape()));
  }
  constexpr double kFloor = 1e-12;
  int64_t t = centers.shape()[0], n = points.shape()[0], d = centers.shape()[1];
  Tensor out = Tensor::zeros({t, n}, centers.requires_grad() || points.requires_grad());
  std::vector<double> cnorm(static_cast<size_t>(t)), pnorm(static_cast<size_t>(n));
  const auto& cd = centers.data();
  const auto& pd = points.data();
  for (int64_t i = 0; i < t; ++i) {
    double s = 0.0;
    for (int64_t k = 0; k < d; ++k) s += cd[i * d + k] * cd[i * d + k];
    cnorm[i] = std::max(std::sqrt(s), kFloor);
  }
  for (int64_t j = 0; j < n; ++j) {
    double s = 0.0;
    for (int64_t k = 0; k < d; ++k) s += pd[j * d + k] * pd[j * d + k];
    pnorm[j] = std::max(std::sqrt(s), kFloor);
  }
  auto& od = out.data();
  for (int64_t i = 0; i < t; ++i) {
    for (int64_t j = 0; j < n; ++j) {
      double dot = 0.0;
      for (int64_t k = 0; k < d; ++k) dot += cd[i * d + k] * pd[j * d + k];
      od[i * n + j] = dot / (cnorm[i] * pnorm[j]);
    }
  }
  auto cn = centers.node(), pn = points.node(), on = out.node();
  GradTape* tape = GradTape::active();
  if (tape && out.requires_grad()) {
    tape->record([cn, pn, on, t, n, d, cnorm, pnorm](GradStore& gs) {
      auto* go = gs.find(on.get());
      if (!go) return;
      const auto& cd = cn->data;
      const auto& pd = pn->data;
      const auto& s = on->data;
      double* gc = cn->requires_grad ? gs.accum(cn).data() : nullptr;
      double* gp = pn->requires_grad ? gs.accum(pn).data() : nullptr;
      for (int64_t i = 0; i < t; ++i) {
        for (int64_t j = 0; j < n; ++j) {
          double g = (*go)[i * n + j];
          if (g == 0.0) continue;
          double denom = cnorm[i] * pnorm[j];
          double sij = s[i * n + j];
          for (int64_t k = 0; k < d; ++k) {
            if (gc) gc[i * d + k] += g * (pd[j * d + k] / denom - sij * cd[i * d + k] / (cnorm[i] * cnorm[i]));
            if (gp) gp[j * d + k] += g * (cd[i * d + k] / denom - sij * pd[j * d + k] / (pnorm[j] * pnorm[j]));
          }
        }
      }
    });
  }
  return out;
}

namespace {
thread_local double g_min_margin = std::numeric_limits<double>::infinity();

struct FreezeState {
  int mode = 0;  // 0 off, 1 recording, 2 replaying
  std::vector<std::vector<int64_t>> store;
  size_t cursor = 0;
};
thread_local FreezeState g_freeze;
}

void reset_assignment_margin() { g_min_margin = std::numeric_limits<double>::infinity(); }
double min_assignment_margin() { return g_min_margin; }

AssignmentFreeze::AssignmentFreeze() {
  g_freeze.mode = 1;
  g_freeze.store.clear();
  g_freeze.cursor = 0;
}

AssignmentFreeze::~AssignmentFreeze() {
  g_freeze.mode = 0;
  g_freeze.store.clear();
  g_freeze.cursor = 0;
}

void AssignmentFreeze::seal() {
  g_freeze.mode = 2;
  g_freeze.cursor = 0;
}

std::vector<int64_t> assign_clusters(const Tensor& similarity) {
  if (similarity.rank() != 2) throw DimensionError("assign_clusters: similarity must be [t,n]");
  int64_t t = similarity.shape()[0], n = similarity.shape()[1];
  const auto& s = similarity.data();
  std::vector<int64_t> assignment(static_cast<size_t>(n), 0);
  for (int64_t j = 0; j < n; ++j) {
    double best = s[j];
    int64_t arg = 0;
    for (int64_t c = 1; c < t; ++c) {
      double v = s[c * n + j];
      if (v > best) {  // strict: ties keep the lowest center index
        best = v;
        arg = c;
      }
    }
    assignment[j] = arg;
    // Margin to the runner-up, ignoring exact ties: duplicated centers (same
    // k-NN source points) move together and cannot flip the argmax.
    double second = -std::numeric_limits<double>::infinity();
    for (int64_t c = 0; c < t; ++c) {
      double v = s[c * n + j];
      if (v < best && v > second) second = v;
    }
    if (second > -std::numeric_limits<double>::infinity()) {
      g_min_margin = std::min(g_min_margin, best - second);
    }
  }
  return assignment;
}

Tensor aggregate(const Tensor& points, const Tensor& sims, const Tensor& v_c, const Tensor& alpha,
                 const Tensor& beta) {
  if (v_c.rank() != 1) throw DimensionError("aggregate: v_c must be [d]");
  if (!points.defined()) {
    // Empty cluster: T = 1, g = v_c.
    return v_c;
  }
  int64_t m = points.shape()[0], d = points.shape()[1];
  if (v_c.shape()[0] != d || sims.shape() != Shape{m}) {
    throw DimensionError("aggregate: shapes disagree");
  }
  Tensor w = sigmoid(add(mul(sims, alpha), beta));                       // [m]
  Tensor total = add(sum(w), 1.0);                                       // [1]
  Tensor weighted = reshape(matmul(reshape(w, {1, m}), points), {d});    // [d]
  return mul(add(v_c, weighted), reciprocal(total));
}

Tensor linear(const Tensor& x, const LinearWeights& fc) {
  Tensor y = matmul(x, fc.w);
  if (fc.b.defined()) y = add(y, fc.b);
  return y;
}

Tensor dispatch(const Tensor& points, const Tensor& sims, const Tensor& g, const LinearWeights& fc,
                const Tensor& alpha, const Tensor& beta) {
  if (points.rank() != 2 || g.rank() != 1) throw DimensionError("dispatch: points [m,d], g [d']");
  int64_t m = points.shape()[0], d = points.shape()[1], dp = g.shape()[0];
  if (fc.w.shape() != Shape({dp, d})) {
    throw DimensionError("dispatch: fc must map " + std::to_string(dp) + " -> " + std::to_string(d) +
                         ", got " + shape_str(fc.w.shape()));
  }
  if (sims.shape() != Shape{m}) throw DimensionError("dispatch: sims must be [m]");
  Tensor w = sigmoid(add(mul(sims, alpha), beta));                   // [m]
  Tensor msg = mul(reshape(w, {m, 1}), reshape(g, {1, dp}));         // [m,d']
  return add(points, linear(msg, fc));
}

Tensor cluster_messages(const Tensor& similarity, const Tensor& points_val,
                        const Tensor& value_centers, const std::vector<int64_t>& assignment,
                        const Tensor& alpha, const Tensor& beta) {
  if (similarity.rank() != 2 || points_val.rank() != 2 || value_centers.rank() != 2) {
    throw DimensionError("cluster_messages: bad ranks");
  }
  int64_t t = similarity.shape()[0], n = similarity.shape()[1], d = points_val.shape()[1];
  if (points_val.shape()[0] != n || value_centers.shape() != Shape({t, d})) {
    throw DimensionError("cluster_messages: shapes disagree");
  }
  if (static_cast<int64_t>(assignment.size()) != n) {
    throw DimensionError("cluster_messages: assignment size mismatch");
  }
  for (int64_t i = 0; i < n; ++i) {
    if (assignment[i] < 0 || assignment[i] >= t) {
      throw ContractError("cluster_messages: assignment out of range");
    }
  }
  bool rg = similarity.requires_grad() || points_val.requires_grad() ||
            value_centers.requires_grad() || alpha.requires_grad() || beta.requires_grad();
  Tensor out = Tensor::zeros({n, d}, rg);
  double av = alpha.value(), bv = beta.value();
  const auto& sm = similarity.data();
  const auto& pv = points_val.data();
  const auto& vc = value_centers.data();
  std::vector<double> w(static_cast<size_t>(n));
  std::vector<double> total(static_cast<size_t>(t), 1.0);
  std::vector<double> g(static_cast<size_t>(t * d), 0.0);
  for (int64_t i = 0; i < n; ++i) {
    double z = av * sm[assignment[i] * n + i] + bv;
    w[i] = 1.0 / (1.0 + std::exp(-z));
    total[assignment[i]] += w[i];
  }
  for (int64_t c = 0; c < t; ++c) {
    for (int64_t k = 0; k < d; ++k) g[c * d + k] = vc[c * d + k];
  }
  for (int64_t i = 0; i < n; ++i) {
    int64_t c = assignment[i];
    for (int64_t k = 0; k < d; ++k) g[c * d + k] += w[i] * pv[i * d + k];
  }
  for (int64_t c = 0; c < t; ++c) {
    for (int64_t k = 0; k < d; ++k) g[c * d + k] /= total[c];
  }
  auto& od = out.data();
  for (int64_t i = 0; i < n; ++i) {
    int64_t c = assignment[i];
    for (int64_t k = 0; k < d; ++k) od[i * d + k] = w[i] * g[c * d + k];
  }

  auto sn = similarity.node(), pn = points_val.node(), vn = value_centers.node(),
       an = alpha.node(), bn = beta.node(), on = out.node();
  GradTape* tape = GradTape::active();
  if (tape && rg) {
    tape->record([sn, pn, vn, an, bn, on, assignment, t, n, d, w, total, g](GradStore& gs) {
      auto* go = gs.find(on.get());
      if (!go) return;
      const auto& sm = sn->data;
      const auto& pv = pn->data;
      double av = an->data[0];
      double* gsim = sn->requires_grad ? gs.accum(sn).data() : nullptr;
      double* gpv = pn->requires_grad ? gs.accum(pn).data() : nullptr;
      double* gvc = vn->requires_grad ? gs.accum(vn).data() : nullptr;
      double* galpha = an->requires_grad ? gs.accum(an).data() : nullptr;
      double* gbeta = bn->requires_grad ? gs.accum(bn).data() : nullptr;
      // Adjoint of g per cluster, then of the weights.
      std::vector<double> gg(static_cast<size_t>(t * d), 0.0);
      std::vector<double> gw(static_cast<size_t>(n), 0.0);
      for (int64_t i = 0; i < n; ++i) {
        int64_t c = assignment[i];
        for (int64_t k = 0; k < d; ++k) {
          double gik = (*go)[i * d + k];
          gg[c * d + k] += w[i] * gik;
          gw[i] += gik * g[c * d + k];
        }
      }
      std::vector<double> gT(static_cast<size_t>(t), 0.0);
      for (int64_t c = 0; c < t; ++c) {
        double acc = 0.0;
        for (int64_t k = 0; k < d; ++k) {
          double gn = gg[c * d + k] / total[c];
          acc += gn * g[c * d + k];
          if (gvc) gvc[c * d + k] += gn;
        }
        gT[c] = -acc;
      }
      for (int64_t i = 0; i < n; ++i) {
        int64_t c = assignment[i];
        double acc = gT[c];
        for (int64_t k = 0; k < d; ++k) {
          double gn = gg[c * d + k] / total[c];
          if (gpv) gpv[i * d + k] += w[i] * gn;
          acc += gn * pv[i * d + k];
        }
        gw[i] += acc;
        double s = sm[c * n + i];
        double gz = gw[i] * w[i] * (1.0 - w[i]);
        if (gsim) gsim[c * n + i] += gz * av;
        if (galpha) galpha[0] += gz * s;
        if (gbeta) gbeta[0] += gz;
      }
    });
  }
  return out;
}

CCLayerWeights make_cc_weights(int64_t dim, const CCLayerConfig& cfg, SplitMix64& rng) {
  int64_t dp = cfg.sim_dim > 0 ? cfg.sim_dim : dim;
  auto init = [&rng](int64_t in, int64_t out) {
    double scale = 1.0 / std::sqrt(static_cast<double>(in));
    LinearWeights fc;
    fc.w = Tensor::zeros({in, out}, true);
    for (double& v : fc.w.data()) v = rng.uniform(-scale, scale);
    fc.b = Tensor::zeros({out}, true);
    return fc;
  };
  CCLayerWeights w;
  w.sim_proj = init(dim, dp);
  w.val_proj = init(dim, dp);
  w.fc = init(dp, dim);
  w.alpha = Tensor::scalar(1.0, true);
  w.beta = Tensor::scalar(0.0, true);
  return w;
}

FeatureMap cc_layer(const FeatureMap& f, const CCLayerConfig& cfg, const CCLayerWeights& weights) {
  cfg.validate();
  int64_t d = f.channels();
  WindowPartition desc;
  std::vector<Tensor> windows = partition_windows(f, cfg, &desc);
  std::vector<Tensor> updated;
  updated.reserve(windows.size());
  for (size_t wi = 0; wi < windows.size(); ++wi) {
    const Tensor& win = windows[wi];
    Tensor ps = linear(win, weights.sim_proj);
    Tensor pv = linear(win, weights.val_proj);
    auto groups = center_knn_indices(desc.windows[wi].pos, cfg);
    Tensor centers = group_mean(ps, groups);
    Tensor value_centers = group_mean(pv, groups);
    Tensor sim = similarity_matrix(centers, ps);
    std::vector<int64_t> assignment;
    if (g_freeze.mode == 2 && !g_freeze.store.empty()) {
      assignment = g_freeze.store[g_freeze.cursor % g_freeze.store.size()];
      g_freeze.cursor++;
    } else {
      assignment = assign_clusters(sim);
      if (g_freeze.mode == 1) g_freeze.store.push_back(assignment);
    }
    Tensor msg = cluster_messages(sim, pv, value_centers, assignment, weights.alpha, weights.beta);
    updated.push_back(add(win, linear(msg, weights.fc)));
  }
  return reassemble_windows(updated, desc, d);
}

}  // namespace ccvim

#pragma once

#include <array>
#include <vector>

#include "ccvim/rng.hpp"
#include "ccvim/scan_paths.hpp"
#include "ccvim/tensor.hpp"

namespace ccvim {

struct CCLayerConfig {
  int64_t centers = 4;      // t, a perfect square
  int64_t window_size = 8;  // side length of the local region
  int64_t knn_k = 4;        // points averaged into each proposed center
  int64_t sim_dim = 0;      // d'; 0 means "same as the ambient dimension"

  void validate() const;
};

// Non-overlapping window tiling of an H x W grid; edge tiles keep only the
// positions that exist (padding positions are excluded from point sets).
struct WindowPartition {
  struct Window {
    std::vector<int64_t> spatial;              // y*W + x per point, row-major
    std::vector<std::array<int64_t, 2>> pos;   // (y, x) local to the window
  };
  int64_t map_h = 0, map_w = 0, window = 0;
  std::vector<Window> windows;
};

WindowPartition partition_grid(int64_t h, int64_t w, const CCLayerConfig& cfg);

// Windowed views of a feature map as [n_w, D] point tensors.
std::vector<Tensor> partition_windows(const FeatureMap& f, const CCLayerConfig& cfg,
                                      WindowPartition* descriptor = nullptr);

// Inverse of partition_windows; restores the original extent exactly.
FeatureMap reassemble_windows(const std::vector<Tensor>& windows, const WindowPartition& desc,
                              int64_t channels);

// Spatial k-NN index sets for the evenly placed center anchors; ties broken
// by lowest flat point index. Uses all points when fewer than k exist.
std::vector<std::vector<int64_t>> center_knn_indices(
    const std::vector<std::array<int64_t, 2>>& positions, const CCLayerConfig& cfg);

// Differentiable per-group row mean: out[g] = mean(points[i], i in groups[g]).
Tensor group_mean(const Tensor& points, const std::vector<std::vector<int64_t>>& groups);

// Center features: mean of the knn_k spatially nearest points per anchor.
Tensor propose_centers(const Tensor& points, const std::vector<std::array<int64_t, 2>>& positions,
                       const CCLayerConfig& cfg);

// Pairwise cosine similarity, norms floored at 1e-12. [t,d] x [n,d] -> [t,n].
Tensor similarity_matrix(const Tensor& centers, const Tensor& points);

// Hard assignment of each point to its most similar center (ties -> lowest
// center index). Empty clusters are permitted.
std::vector<int64_t> assign_clusters(const Tensor& similarity);

// Diagnostics: smallest top-2 similarity margin seen by assign_clusters on
// this thread since the last reset. Gradient tests use it to keep
// finite-difference probes away from assignment boundaries, where the layer
// is by construction non-smooth.
void reset_assignment_margin();
double min_assignment_margin();

// Test support for gradient checks. The CC layer is piecewise smooth in its
// hard cluster assignment, and the backward pass differentiates the current
// piece (assignments held constant). Freezing pins every cc_layer call on
// this thread to the assignments of one recorded forward pass so central
// differences probe the same piece. Construct, run one forward, seal(), then
// run the finite-difference sweep.
class AssignmentFreeze {
 public:
  AssignmentFreeze();
  ~AssignmentFreeze();
  AssignmentFreeze(const AssignmentFreeze&) = delete;
  void seal();
};

// Aggregated feature of one cluster:
//   g = (v_c + sum_i sigma(alpha*s_i+beta) * p_i) / T,
//   T = 1 + sum_i sigma(alpha*s_i+beta).
// points: [m,d'] (m may be 0), sims: [m], v_c: [d'], alpha/beta scalars.
Tensor aggregate(const Tensor& points, const Tensor& sims, const Tensor& v_c, const Tensor& alpha,
                 const Tensor& beta);

struct LinearWeights {
  Tensor w;  // [in, out]
  Tensor b;  // [out]
};

Tensor linear(const Tensor& x, const LinearWeights& fc);

// Dispatch the aggregated feature back to every point of the cluster:
//   p_i' = p_i + FC(sigma(alpha*s_i+beta) * g).
// points: [m,d] where d == fc output dim; g: [d'] where d' == fc input dim.
Tensor dispatch(const Tensor& points, const Tensor& sims, const Tensor& g, const LinearWeights& fc,
                const Tensor& alpha, const Tensor& beta);

// Fused per-window aggregation + dispatch messages: row i of the result is
// sigma(alpha*s_i+beta) * g_{cluster(i)} with g per the aggregate formula.
// Matches the aggregate/dispatch composition to rounding.
Tensor cluster_messages(const Tensor& similarity, const Tensor& points_val,
                        const Tensor& value_centers, const std::vector<int64_t>& assignment,
                        const Tensor& alpha, const Tensor& beta);

struct CCLayerWeights {
  LinearWeights sim_proj;  // d -> d'
  LinearWeights val_proj;  // d -> d'
  LinearWeights fc;        // d' -> d
  Tensor alpha;            // scalar
  Tensor beta;             // scalar
};

CCLayerWeights make_cc_weights(int64_t dim, const CCLayerConfig& cfg, SplitMix64& rng);

// Full CC layer: project to similarity/value spaces per window, propose
// centers, assign by cosine similarity, aggregate, dispatch with a residual
// onto the incoming points, and reassemble. Output shape equals input shape.
FeatureMap cc_layer(const FeatureMap& f, const CCLayerConfig& cfg, const CCLayerWeights& weights);

}  // namespace ccvim

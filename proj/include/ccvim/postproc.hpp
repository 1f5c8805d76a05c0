#pragma once

#include "ccvim/maps.hpp"

namespace ccvim {

// Horizontal/vertical regression targets in [-1, 1], zero on background.
struct DistanceMaps {
  RealMap ph;
  RealMap pv;
};

struct WatershedParams {
  double r = 0.5;       // marker probability threshold
  double k_grad = 0.4;  // gradient threshold
  double h_prob = 0.5;  // foreground threshold

  void validate() const {
    if (!(r > 0.0 && r < 1.0 && k_grad > 0.0 && k_grad < 1.0 && h_prob > 0.0 && h_prob < 1.0)) {
      throw ConfigError("watershed thresholds must lie in (0,1)");
    }
  }
};

// Signed per-instance offsets from the centroid, normalized per axis so the
// extremes hit +-1.
DistanceMaps distance_targets(const IntMap& instances);

// M_s = max of the min-max normalized 3x3 Sobel magnitudes of P_v and P_h.
RealMap fused_gradient(const DistanceMaps& d);

// Markers M = delta(tau(P,r) - tau(M_s,k)), connected-component labeled.
IntMap extract_markers(const RealMap& prob, const RealMap& ms, const WatershedParams& params);

// E = (1 - tau(M_s,k)) * tau(P,h); values in {0,1}.
RealMap energy_landscape(const RealMap& prob, const RealMap& ms, const WatershedParams& params);

// Priority flood from marker seeds over the negated energy (low-energy
// barriers flood last), restricted to the mask. Total pop order:
// higher energy, then lower label, then row-major pixel index.
IntMap marker_watershed(const IntMap& markers, const RealMap& energy, const IntMap& mask,
                        bool* dropped_marker = nullptr);

// Full instance separation: fused gradient, markers, energy, watershed.
IntMap postprocess(const RealMap& prob, const DistanceMaps& d, const WatershedParams& params);

}  // namespace ccvim

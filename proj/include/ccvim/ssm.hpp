#pragma once

#include <utility>

#include "ccvim/rng.hpp"
#include "ccvim/tensor.hpp"

namespace ccvim {

// Parameters of one selective scan: diagonal state matrix in log form
// (effective A = -exp(a_log), strictly negative), residual skip gain, and
// the input-dependent projections for B, C and the timescale.
struct SSMParams {
  Tensor a_log;    // [D,N]
  Tensor d_skip;   // [D]
  Tensor w_b;      // [D,N] projection to B (no bias)
  Tensor w_c;      // [D,N] projection to C (no bias)
  Tensor w_dt;     // [D,1] projection to the scalar timescale
  Tensor dt_bias;  // [D]

  int64_t channels() const { return a_log.shape()[0]; }
  int64_t state_size() const { return a_log.shape()[1]; }
  void validate() const;
};

// Standard init: A = -1..-N per channel, D_skip = 1, softplus(dt_bias)
// uniform in [1e-3, 1e-1], small random projections.
SSMParams make_ssm_params(int64_t channels, int64_t state_size, SplitMix64& rng);

struct SelectiveParams {
  Tensor b_seq;   // [L,N]
  Tensor c_seq;   // [L,N]
  Tensor dt_seq;  // [L,D] strictly positive
};

// Input-dependent B, C and timescale for every token. x: [L,D].
SelectiveParams selective_params(const Tensor& x, const SSMParams& p);

// ZOH discretization on the diagonal parameterization:
// Abar = exp(dt*A), Bbar = ((exp(dt*A)-1)/A)*B with the Taylor fallback
// dt*B*(1 + dt*A/2) when |dt*A| < 1e-6. a_diag: [D,N], b_t: [N], dt: [D].
std::pair<Tensor, Tensor> discretize(const Tensor& a_diag, const Tensor& b_t, const Tensor& dt);

// Scalar ZOH step shared by discretize() and the fused recurrence.
inline void zoh_step(double a, double b, double dt, double* abar, double* bbar) {
  double z = dt * a;
  *abar = std::exp(z);
  if (std::abs(z) < 1e-6) {
    *bbar = dt * b * (1.0 + 0.5 * z);
  } else {
    *bbar = (*abar - 1.0) / a * b;
  }
}

// Fused sequential recurrence h_t = Abar_t*h_{t-1} + Bbar_t*x_t,
// y_t = <C_t, h_t> + D_skip*x_t over a [L,D] sequence; differentiable in all
// tensor arguments. a_diag entries must be strictly negative, dt positive.
Tensor scan_recurrence(const Tensor& x, const Tensor& b_seq, const Tensor& c_seq,
                       const Tensor& dt_seq, const Tensor& a_diag, const Tensor& d_skip);

// Full selective scan: parameterize from the input, discretize, run the
// recurrence. x: [L,D] -> [L,D].
Tensor selective_scan(const Tensor& x, const SSMParams& p);

}  // namespace ccvim

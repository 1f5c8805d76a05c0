#include "ccvim/ssm.hpp"

#include <cmath>

namespace ccvim {

void SSMParams::validate() const {
  if (!a_log.defined() || a_log.rank() != 2) throw DimensionError("SSMParams: a_log must be [D,N]");
  int64_t d = channels(), n = state_size();
  if (d < 1 || n < 1) throw ContractError("SSMParams: D and N must be >= 1");
  if (d_skip.shape() != Shape{d}) throw DimensionError("SSMParams: d_skip must be [D]");
  if (w_b.shape() != Shape({d, n}) || w_c.shape() != Shape({d, n})) {
    throw DimensionError("SSMParams: w_b/w_c must be [D,N]");
  }
  if (w_dt.shape() != Shape({d, 1}) || dt_bias.shape() != Shape{d}) {
    throw DimensionError("SSMParams: w_dt must be [D,1], dt_bias [D]");
  }
}

SSMParams make_ssm_params(int64_t channels, int64_t state_size, SplitMix64& rng) {
  SSMParams p;
  std::vector<double> alog(static_cast<size_t>(channels * state_size));
  for (int64_t d = 0; d < channels; ++d) {
    for (int64_t n = 0; n < state_size; ++n) {
      alog[static_cast<size_t>(d * state_size + n)] = std::log(static_cast<double>(n + 1));
    }
  }
  p.a_log = Tensor::from_data({channels, state_size}, std::move(alog), true);
  p.d_skip = Tensor::full({channels}, 1.0, true);
  double scale = 1.0 / std::sqrt(static_cast<double>(channels));
  auto init = [&](Shape s) {
    Tensor t = Tensor::zeros(s, true);
    for (double& v : t.data()) v = rng.uniform(-scale, scale);
    return t;
  };
  p.w_b = init({channels, state_size});
  p.w_c = init({channels, state_size});
  p.w_dt = init({channels, 1});
  std::vector<double> bias(static_cast<size_t>(channels));
  for (double& v : bias) {
    double dt = rng.uniform(1e-3, 1e-1);
    v = std::log(std::expm1(dt));  // softplus inverse
  }
  p.dt_bias = Tensor::from_data({channels}, std::move(bias), true);
  return p;
}

SelectiveParams selective_params(const Tensor& x, const SSMParams& p) {
  p.validate();
  if (x.rank() != 2 || x.shape()[1] != p.channels()) {
    throw DimensionError("selective_params: sequence " + shape_str(x.shape()) +
                         " does not match " + std::to_string(p.channels()) + " channels");
  }
  SelectiveParams out;
  out.b_seq = matmul(x, p.w_b);
  out.c_seq = matmul(x, p.w_c);
  // dt = softplus(bias + Broadcast_D(Linear_1(x)))
  Tensor scalar_dt = matmul(x, p.w_dt);  // [L,1]
  out.dt_seq = softplus(add(scalar_dt, reshape(p.dt_bias, {1, p.channels()})));
  return out;
}

std::pair<Tensor, Tensor> discretize(const Tensor& a_diag, const Tensor& b_t, const Tensor& dt) {
  if (a_diag.rank() != 2) throw DimensionError("discretize: a_diag must be [D,N]");
  int64_t d = a_diag.shape()[0], n = a_diag.shape()[1];
  if (b_t.shape() != Shape{n}) throw DimensionError("discretize: b_t must be [N]");
  if (dt.shape() != Shape{d}) throw DimensionError("discretize: dt must be [D]");
  for (double v : dt.data()) {
    if (!(v > 0.0)) throw ContractError("discretize: dt must be strictly positive");
  }
  Tensor abar = Tensor::zeros({d, n});
  Tensor bbar = Tensor::zeros({d, n});
  for (int64_t i = 0; i < d; ++i) {
    for (int64_t j = 0; j < n; ++j) {
      zoh_step(a_diag.data()[i * n + j], b_t.data()[j], dt.data()[i],
               &abar.data()[i * n + j], &bbar.data()[i * n + j]);
    }
  }
  return {abar, bbar};
}

namespace {

// phi(z) = (e^z - 1)/z and its derivative, Taylor-stabilized near zero.
double phi_fn(double z) {
  if (std::abs(z) < 1e-6) return 1.0 + 0.5 * z;
  return std::expm1(z) / z;
}

double phi_prime(double z) {
  if (std::abs(z) < 1e-3) return 0.5 + z / 3.0 + z * z / 8.0;
  return (std::exp(z) * (z - 1.0) + 1.0) / (z * z);
}

}  // namespace

Tensor scan_recurrence(const Tensor& x, const Tensor& b_seq, const Tensor& c_seq,
                       const Tensor& dt_seq, const Tensor& a_diag, const Tensor& d_skip) {
  if (x.rank() != 2) throw DimensionError("scan_recurrence: x must be [L,D]");
  int64_t len = x.shape()[0], d = x.shape()[1];
  int64_t n = a_diag.rank() == 2 ? a_diag.shape()[1] : 0;
  if (a_diag.shape() != Shape({d, n}) || n < 1) {
    throw DimensionError("scan_recurrence: a_diag must be [D,N]");
  }
  if (b_seq.shape() != Shape({len, n}) || c_seq.shape() != Shape({len, n})) {
    throw DimensionError("scan_recurrence: b_seq/c_seq must be [L,N]");
  }
  if (dt_seq.shape() != Shape({len, d})) throw DimensionError("scan_recurrence: dt_seq must be [L,D]");
  if (d_skip.shape() != Shape{d}) throw DimensionError("scan_recurrence: d_skip must be [D]");
  for (double v : a_diag.data()) {
    if (!(v < 0.0)) throw ContractError("scan_recurrence: diagonal A must be strictly negative");
  }
  for (double v : dt_seq.data()) {
    if (!(v > 0.0)) throw ContractError("scan_recurrence: dt must be strictly positive");
  }

  bool rg = x.requires_grad() || b_seq.requires_grad() || c_seq.requires_grad() ||
            dt_seq.requires_grad() || a_diag.requires_grad() || d_skip.requires_grad();
  Tensor out = Tensor::zeros({len, d}, rg);
  // Hidden states kept for the reverse pass: h[t, d, n].
  std::vector<double> h(static_cast<size_t>(len * d * n), 0.0);
  const double* px = x.data().data();
  const double* pb = b_seq.data().data();
  const double* pc = c_seq.data().data();
  const double* pdt = dt_seq.data().data();
  const double* pa = a_diag.data().data();
  const double* pd = d_skip.data().data();
  double* py = out.data().data();
  for (int64_t t = 0; t < len; ++t) {
    for (int64_t ch = 0; ch < d; ++ch) {
      double dt = pdt[t * d + ch];
      double xv = px[t * d + ch];
      double y = pd[ch] * xv;
      const double* hprev = t > 0 ? &h[((t - 1) * d + ch) * n] : nullptr;
      double* hcur = &h[(t * d + ch) * n];
      for (int64_t j = 0; j < n; ++j) {
        double abar, bbar;
        zoh_step(pa[ch * n + j], pb[t * n + j], dt, &abar, &bbar);
        // Mathematically in (0,1) for A<0, dt>0; exp underflow/rounding can
        // land exactly on the closed bounds.
        if (!(abar >= 0.0 && abar <= 1.0)) {
          throw NumericError("scan_recurrence: Abar left [0,1]; A or dt out of range");
        }
        double hv = (hprev ? abar * hprev[j] : 0.0) + bbar * xv;
        hcur[j] = hv;
        y += pc[t * n + j] * hv;
      }
      py[t * d + ch] = y;
    }
  }

  auto xn = x.node(), bn = b_seq.node(), cn = c_seq.node(), dtn = dt_seq.node(),
       an = a_diag.node(), dn = d_skip.node(), on = out.node();
  GradTape* tape = GradTape::active();
  if (tape && rg) {
    tape->record([xn, bn, cn, dtn, an, dn, on, len, d, n, h = std::move(h)](GradStore& gs) {
      auto* go = gs.find(on.get());
      if (!go) return;
      const double* gy = go->data();
      const double* px = xn->data.data();
      const double* pb = bn->data.data();
      const double* pc = cn->data.data();
      const double* pdt = dtn->data.data();
      const double* pa = an->data.data();
      const double* pd = dn->data.data();
      double* gx = xn->requires_grad ? gs.accum(xn).data() : nullptr;
      double* gb = bn->requires_grad ? gs.accum(bn).data() : nullptr;
      double* gc = cn->requires_grad ? gs.accum(cn).data() : nullptr;
      double* gdt = dtn->requires_grad ? gs.accum(dtn).data() : nullptr;
      double* ga = an->requires_grad ? gs.accum(an).data() : nullptr;
      double* gd = dn->requires_grad ? gs.accum(dn).data() : nullptr;
      std::vector<double> gh(static_cast<size_t>(d * n), 0.0);
      for (int64_t t = len - 1; t >= 0; --t) {
        for (int64_t ch = 0; ch < d; ++ch) {
          double dt = pdt[t * d + ch];
          double xv = px[t * d + ch];
          double gyv = gy[t * d + ch];
          const double* hcur = &h[(t * d + ch) * n];
          const double* hprev = t > 0 ? &h[((t - 1) * d + ch) * n] : nullptr;
          double* ghc = &gh[ch * n];
          if (gd) gd[ch] += gyv * xv;
          double gxv = pd[ch] * gyv;
          double gdtv = 0.0;
          for (int64_t j = 0; j < n; ++j) {
            // y_t contribution.
            if (gc) gc[t * n + j] += gyv * hcur[j];
            double ghv = ghc[j] + pc[t * n + j] * gyv;
            // h_t = abar*h_{t-1} + bbar*x_t
            double a = pa[ch * n + j];
            double b = pb[t * n + j];
            double z = dt * a;
            double ez = std::exp(z);
            double abar = ez;
            double ph = phi_fn(z);
            double bbar = dt * ph * b;
            double hp = hprev ? hprev[j] : 0.0;
            double gabar = ghv * hp;
            double gbbar = ghv * xv;
            gxv += ghv * bbar;
            if (gb) gb[t * n + j] += gbbar * dt * ph;
            double php = phi_prime(z);
            gdtv += gabar * a * ez + gbbar * b * (ph + z * php);
            if (ga) ga[ch * n + j] += gabar * dt * ez + gbbar * dt * dt * php * b;
            // Pass the adjoint to h_{t-1}.
            ghc[j] = ghv * abar;
          }
          if (gx) gx[t * d + ch] += gxv;
          if (gdt) gdt[t * d + ch] += gdtv;
        }
      }
    });
  }
  return out;
}

Tensor selective_scan(const Tensor& x, const SSMParams& p) {
  SelectiveParams sp = selective_params(x, p);
  Tensor a = neg(exp(p.a_log));
  return scan_recurrence(x, sp.b_seq, sp.c_seq, sp.dt_seq, a, p.d_skip);
}

}  // namespace ccvim

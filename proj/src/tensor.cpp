#include "ccvim/tensor.hpp"
#include <limits>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "ccvim/rng.hpp"

namespace ccvim {

int64_t shape_numel(const Shape& shape) {
  int64_t n = 1;
  for (int64_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << "x";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

static void validate_shape(const Shape& shape) {
  for (int64_t d : shape) {
    if (d <= 0) throw DimensionError("tensor dimensions must be positive, got " + shape_str(shape));
  }
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  validate_shape(shape);
  auto node = std::make_shared<TensorData>();
  node->data.assign(static_cast<size_t>(shape_numel(shape)), 0.0);
  node->shape = std::move(shape);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  std::fill(t.data().begin(), t.data().end(), value);
  return t;
}

Tensor Tensor::from_data(Shape shape, std::vector<double> values, bool requires_grad) {
  validate_shape(shape);
  if (shape_numel(shape) != static_cast<int64_t>(values.size())) {
    throw DimensionError("data length " + std::to_string(values.size()) +
                         " does not match shape " + shape_str(shape));
  }
  auto node = std::make_shared<TensorData>();
  node->shape = std::move(shape);
  node->data = std::move(values);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from_data({1}, {value}, requires_grad);
}

double Tensor::value() const {
  if (!defined() || numel() != 1) throw ContractError("value() requires a one-element tensor");
  return node_->data[0];
}

double Tensor::at(std::initializer_list<int64_t> idx) const {
  const Shape& s = shape();
  if (idx.size() != s.size()) throw DimensionError("index rank mismatch for " + shape_str(s));
  int64_t flat = 0;
  size_t k = 0;
  for (int64_t i : idx) {
    if (i < 0 || i >= s[k]) throw DimensionError("index out of range in " + shape_str(s));
    flat = flat * s[k] + i;
    ++k;
  }
  return node_->data[static_cast<size_t>(flat)];
}

const std::vector<double>& Tensor::grad() const {
  static const std::vector<double> empty;
  if (!node_ || node_->grad.empty()) return empty;
  return node_->grad;
}

void Tensor::zero_grad() {
  if (node_) node_->grad.clear();
}

// ---------------------------------------------------------------------------
// Tape machinery

std::vector<double>* GradStore::find(const TensorData* node) {
  auto it = slots_.find(node);
  return it == slots_.end() ? nullptr : &it->second.adj;
}

std::vector<double>& GradStore::accum(const std::shared_ptr<TensorData>& node) {
  auto it = slots_.find(node.get());
  if (it == slots_.end()) {
    Slot slot;
    slot.node = node;
    slot.adj.assign(node->data.size(), 0.0);
    it = slots_.emplace(node.get(), std::move(slot)).first;
  }
  return it->second.adj;
}

void GradStore::transfer_to_grads() {
  for (auto& [ptr, slot] : slots_) {
    TensorData* node = slot.node.get();
    if (!node->requires_grad) continue;
    if (node->grad.empty()) node->grad.assign(node->data.size(), 0.0);
    for (size_t i = 0; i < node->grad.size(); ++i) node->grad[i] += slot.adj[i];
  }
}

namespace {
thread_local std::vector<GradTape*> g_tape_stack;
}

GradTape::GradTape() { g_tape_stack.push_back(this); }

GradTape::~GradTape() {
  if (!g_tape_stack.empty() && g_tape_stack.back() == this) g_tape_stack.pop_back();
}

GradTape* GradTape::active() { return g_tape_stack.empty() ? nullptr : g_tape_stack.back(); }

void GradTape::record(std::function<void(GradStore&)> backward) {
  entries_.push_back(std::move(backward));
}

void GradTape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward requires a scalar loss, got " +
                        (loss.defined() ? shape_str(loss.shape()) : std::string("undefined")));
  }
  if (entries_.empty()) throw ContractError("backward on an empty tape");
  GradStore store;
  store.accum(loss.node())[0] += 1.0;
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) (*it)(store);
  store.transfer_to_grads();
}

void backward(const Tensor& loss) {
  GradTape* tape = GradTape::active();
  if (!tape) throw ContractError("backward without an active tape");
  tape->backward(loss);
}

namespace {

bool want_grad(const Tensor& a) { return a.defined() && a.requires_grad(); }

void maybe_record(const Tensor& out, std::function<void(GradStore&)> fn) {
  GradTape* tape = GradTape::active();
  if (tape && out.requires_grad()) tape->record(std::move(fn));
}

// ---------------------------------------------------------------------------
// Broadcast plan: trailing alignment, a dimension of size 1 stretches.

struct BroadcastPlan {
  Shape out_shape;
  std::vector<int64_t> a_stride;  // per out dim, 0 when stretched
  std::vector<int64_t> b_stride;
  int64_t total = 0;
};

std::vector<int64_t> contiguous_strides(const Shape& shape) {
  std::vector<int64_t> st(shape.size(), 1);
  for (int64_t i = static_cast<int64_t>(shape.size()) - 2; i >= 0; --i) {
    st[i] = st[i + 1] * shape[i + 1];
  }
  return st;
}

BroadcastPlan make_broadcast(const Shape& a, const Shape& b) {
  BroadcastPlan plan;
  size_t rank = std::max(a.size(), b.size());
  plan.out_shape.assign(rank, 1);
  for (size_t i = 0; i < rank; ++i) {
    int64_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    int64_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw DimensionError("shapes " + shape_str(a) + " and " + shape_str(b) +
                           " are not broadcastable");
    }
    plan.out_shape[i] = std::max(da, db);
  }
  auto sa = contiguous_strides(a);
  auto sb = contiguous_strides(b);
  plan.a_stride.assign(rank, 0);
  plan.b_stride.assign(rank, 0);
  for (size_t i = 0; i < rank; ++i) {
    int64_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    int64_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (i >= rank - a.size() && da != 1) plan.a_stride[i] = sa[i - (rank - a.size())];
    if (i >= rank - b.size() && db != 1) plan.b_stride[i] = sb[i - (rank - b.size())];
  }
  plan.total = shape_numel(plan.out_shape);
  return plan;
}

// Calls f(out_flat, a_flat, b_flat) over the broadcast iteration space.
template <class F>
void for_each_broadcast(const BroadcastPlan& plan, F&& f) {
  size_t rank = plan.out_shape.size();
  std::vector<int64_t> idx(rank, 0);
  int64_t af = 0, bf = 0;
  for (int64_t o = 0; o < plan.total; ++o) {
    f(o, af, bf);
    for (int64_t d = static_cast<int64_t>(rank) - 1; d >= 0; --d) {
      idx[d]++;
      af += plan.a_stride[d];
      bf += plan.b_stride[d];
      if (idx[d] < plan.out_shape[d]) break;
      af -= plan.a_stride[d] * plan.out_shape[d];
      bf -= plan.b_stride[d] * plan.out_shape[d];
      idx[d] = 0;
    }
  }
}

// Strict (0,1) range even where the exact value would round to 0 or 1.
double stable_sigmoid(double x) {
  double v;
  if (x >= 0.0) {
    v = 1.0 / (1.0 + std::exp(-x));
  } else {
    double e = std::exp(x);
    v = e / (1.0 + e);
  }
  constexpr double lo = std::numeric_limits<double>::min();
  return std::clamp(v, lo, 1.0 - std::numeric_limits<double>::epsilon() / 2.0);
}

double stable_softplus(double x) {
  // ln(1+e^x); overflow-safe form x + ln(1+e^-x) for x > 20.
  if (x > 20.0) return x + std::log1p(std::exp(-x));
  return std::max(std::log1p(std::exp(x)), std::numeric_limits<double>::min());
}

}  // namespace

// ---------------------------------------------------------------------------
// Elementwise

static Tensor binary_op(EwKind kind, const Tensor& a, const Tensor& b) {
  BroadcastPlan plan = make_broadcast(a.shape(), b.shape());
  bool rg = want_grad(a) || want_grad(b);
  Tensor out = Tensor::zeros(plan.out_shape, rg);
  const auto& da = a.data();
  const auto& db = b.data();
  auto& dout = out.data();
  switch (kind) {
    case EwKind::Add:
      for_each_broadcast(plan, [&](int64_t o, int64_t i, int64_t j) { dout[o] = da[i] + db[j]; });
      break;
    case EwKind::Sub:
      for_each_broadcast(plan, [&](int64_t o, int64_t i, int64_t j) { dout[o] = da[i] - db[j]; });
      break;
    case EwKind::Mul:
      for_each_broadcast(plan, [&](int64_t o, int64_t i, int64_t j) { dout[o] = da[i] * db[j]; });
      break;
    default:
      throw ContractError("elementwise: kind is not binary");
  }
  auto an = a.node(), bn = b.node(), on = out.node();
  maybe_record(out, [kind, plan, an, bn, on](GradStore& gs) {
    auto* go = gs.find(on.get());
    if (!go) return;
    if (an->requires_grad) {
      auto& gref = gs.accum(an);
      const auto& gout = *go;
      const auto& dbv = bn->data;
      switch (kind) {
        case EwKind::Add:
        case EwKind::Sub:
          for_each_broadcast(plan, [&](int64_t o, int64_t i, int64_t) { gref[i] += gout[o]; });
          break;
        case EwKind::Mul:
          for_each_broadcast(plan,
                             [&](int64_t o, int64_t i, int64_t j) { gref[i] += gout[o] * dbv[j]; });
          break;
        default:
          break;
      }
    }
    if (bn->requires_grad) {
      auto& g = gs.accum(bn);
      const auto& gout = *go;
      const auto& dav = an->data;
      switch (kind) {
        case EwKind::Add:
          for_each_broadcast(plan, [&](int64_t o, int64_t, int64_t j) { g[j] += gout[o]; });
          break;
        case EwKind::Sub:
          for_each_broadcast(plan, [&](int64_t o, int64_t, int64_t j) { g[j] -= gout[o]; });
          break;
        case EwKind::Mul:
          for_each_broadcast(plan,
                             [&](int64_t o, int64_t i, int64_t j) { g[j] += gout[o] * dav[i]; });
          break;
        default:
          break;
      }
    }
  });
  return out;
}

static Tensor unary_op(EwKind kind, const Tensor& a) {
  Tensor out = Tensor::zeros(a.shape(), want_grad(a));
  const auto& da = a.data();
  auto& dout = out.data();
  for (size_t i = 0; i < da.size(); ++i) {
    switch (kind) {
      case EwKind::Sigmoid: dout[i] = stable_sigmoid(da[i]); break;
      case EwKind::Softplus: dout[i] = stable_softplus(da[i]); break;
      case EwKind::Exp: dout[i] = std::exp(da[i]); break;
      case EwKind::Silu: dout[i] = da[i] * stable_sigmoid(da[i]); break;
      case EwKind::Neg: dout[i] = -da[i]; break;
      case EwKind::Reciprocal: dout[i] = 1.0 / da[i]; break;
      default: throw ContractError("elementwise: kind is not unary");
    }
  }
  auto an = a.node(), on = out.node();
  maybe_record(out, [kind, an, on](GradStore& gs) {
    auto* go = gs.find(on.get());
    if (!go || !an->requires_grad) return;
    auto& ga = gs.accum(an);
    const auto& x = an->data;
    const auto& y = on->data;
    for (size_t i = 0; i < ga.size(); ++i) {
      double d = 0.0;
      switch (kind) {
        case EwKind::Sigmoid: d = y[i] * (1.0 - y[i]); break;
        case EwKind::Softplus: d = stable_sigmoid(x[i]); break;
        case EwKind::Exp: d = y[i]; break;
        case EwKind::Silu: {
          double s = stable_sigmoid(x[i]);
          d = s * (1.0 + x[i] * (1.0 - s));
          break;
        }
        case EwKind::Neg: d = -1.0; break;
        case EwKind::Reciprocal: d = -1.0 / (x[i] * x[i]); break;
        default: break;
      }
      ga[i] += (*go)[i] * d;
    }
  });
  return out;
}

Tensor elementwise(EwKind kind, const Tensor& a, const Tensor& b) {
  switch (kind) {
    case EwKind::Add:
    case EwKind::Sub:
    case EwKind::Mul:
      if (!b.defined()) throw ContractError("elementwise: binary kind needs two operands");
      return binary_op(kind, a, b);
    default:
      if (b.defined()) throw ContractError("elementwise: unary kind takes one operand");
      return unary_op(kind, a);
  }
}

Tensor add(const Tensor& a, const Tensor& b) { return binary_op(EwKind::Add, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary_op(EwKind::Sub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary_op(EwKind::Mul, a, b); }
Tensor add(const Tensor& a, double b) { return add(a, Tensor::scalar(b)); }
Tensor mul(const Tensor& a, double b) { return mul(a, Tensor::scalar(b)); }
Tensor sigmoid(const Tensor& a) { return unary_op(EwKind::Sigmoid, a); }
Tensor softplus(const Tensor& a) { return unary_op(EwKind::Softplus, a); }
Tensor exp(const Tensor& a) { return unary_op(EwKind::Exp, a); }
Tensor silu(const Tensor& a) { return unary_op(EwKind::Silu, a); }
Tensor neg(const Tensor& a) { return unary_op(EwKind::Neg, a); }
Tensor reciprocal(const Tensor& a) { return unary_op(EwKind::Reciprocal, a); }

// ---------------------------------------------------------------------------
// Matmul

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0]) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  int64_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  Tensor out = Tensor::zeros({m, n}, want_grad(a) || want_grad(b));
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  double* po = out.data().data();
  for (int64_t i = 0; i < m; ++i) {
    for (int64_t l = 0; l < k; ++l) {
      double av = pa[i * k + l];
      if (av == 0.0) continue;
      const double* brow = pb + l * n;
      double* orow = po + i * n;
      for (int64_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  auto an = a.node(), bn = b.node(), on = out.node();
  maybe_record(out, [an, bn, on, m, k, n](GradStore& gs) {
    auto* go = gs.find(on.get());
    if (!go) return;
    const double* g = go->data();
    if (an->requires_grad) {
      auto& ga = gs.accum(an);
      const double* pb = bn->data.data();
      // dA = G * B^T
      for (int64_t i = 0; i < m; ++i) {
        for (int64_t l = 0; l < k; ++l) {
          double acc = 0.0;
          const double* grow = g + i * n;
          const double* brow = pb + l * n;
          for (int64_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
          ga[i * k + l] += acc;
        }
      }
    }
    if (bn->requires_grad) {
      auto& gb = gs.accum(bn);
      const double* pa = an->data.data();
      // dB = A^T * G
      for (int64_t l = 0; l < k; ++l) {
        for (int64_t i = 0; i < m; ++i) {
          double av = pa[i * k + l];
          if (av == 0.0) continue;
          const double* grow = g + i * n;
          double* brow = gb.data() + l * n;
          for (int64_t j = 0; j < n; ++j) brow[j] += av * grow[j];
        }
      }
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Reductions

Tensor reduce(ReduceKind kind, const Tensor& a, std::optional<int64_t> axis) {
  const Shape& s = a.shape();
  if (axis && (*axis < 0 || *axis >= a.rank())) {
    throw DimensionError("reduce: axis " + std::to_string(*axis) + " out of range for " +
                         shape_str(s));
  }
  Shape out_shape;
  int64_t outer = 1, red = 1, inner = 1;
  if (!axis) {
    out_shape = {1};
    red = a.numel();
  } else {
    for (int64_t i = 0; i < a.rank(); ++i) {
      if (i < *axis) outer *= s[i];
      else if (i == *axis) red = s[i];
      else inner *= s[i];
    }
    for (int64_t i = 0; i < a.rank(); ++i) {
      if (i != *axis) out_shape.push_back(s[i]);
    }
    if (out_shape.empty()) out_shape = {1};
  }
  Tensor out = Tensor::zeros(out_shape, want_grad(a));
  const auto& da = a.data();
  auto& dout = out.data();
  std::vector<int64_t> argmax;  // flat source index per output element (Max only)
  if (kind == ReduceKind::Max) argmax.assign(dout.size(), 0);
  for (int64_t o = 0; o < outer; ++o) {
    for (int64_t in = 0; in < inner; ++in) {
      int64_t oflat = o * inner + in;
      double acc = 0.0;
      double best = 0.0;
      int64_t besti = -1;
      for (int64_t r = 0; r < red; ++r) {
        int64_t src = (o * red + r) * inner + in;
        double v = da[src];
        if (kind == ReduceKind::Max) {
          if (besti < 0 || v > best) {  // strict >: first maximal wins ties
            best = v;
            besti = src;
          }
        } else {
          acc += v;
        }
      }
      switch (kind) {
        case ReduceKind::Sum: dout[oflat] = acc; break;
        case ReduceKind::Mean: dout[oflat] = acc / static_cast<double>(red); break;
        case ReduceKind::Max:
          dout[oflat] = best;
          argmax[oflat] = besti;
          break;
      }
    }
  }
  auto an = a.node(), on = out.node();
  maybe_record(out, [kind, an, on, outer, red, inner, argmax](GradStore& gs) {
    auto* go = gs.find(on.get());
    if (!go || !an->requires_grad) return;
    auto& ga = gs.accum(an);
    if (kind == ReduceKind::Max) {
      for (size_t o = 0; o < go->size(); ++o) ga[argmax[o]] += (*go)[o];
      return;
    }
    double scale = kind == ReduceKind::Mean ? 1.0 / static_cast<double>(red) : 1.0;
    for (int64_t o = 0; o < outer; ++o) {
      for (int64_t in = 0; in < inner; ++in) {
        double g = (*go)[o * inner + in] * scale;
        for (int64_t r = 0; r < red; ++r) ga[(o * red + r) * inner + in] += g;
      }
    }
  });
  return out;
}

Tensor sum(const Tensor& a, std::optional<int64_t> axis) { return reduce(ReduceKind::Sum, a, axis); }
Tensor mean(const Tensor& a, std::optional<int64_t> axis) { return reduce(ReduceKind::Mean, a, axis); }
Tensor reduce_max(const Tensor& a, std::optional<int64_t> axis) { return reduce(ReduceKind::Max, a, axis); }

// ---------------------------------------------------------------------------
// Reshape / take / concat

Tensor reshape(const Tensor& a, Shape shape) {
  validate_shape(shape);
  if (shape_numel(shape) != a.numel()) {
    throw DimensionError("reshape: " + shape_str(a.shape()) + " has " + std::to_string(a.numel()) +
                         " elements, target " + shape_str(shape));
  }
  Tensor out = Tensor::from_data(std::move(shape), a.data(), want_grad(a));
  auto an = a.node(), on = out.node();
  maybe_record(out, [an, on](GradStore& gs) {
    auto* go = gs.find(on.get());
    if (!go || !an->requires_grad) return;
    auto& ga = gs.accum(an);
    for (size_t i = 0; i < ga.size(); ++i) ga[i] += (*go)[i];
  });
  return out;
}

Tensor take(const Tensor& a, const std::vector<int64_t>& indices, Shape out_shape) {
  validate_shape(out_shape);
  if (shape_numel(out_shape) != static_cast<int64_t>(indices.size())) {
    throw DimensionError("take: index count does not match target shape " + shape_str(out_shape));
  }
  Tensor out = Tensor::zeros(std::move(out_shape), want_grad(a));
  const auto& da = a.data();
  auto& dout = out.data();
  int64_t n = a.numel();
  for (size_t i = 0; i < indices.size(); ++i) {
    int64_t src = indices[i];
    if (src < 0 || src >= n) throw DimensionError("take: index out of range");
    dout[i] = da[src];
  }
  auto an = a.node(), on = out.node();
  maybe_record(out, [an, on, indices](GradStore& gs) {
    auto* go = gs.find(on.get());
    if (!go || !an->requires_grad) return;
    auto& ga = gs.accum(an);
    for (size_t i = 0; i < indices.size(); ++i) ga[indices[i]] += (*go)[i];
  });
  return out;
}

Tensor concat0(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ContractError("concat0: no parts");
  Shape tail(parts[0].shape().begin() + 1, parts[0].shape().end());
  int64_t rows = 0;
  bool rg = false;
  for (const Tensor& p : parts) {
    Shape t(p.shape().begin() + 1, p.shape().end());
    if (t != tail) throw DimensionError("concat0: trailing dims differ");
    rows += p.shape()[0];
    rg = rg || want_grad(p);
  }
  Shape out_shape = {rows};
  out_shape.insert(out_shape.end(), tail.begin(), tail.end());
  Tensor out = Tensor::zeros(out_shape, rg);
  auto& dout = out.data();
  size_t offset = 0;
  for (const Tensor& p : parts) {
    std::copy(p.data().begin(), p.data().end(), dout.begin() + offset);
    offset += p.data().size();
  }
  std::vector<std::shared_ptr<TensorData>> nodes;
  for (const Tensor& p : parts) nodes.push_back(p.node());
  auto on = out.node();
  maybe_record(out, [nodes, on](GradStore& gs) {
    auto* go = gs.find(on.get());
    if (!go) return;
    size_t off = 0;
    for (const auto& n : nodes) {
      if (n->requires_grad) {
        auto& g = gs.accum(n);
        for (size_t i = 0; i < g.size(); ++i) g[i] += (*go)[off + i];
      }
      off += n->data.size();
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Layer norm

Tensor layer_norm(const Tensor& a, const Tensor& gamma, const Tensor& beta, double eps) {
  if (eps <= 0.0) throw ContractError("layer_norm: eps must be positive");
  int64_t d = a.shape().back();
  if (gamma.rank() != 1 || gamma.shape()[0] != d || beta.rank() != 1 || beta.shape()[0] != d) {
    throw DimensionError("layer_norm: gamma/beta must be [" + std::to_string(d) + "], got " +
                         shape_str(gamma.shape()) + " and " + shape_str(beta.shape()));
  }
  int64_t rows = a.numel() / d;
  Tensor out = Tensor::zeros(a.shape(), want_grad(a) || want_grad(gamma) || want_grad(beta));
  const auto& x = a.data();
  const auto& g = gamma.data();
  const auto& b = beta.data();
  auto& y = out.data();
  std::vector<double> mu(rows), istd(rows);
  for (int64_t r = 0; r < rows; ++r) {
    const double* row = x.data() + r * d;
    double m = 0.0;
    for (int64_t i = 0; i < d; ++i) m += row[i];
    m /= static_cast<double>(d);
    double v = 0.0;
    for (int64_t i = 0; i < d; ++i) v += (row[i] - m) * (row[i] - m);
    v /= static_cast<double>(d);
    mu[r] = m;
    istd[r] = 1.0 / std::sqrt(v + eps);
    double* yrow = y.data() + r * d;
    for (int64_t i = 0; i < d; ++i) yrow[i] = (row[i] - m) * istd[r] * g[i] + b[i];
  }
  auto an = a.node(), gn = gamma.node(), bn = beta.node(), on = out.node();
  maybe_record(out, [an, gn, bn, on, rows, d, mu, istd](GradStore& gs) {
    auto* go = gs.find(on.get());
    if (!go) return;
    const auto& x = an->data;
    const auto& g = gn->data;
    for (int64_t r = 0; r < rows; ++r) {
      const double* row = x.data() + r * d;
      const double* grow = go->data() + r * d;
      double is = istd[r], m = mu[r];
      if (gn->requires_grad || bn->requires_grad) {
        for (int64_t i = 0; i < d; ++i) {
          double xhat = (row[i] - m) * is;
          if (gn->requires_grad) gs.accum(gn)[i] += grow[i] * xhat;
          if (bn->requires_grad) gs.accum(bn)[i] += grow[i];
        }
      }
      if (an->requires_grad) {
        auto& ga = gs.accum(an);
        // dx = (is/d) * (d*dxhat - sum(dxhat) - xhat*sum(dxhat*xhat))
        double sum_dx = 0.0, sum_dxx = 0.0;
        for (int64_t i = 0; i < d; ++i) {
          double dxhat = grow[i] * g[i];
          double xhat = (row[i] - m) * is;
          sum_dx += dxhat;
          sum_dxx += dxhat * xhat;
        }
        for (int64_t i = 0; i < d; ++i) {
          double dxhat = grow[i] * g[i];
          double xhat = (row[i] - m) * is;
          ga[r * d + i] +=
              is / static_cast<double>(d) * (static_cast<double>(d) * dxhat - sum_dx - xhat * sum_dxx);
        }
      }
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Depthwise conv

Tensor depthwise_conv2d(const Tensor& a, const Tensor& kernel, int64_t padding) {
  if (a.rank() != 3 || kernel.rank() != 3) {
    throw DimensionError("depthwise_conv2d: need [C,H,W] input and [C,k,k] kernel, got " +
                         shape_str(a.shape()) + " and " + shape_str(kernel.shape()));
  }
  int64_t c = a.shape()[0], h = a.shape()[1], w = a.shape()[2];
  int64_t kc = kernel.shape()[0], kh = kernel.shape()[1], kw = kernel.shape()[2];
  if (kc != c || kh != kw) {
    throw DimensionError("depthwise_conv2d: kernel " + shape_str(kernel.shape()) +
                         " does not match input " + shape_str(a.shape()));
  }
  if (kh % 2 == 0) throw ConfigError("depthwise_conv2d: kernel size must be odd");
  if (padding != (kh - 1) / 2) throw ConfigError("depthwise_conv2d: padding must be (k-1)/2");
  Tensor out = Tensor::zeros(a.shape(), want_grad(a) || want_grad(kernel));
  const auto& x = a.data();
  const auto& k = kernel.data();
  auto& y = out.data();
  int64_t p = padding;
  for (int64_t ch = 0; ch < c; ++ch) {
    const double* xc = x.data() + ch * h * w;
    const double* kcp = k.data() + ch * kh * kw;
    double* yc = y.data() + ch * h * w;
    for (int64_t i = 0; i < h; ++i) {
      for (int64_t j = 0; j < w; ++j) {
        double acc = 0.0;
        for (int64_t u = 0; u < kh; ++u) {
          int64_t ii = i + u - p;
          if (ii < 0 || ii >= h) continue;
          for (int64_t v = 0; v < kw; ++v) {
            int64_t jj = j + v - p;
            if (jj < 0 || jj >= w) continue;
            acc += kcp[u * kw + v] * xc[ii * w + jj];
          }
        }
        yc[i * w + j] = acc;
      }
    }
  }
  auto an = a.node(), kn = kernel.node(), on = out.node();
  maybe_record(out, [an, kn, on, c, h, w, kh, kw, p](GradStore& gs) {
    auto* go = gs.find(on.get());
    if (!go) return;
    const auto& x = an->data;
    const auto& k = kn->data;
    for (int64_t ch = 0; ch < c; ++ch) {
      const double* gc = go->data() + ch * h * w;
      const double* xc = x.data() + ch * h * w;
      const double* kc = k.data() + ch * kh * kw;
      for (int64_t i = 0; i < h; ++i) {
        for (int64_t j = 0; j < w; ++j) {
          double gv = gc[i * w + j];
          if (gv == 0.0) continue;
          for (int64_t u = 0; u < kh; ++u) {
            int64_t ii = i + u - p;
            if (ii < 0 || ii >= h) continue;
            for (int64_t v = 0; v < kw; ++v) {
              int64_t jj = j + v - p;
              if (jj < 0 || jj >= w) continue;
              if (an->requires_grad) gs.accum(an)[ch * h * w + ii * w + jj] += gv * kc[u * kw + v];
              if (kn->requires_grad) gs.accum(kn)[ch * kh * kw + u * kw + v] += gv * xc[ii * w + jj];
            }
          }
        }
      }
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Softmax cross entropy

Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int64_t>& labels) {
  if (logits.rank() != 2) {
    throw DimensionError("softmax_cross_entropy: logits must be [n,classes], got " +
                         shape_str(logits.shape()));
  }
  int64_t n = logits.shape()[0], classes = logits.shape()[1];
  if (static_cast<int64_t>(labels.size()) != n) {
    throw DimensionError("softmax_cross_entropy: label count mismatch");
  }
  for (int64_t i = 0; i < n; ++i) {
    if (labels[i] < 0 || labels[i] >= classes) {
      throw ContractError("softmax_cross_entropy: label " + std::to_string(labels[i]) +
                          " out of range at row " + std::to_string(i));
    }
  }
  Tensor out = Tensor::zeros({1}, want_grad(logits));
  const auto& x = logits.data();
  std::vector<double> prob(x.size());
  double loss = 0.0;
  for (int64_t r = 0; r < n; ++r) {
    const double* row = x.data() + r * classes;
    double mx = row[0];
    for (int64_t cjj = 1; cjj < classes; ++cjj) mx = std::max(mx, row[cjj]);
    double z = 0.0;
    for (int64_t cjj = 0; cjj < classes; ++cjj) z += std::exp(row[cjj] - mx);
    for (int64_t cjj = 0; cjj < classes; ++cjj) prob[r * classes + cjj] = std::exp(row[cjj] - mx) / z;
    loss -= std::log(std::max(prob[r * classes + labels[r]], 1e-12));
  }
  out.data()[0] = loss / static_cast<double>(n);
  auto ln = logits.node(), on = out.node();
  maybe_record(out, [ln, on, labels, n, classes, prob](GradStore& gs) {
    auto* go = gs.find(on.get());
    if (!go || !ln->requires_grad) return;
    double g = (*go)[0] / static_cast<double>(n);
    auto& ga = gs.accum(ln);
    for (int64_t r = 0; r < n; ++r) {
      for (int64_t cjj = 0; cjj < classes; ++cjj) {
        double p = prob[r * classes + cjj];
        ga[r * classes + cjj] += g * (p - (labels[r] == cjj ? 1.0 : 0.0));
      }
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Finite differences

double finite_diff_check(const std::function<Tensor()>& f, const std::vector<Tensor>& params,
                         double eps, int64_t max_coords_per_param, uint64_t coord_seed) {
  if (eps < 1e-7 || eps > 1e-3) throw ContractError("finite_diff_check: eps outside [1e-7, 1e-3]");
  double base1 = f().value();
  double base2 = f().value();
  if (base1 != base2) {
    throw ContractError("finite_diff_check: f is not deterministic (baselines differ)");
  }
  for (Tensor p : params) p.zero_grad();
  std::vector<std::vector<double>> analytic;
  {
    GradTape tape;
    Tensor loss = f();
    tape.backward(loss);
    for (const Tensor& p : params) {
      if (!p.has_grad()) {
        analytic.emplace_back(p.numel(), 0.0);
      } else {
        analytic.push_back(p.grad());
      }
    }
  }
  double max_rel = 0.0;
  SplitMix64 rng(coord_seed);
  for (size_t pi = 0; pi < params.size(); ++pi) {
    Tensor p = params[pi];
    std::vector<int64_t> coords;
    int64_t n = p.numel();
    if (max_coords_per_param <= 0 || n <= max_coords_per_param) {
      coords.resize(n);
      std::iota(coords.begin(), coords.end(), 0);
    } else {
      for (int64_t k = 0; k < max_coords_per_param; ++k) coords.push_back(rng.uniform_int(0, n - 1));
    }
    for (int64_t ci : coords) {
      double saved = p.data()[ci];
      p.data()[ci] = saved + eps;
      double fp = f().value();
      p.data()[ci] = saved - eps;
      double fm = f().value();
      p.data()[ci] = saved;
      double numeric = (fp - fm) / (2.0 * eps);
      double a = analytic[pi][ci];
      double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
      max_rel = std::max(max_rel, rel);
    }
  }
  return max_rel;
}

}  // namespace ccvim

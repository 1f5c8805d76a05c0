#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "ccvim/errors.hpp"

namespace ccvim {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct TensorData {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until a backward pass touches it
  bool requires_grad = false;
};

// Value handle over a shared dense f64 buffer. Immutable after creation
// except for gradient accumulation.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int64_t rank() const { return static_cast<int64_t>(node_->shape.size()); }
  int64_t numel() const { return static_cast<int64_t>(node_->data.size()); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool rg) { node_->requires_grad = rg; }

  std::vector<double>& data() { return node_->data; }
  const std::vector<double>& data() const { return node_->data; }

  // Scalar read; contract error unless numel() == 1.
  double value() const;
  double at(std::initializer_list<int64_t> idx) const;

  bool has_grad() const { return node_ && !node_->grad.empty(); }
  const std::vector<double>& grad() const;
  void zero_grad();

  std::shared_ptr<TensorData> node() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<TensorData> node) : node_(std::move(node)) {}
  std::shared_ptr<TensorData> node_;
};

// Adjoint buffers for one backward replay, keyed by tensor node.
class GradStore {
 public:
  std::vector<double>* find(const TensorData* node);
  std::vector<double>& accum(const std::shared_ptr<TensorData>& node);
  void transfer_to_grads();

 private:
  struct Slot {
    std::shared_ptr<TensorData> node;
    std::vector<double> adj;
  };
  std::unordered_map<const TensorData*, Slot> slots_;
};

// Records executed operations; replays the chain rule in reverse.
// Construction pushes the tape as the active one for this thread.
class GradTape {
 public:
  GradTape();
  ~GradTape();
  GradTape(const GradTape&) = delete;
  GradTape& operator=(const GradTape&) = delete;

  void record(std::function<void(GradStore&)> backward);
  void backward(const Tensor& loss);
  size_t size() const { return entries_.size(); }

  static GradTape* active();

 private:
  std::vector<std::function<void(GradStore&)>> entries_;
};

enum class EwKind { Add, Sub, Mul, Sigmoid, Softplus, Exp, Silu, Neg, Reciprocal };
enum class ReduceKind { Sum, Mean, Max };

// Elementwise dispatcher; binary kinds broadcast with trailing size-1 stretch.
Tensor elementwise(EwKind kind, const Tensor& a, const Tensor& b = Tensor());

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, double b);
Tensor mul(const Tensor& a, double b);
Tensor sigmoid(const Tensor& a);
Tensor softplus(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor silu(const Tensor& a);
Tensor neg(const Tensor& a);
Tensor reciprocal(const Tensor& a);

Tensor matmul(const Tensor& a, const Tensor& b);

Tensor reduce(ReduceKind kind, const Tensor& a, std::optional<int64_t> axis = std::nullopt);
Tensor sum(const Tensor& a, std::optional<int64_t> axis = std::nullopt);
Tensor mean(const Tensor& a, std::optional<int64_t> axis = std::nullopt);
Tensor reduce_max(const Tensor& a, std::optional<int64_t> axis = std::nullopt);

Tensor reshape(const Tensor& a, Shape shape);

// Per-last-axis standardization with affine scale/shift.
Tensor layer_norm(const Tensor& a, const Tensor& gamma, const Tensor& beta, double eps = 1e-6);

// Shape-preserving per-channel correlation, zero padding. a: [C,H,W], kernel: [C,k,k].
Tensor depthwise_conv2d(const Tensor& a, const Tensor& kernel, int64_t padding);

// Element gather: out.data[i] = a.data[indices[i]]. Differentiable (scatter-add).
Tensor take(const Tensor& a, const std::vector<int64_t>& indices, Shape out_shape);

// Concatenate along axis 0; trailing dims must agree.
Tensor concat0(const std::vector<Tensor>& parts);

// Mean negative log-likelihood of softmaxed rows. logits: [n, classes].
Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int64_t>& labels);

// Reverse-mode pass through the active tape.
void backward(const Tensor& loss);

// Central-difference gradient verification. Returns the max relative error,
// denominator max(|analytic|, |numeric|, 1e-8). `max_coords_per_param`
// limits the sweep to a deterministic random subset (0 = all coordinates).
double finite_diff_check(const std::function<Tensor()>& f, const std::vector<Tensor>& params,
                         double eps, int64_t max_coords_per_param = 0,
                         uint64_t coord_seed = 0x5eedULL);

}  // namespace ccvim

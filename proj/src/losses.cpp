#include "ccvim/losses.hpp"

#include <string>

namespace ccvim {

namespace {

// [classes,H,W] -> [H*W, classes] token view.
Tensor logits_tokens(const Tensor& logits) {
  if (logits.rank() != 3) {
    throw DimensionError("expected [classes,H,W] logits, got " + shape_str(logits.shape()));
  }
  int64_t c = logits.shape()[0], h = logits.shape()[1], w = logits.shape()[2];
  std::vector<int64_t> idx(static_cast<size_t>(c * h * w));
  for (int64_t p = 0; p < h * w; ++p) {
    for (int64_t k = 0; k < c; ++k) idx[p * c + k] = k * h * w + p;
  }
  return take(logits, idx, {h * w, c});
}

}  // namespace

Tensor ce_loss(const Tensor& logits, const IntMap& labels) {
  int64_t c = logits.shape()[0], h = logits.shape()[1], w = logits.shape()[2];
  if (labels.h != h || labels.w != w) {
    throw DimensionError("ce_loss: label map " + std::to_string(labels.h) + "x" +
                         std::to_string(labels.w) + " does not match logits " +
                         shape_str(logits.shape()));
  }
  std::vector<int64_t> flat(static_cast<size_t>(h * w));
  for (int64_t y = 0; y < h; ++y) {
    for (int64_t x = 0; x < w; ++x) {
      int32_t l = labels.at(y, x);
      if (l < 0 || l >= c) {
        throw ContractError("ce_loss: label " + std::to_string(l) + " out of range at pixel (" +
                            std::to_string(y) + "," + std::to_string(x) + ")");
      }
      flat[static_cast<size_t>(y * w + x)] = l;
    }
  }
  return softmax_cross_entropy(logits_tokens(logits), flat);
}

Tensor dice_loss(const Tensor& pred_prob, const IntMap& gt) {
  if (pred_prob.rank() != 2 || pred_prob.shape()[0] != gt.h || pred_prob.shape()[1] != gt.w) {
    throw DimensionError("dice_loss: prediction " + shape_str(pred_prob.shape()) +
                         " does not match " + std::to_string(gt.h) + "x" + std::to_string(gt.w));
  }
  std::vector<double> y(gt.v.size());
  for (size_t i = 0; i < gt.v.size(); ++i) y[i] = gt.v[i] != 0 ? 1.0 : 0.0;
  Tensor target = Tensor::from_data({gt.h, gt.w}, std::move(y));
  Tensor numer = add(mul(sum(mul(pred_prob, target)), 2.0), 1.0);
  Tensor denom = add(add(sum(pred_prob), sum(target)), 1.0);
  return sub(Tensor::scalar(1.0), mul(numer, reciprocal(denom)));
}

Tensor foreground_prob(const Tensor& logits) {
  Tensor tokens = logits_tokens(logits);  // [P, classes]
  int64_t p = tokens.shape()[0], c = tokens.shape()[1];
  int64_t h = logits.shape()[1], w = logits.shape()[2];
  Tensor mx = reshape(reduce_max(tokens, 1), {p, 1});
  Tensor e = exp(sub(tokens, mx));
  Tensor z = reshape(sum(e, 1), {p, 1});
  std::vector<int64_t> first(static_cast<size_t>(p));
  for (int64_t i = 0; i < p; ++i) first[static_cast<size_t>(i)] = i * c;
  Tensor e0 = take(e, first, {p, 1});
  Tensor p0 = mul(e0, reciprocal(z));
  return reshape(sub(Tensor::scalar(1.0), p0), {h, w});
}

Tensor mse_loss(const Tensor& pred, const Tensor& target) {
  if (pred.shape() != target.shape()) {
    throw DimensionError("mse_loss: shapes differ: " + shape_str(pred.shape()) + " vs " +
                         shape_str(target.shape()));
  }
  Tensor d = sub(pred, target);
  return mean(mul(d, d));
}

Tensor combined_loss(const Tensor& logits, const IntMap& labels, const Tensor& hv_pred,
                     const Tensor& hv_gt) {
  if (hv_pred.defined() != hv_gt.defined()) {
    throw ContractError("combined_loss: HV prediction and target must both be present or absent");
  }
  IntMap binary(labels.h, labels.w);
  for (size_t i = 0; i < labels.v.size(); ++i) binary.v[i] = labels.v[i] != 0 ? 1 : 0;
  Tensor loss = add(ce_loss(logits, labels), dice_loss(foreground_prob(logits), binary));
  if (hv_pred.defined()) loss = add(loss, mse_loss(hv_pred, hv_gt));
  return loss;
}

}  // namespace ccvim

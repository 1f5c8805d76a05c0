#pragma once

#include "ccvim/maps.hpp"
#include "ccvim/tensor.hpp"

namespace ccvim {

// Softmax over the channel axis, then mean negative log-likelihood with the
// log clamped at 1e-12. logits: [classes,H,W], labels in 0..classes-1.
Tensor ce_loss(const Tensor& logits, const IntMap& labels);

// L_Dice = 1 - (2*sum(y*yhat) + 1) / (sum(y) + sum(yhat) + 1).
// pred_prob: [H,W] in [0,1], gt binary.
Tensor dice_loss(const Tensor& pred_prob, const IntMap& gt);

// 1 - P(class 0) per pixel. logits: [classes,H,W] -> [H,W].
Tensor foreground_prob(const Tensor& logits);

// Mean squared error between same-shape tensors.
Tensor mse_loss(const Tensor& pred, const Tensor& target);

// L = L_Ce + L_Dice, plus HV mean-squared error when both HV maps are given.
Tensor combined_loss(const Tensor& logits, const IntMap& labels, const Tensor& hv_pred = Tensor(),
                     const Tensor& hv_gt = Tensor());

}  // namespace ccvim

#pragma once

#include <cmath>

#include "mbp/common.hpp"
#include "mbp/tensor.hpp"

namespace mbp {

// mean over elements of sqrt((pred-gt)^2 + eps^2); smooth everywhere
template <typename T>
T charbonnier_loss(const Tensor<T>& pred, const Tensor<T>& gt, T eps) {
  if (pred.shape() != gt.shape())
    throw ContractError("charbonnier_loss: shape mismatch " + pred.shape().str() + " vs " +
                        gt.shape().str());
  if (!(eps > T(0))) throw ContractError("charbonnier_loss: eps must be positive");
  T acc = T(0);
  const T e2 = eps * eps;
  for (int64_t i = 0, e = pred.numel(); i < e; ++i) {
    const T d = pred[i] - gt[i];
    acc += std::sqrt(d * d + e2);
  }
  return acc / static_cast<T>(pred.numel());
}

template <typename T>
T charbonnier_loss(const FrameSeq<T>& pred, const FrameSeq<T>& gt, T eps) {
  if (pred.size() != gt.size()) throw ContractError("charbonnier_loss: sequence length mismatch");
  if (pred.empty()) throw ContractError("charbonnier_loss: empty sequences");
  T acc = T(0);
  for (size_t i = 0; i < pred.size(); ++i) acc += charbonnier_loss(pred[i], gt[i], eps);
  return acc / static_cast<T>(pred.size());
}

// Single cosine annealing cycle from lr_max at step 0 to lr_min at total_steps.
inline double cosine_lr(int64_t step, double lr_max, double lr_min, int64_t total_steps) {
  if (step < 0 || step > total_steps)
    throw ContractError("cosine_lr: step " + std::to_string(step) + " outside [0, " +
                        std::to_string(total_steps) + "]");
  if (total_steps == 0) return lr_max;
  const double t = static_cast<double>(step) / static_cast<double>(total_steps);
  return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + std::cos(3.14159265358979323846 * t));
}

}  // namespace mbp

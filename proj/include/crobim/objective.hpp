#pragma once

// Pixel-wise training objective: lambda * BCE + (1 - lambda) * soft Dice.

#include "crobim/autograd.hpp"
#include "crobim/feature_core.hpp"

namespace crobim::objective {

struct LossReport {
    double total = 0.0;
    double ce_term = 0.0;
    double dice_term = 0.0;
    double lambda = 0.0;
};

/// Mask (H x W bytes) as a 0/1 target of the logits' type.
template <typename T>
Matrix<T> mask_target(const Mask& mask);

/// Mean binary cross-entropy over all pixels. Throws ShapeError on mismatch.
template <typename T>
ag::Var<T> ce_loss(const ag::Var<T>& logits, const Mask& target);

/// 1 - (2 sum p y + eps) / (sum p + sum y + eps), p = sigmoid(logits).
template <typename T>
ag::Var<T> dice_loss(const ag::Var<T>& logits, const Mask& target, double eps);

template <typename T>
struct Loss {
    ag::Var<T> total;
    LossReport report;
};

/// lambda * ce + (1 - lambda) * dice, with the lambda and eps of `config`.
/// lambda == 1 or 0 drops the other term from the graph entirely.
template <typename T>
Loss<T> combined_loss(const ag::Var<T>& logits, const Mask& target, const ModelConfig& config);

}  // namespace crobim::objective

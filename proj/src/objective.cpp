#include "crobim/objective.hpp"

#include <cmath>

namespace crobim::objective {

namespace {

void check_shape(const char* op, std::size_t rows, std::size_t cols, const Mask& target) {
    if (rows != target.rows() || cols != target.cols()) {
        throw ShapeError(std::string(op) + ": logits " + std::to_string(rows) + "x" + std::to_string(cols) +
                         " vs target " + shape_string(target));
    }
}

}  // namespace

template <typename T>
Matrix<T> mask_target(const Mask& mask) {
    Matrix<T> y(mask.rows(), mask.cols());
    for (std::size_t i = 0; i < mask.size(); ++i) y[i] = mask[i] ? T{1} : T{0};
    return y;
}

template <typename T>
ag::Var<T> ce_loss(const ag::Var<T>& logits, const Mask& target) {
    check_shape("ce_loss", logits.rows(), logits.cols(), target);
    return ag::bce_with_logits(logits, mask_target<T>(target));
}

template <typename T>
ag::Var<T> dice_loss(const ag::Var<T>& logits, const Mask& target, double eps) {
    check_shape("dice_loss", logits.rows(), logits.cols(), target);
    if (!(eps > 0.0)) throw ArgumentError("dice_loss: smoothing must be positive");
    return ag::soft_dice(logits, mask_target<T>(target), eps);
}

template <typename T>
Loss<T> combined_loss(const ag::Var<T>& logits, const Mask& target, const ModelConfig& config) {
    const double lambda = config.lambda_ce;
    if (!(lambda >= 0.0 && lambda <= 1.0)) throw ArgumentError("combined_loss: lambda must lie in [0, 1]");
    auto ce = ce_loss(logits, target);
    auto dice = dice_loss(logits, target, config.dice_smoothing);

    Loss<T> out;
    out.report.lambda = lambda;
    out.report.ce_term = static_cast<double>(ce.item());
    out.report.dice_term = static_cast<double>(dice.item());
    if (lambda == 1.0) {
        out.total = ce;
    } else if (lambda == 0.0) {
        out.total = dice;
    } else {
        out.total = ag::add(ag::scale(ce, lambda), ag::scale(dice, 1.0 - lambda));
    }
    out.report.total = static_cast<double>(out.total.item());
    if (!std::isfinite(out.report.total)) throw NumericalError("combined_loss", "non-finite loss");
    return out;
}

#define CROBIM_INSTANTIATE(T)                                                              \
    template Matrix<T> mask_target<T>(const Mask&);                                        \
    template ag::Var<T> ce_loss<T>(const ag::Var<T>&, const Mask&);                        \
    template ag::Var<T> dice_loss<T>(const ag::Var<T>&, const Mask&, double);              \
    template Loss<T> combined_loss<T>(const ag::Var<T>&, const Mask&, const ModelConfig&);

CROBIM_INSTANTIATE(float)
CROBIM_INSTANTIATE(double)

}  // namespace crobim::objective

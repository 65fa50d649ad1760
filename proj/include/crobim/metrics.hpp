#pragma once

// Overall IoU, mean IoU and precision at IoU thresholds.

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "crobim/feature_core.hpp"

namespace crobim::metrics {

inline constexpr std::array<double, 5> kPrecisionThresholds{0.5, 0.6, 0.7, 0.8, 0.9};

/// pixel = 1 iff sigmoid(logit) >= threshold. At 0.5 this is logit >= 0.
template <typename T>
Mask binarize(const Matrix<T>& logits, double threshold = 0.5);

struct SampleCounts {
    std::uint64_t intersection = 0;
    std::uint64_t union_ = 0;
    /// I / U, with an empty union counting as a perfect prediction.
    double iou() const { return union_ == 0 ? 1.0 : static_cast<double>(intersection) / static_cast<double>(union_); }
};

struct MetricReport {
    double oiou = 0.0;
    double miou = 0.0;
    std::array<double, 5> precision{};  // Pr@0.5 .. Pr@0.9
    std::size_t count = 0;

    /// "key value" lines: oIoU, mIoU, Pr@0.5 .. Pr@0.9, count.
    std::string to_text() const;
    std::string to_json() const;
};

class MetricAccumulator {
public:
    /// Throws ShapeError when pred and gt differ in shape.
    SampleCounts accumulate(const Mask& pred, const Mask& gt);
    void merge(const MetricAccumulator& other);
    /// Throws ArgumentError on an empty accumulator.
    MetricReport finalize() const;

    std::uint64_t sum_intersection() const { return sum_i_; }
    std::uint64_t sum_union() const { return sum_u_; }
    const std::vector<double>& per_sample_iou() const { return ious_; }
    std::size_t count() const { return ious_.size(); }

private:
    std::uint64_t sum_i_ = 0;
    std::uint64_t sum_u_ = 0;
    std::vector<double> ious_;
};

std::string threshold_key(std::size_t index);  // "Pr@0.5" ...

}  // namespace crobim::metrics

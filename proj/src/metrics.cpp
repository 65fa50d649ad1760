#include "crobim/metrics.hpp"

#include <cmath>
#include <sstream>

#include <json.hpp>

namespace crobim::metrics {

template <typename T>
Mask binarize(const Matrix<T>& logits, double threshold) {
    if (!logits.all_finite()) throw NumericalError("binarize", "non-finite logit");
    Mask out(logits.rows(), logits.cols());
    for (std::size_t i = 0; i < logits.size(); ++i) {
        const double z = static_cast<double>(logits[i]);
        const bool on = threshold == 0.5 ? z >= 0.0 : 1.0 / (1.0 + std::exp(-z)) >= threshold;
        out[i] = on ? 1 : 0;
    }
    return out;
}

SampleCounts MetricAccumulator::accumulate(const Mask& pred, const Mask& gt) {
    if (!pred.same_shape(gt)) {
        throw ShapeError("accumulate: prediction " + shape_string(pred) + " vs ground truth " + shape_string(gt));
    }
    SampleCounts c;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const bool p = pred[i] != 0, g = gt[i] != 0;
        c.intersection += p && g;
        c.union_ += p || g;
    }
    sum_i_ += c.intersection;
    sum_u_ += c.union_;
    ious_.push_back(c.iou());
    return c;
}

void MetricAccumulator::merge(const MetricAccumulator& other) {
    sum_i_ += other.sum_i_;
    sum_u_ += other.sum_u_;
    ious_.insert(ious_.end(), other.ious_.begin(), other.ious_.end());
}

MetricReport MetricAccumulator::finalize() const {
    if (ious_.empty()) throw ArgumentError("finalize: no samples accumulated");
    MetricReport r;
    r.count = ious_.size();
    r.oiou = sum_u_ == 0 ? 1.0 : static_cast<double>(sum_i_) / static_cast<double>(sum_u_);
    double total = 0.0;
    for (double v : ious_) total += v;
    r.miou = total / static_cast<double>(r.count);
    for (std::size_t t = 0; t < kPrecisionThresholds.size(); ++t) {
        std::size_t hits = 0;
        for (double v : ious_) hits += v >= kPrecisionThresholds[t];
        r.precision[t] = static_cast<double>(hits) / static_cast<double>(r.count);
    }
    return r;
}

std::string threshold_key(std::size_t index) {
    std::ostringstream os;
    os << "Pr@" << kPrecisionThresholds.at(index);
    return os.str();
}

std::string MetricReport::to_text() const {
    std::ostringstream os;
    os.precision(10);
    os << "oIoU " << oiou << "\n" << "mIoU " << miou << "\n";
    for (std::size_t t = 0; t < precision.size(); ++t) os << threshold_key(t) << " " << precision[t] << "\n";
    os << "count " << count << "\n";
    return os.str();
}

std::string MetricReport::to_json() const {
    nlohmann::ordered_json j;
    j["oIoU"] = oiou;
    j["mIoU"] = miou;
    for (std::size_t t = 0; t < precision.size(); ++t) j[threshold_key(t)] = precision[t];
    j["count"] = count;
    return j.dump(2) + "\n";
}

template Mask binarize<float>(const Matrix<float>&, double);
template Mask binarize<double>(const Matrix<double>&, double);

}  // namespace crobim::metrics

#pragma once

// End-to-end forward graph: encoders, prompt modulation, feature aggregation,
// mutual-interaction decoder.

#include <memory>

#include "crobim/capm.hpp"
#include "crobim/lgfa.hpp"
#include "crobim/mid.hpp"
#include "crobim/objective.hpp"

namespace crobim {

template <typename T>
struct ForwardResult {
    FeaturePyramid<T> pyramid;
    TokenFeatures<T> language;
    lgfa::Aggregator<T>::Output aggregated;
    mid::MaskLogits<T> logits;
};

/// Owns all parameters; construction order (and hence parameter order and
/// initial values) depends only on the config and its seed.
template <typename T>
class CroBIM {
public:
    explicit CroBIM(const ModelConfig& config);
    CroBIM(const CroBIM&) = delete;
    CroBIM& operator=(const CroBIM&) = delete;

    ForwardResult<T> forward(const Image& image, std::span<const int> tokens, Trace* trace = nullptr) const;
    /// Combined loss of one sample; the graph is rooted at the returned total.
    objective::Loss<T> loss(const Triplet& sample, Trace* trace = nullptr) const;

    const ModelConfig& config() const { return config_; }
    ParamStore<T>& params() { return store_; }
    const ParamStore<T>& params() const { return store_; }

private:
    ModelConfig config_;
    ParamStore<T> store_;
    Rng rng_;
    ImageEncoder<T> image_encoder_;
    capm::PromptBank<T> prompts_;
    TextEncoder<T> text_encoder_;
    lgfa::Aggregator<T> aggregator_;
    mid::Decoder<T> decoder_;
};

}  // namespace crobim

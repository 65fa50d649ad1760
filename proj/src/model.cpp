#include "crobim/model.hpp"

namespace crobim {

namespace {

const ModelConfig& validated(const ModelConfig& config) {
    config.validate();
    return config;
}

}  // namespace

template <typename T>
CroBIM<T>::CroBIM(const ModelConfig& config)
    : config_(validated(config)),
      rng_(config.seed),
      image_encoder_(store_, config_, rng_),
      prompts_(store_, config_, rng_),
      text_encoder_(store_, config_, rng_),
      aggregator_(store_, config_, rng_),
      decoder_(store_, config_, rng_) {}

template <typename T>
ForwardResult<T> CroBIM<T>::forward(const Image& image, std::span<const int> tokens, Trace* trace) const {
    ForwardResult<T> out;
    out.pyramid = image_encoder_.encode(image);
    out.pyramid.validate();
    out.language = capm::encode_with_prompts(tokens, out.pyramid, prompts_, text_encoder_, config_, trace);
    out.aggregated = aggregator_(out.pyramid, out.language, trace);
    out.logits = decoder_(out.aggregated.levels, out.pyramid.grids, out.language, trace);
    if (!out.logits.full.value().all_finite()) throw NumericalError("forward", "non-finite mask logits");
    return out;
}

template <typename T>
objective::Loss<T> CroBIM<T>::loss(const Triplet& sample, Trace* trace) const {
    auto result = forward(sample.image, sample.tokens, trace);
    return objective::combined_loss(result.logits.full, sample.mask, config_);
}

template class CroBIM<float>;
template class CroBIM<double>;

}  // namespace crobim

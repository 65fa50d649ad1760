#include "crobim/capm.hpp"

#include <cmath>

#include "crobim/resample.hpp"

namespace crobim::capm {

template <typename T>
PromptBank<T>::PromptBank(ParamStore<T>& store, const ModelConfig& config, Rng& rng) {
    const std::size_t total = config.total_channels();
    Matrix<T> p(config.num_prompts, config.text_dim);
    for (auto& v : p.data()) v = static_cast<T>(0.5 * rng.normal());
    prompts = store.add("capm.prompts", std::move(p));
    for (std::size_t i = 0; i < 4; ++i) {
        context_proj[i] =
            Linear<T>(store, "capm.context_proj" + std::to_string(i + 1), config.channels[i], total, rng, false);
    }
    wq = Linear<T>(store, "capm.wq", config.text_dim, config.text_dim, rng, false);
    wk = Linear<T>(store, "capm.wk", total, config.text_dim, rng, false);
    wv = Linear<T>(store, "capm.wv", total, config.text_dim, rng, false);
}

template <typename T>
ag::Var<T> pool_context(const FeaturePyramid<T>& pyramid, const PromptBank<T>& bank, const ModelConfig& config) {
    pyramid.validate();
    std::array<ag::Var<T>, 4> pooled;
    for (std::size_t i = 0; i < 4; ++i) {
        pooled[i] = ag::row_mix(pyramid.levels[i], adaptive_avg_pool_map(pyramid.grids[i], config.pool_size));
    }
    if (config.context_mode == ContextMode::ChannelConcat) return ag::concat_cols<T>(pooled);
    for (std::size_t i = 0; i < 4; ++i) pooled[i] = bank.context_proj[i](pooled[i]);
    return ag::concat_rows<T>(pooled);
}

template <typename T>
ag::Var<T> modulate_prompts(const ag::Var<T>& context, const PromptBank<T>& bank, const ModelConfig& config,
                            Trace* trace) {
    if (context.cols() != bank.wk.in_features()) {
        throw ShapeError("modulate_prompts: context width " + std::to_string(context.cols()) + " != C_total " +
                         std::to_string(bank.wk.in_features()));
    }
    auto scores = ag::matmul_nt(bank.wq(bank.prompts), bank.wk(context));
    if (config.capm_scale_scores) scores = ag::scale(scores, 1.0 / std::sqrt(static_cast<double>(config.text_dim)));
    if (!scores.value().all_finite()) throw NumericalError("capm.modulate_prompts", "non-finite attention score");
    auto attn = ag::softmax_rows(scores);
    if (trace) trace->record("capm.attn", attn.value());
    return ag::matmul(attn, bank.wv(context));
}

template <typename T>
TokenFeatures<T> encode_with_prompts(std::span<const int> tokens, const FeaturePyramid<T>& pyramid,
                                     const PromptBank<T>& bank, const TextEncoder<T>& text,
                                     const ModelConfig& config, Trace* trace) {
    if (!config.use_capm) return text.encode(tokens, &bank.prompts, trace);
    const auto context = pool_context(pyramid, bank, config);
    const auto modulated = modulate_prompts(context, bank, config, trace);
    return text.encode(tokens, &modulated, trace);
}

#define CROBIM_INSTANTIATE(T)                                                                                   \
    template class PromptBank<T>;                                                                             \
    template ag::Var<T> pool_context<T>(const FeaturePyramid<T>&, const PromptBank<T>&, const ModelConfig&);  \
    template ag::Var<T> modulate_prompts<T>(const ag::Var<T>&, const PromptBank<T>&, const ModelConfig&,      \
                                            Trace*);                                                          \
    template TokenFeatures<T> encode_with_prompts<T>(std::span<const int>, const FeaturePyramid<T>&,          \
                                                     const PromptBank<T>&, const TextEncoder<T>&,             \
                                                     const ModelConfig&, Trace*);

CROBIM_INSTANTIATE(float)
CROBIM_INSTANTIATE(double)

}  // namespace crobim::capm

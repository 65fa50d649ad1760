#pragma once

// Context-aware prompt modulation: learnable prompts attend over pooled
// multi-scale visual context before they join the text encoder input.

#include <array>

#include "crobim/feature_core.hpp"

namespace crobim::capm {

template <typename T>
class PromptBank {
public:
    PromptBank(ParamStore<T>& store, const ModelConfig& config, Rng& rng);

    ag::Var<T> prompts;                      // N_p x D_l
    std::array<Linear<T>, 4> context_proj;   // C_i -> C_total, row-stack mode only
    Linear<T> wq;                            // D_l -> D_l
    Linear<T> wk;                            // C_total -> D_l
    Linear<T> wv;                            // C_total -> D_l
};

/// Multi-scale context embedding V_e. In row-stack mode each level is
/// adaptively pooled to s x s, projected to C_total and the four blocks are
/// stacked (4 s^2 rows); in channel-concat mode pooled levels are concatenated
/// along channels (s^2 rows). Width is C_total in both modes.
template <typename T>
ag::Var<T> pool_context(const FeaturePyramid<T>& pyramid, const PromptBank<T>& bank, const ModelConfig& config);

/// P_v = softmax(P wq (V_e wk)^T [/ sqrt(D_l)]) V_e wv. Records the attention
/// rows as "capm.attn" when a trace is given.
template <typename T>
ag::Var<T> modulate_prompts(const ag::Var<T>& context, const PromptBank<T>& bank, const ModelConfig& config,
                            Trace* trace = nullptr);

/// pool_context -> modulate_prompts -> text encoder with the modulated prompts
/// appended. With config.use_capm == false the raw prompts are appended instead.
template <typename T>
TokenFeatures<T> encode_with_prompts(std::span<const int> tokens, const FeaturePyramid<T>& pyramid,
                                     const PromptBank<T>& bank, const TextEncoder<T>& text,
                                     const ModelConfig& config, Trace* trace = nullptr);

}  // namespace crobim::capm

#pragma once

// Mutual-interaction decoder: language attends to vision, vision attends back
// to the refined language and then to itself through multi-scale deformable
// attention, and the summary token scores every pixel of the mask embedding.

#include <array>
#include <vector>

#include "crobim/feature_core.hpp"

namespace crobim::mid {

template <typename T>
struct DecoderState {
    ag::Var<T> visual;        // V_ms, N x D
    ag::LevelLayout layout;   // level ranges over the N visual tokens
    ag::Var<T> language;      // projected L_v, ell x D
    std::vector<bool> pad_mask;
    std::size_t cls_index = 0;
    ag::Var<T> language_hat;  // after language-to-vision interaction
    ag::Var<T> visual_hat;    // after vision-to-language interaction
};

template <typename T>
class HarmonizeParams {
public:
    HarmonizeParams() = default;
    HarmonizeParams(ParamStore<T>& store, const ModelConfig& config, Rng& rng);

    std::array<Linear<T>, 4> level_proj;  // 1x1 conv C_i -> D
    Linear<T> language_proj;              // D_l -> D
};

/// Deformable attention over the four visual levels.
template <typename T>
class DeformAttnParams {
public:
    DeformAttnParams() = default;
    DeformAttnParams(ParamStore<T>& store, const std::string& name, std::size_t dim, std::size_t heads,
                     std::size_t levels, std::size_t points, Rng& rng);

    std::size_t heads = 1;
    std::size_t levels = 4;
    std::size_t points = 1;
    Linear<T> offsets;      // D -> heads*levels*points*2, in pixels of the sampled level
    Linear<T> weights;      // D -> heads*levels*points, softmax per head
    Linear<T> value_proj;   // D -> D
    Linear<T> output_proj;  // D -> D
};

/// Normalised (x, y) centre of every token's own cell, N x 2.
Matrix<double> reference_points(const ag::LevelLayout& layout);

/// Per query: sample each level at reference + offset/(W_l, H_l) with bilinear
/// interpolation (zero outside), weight by a softmax over levels x points per head,
/// and project. Records "<prefix>.weights" and "<prefix>.locations" when traced.
template <typename T>
ag::Var<T> ms_deform_attn(const ag::Var<T>& queries, const ag::Var<T>& value_input, const ag::LevelLayout& layout,
                          const DeformAttnParams<T>& params, Trace* trace = nullptr,
                          const std::string& prefix = "mid.deform");

template <typename T>
class L2VParams {
public:
    L2VParams() = default;
    L2VParams(ParamStore<T>& store, const std::string& name, const ModelConfig& config, Rng& rng);

    MultiHeadAttention<T> cross;
    LayerNorm<T> norm1;
    MultiHeadAttention<T> self;
    LayerNorm<T> norm2;
    FeedForward<T> ffn;
    LayerNorm<T> norm3;
};

template <typename T>
class V2LParams {
public:
    V2LParams() = default;
    V2LParams(ParamStore<T>& store, const std::string& name, const ModelConfig& config, Rng& rng);

    MultiHeadAttention<T> cross;
    LayerNorm<T> norm1;
    DeformAttnParams<T> deform;
    LayerNorm<T> norm2;
    FeedForward<T> ffn;
    LayerNorm<T> norm3;
};

/// Projects each fused level to D, flattens row-major and concatenates in
/// level order; projects the language features to D.
template <typename T>
DecoderState<T> harmonize(const std::array<ag::Var<T>, 4>& fused, const std::array<GridShape, 4>& grids,
                          const TokenFeatures<T>& language, const HarmonizeParams<T>& params);

/// L^ = FFN(SelfAttn(CrossAttn(L, V))) with residual + LayerNorm after each
/// sub-layer. Reads state.language_hat if set (later rounds), else state.language.
template <typename T>
ag::Var<T> l2v_interact(const DecoderState<T>& state, const L2VParams<T>& params, bool mask_padding,
                        Trace* trace = nullptr);

/// V^ = FFN(MSDeformAttn(CrossAttn(V, L^))) with residual + LayerNorm after each
/// sub-layer. Reads state.visual_hat if set, else state.visual; keys come from
/// state.language_hat if set, else state.language.
template <typename T>
ag::Var<T> v2l_interact(const DecoderState<T>& state, const V2LParams<T>& params, bool mask_padding,
                        Trace* trace = nullptr);

template <typename T>
struct MaskLogits {
    ag::Var<T> low;   // H_1 x W_1
    ag::Var<T> full;  // H x W
};

/// V_out = conv1x1(sum over levels of upsample(V^ + V_ms)); logits = V_out . L^[cls].
template <typename T>
MaskLogits<T> predict_mask(const DecoderState<T>& state, const Linear<T>& out_conv, GridShape image);

/// The full decoder, including the ablation topologies selected by the config.
template <typename T>
class Decoder {
public:
    Decoder(ParamStore<T>& store, const ModelConfig& config, Rng& rng);

    MaskLogits<T> operator()(const std::array<ag::Var<T>, 4>& fused, const std::array<GridShape, 4>& grids,
                             const TokenFeatures<T>& language, Trace* trace = nullptr) const;

    HarmonizeParams<T> harmonize_params;
    std::vector<L2VParams<T>> l2v;
    std::vector<V2LParams<T>> v2l;
    Linear<T> out_conv;

private:
    ModelConfig config_;
};

}  // namespace crobim::mid

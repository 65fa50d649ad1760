#include "crobim/mid.hpp"

#include <cmath>
#include <numbers>

#include "crobim/resample.hpp"

namespace crobim::mid {

template <typename T>
HarmonizeParams<T>::HarmonizeParams(ParamStore<T>& store, const ModelConfig& config, Rng& rng) {
    for (std::size_t i = 0; i < 4; ++i) {
        level_proj[i] =
            Linear<T>(store, "mid.proj_v" + std::to_string(i + 1), config.channels[i], config.hidden_dim, rng);
    }
    language_proj = Linear<T>(store, "mid.proj_l", config.text_dim, config.hidden_dim, rng);
}

template <typename T>
DeformAttnParams<T>::DeformAttnParams(ParamStore<T>& store, const std::string& name, std::size_t dim,
                                      std::size_t h, std::size_t l, std::size_t p, Rng& rng)
    : heads(h), levels(l), points(p) {
    offsets = Linear<T>(store, name + ".offsets", dim, h * l * p * 2, rng);
    weights = Linear<T>(store, name + ".weights", dim, h * l * p, rng);
    value_proj = Linear<T>(store, name + ".value", dim, dim, rng);
    output_proj = Linear<T>(store, name + ".output", dim, dim, rng);

    // Sampling starts on a ring of directions, one per head, at radii 1..P pixels;
    // attention weights start uniform.
    offsets.weight.mutable_value().fill(T{0});
    weights.weight.mutable_value().fill(T{0});
    auto& bias = offsets.bias.mutable_value();
    for (std::size_t hh = 0; hh < h; ++hh) {
        const double theta = 2.0 * std::numbers::pi * static_cast<double>(hh) / static_cast<double>(h);
        double dx = std::cos(theta), dy = std::sin(theta);
        const double norm = std::max(std::abs(dx), std::abs(dy));
        dx /= norm;
        dy /= norm;
        for (std::size_t ll = 0; ll < l; ++ll)
            for (std::size_t pp = 0; pp < p; ++pp) {
                const std::size_t s = (hh * l + ll) * p + pp;
                bias[2 * s] = static_cast<T>(dx * static_cast<double>(pp + 1));
                bias[2 * s + 1] = static_cast<T>(dy * static_cast<double>(pp + 1));
            }
    }
}

Matrix<double> reference_points(const ag::LevelLayout& layout) {
    Matrix<double> ref(layout.total_rows(), 2);
    for (std::size_t l = 0; l < layout.grids.size(); ++l) {
        const auto g = layout.grids[l];
        for (std::size_t y = 0; y < g.height; ++y)
            for (std::size_t x = 0; x < g.width; ++x) {
                const std::size_t row = layout.starts[l] + y * g.width + x;
                ref(row, 0) = (static_cast<double>(x) + 0.5) / static_cast<double>(g.width);
                ref(row, 1) = (static_cast<double>(y) + 0.5) / static_cast<double>(g.height);
            }
    }
    return ref;
}

template <typename T>
ag::Var<T> ms_deform_attn(const ag::Var<T>& queries, const ag::Var<T>& value_input, const ag::LevelLayout& layout,
                          const DeformAttnParams<T>& params, Trace* trace, const std::string& prefix) {
    const std::size_t nq = queries.rows();
    if (layout.grids.size() != params.levels) throw ShapeError(prefix + ": level count mismatch");
    if (value_input.rows() != layout.total_rows()) throw ShapeError(prefix + ": value rows do not match layout");
    if (nq != layout.total_rows()) throw ShapeError(prefix + ": one reference point per visual token required");

    const std::size_t samples = params.heads * params.levels * params.points;
    const auto ref = reference_points(layout);
    Matrix<T> base(nq, samples * 2), unit(nq, samples * 2);
    for (std::size_t q = 0; q < nq; ++q)
        for (std::size_t hh = 0; hh < params.heads; ++hh)
            for (std::size_t l = 0; l < params.levels; ++l)
                for (std::size_t p = 0; p < params.points; ++p) {
                    const std::size_t s = (hh * params.levels + l) * params.points + p;
                    base(q, 2 * s) = static_cast<T>(ref(q, 0));
                    base(q, 2 * s + 1) = static_cast<T>(ref(q, 1));
                    unit(q, 2 * s) = static_cast<T>(1.0 / static_cast<double>(layout.grids[l].width));
                    unit(q, 2 * s + 1) = static_cast<T>(1.0 / static_cast<double>(layout.grids[l].height));
                }
    auto value = params.value_proj(value_input);
    auto locations = ag::add(ag::Var<T>::constant(std::move(base)),
                             ag::mul(params.offsets(queries), ag::Var<T>::constant(std::move(unit))));
    auto weights = ag::softmax_rows(params.weights(queries), params.levels * params.points);
    if (!weights.value().all_finite()) throw NumericalError(prefix, "non-finite sampling weight");
    if (trace) {
        trace->record(prefix + ".weights", weights.value());
        trace->record(prefix + ".locations", locations.value());
    }
    auto sampled = ag::deform_sample(value, layout, locations, weights, params.heads, params.points);
    return params.output_proj(sampled);
}

template <typename T>
L2VParams<T>::L2VParams(ParamStore<T>& store, const std::string& name, const ModelConfig& c, Rng& rng)
    : cross(store, name + ".cross", c.hidden_dim, c.hidden_dim, c.hidden_dim, c.decoder_heads, rng),
      norm1(store, name + ".norm1", c.hidden_dim, c.layer_norm_eps),
      self(store, name + ".self", c.hidden_dim, c.hidden_dim, c.hidden_dim, c.decoder_heads, rng),
      norm2(store, name + ".norm2", c.hidden_dim, c.layer_norm_eps),
      ffn(store, name + ".ffn", c.hidden_dim, c.decoder_ffn_dim, rng),
      norm3(store, name + ".norm3", c.hidden_dim, c.layer_norm_eps) {}

template <typename T>
V2LParams<T>::V2LParams(ParamStore<T>& store, const std::string& name, const ModelConfig& c, Rng& rng)
    : cross(store, name + ".cross", c.hidden_dim, c.hidden_dim, c.hidden_dim, c.decoder_heads, rng),
      norm1(store, name + ".norm1", c.hidden_dim, c.layer_norm_eps),
      deform(store, name + ".deform", c.hidden_dim, c.msda_heads, 4, c.msda_points, rng),
      norm2(store, name + ".norm2", c.hidden_dim, c.layer_norm_eps),
      ffn(store, name + ".ffn", c.hidden_dim, c.decoder_ffn_dim, rng),
      norm3(store, name + ".norm3", c.hidden_dim, c.layer_norm_eps) {}

template <typename T>
DecoderState<T> harmonize(const std::array<ag::Var<T>, 4>& fused, const std::array<GridShape, 4>& grids,
                          const TokenFeatures<T>& language, const HarmonizeParams<T>& params) {
    std::array<ag::Var<T>, 4> projected;
    for (std::size_t i = 0; i < 4; ++i) {
        if (!fused[i] || fused[i].rows() != grids[i].cells()) {
            throw ShapeError("harmonize: level " + std::to_string(i + 1) + " does not match grid " +
                             to_string(grids[i]));
        }
        projected[i] = params.level_proj[i](fused[i]);
    }
    DecoderState<T> state;
    state.visual = ag::concat_rows<T>(projected);
    state.layout = ag::LevelLayout::from_grids({grids.begin(), grids.end()});
    state.language = params.language_proj(language.values);
    state.pad_mask = language.pad_mask;
    state.cls_index = language.cls_index;
    return state;
}

template <typename T>
ag::Var<T> l2v_interact(const DecoderState<T>& state, const L2VParams<T>& params, bool mask_padding,
                        Trace* trace) {
    const auto& lang = state.language_hat ? state.language_hat : state.language;
    const auto& vis = state.visual_hat ? state.visual_hat : state.visual;
    const std::vector<bool>* mask = mask_padding ? &state.pad_mask : nullptr;

    auto cross = params.cross(lang, vis);
    auto x = params.norm1(ag::add(lang, cross.output));
    auto self = params.self(x, x, mask);
    x = params.norm2(ag::add(x, self.output));
    x = params.norm3(ag::add(x, params.ffn(x)));
    if (!x.value().all_finite()) throw NumericalError("mid.l2v", "non-finite language feature");
    if (trace) {
        const auto& probs = cross.probs.front().value();
        trace->record("mid.l2v.cross", probs);
        trace->record("mid.l2v.self", self.probs.front().value());
        // Summary-token attention over the finest level, as an image-shaped map.
        const GridShape fine = state.layout.grids.front();
        Matrix<T> map(fine.height, fine.width);
        for (std::size_t c = 0; c < fine.cells(); ++c) map[c] = probs(state.cls_index, state.layout.starts[0] + c);
        trace->record("mid.l2v.cls_map", map, fine);
    }
    return x;
}

template <typename T>
ag::Var<T> v2l_interact(const DecoderState<T>& state, const V2LParams<T>& params, bool mask_padding,
                        Trace* trace) {
    const auto& lang = state.language_hat ? state.language_hat : state.language;
    const auto& vis = state.visual_hat ? state.visual_hat : state.visual;
    const std::vector<bool>* mask = mask_padding ? &state.pad_mask : nullptr;

    auto cross = params.cross(vis, lang, mask);
    auto x = params.norm1(ag::add(vis, cross.output));
    x = params.norm2(ag::add(x, ms_deform_attn(x, x, state.layout, params.deform, trace)));
    x = params.norm3(ag::add(x, params.ffn(x)));
    if (!x.value().all_finite()) throw NumericalError("mid.v2l", "non-finite visual feature");
    if (trace) {
        const auto& probs = cross.probs.front().value();
        trace->record("mid.v2l.cross", probs);
        const GridShape fine = state.layout.grids.front();
        Matrix<T> map(fine.height, fine.width);
        for (std::size_t c = 0; c < fine.cells(); ++c) map[c] = probs(state.layout.starts[0] + c, state.cls_index);
        trace->record("mid.v2l.cls_map", map, fine);
    }
    return x;
}

template <typename T>
MaskLogits<T> predict_mask(const DecoderState<T>& state, const Linear<T>& out_conv, GridShape image) {
    const auto& layout = state.layout;
    const auto& vis_hat = state.visual_hat ? state.visual_hat : state.visual;
    const auto& lang_hat = state.language_hat ? state.language_hat : state.language;
    auto combined = ag::add(vis_hat, state.visual);

    const GridShape fine = layout.grids.front();
    ag::Var<T> summed;
    for (std::size_t l = 0; l < layout.grids.size(); ++l) {
        auto level = ag::slice_rows(combined, layout.starts[l], layout.grids[l].cells());
        if (!(layout.grids[l] == fine)) level = ag::row_mix(level, bilinear_resize_map(layout.grids[l], fine));
        summed = summed ? ag::add(summed, level) : level;
    }
    auto embedding = out_conv(summed);  // (H_1 W_1 x D)
    auto summary = ag::slice_rows(lang_hat, state.cls_index, 1);
    auto column = ag::matmul_nt(embedding, summary);  // (H_1 W_1 x 1)

    MaskLogits<T> out;
    out.low = ag::reshape(column, fine.height, fine.width);
    out.full = ag::reshape(ag::row_mix(column, bilinear_resize_map(fine, image)), image.height, image.width);
    return out;
}

template <typename T>
Decoder<T>::Decoder(ParamStore<T>& store, const ModelConfig& config, Rng& rng)
    : harmonize_params(store, config, rng), config_(config) {
    for (std::size_t r = 0; r < config.decoder_rounds; ++r) {
        const std::string tag = config.decoder_rounds == 1 ? "" : std::to_string(r + 1);
        if (config.decoder_mode == DecoderMode::Bidirectional) l2v.emplace_back(store, "mid.l2v" + tag, config, rng);
        v2l.emplace_back(store, "mid.v2l" + tag, config, rng);
    }
    out_conv = Linear<T>(store, "mid.out_conv", config.hidden_dim, config.hidden_dim, rng);
    // Logits are a dot product of two layer-normed D-vectors; shrink by 1/D so they start near zero.
    const double shrink = 1.0 / static_cast<double>(config.hidden_dim);
    for (auto& w : out_conv.weight.mutable_value().data()) w = static_cast<T>(w * shrink);
}

template <typename T>
MaskLogits<T> Decoder<T>::operator()(const std::array<ag::Var<T>, 4>& fused, const std::array<GridShape, 4>& grids,
                                     const TokenFeatures<T>& language, Trace* trace) const {
    auto state = harmonize(fused, grids, language, harmonize_params);
    if (!config_.decoder_bypass_attention) {
        for (std::size_t r = 0; r < v2l.size(); ++r) {
            if (!l2v.empty()) state.language_hat = l2v_interact(state, l2v[r], config_.decoder_mask_padding, trace);
            state.visual_hat = v2l_interact(state, v2l[r], config_.decoder_mask_padding, trace);
        }
    }
    return predict_mask(state, out_conv, {config_.image_size, config_.image_size});
}

#define CROBIM_INSTANTIATE(T)                                                                                    \
    template class HarmonizeParams<T>;                                                                         \
    template class DeformAttnParams<T>;                                                                        \
    template class L2VParams<T>;                                                                               \
    template class V2LParams<T>;                                                                               \
    template class Decoder<T>;                                                                                 \
    template ag::Var<T> ms_deform_attn<T>(const ag::Var<T>&, const ag::Var<T>&, const ag::LevelLayout&,        \
                                          const DeformAttnParams<T>&, Trace*, const std::string&);             \
    template DecoderState<T> harmonize<T>(const std::array<ag::Var<T>, 4>&, const std::array<GridShape, 4>&,   \
                                          const TokenFeatures<T>&, const HarmonizeParams<T>&);                 \
    template ag::Var<T> l2v_interact<T>(const DecoderState<T>&, const L2VParams<T>&, bool, Trace*);            \
    template ag::Var<T> v2l_interact<T>(const DecoderState<T>&, const V2LParams<T>&, bool, Trace*);            \
    template MaskLogits<T> predict_mask<T>(const DecoderState<T>&, const Linear<T>&, GridShape);

CROBIM_INSTANTIATE(float)
CROBIM_INSTANTIATE(double)

}  // namespace crobim::mid

#include "crobim/lgfa.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "crobim/resample.hpp"

namespace crobim::lgfa {

template <typename T>
StageFusionParams<T>::StageFusionParams(ParamStore<T>& store, const std::string& name, std::size_t channels,
                                        std::size_t length, std::size_t text_dim, Rng& rng)
    : wq(store, name + ".wq", channels, length, rng),
      wk(store, name + ".wk", text_dim, text_dim, rng),
      wv(store, name + ".wv", text_dim, text_dim, rng),
      gate(store, name + ".gate", length, length, rng),
      reweight(store, name + ".reweight", length, channels, rng) {
    // reweight starts at all-ones output
    reweight.bias.mutable_value().fill(T{1});
}

template <typename T>
StageOutput<T> fuse_stage(const ag::Var<T>& level, GridShape grid, const TokenFeatures<T>& language,
                          const StageFusionParams<T>& params, std::size_t stage, bool mask_padding, Trace* trace) {
    const std::size_t length = language.length();
    const std::string tag = "lgfa.stage" + std::to_string(stage + 1);
    if (level.rows() != grid.cells()) throw ShapeError(tag + ": level rows do not match grid " + to_string(grid));
    if (params.wq.out_features() != length) {
        throw ShapeError(tag + ": projection expects " + std::to_string(params.wq.out_features()) +
                         " tokens, got " + std::to_string(length));
    }

    auto vq = params.wq(level);  // (HW x ell) == V_iq^T
    auto lk = params.wk(language.values);
    auto lv = params.wv(language.values);
    if (mask_padding) {
        Matrix<T> keep(length, 1);
        for (std::size_t j = 0; j < length; ++j) keep[j] = language.pad_mask[j] ? T{1} : T{0};
        const auto keep_var = ag::Var<T>::constant(std::move(keep));
        lk = ag::mul_col(lk, keep_var);
        lv = ag::mul_col(lv, keep_var);
    }
    auto scores = ag::matmul(vq, lk);  // (HW x D_l)
    if (!scores.value().all_finite()) throw NumericalError(tag, "non-finite attention score");
    auto attn = ag::softmax_rows(ag::scale(scores, 1.0 / std::sqrt(static_cast<double>(length))));
    auto mixed = ag::matmul_nt(attn, lv);  // (HW x ell)
    auto gated = ag::gelu(params.gate(mixed));
    auto fused = ag::mul(params.reweight(gated), level);
    if (!fused.value().all_finite()) throw NumericalError(tag, "non-finite fused feature");
    if (trace) {
        trace->record(tag + ".scores", scores.value(), grid);
        trace->record(tag + ".softmax", attn.value(), grid);
    }
    return {fused, scores};
}

template <typename T>
Matrix<double> stage_saliency(const Matrix<T>& scores, GridShape grid, GridShape coarse, std::size_t length) {
    if (scores.rows() != grid.cells()) throw ShapeError("stage_saliency: score rows do not match grid");
    const auto resampled = apply_row_map(bilinear_resize_map(grid, coarse), scores.template cast<double>());
    const std::size_t cells = resampled.rows(), dims = resampled.cols();
    const double temp = 1.0 / std::sqrt(static_cast<double>(length));
    Matrix<double> saliency(coarse.height, coarse.width);
    for (std::size_t d = 0; d < dims; ++d) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < cells; ++c) mx = std::max(mx, resampled(c, d) * temp);
        double z = 0.0;
        for (std::size_t c = 0; c < cells; ++c) z += std::exp(resampled(c, d) * temp - mx);
        for (std::size_t c = 0; c < cells; ++c) saliency[c] += std::exp(resampled(c, d) * temp - mx) / z;
    }
    for (auto& v : saliency.data()) v /= static_cast<double>(dims);
    return saliency;
}

Matrix<double> deficit_from_saliency(const std::array<Matrix<double>, 4>& saliency) {
    Matrix<double> deficit(saliency[0].rows(), saliency[0].cols());
    for (std::size_t i = 0; i < 3; ++i) {
        if (!saliency[i].same_shape(saliency[i + 1])) throw ShapeError("deficit map: saliency shapes differ");
        for (std::size_t c = 0; c < deficit.size(); ++c) deficit[c] += std::abs(saliency[i][c] - saliency[i + 1][c]);
    }
    return deficit;
}

template <typename T>
Matrix<double> deficit_map(const std::array<Matrix<T>, 4>& scores, const std::array<GridShape, 4>& grids,
                           std::size_t length, Trace* trace) {
    std::array<Matrix<double>, 4> saliency;
    for (std::size_t i = 0; i < 4; ++i) {
        saliency[i] = stage_saliency(scores[i], grids[i], grids[3], length);
        if (trace) trace->record("lgfa.saliency" + std::to_string(i + 1), saliency[i], grids[3]);
    }
    auto deficit = deficit_from_saliency(saliency);
    if (trace) trace->record("lgfa.deficit", deficit, grids[3]);
    return deficit;
}

std::vector<Cell> topk_regions(const Matrix<double>& deficit, std::size_t k) {
    const std::size_t n = deficit.size();
    if (k > n) {
        throw ArgumentError("topk_regions: K=" + std::to_string(k) + " exceeds " + std::to_string(n) + " cells");
    }
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                      [&](std::size_t a, std::size_t b) {
                          if (deficit[a] != deficit[b]) return deficit[a] > deficit[b];
                          return a < b;
                      });
    std::vector<Cell> cells;
    for (std::size_t i = 0; i < k; ++i) cells.push_back({order[i] / deficit.cols(), order[i] % deficit.cols()});
    return cells;
}

template <typename T>
CompensationParams<T>::CompensationParams(ParamStore<T>& store, const ModelConfig& config, Rng& rng) {
    const std::size_t dim = config.compensation_dim;
    for (std::size_t i = 0; i < 4; ++i) {
        const auto tag = std::to_string(i + 1);
        forward_proj[i] = Linear<T>(store, "lgfa.comp.proj_fwd" + tag, config.channels[i], dim, rng);
        inverse_proj[i] = Linear<T>(store, "lgfa.comp.proj_inv" + tag, dim, config.channels[i], rng);
    }
    norm = LayerNorm<T>(store, "lgfa.comp.norm", dim, config.layer_norm_eps);
    msa = MultiHeadAttention<T>(store, "lgfa.comp.msa", dim, dim, dim, config.compensation_heads, rng);
}

template <typename T>
std::array<ag::Var<T>, 4> compensate_regions(const std::array<ag::Var<T>, 4>& fused,
                                             const std::array<GridShape, 4>& grids, const std::vector<Cell>& regions,
                                             const CompensationParams<T>& params) {
    if (regions.empty()) return fused;
    const GridShape coarse = grids[3];
    const std::size_t k = regions.size();
    std::vector<std::size_t> cell_index;
    for (const auto& r : regions) {
        if (r.row >= coarse.height || r.col >= coarse.width) throw ShapeError("compensate_regions: cell outside grid");
        cell_index.push_back(r.row * coarse.width + r.col);
    }

    // Resampled features at the selected cells, one (K x C_i) block per level.
    std::array<ag::Var<T>, 4> sampled;
    std::vector<ag::Var<T>> tokens_per_level;
    for (std::size_t i = 0; i < 4; ++i) {
        if (fused[i].rows() != grids[i].cells()) throw ShapeError("compensate_regions: level/grid mismatch");
        const auto full = bilinear_resize_map(grids[i], coarse);
        ag::SparseRowMap pick(k, grids[i].cells());
        std::vector<std::pair<std::size_t, double>> terms;
        for (std::size_t c : cell_index) {
            terms.clear();
            for (std::size_t t = full.offsets[c]; t < full.offsets[c + 1]; ++t)
                terms.emplace_back(full.indices[t], full.weights[t]);
            pick.push_row(terms);
        }
        sampled[i] = ag::row_mix(fused[i], pick);
        tokens_per_level.push_back(params.forward_proj[i](sampled[i]));
    }

    // One 4-token sequence per region; rows of `refined` are ordered (region, level).
    std::vector<ag::Var<T>> refined_blocks;
    for (std::size_t r = 0; r < k; ++r) {
        std::array<ag::Var<T>, 4> seq;
        for (std::size_t i = 0; i < 4; ++i) seq[i] = ag::slice_rows(tokens_per_level[i], r, 1);
        auto v = ag::concat_rows<T>(seq);
        const auto normed = params.norm(v);
        refined_blocks.push_back(ag::add(params.msa(normed, normed).output, v));
    }
    auto refined = ag::concat_rows<T>(refined_blocks);

    std::array<ag::Var<T>, 4> out;
    for (std::size_t i = 0; i < 4; ++i) {
        std::vector<std::size_t> rows;
        for (std::size_t r = 0; r < k; ++r) rows.push_back(r * 4 + i);
        auto back = params.inverse_proj[i](ag::row_mix(refined, gather_rows_map(4 * k, rows)));
        auto delta = ag::sub(back, sampled[i]);

        // Broadcast each region's delta over its aligned block on level i.
        const std::size_t factor = grids[i].height / coarse.height;
        std::vector<std::ptrdiff_t> owner(grids[i].cells(), -1);
        for (std::size_t r = 0; r < k; ++r) {
            for (std::size_t dy = 0; dy < factor; ++dy)
                for (std::size_t dx = 0; dx < factor; ++dx) {
                    const std::size_t y = regions[r].row * factor + dy, x = regions[r].col * factor + dx;
                    owner[y * grids[i].width + x] = static_cast<std::ptrdiff_t>(r);
                }
        }
        ag::SparseRowMap scatter(grids[i].cells(), k);
        for (std::ptrdiff_t o : owner) {
            if (o < 0) scatter.push_row({});
            else scatter.push_row({{static_cast<std::size_t>(o), 1.0}});
        }
        out[i] = ag::add(fused[i], ag::row_mix(delta, scatter));
    }
    return out;
}

template <typename T>
Aggregator<T>::Aggregator(ParamStore<T>& store, const ModelConfig& config, Rng& rng) : config_(config) {
    for (std::size_t i = 0; i < 4; ++i) {
        stages[i] = StageFusionParams<T>(store, "lgfa.stage" + std::to_string(i + 1), config.channels[i],
                                         config.sequence_length(), config.text_dim, rng);
    }
    compensation = CompensationParams<T>(store, config, rng);
}

template <typename T>
typename Aggregator<T>::Output Aggregator<T>::operator()(const FeaturePyramid<T>& pyramid,
                                                         const TokenFeatures<T>& language, Trace* trace) const {
    Output out;
    std::array<Matrix<T>, 4> score_values;
    std::array<ag::Var<T>, 4> fused;
    for (std::size_t i = 0; i < 4; ++i) {
        auto stage = fuse_stage(pyramid.levels[i], pyramid.grids[i], language, stages[i], i,
                                config_.lgfa_mask_padding, trace);
        fused[i] = stage.fused;
        out.scores[i] = stage.scores;
        score_values[i] = stage.scores.value();
    }
    const std::size_t k = config_.topk_count();
    if (k > 0) {
        const auto deficit = deficit_map(score_values, pyramid.grids, language.length(), trace);
        out.regions = topk_regions(deficit, k);
    }
    if (trace) {
        Matrix<double> cells(out.regions.size(), 2);
        for (std::size_t r = 0; r < out.regions.size(); ++r) {
            cells(r, 0) = static_cast<double>(out.regions[r].row);
            cells(r, 1) = static_cast<double>(out.regions[r].col);
        }
        trace->record("lgfa.regions", cells);
    }
    out.levels = compensate_regions(fused, pyramid.grids, out.regions, compensation);
    return out;
}

#define CROBIM_INSTANTIATE(T)                                                                                    \
    template class StageFusionParams<T>;                                                                       \
    template StageOutput<T> fuse_stage<T>(const ag::Var<T>&, GridShape, const TokenFeatures<T>&,               \
                                          const StageFusionParams<T>&, std::size_t, bool, Trace*);             \
    template Matrix<double> stage_saliency<T>(const Matrix<T>&, GridShape, GridShape, std::size_t);            \
    template Matrix<double> deficit_map<T>(const std::array<Matrix<T>, 4>&, const std::array<GridShape, 4>&,   \
                                           std::size_t, Trace*);                                               \
    template class CompensationParams<T>;                                                                      \
    template std::array<ag::Var<T>, 4> compensate_regions<T>(const std::array<ag::Var<T>, 4>&,                 \
                                                             const std::array<GridShape, 4>&,                  \
                                                             const std::vector<Cell>&,                         \
                                                             const CompensationParams<T>&);                    \
    template class Aggregator<T>;

CROBIM_INSTANTIATE(float)
CROBIM_INSTANTIATE(double)

}  // namespace crobim::lgfa

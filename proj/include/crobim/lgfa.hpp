#pragma once

// Language-guided feature aggregation: gated per-stage cross-modal fusion
// followed by attention-deficit compensation across the four scales.

#include <array>
#include <vector>

#include "crobim/feature_core.hpp"

namespace crobim::lgfa {

/// Parameters of one stage's fusion. `length` is the token-axis size ell.
template <typename T>
class StageFusionParams {
public:
    StageFusionParams() = default;
    StageFusionParams(ParamStore<T>& store, const std::string& name, std::size_t channels, std::size_t length,
                      std::size_t text_dim, Rng& rng);

    Linear<T> wq;        // C_i -> ell, applied per pixel
    Linear<T> wk;        // D_l -> D_l
    Linear<T> wv;        // D_l -> D_l
    Linear<T> gate;      // ell -> ell, followed by GELU
    Linear<T> reweight;  // ell -> C_i
};

template <typename T>
struct StageOutput {
    ag::Var<T> fused;   // V_li, same shape as V_i
    ag::Var<T> scores;  // S_i, (H_i*W_i) x D_l
};

/// V_iq = wq(V_i); S_i = V_iq L_ik; Att_i = GELU(gate(softmax(S_i / sqrt(ell)) L_iv^T));
/// V_li = reweight(Att_i) .* V_i.
template <typename T>
StageOutput<T> fuse_stage(const ag::Var<T>& level, GridShape grid, const TokenFeatures<T>& language,
                          const StageFusionParams<T>& params, std::size_t stage, bool mask_padding,
                          Trace* trace = nullptr);

/// A cell of the coarsest (H_4 x W_4) grid.
struct Cell {
    std::size_t row = 0;
    std::size_t col = 0;
    friend bool operator==(const Cell&, const Cell&) = default;
};

/// Per-stage spatial saliency s_i at (H_4, W_4): every column of S_i is resampled
/// bilinearly to the coarsest grid, scaled by 1/sqrt(ell), softmax-normalised over
/// the spatial cells, and the D_l columns are averaged. Each map sums to 1.
template <typename T>
Matrix<double> stage_saliency(const Matrix<T>& scores, GridShape grid, GridShape coarse, std::size_t length);

/// M = sum_{i=1..3} |s_i - s_{i+1}| over four H_4 x W_4 saliency maps.
Matrix<double> deficit_from_saliency(const std::array<Matrix<double>, 4>& saliency);

/// Attention deficit map (H_4 x W_4) from the four score matrices.
template <typename T>
Matrix<double> deficit_map(const std::array<Matrix<T>, 4>& scores, const std::array<GridShape, 4>& grids,
                           std::size_t length, Trace* trace = nullptr);

/// The K cells with the largest deficit; ties go to the lower row-major index.
/// Throws ArgumentError unless 0 <= K <= cell count.
std::vector<Cell> topk_regions(const Matrix<double>& deficit, std::size_t k);

template <typename T>
class CompensationParams {
public:
    CompensationParams() = default;
    CompensationParams(ParamStore<T>& store, const ModelConfig& config, Rng& rng);

    std::array<Linear<T>, 4> forward_proj;  // C_i -> C_v-hat
    std::array<Linear<T>, 4> inverse_proj;  // C_v-hat -> C_i
    LayerNorm<T> norm;
    MultiHeadAttention<T> msa;
};

/// Cross-scale refinement of the selected cells. For each region the four
/// levels are resampled to the coarse grid and read at that cell, projected to
/// C_v-hat and treated as a 4-token sequence; V~ = MSA(LN(V)) + V is projected
/// back and the difference from the resampled input is added to every pixel of
/// the cell's aligned block on each native level. Empty `regions` returns the
/// inputs unchanged.
template <typename T>
std::array<ag::Var<T>, 4> compensate_regions(const std::array<ag::Var<T>, 4>& fused,
                                             const std::array<GridShape, 4>& grids, const std::vector<Cell>& regions,
                                             const CompensationParams<T>& params);

/// All four stage fusions plus deficit compensation.
template <typename T>
class Aggregator {
public:
    struct Output {
        std::array<ag::Var<T>, 4> levels;  // V_li' after compensation
        std::array<ag::Var<T>, 4> scores;  // S_i
        std::vector<Cell> regions;
    };

    Aggregator(ParamStore<T>& store, const ModelConfig& config, Rng& rng);
    Output operator()(const FeaturePyramid<T>& pyramid, const TokenFeatures<T>& language,
                      Trace* trace = nullptr) const;

    std::array<StageFusionParams<T>, 4> stages;
    CompensationParams<T> compensation;

private:
    ModelConfig config_;
};

}  // namespace crobim::lgfa

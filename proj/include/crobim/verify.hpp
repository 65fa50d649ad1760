#pragma once

// Reference implementations written as plain scalar loops at 64-bit, and the
// finite-difference gradient harness. Nothing here calls the module code it
// checks; parameter values are read out of the modules and fed in as data.

#include <array>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "crobim/lgfa.hpp"
#include "crobim/mid.hpp"

namespace crobim::verify {

// -- finite differences -----------------------------------------------------

struct GradCheckReport {
    std::string name;
    double max_rel_error = 0.0;
    double tolerance = 0.0;
    bool passed = false;
    std::size_t probes = 0;
};

struct GradCheckOptions {
    double eps = 1e-6;
    double tol = 1e-4;
    std::size_t probes = 6;  // per parameter
    std::uint64_t seed = 1;
};

/// |a - b| / max(|a|, |b|, 1e-8).
double relative_error(double a, double b);

/// Checks d loss / d theta for each named parameter at `probes` random coordinates
/// with central differences. `loss` must rebuild the graph from the current
/// parameter values on every call. Throws NumericalError if loss is not finite.
std::vector<GradCheckReport> finite_difference_check(
    const std::function<ag::Var<double>()>& loss,
    const std::vector<std::pair<std::string, ag::Var<double>>>& params, const GradCheckOptions& options = {});

/// Same for an explicit function of a flat vector with a caller-supplied gradient.
GradCheckReport finite_difference_check(const std::string& name,
                                        const std::function<double(const std::vector<double>&)>& f,
                                        const std::function<std::vector<double>(const std::vector<double>&)>& grad,
                                        const std::vector<double>& theta, const GradCheckOptions& options = {});

// -- parameter snapshots ----------------------------------------------------

struct Affine {
    Matrix<double> w;  // in x out
    Matrix<double> b;  // 1 x out, empty when absent
};

struct Norm {
    Matrix<double> gamma;
    Matrix<double> beta;
    double eps = 1e-5;
};

struct Attention {
    Affine wq, wk, wv, wo;
    std::size_t heads = 1;
};

struct StageWeights {
    Affine wq, wk, wv, gate, reweight;
};

struct CompWeights {
    std::array<Affine, 4> forward;
    std::array<Affine, 4> inverse;
    Norm norm;
    Attention msa;
};

struct DeformWeights {
    Affine offsets, weights, value, output;
    std::size_t heads = 1, levels = 4, points = 1;
};

Affine snapshot(const Linear<double>& l);
Norm snapshot(const LayerNorm<double>& n);
Attention snapshot(const MultiHeadAttention<double>& a);
StageWeights snapshot(const lgfa::StageFusionParams<double>& p);
CompWeights snapshot(const lgfa::CompensationParams<double>& p);
DeformWeights snapshot(const mid::DeformAttnParams<double>& p);

// -- oracles ----------------------------------------------------------------

Matrix<double> oracle_affine(const Matrix<double>& x, const Affine& a);
Matrix<double> oracle_layer_norm(const Matrix<double>& x, const Norm& n);

/// softmax(scale * Q K^T [+ mask]) V, one head. key_mask[j] == false drops key j.
Matrix<double> oracle_attention(const Matrix<double>& queries, const Matrix<double>& keys,
                                const Matrix<double>& values, double scale,
                                const std::vector<bool>* key_mask = nullptr);

/// Multi-head attention with projections, heads splitting the model width.
Matrix<double> oracle_multihead(const Matrix<double>& queries, const Matrix<double>& keys_values,
                                const Attention& a, const std::vector<bool>* key_mask = nullptr);

/// Half-pixel bilinear resize of an (H*W) x C map, edge-clamped.
Matrix<double> oracle_resize(const Matrix<double>& map, GridShape from, GridShape to);

struct FuseResult {
    Matrix<double> fused;
    Matrix<double> scores;
};

FuseResult oracle_fuse_stage(const Matrix<double>& level, const Matrix<double>& language,
                             const std::vector<bool>& pad_mask, const StageWeights& w, bool mask_padding);

Matrix<double> oracle_deficit_map(const std::array<Matrix<double>, 4>& scores, const std::array<GridShape, 4>& grids,
                                  std::size_t length);

/// Full sort by (value descending, row-major index ascending); first k cells as (row, col).
std::vector<std::pair<std::size_t, std::size_t>> oracle_topk(const Matrix<double>& deficit, std::size_t k);

std::array<Matrix<double>, 4> oracle_compensate(const std::array<Matrix<double>, 4>& fused,
                                                const std::array<GridShape, 4>& grids,
                                                const std::vector<std::pair<std::size_t, std::size_t>>& cells,
                                                const CompWeights& w);

/// Self-sampling deformable attention: one query per visual token, reference
/// point at its own cell centre.
Matrix<double> oracle_ms_deform_attn(const Matrix<double>& queries, const Matrix<double>& value_input,
                                     const std::vector<GridShape>& grids, const DeformWeights& w);

double oracle_ce(const Matrix<double>& logits, const Mask& target);
double oracle_dice(const Matrix<double>& logits, const Mask& target, double eps);

/// (intersection, union) by a double loop over rows and columns.
std::pair<std::uint64_t, std::uint64_t> oracle_iou(const Mask& pred, const Mask& gt);

}  // namespace crobim::verify

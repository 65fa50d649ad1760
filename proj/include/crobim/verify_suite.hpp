#pragma once

// The aggregate verification run behind `crobim verify`: per-module gradient
// checks and oracle-equivalence trials at 64-bit.

#include <string>
#include <vector>

#include "crobim/capm.hpp"
#include "crobim/verify.hpp"

namespace crobim::verify {

/// Small widths for 64-bit checks; 64 x 64 input so the coarsest level is 2 x 2.
ModelConfig toy_config();

Matrix<double> random_matrix(std::size_t rows, std::size_t cols, Rng& rng, double scale = 1.0);
/// Adds uniform noise in [-scale, scale] to every parameter (moves deformable
/// sampling off the integer lattice and breaks zero-initialised symmetries).
void jitter(ParamStore<double>& store, Rng& rng, double scale);
/// Random tokens in [3, vocab) for `count` words.
std::vector<int> random_tokens(std::size_t count, std::size_t vocab, Rng& rng);
/// Random pyramid at the config's grids; levels are constants.
FeaturePyramid<double> random_pyramid(const ModelConfig& config, Rng& rng);
/// Random token features of the config's sequence length, last `pads` text rows padded.
TokenFeatures<double> random_language(const ModelConfig& config, Rng& rng, std::size_t pads = 1);

/// Gradient checks for CAPM, each LGFA stage, deficit compensation, both decoder
/// interactions, deformable attention, CE, Dice and the full model loss.
/// Report names are "<group>/<parameter>".
std::vector<GradCheckReport> gradient_suite(const ModelConfig& config, const GradCheckOptions& options = {});

struct OracleReport {
    std::string name;
    std::size_t trials = 0;
    double max_abs_error = 0.0;
    double tolerance = 0.0;
    bool passed = false;
};

/// fuse_stage, deficit_map, topk_regions, compensate_regions, ms_deform_attn,
/// ce_loss and dice_loss against the scalar-loop oracles on random instances.
std::vector<OracleReport> oracle_suite(std::size_t trials, std::uint64_t seed, double tolerance = 1e-10);

}  // namespace crobim::verify

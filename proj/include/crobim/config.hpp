#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <map>
#include <string>

#include "crobim/tensor.hpp"

namespace crobim {

/// How pooled context levels are combined into the prompt-attention keys.
enum class ContextMode {
    RowStack,       ///< project each level to C_total and stack: 4 s^2 rows
    ChannelConcat,  ///< concatenate channels per pooled cell: s^2 rows
};

/// Decoder topology.
enum class DecoderMode {
    Bidirectional,  ///< language->vision, then vision->language with deformable attention
    SingleDirection,  ///< vision tokens attend to the raw projected language only
};

struct ModelConfig {
    std::size_t image_size = 64;                        // H = W
    std::array<std::size_t, 4> channels{16, 32, 64, 128};  // C_1..C_4
    std::size_t text_dim = 32;                          // D_l
    std::size_t max_tokens = 20;                        // l_m, including the summary token
    std::size_t num_prompts = 4;                        // N_p
    std::size_t hidden_dim = 64;                        // D
    std::size_t pool_size = 1;                          // s
    double lambda_ce = 0.9;
    double topk_fraction = 0.1;
    std::size_t msda_heads = 2;
    std::size_t msda_points = 2;
    std::uint64_t seed = 7;

    std::size_t vocab_size = 64;
    std::size_t text_heads = 2;
    std::size_t text_ffn_dim = 64;
    std::size_t compensation_dim = 64;  // C_v-hat
    std::size_t compensation_heads = 2;
    std::size_t decoder_heads = 2;
    std::size_t decoder_ffn_dim = 128;
    std::size_t decoder_rounds = 1;
    double dice_smoothing = 1.0;
    double layer_norm_eps = 1e-5;

    // behaviour switches
    bool truncate_tokens = true;        // over-long expressions: truncate (true) or error
    bool capm_scale_scores = true;      // 1/sqrt(D_l) on prompt-attention scores
    ContextMode context_mode = ContextMode::RowStack;
    bool lgfa_mask_padding = false;     // zero padded token rows before stage fusion
    bool decoder_mask_padding = true;   // exclude padded tokens as attention keys in the decoder
    bool use_capm = true;               // false: raw prompts enter the text encoder
    bool use_compensation = true;       // false: K = 0
    DecoderMode decoder_mode = DecoderMode::Bidirectional;
    bool decoder_bypass_attention = false;  // skip both interactions (testing aid)

    /// Desk-scale defaults.
    static ModelConfig desk();
    /// Hyperparameters at the published scale (Swin-B widths, BERT-base text width).
    static ModelConfig paper_scale();

    /// Throws ConfigError on the first violated invariant.
    void validate() const;

    std::size_t total_channels() const;
    /// Token-axis length seen by the fusion and decoder stages.
    std::size_t sequence_length() const { return max_tokens + num_prompts; }
    /// Number of compensated cells, ceil(topk_fraction * H_4 * W_4), or 0 when disabled.
    std::size_t topk_count() const;
    GridShape level_grid(std::size_t level) const;  // level in [0, 4)

    /// Key/value representation used by the config file and checkpoint echo.
    std::map<std::string, std::string> to_map() const;
    /// Applies known keys; unknown keys raise ConfigError.
    void apply(const std::map<std::string, std::string>& kv);
};

}  // namespace crobim

#pragma once

// Core data contracts (images, pyramids, token features) and the desk-scale
// stand-ins for the pretrained image and text encoders.

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "crobim/autograd.hpp"
#include "crobim/config.hpp"
#include "crobim/nn.hpp"

namespace crobim {

/// RGB image with values in [0, 1], stored as (H*W) x 3.
struct Image {
    GridShape grid;
    Matrix<float> rgb;

    Image() = default;
    Image(std::size_t height, std::size_t width) : grid{height, width}, rgb(height * width, 3) {}
};

/// Binary mask stored as H x W bytes (0 or 1).
using Mask = Matrix<std::uint8_t>;

/// One referring-segmentation sample.
struct Triplet {
    Image image;
    std::string expression;
    std::vector<int> tokens;
    Mask mask;
    std::string category;
    std::string source_id;
};

/// Four visual feature levels V_1..V_4, each (H_i*W_i) x C_i.
template <typename T>
struct FeaturePyramid {
    std::array<ag::Var<T>, 4> levels;
    std::array<GridShape, 4> grids;

    /// Checks the halving law and finiteness.
    void validate() const;
};

/// Linguistic features with their padding mask. Row cls_index is the summary token.
template <typename T>
struct TokenFeatures {
    ag::Var<T> values;           // length x D_l
    std::vector<bool> pad_mask;  // true = real token (or prompt)
    std::size_t cls_index = 0;

    std::size_t length() const { return pad_mask.size(); }
};

// -- vocabulary -------------------------------------------------------------

/// Lowercase, strip ASCII punctuation, split on whitespace.
std::vector<std::string> split_words(std::string_view text);

/// Fixed word list. Ids 0..2 are reserved: [PAD], [CLS], [UNK].
class Vocabulary {
public:
    static constexpr int kPad = 0;
    static constexpr int kCls = 1;
    static constexpr int kUnk = 2;

    explicit Vocabulary(std::vector<std::string> words);
    /// The word list covering every expression the synthetic generator emits.
    static const Vocabulary& synthetic();

    std::vector<int> encode(std::string_view text) const;
    int id(std::string_view word) const;
    const std::string& word(int id) const { return words_.at(static_cast<std::size_t>(id)); }
    std::size_t size() const { return words_.size(); }

private:
    std::vector<std::string> words_;
};

// -- stub encoders ----------------------------------------------------------

/// Strided-convolution pyramid: a 4x4/stride-4 stem followed by three 2x2/stride-2
/// stages, each a kernel==stride convolution followed by GELU.
template <typename T>
class ImageEncoder {
public:
    ImageEncoder(ParamStore<T>& store, const ModelConfig& config, Rng& rng);

    /// Throws ShapeError when the image does not match config.image_size.
    FeaturePyramid<T> encode(const Image& image) const;

    std::array<Linear<T>, 4> stages;

private:
    ModelConfig config_;
};

/// Token embedding + sinusoidal positions + one post-norm transformer block.
template <typename T>
class TextEncoder {
public:
    TextEncoder(ParamStore<T>& store, const ModelConfig& config, Rng& rng);

    /// Lays out [CLS] tokens... [PAD]... (prompts...) and encodes them.
    /// Without prompts the result has max_tokens rows, with prompts max_tokens + N_p
    /// rows and the prompts occupy the trailing positions.
    TokenFeatures<T> encode(std::span<const int> tokens, const ag::Var<T>* prompt_embeds = nullptr,
                            Trace* trace = nullptr) const;

    /// Ids after applying the [CLS] / truncation / padding convention.
    std::vector<int> layout_tokens(std::span<const int> tokens) const;

    ag::Var<T> embedding;  // vocab x D_l
    MultiHeadAttention<T> attention;
    LayerNorm<T> norm1;
    FeedForward<T> ffn;
    LayerNorm<T> norm2;

private:
    ModelConfig config_;
};

/// Fixed sinusoidal position table (rows x dim).
template <typename T>
Matrix<T> sinusoidal_positions(std::size_t rows, std::size_t dim);

}  // namespace crobim

#include "crobim/feature_core.hpp"

#include <cctype>
#include <cmath>

#include "crobim/resample.hpp"

namespace crobim {

template <typename T>
void FeaturePyramid<T>::validate() const {
    for (std::size_t i = 0; i < 4; ++i) {
        if (!levels[i]) throw ShapeError("pyramid level " + std::to_string(i + 1) + " missing");
        if (levels[i].rows() != grids[i].cells()) {
            throw ShapeError("pyramid level " + std::to_string(i + 1) + " rows do not match grid " +
                             to_string(grids[i]));
        }
        if (i > 0 && (grids[i].height * 2 != grids[i - 1].height || grids[i].width * 2 != grids[i - 1].width)) {
            throw ShapeError("pyramid level " + std::to_string(i + 1) + " does not halve the previous level");
        }
        if (!levels[i].value().all_finite()) {
            throw NumericalError("pyramid level " + std::to_string(i + 1), "non-finite feature");
        }
    }
}

std::vector<std::string> split_words(std::string_view text) {
    std::vector<std::string> words;
    std::string current;
    for (char ch : text) {
        const auto c = static_cast<unsigned char>(ch);
        if (std::isspace(c)) {
            if (!current.empty()) words.push_back(std::move(current));
            current.clear();
        } else if (c < 128 && std::ispunct(c)) {
            continue;
        } else {
            current.push_back(static_cast<char>(std::tolower(c)));
        }
    }
    if (!current.empty()) words.push_back(std::move(current));
    return words;
}

Vocabulary::Vocabulary(std::vector<std::string> words) : words_{"[PAD]", "[CLS]", "[UNK]"} {
    for (auto& w : words) words_.push_back(std::move(w));
}

const Vocabulary& Vocabulary::synthetic() {
    static const Vocabulary vocab({
        // colours
        "red", "green", "blue", "yellow", "purple", "orange", "white", "cyan",
        // shapes
        "rectangular", "round", "triangular",
        // categories
        "building", "tank", "field", "pool", "court", "ship",
        // sizes
        "small", "medium", "large",
        // absolute position
        "in", "the", "at", "top", "bottom", "center", "left", "right",
        // relative position
        "of", "above", "below",
        // relative size
        "larger", "smaller", "than", "similar", "size", "to",
        // count context
        "one", "two", "three", "objects", "only", "object",
        "which", "is", "it",
    });
    return vocab;
}

int Vocabulary::id(std::string_view word) const {
    for (std::size_t i = 0; i < words_.size(); ++i)
        if (words_[i] == word) return static_cast<int>(i);
    return kUnk;
}

std::vector<int> Vocabulary::encode(std::string_view text) const {
    std::vector<int> ids;
    for (const auto& w : split_words(text)) ids.push_back(id(w));
    return ids;
}

template <typename T>
Matrix<T> sinusoidal_positions(std::size_t rows, std::size_t dim) {
    Matrix<T> pe(rows, dim);
    for (std::size_t pos = 0; pos < rows; ++pos) {
        for (std::size_t i = 0; i < dim; ++i) {
            const double expo = static_cast<double>(2 * (i / 2)) / static_cast<double>(dim);
            const double angle = static_cast<double>(pos) / std::pow(10000.0, expo);
            pe(pos, i) = static_cast<T>(i % 2 == 0 ? std::sin(angle) : std::cos(angle));
        }
    }
    return pe;
}

// ---------------------------------------------------------------------------

template <typename T>
ImageEncoder<T>::ImageEncoder(ParamStore<T>& store, const ModelConfig& config, Rng& rng) : config_(config) {
    std::size_t in = 4 * 4 * 3;
    for (std::size_t i = 0; i < 4; ++i) {
        stages[i] = Linear<T>(store, "image_encoder.stage" + std::to_string(i + 1), in, config.channels[i], rng);
        in = 2 * 2 * config.channels[i];
    }
}

template <typename T>
FeaturePyramid<T> ImageEncoder<T>::encode(const Image& image) const {
    if (image.grid.height != config_.image_size || image.grid.width != config_.image_size ||
        image.rgb.rows() != image.grid.cells() || image.rgb.cols() != 3) {
        throw ShapeError("encode_image: expected " + std::to_string(config_.image_size) + "x" +
                         std::to_string(config_.image_size) + "x3 image, got " + to_string(image.grid));
    }
    if (!image.rgb.all_finite()) throw NumericalError("encode_image", "non-finite pixel value");

    FeaturePyramid<T> pyramid;
    auto x = ag::Var<T>::constant(image.rgb.template cast<T>());
    GridShape grid = image.grid;
    for (std::size_t i = 0; i < 4; ++i) {
        const std::size_t k = i == 0 ? 4 : 2;
        x = ag::gelu(stages[i](ag::patchify(x, grid, k)));
        grid = {grid.height / k, grid.width / k};
        pyramid.levels[i] = x;
        pyramid.grids[i] = grid;
    }
    return pyramid;
}

// ---------------------------------------------------------------------------

template <typename T>
TextEncoder<T>::TextEncoder(ParamStore<T>& store, const ModelConfig& config, Rng& rng) : config_(config) {
    Matrix<T> table(config.vocab_size, config.text_dim);
    for (auto& v : table.data()) v = static_cast<T>(0.5 * rng.normal());
    embedding = store.add("text_encoder.embedding", std::move(table));
    attention = MultiHeadAttention<T>(store, "text_encoder.attn", config.text_dim, config.text_dim,
                                      config.text_dim, config.text_heads, rng);
    norm1 = LayerNorm<T>(store, "text_encoder.norm1", config.text_dim, config.layer_norm_eps);
    ffn = FeedForward<T>(store, "text_encoder.ffn", config.text_dim, config.text_ffn_dim, rng);
    norm2 = LayerNorm<T>(store, "text_encoder.norm2", config.text_dim, config.layer_norm_eps);
}

template <typename T>
std::vector<int> TextEncoder<T>::layout_tokens(std::span<const int> tokens) const {
    if (tokens.empty()) throw ArgumentError("encode_text: empty expression");
    const std::size_t capacity = config_.max_tokens - 1;
    if (tokens.size() > capacity && !config_.truncate_tokens) {
        throw ArgumentError("encode_text: " + std::to_string(tokens.size()) + " tokens exceed capacity " +
                            std::to_string(capacity));
    }
    std::vector<int> ids(config_.max_tokens, Vocabulary::kPad);
    ids[0] = Vocabulary::kCls;
    for (std::size_t i = 0; i < std::min(capacity, tokens.size()); ++i) {
        const int t = tokens[i];
        if (t < 0 || static_cast<std::size_t>(t) >= config_.vocab_size) {
            throw ArgumentError("encode_text: token id " + std::to_string(t) + " outside vocabulary");
        }
        ids[i + 1] = t;
    }
    return ids;
}

template <typename T>
TokenFeatures<T> TextEncoder<T>::encode(std::span<const int> tokens, const ag::Var<T>* prompt_embeds,
                                        Trace* trace) const {
    const auto ids = layout_tokens(tokens);
    std::vector<std::size_t> rows(ids.begin(), ids.end());
    auto x = ag::row_mix(embedding, gather_rows_map(config_.vocab_size, rows));

    TokenFeatures<T> out;
    out.pad_mask.assign(ids.size(), false);
    for (std::size_t i = 0; i < ids.size(); ++i) out.pad_mask[i] = ids[i] != Vocabulary::kPad;

    if (prompt_embeds) {
        if (prompt_embeds->rows() != config_.num_prompts || prompt_embeds->cols() != config_.text_dim) {
            throw ShapeError("encode_text: prompts must be " + std::to_string(config_.num_prompts) + "x" +
                             std::to_string(config_.text_dim));
        }
        const std::array<ag::Var<T>, 2> parts{x, *prompt_embeds};
        x = ag::concat_rows<T>(parts);
        out.pad_mask.insert(out.pad_mask.end(), config_.num_prompts, true);
    }
    x = ag::add(x, ag::Var<T>::constant(sinusoidal_positions<T>(x.rows(), config_.text_dim)));

    auto attn = attention(x, x, &out.pad_mask);
    if (trace) trace->record("text.attn.head0", attn.probs.front().value());
    auto h = norm1(ag::add(x, attn.output));
    out.values = norm2(ag::add(h, ffn(h)));
    out.cls_index = 0;
    if (!out.values.value().all_finite()) throw NumericalError("encode_text", "non-finite token feature");
    return out;
}

template struct FeaturePyramid<float>;
template struct FeaturePyramid<double>;
template class ImageEncoder<float>;
template class ImageEncoder<double>;
template class TextEncoder<float>;
template class TextEncoder<double>;
template Matrix<float> sinusoidal_positions<float>(std::size_t, std::size_t);
template Matrix<double> sinusoidal_positions<double>(std::size_t, std::size_t);

}  // namespace crobim

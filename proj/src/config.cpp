#include "crobim/config.hpp"

#include <charconv>
#include <cmath>
#include <sstream>

namespace crobim {

namespace {

std::size_t parse_size(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        const long long x = std::stoll(v, &pos);
        if (pos != v.size() || x < 0) throw std::invalid_argument(v);
        return static_cast<std::size_t>(x);
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "': expected non-negative integer, got '" + v + "'");
    }
}

double parse_double(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        const double x = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "': expected number, got '" + v + "'");
    }
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ConfigError("config key '" + key + "': expected boolean, got '" + v + "'");
}

std::string fmt_double(double v) {
    char buf[32];
    const auto end = std::to_chars(buf, buf + sizeof buf, v).ptr;
    return std::string(buf, end);
}

}  // namespace

ModelConfig ModelConfig::desk() { return ModelConfig{}; }

ModelConfig ModelConfig::paper_scale() {
    ModelConfig c;
    c.image_size = 480;
    c.channels = {128, 256, 512, 1024};
    c.text_dim = 768;
    c.max_tokens = 20;
    c.num_prompts = 4;
    c.hidden_dim = 256;
    c.pool_size = 1;
    c.lambda_ce = 0.9;
    c.msda_heads = 8;
    c.msda_points = 4;
    c.vocab_size = 64;
    c.text_heads = 12;
    c.text_ffn_dim = 3072;
    c.compensation_dim = 256;
    c.compensation_heads = 8;
    c.decoder_heads = 8;
    c.decoder_ffn_dim = 2048;
    return c;
}

void ModelConfig::validate() const {
    auto fail = [](const std::string& m) { throw ConfigError(m); };
    if (image_size == 0 || image_size % 32 != 0) fail("image_size must be a positive multiple of 32");
    for (std::size_t c : channels)
        if (c == 0) fail("channels must be positive");
    if (text_dim == 0 || hidden_dim == 0) fail("text_dim and hidden_dim must be positive");
    if (max_tokens < 2) fail("max_tokens must leave room for the summary token and one word");
    if (num_prompts < 1) fail("num_prompts must be >= 1");
    if (pool_size < 1) fail("pool_size must be >= 1");
    if (!(lambda_ce >= 0.0 && lambda_ce <= 1.0)) fail("lambda_ce must lie in [0, 1]");
    if (!(topk_fraction > 0.0 && topk_fraction <= 1.0)) fail("topk_fraction must lie in (0, 1]");
    if (msda_heads == 0 || hidden_dim % msda_heads != 0) fail("msda_heads must divide hidden_dim");
    if (msda_points == 0) fail("msda_points must be >= 1");
    if (text_heads == 0 || text_dim % text_heads != 0) fail("text_heads must divide text_dim");
    if (decoder_heads == 0 || hidden_dim % decoder_heads != 0) fail("decoder_heads must divide hidden_dim");
    if (compensation_heads == 0 || compensation_dim % compensation_heads != 0) {
        fail("compensation_heads must divide compensation_dim");
    }
    if (vocab_size < 4) fail("vocab_size must be >= 4");
    if (decoder_rounds < 1) fail("decoder_rounds must be >= 1");
    if (!(dice_smoothing > 0.0)) fail("dice_smoothing must be positive");
}

std::size_t ModelConfig::total_channels() const {
    return channels[0] + channels[1] + channels[2] + channels[3];
}

std::size_t ModelConfig::topk_count() const {
    if (!use_compensation) return 0;
    const auto g = level_grid(3);
    return static_cast<std::size_t>(std::ceil(topk_fraction * static_cast<double>(g.cells()) - 1e-12));
}

GridShape ModelConfig::level_grid(std::size_t level) const {
    const std::size_t stride = std::size_t{4} << level;
    return {image_size / stride, image_size / stride};
}

std::map<std::string, std::string> ModelConfig::to_map() const {
    std::map<std::string, std::string> m;
    m["image_size"] = std::to_string(image_size);
    m["channels"] = std::to_string(channels[0]) + "," + std::to_string(channels[1]) + "," +
                    std::to_string(channels[2]) + "," + std::to_string(channels[3]);
    m["text_dim"] = std::to_string(text_dim);
    m["max_tokens"] = std::to_string(max_tokens);
    m["num_prompts"] = std::to_string(num_prompts);
    m["hidden_dim"] = std::to_string(hidden_dim);
    m["pool_size"] = std::to_string(pool_size);
    m["lambda_ce"] = fmt_double(lambda_ce);
    m["topk_fraction"] = fmt_double(topk_fraction);
    m["msda_heads"] = std::to_string(msda_heads);
    m["msda_points"] = std::to_string(msda_points);
    m["seed"] = std::to_string(seed);
    m["vocab_size"] = std::to_string(vocab_size);
    m["text_heads"] = std::to_string(text_heads);
    m["text_ffn_dim"] = std::to_string(text_ffn_dim);
    m["compensation_dim"] = std::to_string(compensation_dim);
    m["compensation_heads"] = std::to_string(compensation_heads);
    m["decoder_heads"] = std::to_string(decoder_heads);
    m["decoder_ffn_dim"] = std::to_string(decoder_ffn_dim);
    m["decoder_rounds"] = std::to_string(decoder_rounds);
    m["dice_smoothing"] = fmt_double(dice_smoothing);
    m["layer_norm_eps"] = fmt_double(layer_norm_eps);
    m["truncate_tokens"] = truncate_tokens ? "true" : "false";
    m["capm_scale_scores"] = capm_scale_scores ? "true" : "false";
    m["context_mode"] = context_mode == ContextMode::RowStack ? "row_stack" : "channel_concat";
    m["lgfa_mask_padding"] = lgfa_mask_padding ? "true" : "false";
    m["decoder_mask_padding"] = decoder_mask_padding ? "true" : "false";
    m["use_capm"] = use_capm ? "true" : "false";
    m["use_compensation"] = use_compensation ? "true" : "false";
    m["decoder_mode"] = decoder_mode == DecoderMode::Bidirectional ? "bidirectional" : "single";
    m["decoder_bypass_attention"] = decoder_bypass_attention ? "true" : "false";
    return m;
}

void ModelConfig::apply(const std::map<std::string, std::string>& kv) {
    for (const auto& [key, v] : kv) {
        if (key == "image_size") image_size = parse_size(key, v);
        else if (key == "channels") {
            std::istringstream is(v);
            std::string part;
            std::size_t i = 0;
            while (std::getline(is, part, ',')) {
                if (i >= 4) throw ConfigError("channels: expected exactly four comma-separated widths");
                channels[i++] = parse_size(key, part);
            }
            if (i != 4) throw ConfigError("channels: expected exactly four comma-separated widths");
        }
        else if (key == "text_dim") text_dim = parse_size(key, v);
        else if (key == "max_tokens") max_tokens = parse_size(key, v);
        else if (key == "num_prompts") num_prompts = parse_size(key, v);
        else if (key == "hidden_dim") hidden_dim = parse_size(key, v);
        else if (key == "pool_size") pool_size = parse_size(key, v);
        else if (key == "lambda_ce") lambda_ce = parse_double(key, v);
        else if (key == "topk_fraction") topk_fraction = parse_double(key, v);
        else if (key == "msda_heads") msda_heads = parse_size(key, v);
        else if (key == "msda_points") msda_points = parse_size(key, v);
        else if (key == "seed") seed = parse_size(key, v);
        else if (key == "vocab_size") vocab_size = parse_size(key, v);
        else if (key == "text_heads") text_heads = parse_size(key, v);
        else if (key == "text_ffn_dim") text_ffn_dim = parse_size(key, v);
        else if (key == "compensation_dim") compensation_dim = parse_size(key, v);
        else if (key == "compensation_heads") compensation_heads = parse_size(key, v);
        else if (key == "decoder_heads") decoder_heads = parse_size(key, v);
        else if (key == "decoder_ffn_dim") decoder_ffn_dim = parse_size(key, v);
        else if (key == "decoder_rounds") decoder_rounds = parse_size(key, v);
        else if (key == "dice_smoothing") dice_smoothing = parse_double(key, v);
        else if (key == "layer_norm_eps") layer_norm_eps = parse_double(key, v);
        else if (key == "truncate_tokens") truncate_tokens = parse_bool(key, v);
        else if (key == "capm_scale_scores") capm_scale_scores = parse_bool(key, v);
        else if (key == "context_mode") {
            if (v == "row_stack") context_mode = ContextMode::RowStack;
            else if (v == "channel_concat") context_mode = ContextMode::ChannelConcat;
            else throw ConfigError("context_mode: expected row_stack or channel_concat");
        }
        else if (key == "lgfa_mask_padding") lgfa_mask_padding = parse_bool(key, v);
        else if (key == "decoder_mask_padding") decoder_mask_padding = parse_bool(key, v);
        else if (key == "use_capm") use_capm = parse_bool(key, v);
        else if (key == "use_compensation") use_compensation = parse_bool(key, v);
        else if (key == "decoder_mode") {
            if (v == "bidirectional") decoder_mode = DecoderMode::Bidirectional;
            else if (v == "single") decoder_mode = DecoderMode::SingleDirection;
            else throw ConfigError("decoder_mode: expected bidirectional or single");
        }
        else if (key == "decoder_bypass_attention") decoder_bypass_attention = parse_bool(key, v);
        else throw ConfigError("unknown model config key '" + key + "'");
    }
}

}  // namespace crobim

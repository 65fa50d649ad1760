#include <gtest/gtest.h>

#include "crobim/config.hpp"
#include "crobim/errors.hpp"

using namespace crobim;

namespace {

std::size_t token_count(const ModelConfig& c) {
    std::size_t n = 0;
    for (std::size_t i = 0; i < 4; ++i) n += c.level_grid(i).cells();
    return n;
}

}  // namespace

TEST(ModelConfig, DeskDefaultsValidate) {
    const auto c = ModelConfig::desk();
    EXPECT_NO_THROW(c.validate());
    EXPECT_EQ(c.image_size, 64u);
    EXPECT_EQ(c.channels, (std::array<std::size_t, 4>{16, 32, 64, 128}));
    EXPECT_EQ(c.text_dim, 32u);
    EXPECT_EQ(c.hidden_dim, 64u);
}

TEST(ModelConfig, PaperScaleRecordsPublishedValues) {
    const auto c = ModelConfig::paper_scale();
    EXPECT_NO_THROW(c.validate());
    EXPECT_EQ(c.image_size, 480u);
    EXPECT_DOUBLE_EQ(c.lambda_ce, 0.9);
    EXPECT_EQ(c.pool_size, 1u);
    EXPECT_EQ(c.num_prompts, 4u);
    EXPECT_EQ(c.max_tokens, 20u);
    EXPECT_EQ(c.hidden_dim, 256u);
    EXPECT_EQ(c.text_dim, 768u);
}

TEST(ModelConfig, LevelGridsHalve) {
    const auto c = ModelConfig::desk();
    EXPECT_EQ(c.level_grid(0), (GridShape{16, 16}));
    EXPECT_EQ(c.level_grid(1), (GridShape{8, 8}));
    EXPECT_EQ(c.level_grid(2), (GridShape{4, 4}));
    EXPECT_EQ(c.level_grid(3), (GridShape{2, 2}));
}

TEST(ModelConfig, VisualTokenCountClosedForm) {
    EXPECT_EQ(token_count(ModelConfig::desk()), 340u);
    EXPECT_EQ(token_count(ModelConfig::paper_scale()), 120u * 120 + 60 * 60 + 30 * 30 + 15 * 15);
    EXPECT_EQ(token_count(ModelConfig::paper_scale()), 19125u);
    auto c = ModelConfig::desk();
    c.image_size = 128;
    EXPECT_EQ(token_count(c), 32u * 32 + 16 * 16 + 8 * 8 + 4 * 4);
}

TEST(ModelConfig, TopkCount) {
    auto c = ModelConfig::desk();
    EXPECT_EQ(c.topk_count(), 1u);  // ceil(0.1 * 4)
    c.topk_fraction = 0.5;
    EXPECT_EQ(c.topk_count(), 2u);
    c.topk_fraction = 1.0;
    EXPECT_EQ(c.topk_count(), 4u);
    c.use_compensation = false;
    EXPECT_EQ(c.topk_count(), 0u);
}

TEST(ModelConfig, RejectsInvalidValues) {
    auto bad = [](auto mutate) {
        auto c = ModelConfig::desk();
        mutate(c);
        EXPECT_THROW(c.validate(), ConfigError);
    };
    bad([](ModelConfig& c) { c.image_size = 48; });
    bad([](ModelConfig& c) { c.lambda_ce = 1.5; });
    bad([](ModelConfig& c) { c.lambda_ce = -0.1; });
    bad([](ModelConfig& c) { c.topk_fraction = 0.0; });
    bad([](ModelConfig& c) { c.topk_fraction = 1.1; });
    bad([](ModelConfig& c) { c.pool_size = 0; });
    bad([](ModelConfig& c) { c.num_prompts = 0; });
    bad([](ModelConfig& c) { c.msda_heads = 3; });
    bad([](ModelConfig& c) { c.channels[2] = 0; });
}

TEST(ModelConfig, MapRoundTrip) {
    auto c = ModelConfig::desk();
    c.lambda_ce = 0.3;
    c.context_mode = ContextMode::ChannelConcat;
    c.decoder_mode = DecoderMode::SingleDirection;
    c.use_capm = false;
    c.channels = {8, 16, 24, 40};
    ModelConfig d;
    d.apply(c.to_map());
    EXPECT_EQ(d.to_map(), c.to_map());
}

TEST(ModelConfig, UnknownKeyRejected) {
    ModelConfig c;
    EXPECT_THROW(c.apply({{"hiden_dim", "8"}}), ConfigError);
    EXPECT_THROW(c.apply({{"hidden_dim", "eight"}}), ConfigError);
    EXPECT_THROW(c.apply({{"use_capm", "maybe"}}), ConfigError);
}

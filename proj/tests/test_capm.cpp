#include <gtest/gtest.h>

#include <cmath>

#include "crobim/capm.hpp"
#include "crobim/verify_suite.hpp"

using namespace crobim;
using ag::Var;

namespace {

/// 32x32 input: grids 8x8, 4x4, 2x2, 1x1.
ModelConfig small_config(ContextMode mode) {
    auto c = verify::toy_config();
    c.image_size = 32;
    c.context_mode = mode;
    return c;
}

FeaturePyramid<double> constant_pyramid(const ModelConfig& c, const std::array<double, 4>& values) {
    FeaturePyramid<double> p;
    for (std::size_t i = 0; i < 4; ++i) {
        p.grids[i] = c.level_grid(i);
        p.levels[i] = Var<double>::constant(Matrix<double>(p.grids[i].cells(), c.channels[i], values[i]));
    }
    return p;
}

}  // namespace

TEST(CapmPool, ChannelConcatOfConstantLevels) {
    auto c = small_config(ContextMode::ChannelConcat);
    c.channels = {1, 1, 1, 1};
    ParamStore<double> store;
    Rng rng(1);
    capm::PromptBank<double> bank(store, c, rng);
    const auto ctx = capm::pool_context(constant_pyramid(c, {1, 2, 3, 4}), bank, c).value();
    EXPECT_EQ(ctx, Matrix<double>(1, 4, {1, 2, 3, 4}));
}

TEST(CapmPool, MeanOfTwoByTwoLevel) {
    auto c = small_config(ContextMode::ChannelConcat);
    c.channels = {1, 1, 1, 1};
    ParamStore<double> store;
    Rng rng(1);
    capm::PromptBank<double> bank(store, c, rng);
    auto p = constant_pyramid(c, {0, 0, 0, 0});
    p.levels[2] = Var<double>::constant(Matrix<double>(4, 1, {1, 2, 3, 4}));
    EXPECT_EQ(capm::pool_context(p, bank, c).value()(0, 2), 2.5);
}

TEST(CapmPool, PoolingAtNativeSizeIsIdentity) {
    auto c = verify::toy_config();  // 64x64: coarsest level 2x2
    c.context_mode = ContextMode::ChannelConcat;
    c.pool_size = 2;
    ParamStore<double> store;
    Rng rng(2);
    capm::PromptBank<double> bank(store, c, rng);
    const auto p = verify::random_pyramid(c, rng);
    const auto ctx = capm::pool_context(p, bank, c).value();
    ASSERT_EQ(ctx.rows(), 4u);
    ASSERT_EQ(ctx.cols(), c.total_channels());
    const std::size_t offset = c.channels[0] + c.channels[1] + c.channels[2];
    for (std::size_t r = 0; r < 4; ++r)
        for (std::size_t j = 0; j < c.channels[3]; ++j) EXPECT_EQ(ctx(r, offset + j), p.levels[3].value()(r, j));
}

TEST(CapmPool, RowStackProjectsEachLevel) {
    auto c = small_config(ContextMode::RowStack);
    ParamStore<double> store;
    Rng rng(3);
    capm::PromptBank<double> bank(store, c, rng);
    const std::array<double, 4> values{0.5, -1.0, 2.0, 0.25};
    const auto ctx = capm::pool_context(constant_pyramid(c, values), bank, c).value();
    ASSERT_EQ(ctx.rows(), 4u);
    ASSERT_EQ(ctx.cols(), c.total_channels());
    for (std::size_t i = 0; i < 4; ++i) {
        const auto w = verify::snapshot(bank.context_proj[i]);
        for (std::size_t j = 0; j < ctx.cols(); ++j) {
            double want = 0;
            for (std::size_t k = 0; k < c.channels[i]; ++k) want += values[i] * w.w(k, j);
            EXPECT_NEAR(ctx(i, j), want, 1e-12);
        }
    }
}

TEST(CapmModulate, IdenticalContextRowsGiveIdenticalPrompts) {
    const auto c = verify::toy_config();
    ParamStore<double> store;
    Rng rng(4);
    capm::PromptBank<double> bank(store, c, rng);
    Matrix<double> ctx(4, c.total_channels());
    Rng r2(5);
    const auto row = verify::random_matrix(1, c.total_channels(), r2);
    for (std::size_t r = 0; r < 4; ++r)
        for (std::size_t j = 0; j < ctx.cols(); ++j) ctx(r, j) = row(0, j);
    Trace trace;
    const auto out = capm::modulate_prompts(Var<double>::constant(ctx), bank, c, &trace).value();
    const auto wv = verify::oracle_affine(row, verify::snapshot(bank.wv));
    for (std::size_t p = 0; p < out.rows(); ++p)
        for (std::size_t j = 0; j < out.cols(); ++j) EXPECT_NEAR(out(p, j), wv(0, j), 1e-12);
    for (double a : trace.find("capm.attn")->values.data()) EXPECT_NEAR(a, 0.25, 1e-15);
}

TEST(CapmModulate, SingleContextRowBroadcasts) {
    const auto c = verify::toy_config();
    ParamStore<double> store;
    Rng rng(6);
    capm::PromptBank<double> bank(store, c, rng);
    const auto row = verify::random_matrix(1, c.total_channels(), rng);
    const auto out = capm::modulate_prompts(Var<double>::constant(row), bank, c).value();
    const auto wv = verify::oracle_affine(row, verify::snapshot(bank.wv));
    for (std::size_t p = 0; p < out.rows(); ++p)
        for (std::size_t j = 0; j < out.cols(); ++j) EXPECT_NEAR(out(p, j), wv(0, j), 1e-12);
}

TEST(CapmModulate, MatchesAttentionOracleAndRowsSumToOne) {
    for (const bool scaled : {true, false}) {
        auto c = verify::toy_config();
        c.capm_scale_scores = scaled;
        ParamStore<double> store;
        Rng rng(7);
        capm::PromptBank<double> bank(store, c, rng);
        verify::jitter(store, rng, 0.3);
        const auto ctx = verify::random_matrix(4, c.total_channels(), rng, 2.0);
        Trace trace;
        const auto out = capm::modulate_prompts(Var<double>::constant(ctx), bank, c, &trace).value();

        const auto q = verify::oracle_affine(bank.prompts.value(), verify::snapshot(bank.wq));
        const auto k = verify::oracle_affine(ctx, verify::snapshot(bank.wk));
        const auto v = verify::oracle_affine(ctx, verify::snapshot(bank.wv));
        const double scale = scaled ? 1.0 / std::sqrt(static_cast<double>(c.text_dim)) : 1.0;
        const auto want = verify::oracle_attention(q, k, v, scale);
        for (std::size_t i = 0; i < out.size(); ++i) EXPECT_NEAR(out.data()[i], want.data()[i], 1e-12);

        const auto& attn = trace.find("capm.attn")->values;
        for (std::size_t r = 0; r < attn.rows(); ++r) {
            double sum = 0;
            for (double a : attn.row(r)) sum += a;
            EXPECT_NEAR(sum, 1.0, 1e-12);
        }
    }
}

TEST(CapmModulate, WrongContextWidthThrows) {
    const auto c = verify::toy_config();
    ParamStore<double> store;
    Rng rng(8);
    capm::PromptBank<double> bank(store, c, rng);
    EXPECT_THROW(capm::modulate_prompts(Var<double>::constant(Matrix<double>(2, 3)), bank, c), ShapeError);
}

class CapmEncode : public ::testing::Test {
protected:
    CapmEncode() : config(make_config()), rng(config.seed), text(store, config, rng), bank(store, config, rng) {}

    static ModelConfig make_config() {
        auto c = ModelConfig::desk();
        c.max_tokens = 12;
        return c;
    }

    ModelConfig config;
    ParamStore<double> store;
    Rng rng;
    TextEncoder<double> text;
    capm::PromptBank<double> bank;
    std::vector<int> tokens{5, 6, 7};
};

TEST_F(CapmEncode, OutputShape) {
    const auto p = verify::random_pyramid(config, rng);
    const auto t = capm::encode_with_prompts(tokens, p, bank, text, config);
    EXPECT_EQ(t.values.rows(), 16u);
    EXPECT_EQ(t.values.cols(), config.text_dim);
}

TEST_F(CapmEncode, ContextSensitive) {
    const auto a = capm::encode_with_prompts(tokens, verify::random_pyramid(config, rng), bank, text, config);
    const auto b = capm::encode_with_prompts(tokens, verify::random_pyramid(config, rng), bank, text, config);
    double diff = 0;
    for (std::size_t i = 0; i < a.values.value().size(); ++i)
        diff = std::max(diff, std::abs(a.values.value().data()[i] - b.values.value().data()[i]));
    EXPECT_GT(diff, 1e-6);
}

TEST_F(CapmEncode, DisabledUsesRawPrompts) {
    config.use_capm = false;
    const auto a = capm::encode_with_prompts(tokens, verify::random_pyramid(config, rng), bank, text, config);
    const auto b = capm::encode_with_prompts(tokens, verify::random_pyramid(config, rng), bank, text, config);
    EXPECT_EQ(a.values.value(), b.values.value());
    EXPECT_EQ(a.values.value(), text.encode(tokens, &bank.prompts).values.value());
}

TEST_F(CapmEncode, ZeroedBankReducesToZeroPrompts) {
    for (auto& e : store.entries())
        if (e.name.rfind("capm.", 0) == 0) e.var.mutable_value().fill(0.0);
    const auto t = capm::encode_with_prompts(tokens, verify::random_pyramid(config, rng), bank, text, config);
    const auto zeros = Var<double>::constant(Matrix<double>(config.num_prompts, config.text_dim));
    EXPECT_EQ(t.values.value(), text.encode(tokens, &zeros).values.value());
}

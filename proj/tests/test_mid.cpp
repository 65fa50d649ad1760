#include <gtest/gtest.h>

#include "crobim/mid.hpp"
#include "crobim/verify_suite.hpp"

using namespace crobim;
using ag::Var;

namespace {

double max_abs_diff(const Matrix<double>& a, const Matrix<double>& b) {
    EXPECT_TRUE(a.same_shape(b));
    double d = 0;
    for (std::size_t i = 0; i < a.size(); ++i) d = std::max(d, std::abs(a.data()[i] - b.data()[i]));
    return d;
}

Matrix<double> repeat_row(const Matrix<double>& row, std::size_t rows) {
    Matrix<double> m(rows, row.cols());
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < row.cols(); ++j) m(r, j) = row(0, j);
    return m;
}

mid::DecoderState<double> random_state(const ModelConfig& c, Rng& rng) {
    std::vector<GridShape> grids;
    for (std::size_t i = 0; i < 4; ++i) grids.push_back(c.level_grid(i));
    mid::DecoderState<double> s;
    s.layout = ag::LevelLayout::from_grids(grids);
    s.visual = Var<double>::constant(verify::random_matrix(s.layout.total_rows(), c.hidden_dim, rng));
    s.language = Var<double>::constant(verify::random_matrix(c.sequence_length(), c.hidden_dim, rng));
    s.pad_mask.assign(c.sequence_length(), true);
    s.pad_mask[c.max_tokens - 1] = false;
    return s;
}

}  // namespace

TEST(ReferencePoints, CellCentres) {
    const auto layout = ag::LevelLayout::from_grids({GridShape{2, 4}, GridShape{1, 2}});
    const auto ref = mid::reference_points(layout);
    ASSERT_EQ(ref.rows(), 10u);
    EXPECT_DOUBLE_EQ(ref(0, 0), 0.125);
    EXPECT_DOUBLE_EQ(ref(0, 1), 0.25);
    EXPECT_DOUBLE_EQ(ref(7, 0), 0.875);
    EXPECT_DOUBLE_EQ(ref(7, 1), 0.75);
    EXPECT_DOUBLE_EQ(ref(9, 0), 0.75);
    EXPECT_DOUBLE_EQ(ref(9, 1), 0.5);
}

TEST(DeformAttn, InitialSamplingRingAndUniformWeights) {
    ParamStore<double> store;
    Rng rng(1);
    mid::DeformAttnParams<double> p(store, "d", 8, 4, 2, 2, rng);
    const auto& b = p.offsets.bias.value();
    // Head 0 points along +x at radii 1 and 2; head 1 along +y.
    EXPECT_DOUBLE_EQ(b[0], 1.0);
    EXPECT_NEAR(b[1], 0.0, 1e-15);
    EXPECT_DOUBLE_EQ(b[2], 2.0);
    EXPECT_NEAR(b[2 * 4 + 0], 0.0, 1e-15);
    EXPECT_DOUBLE_EQ(b[2 * 4 + 1], 1.0);
    for (double v : p.weights.weight.value().data()) EXPECT_EQ(v, 0.0);
}

TEST(DeformAttn, ZeroOffsetsOnOneLevelGatherOwnCell) {
    const auto layout = ag::LevelLayout::from_grids({GridShape{4, 4}});
    ParamStore<double> store;
    Rng rng(2);
    mid::DeformAttnParams<double> p(store, "d", 8, 2, 1, 3, rng);
    p.offsets.bias.mutable_value().fill(0.0);
    verify::jitter(store, rng, 0.0);
    // Random attention weights: every point samples the same cell, so they cancel.
    for (auto& v : p.weights.bias.mutable_value().data()) v = rng.uniform(-2, 2);
    const auto x = verify::random_matrix(16, 8, rng);
    const auto out = mid::ms_deform_attn(Var<double>::constant(x), Var<double>::constant(x), layout, p).value();
    const auto want = verify::oracle_affine(verify::oracle_affine(x, verify::snapshot(p.value_proj)),
                                            verify::snapshot(p.output_proj));
    EXPECT_LT(max_abs_diff(out, want), 1e-12);
}

TEST(DeformAttn, ConstantValueAtInteriorPointsIsProjectedConstant) {
    const auto layout = ag::LevelLayout::from_grids({GridShape{4, 4}});
    ParamStore<double> store;
    Rng rng(3);
    mid::DeformAttnParams<double> p(store, "d", 8, 2, 1, 2, rng);
    // Offsets of at most 0.4 px keep every sample of the inner 2x2 cells inside the map.
    p.offsets.bias.mutable_value().fill(0.0);
    for (auto& v : p.offsets.weight.mutable_value().data()) v = rng.uniform(-0.05, 0.05);
    for (auto& v : p.weights.weight.mutable_value().data()) v = rng.uniform(-1, 1);
    const auto v = verify::random_matrix(1, 8, rng);
    const auto values = repeat_row(v, 16);
    const auto queries = verify::random_matrix(16, 8, rng);
    const auto out =
        mid::ms_deform_attn(Var<double>::constant(queries), Var<double>::constant(values), layout, p).value();
    const auto want = verify::oracle_affine(verify::oracle_affine(v, verify::snapshot(p.value_proj)),
                                            verify::snapshot(p.output_proj));
    for (std::size_t q : {5u, 6u, 9u, 10u})
        for (std::size_t j = 0; j < 8; ++j) EXPECT_NEAR(out(q, j), want(0, j), 1e-12);
}

TEST(DeformAttn, MatchesBilinearOracleWithRandomOffsets) {
    const auto layout = ag::LevelLayout::from_grids({GridShape{2, 2}, GridShape{1, 1}});
    ParamStore<double> store;
    Rng rng(4);
    mid::DeformAttnParams<double> p(store, "d", 4, 2, 2, 2, rng);
    verify::jitter(store, rng, 0.7);
    const auto x = verify::random_matrix(5, 4, rng);
    Trace trace;
    const auto out = mid::ms_deform_attn(Var<double>::constant(x), Var<double>::constant(x), layout, p, &trace).value();
    const auto want = verify::oracle_ms_deform_attn(x, x, layout.grids, verify::snapshot(p));
    EXPECT_LT(max_abs_diff(out, want), 1e-10);
    const auto& w = trace.find("mid.deform.weights")->values;
    for (std::size_t r = 0; r < w.rows(); ++r) {
        for (std::size_t h = 0; h < 2; ++h) {
            double sum = 0;
            for (std::size_t k = 0; k < 4; ++k) sum += w(r, h * 4 + k);
            EXPECT_NEAR(sum, 1.0, 1e-12);
        }
    }
}

TEST(Harmonize, TokenCountAndWidth) {
    const auto c = ModelConfig::desk();
    ParamStore<double> store;
    Rng rng(5);
    mid::HarmonizeParams<double> h(store, c, rng);
    std::array<Var<double>, 4> levels;
    std::array<GridShape, 4> grids;
    for (std::size_t i = 0; i < 4; ++i) {
        grids[i] = c.level_grid(i);
        levels[i] = Var<double>::constant(verify::random_matrix(grids[i].cells(), c.channels[i], rng));
    }
    const auto s = mid::harmonize(levels, grids, verify::random_language(c, rng), h);
    EXPECT_EQ(s.visual.rows(), 340u);
    EXPECT_EQ(s.visual.cols(), c.hidden_dim);
    EXPECT_EQ(s.language.rows(), c.sequence_length());
    EXPECT_EQ(s.layout.starts, (std::vector<std::size_t>{0, 256, 320, 336}));
}

TEST(Harmonize, ZeroInputsAndBiasesGiveZeroState) {
    const auto c = verify::toy_config();
    ParamStore<double> store;
    Rng rng(6);
    mid::HarmonizeParams<double> h(store, c, rng);
    for (auto& l : h.level_proj) l.bias.mutable_value().fill(0.0);
    h.language_proj.bias.mutable_value().fill(0.0);
    std::array<Var<double>, 4> levels;
    std::array<GridShape, 4> grids;
    for (std::size_t i = 0; i < 4; ++i) {
        grids[i] = c.level_grid(i);
        levels[i] = Var<double>::constant(Matrix<double>(grids[i].cells(), c.channels[i]));
    }
    auto lang = verify::random_language(c, rng);
    lang.values = Var<double>::constant(Matrix<double>(lang.length(), c.text_dim));
    const auto s = mid::harmonize(levels, grids, lang, h);
    for (double v : s.visual.value().data()) EXPECT_EQ(v, 0.0);
    for (double v : s.language.value().data()) EXPECT_EQ(v, 0.0);
}

TEST(Attention, IdenticalKeysGiveTheValueImage) {
    ParamStore<double> store;
    Rng rng(7);
    MultiHeadAttention<double> mha(store, "a", 6, 6, 6, 2, rng);
    const auto kv_row = verify::random_matrix(1, 6, rng);
    const auto out = mha(Var<double>::constant(verify::random_matrix(3, 6, rng)),
                         Var<double>::constant(repeat_row(kv_row, 5)))
                         .output.value();
    const auto s = verify::snapshot(mha);
    const auto want = verify::oracle_affine(verify::oracle_affine(kv_row, s.wv), s.wo);
    for (std::size_t r = 0; r < 3; ++r)
        for (std::size_t j = 0; j < 6; ++j) EXPECT_NEAR(out(r, j), want(0, j), 1e-12);
}

TEST(Attention, MatchesOracleWithMask) {
    ParamStore<double> store;
    Rng rng(8);
    MultiHeadAttention<double> mha(store, "a", 6, 4, 8, 2, rng);
    const auto q = verify::random_matrix(3, 6, rng), kv = verify::random_matrix(5, 4, rng);
    const std::vector<bool> mask{true, true, false, true, false};
    const auto res = mha(Var<double>::constant(q), Var<double>::constant(kv), &mask);
    EXPECT_LT(max_abs_diff(res.output.value(), verify::oracle_multihead(q, kv, verify::snapshot(mha), &mask)), 1e-12);
    for (const auto& p : res.probs) {
        for (std::size_t r = 0; r < 3; ++r) {
            EXPECT_EQ(p.value()(r, 2), 0.0);
            EXPECT_EQ(p.value()(r, 4), 0.0);
            double sum = 0;
            for (double v : p.value().row(r)) sum += v;
            EXPECT_NEAR(sum, 1.0, 1e-12);
        }
    }
}

TEST(Interactions, ZeroedSublayersReduceToLayerNorms) {
    const auto c = verify::toy_config();
    ParamStore<double> store;
    Rng rng(9);
    mid::L2VParams<double> l2v(store, "l2v", c, rng);
    mid::V2LParams<double> v2l(store, "v2l", c, rng);
    for (auto* l : {&l2v.cross.wo, &l2v.self.wo, &l2v.ffn.fc2, &v2l.cross.wo, &v2l.deform.output_proj, &v2l.ffn.fc2}) {
        l->weight.mutable_value().fill(0.0);
        l->bias.mutable_value().fill(0.0);
    }
    auto state = random_state(c, rng);
    const verify::Norm unit{Matrix<double>(1, c.hidden_dim, 1.0), Matrix<double>(1, c.hidden_dim, 0.0), 1e-5};
    auto ln3 = [&](const Matrix<double>& x) {
        return verify::oracle_layer_norm(verify::oracle_layer_norm(verify::oracle_layer_norm(x, unit), unit), unit);
    };
    EXPECT_LT(max_abs_diff(mid::l2v_interact(state, l2v, true).value(), ln3(state.language.value())), 1e-12);
    EXPECT_LT(max_abs_diff(mid::v2l_interact(state, v2l, true).value(), ln3(state.visual.value())), 1e-12);
}

TEST(Interactions, IdenticalLanguageRowsGiveIdenticalCrossOutputs) {
    const auto c = verify::toy_config();
    ParamStore<double> store;
    Rng rng(10);
    mid::V2LParams<double> v2l(store, "v2l", c, rng);
    auto state = random_state(c, rng);
    state.language_hat = Var<double>::constant(repeat_row(verify::random_matrix(1, c.hidden_dim, rng), c.sequence_length()));
    Trace trace;
    mid::v2l_interact(state, v2l, false, &trace);
    const auto cross = v2l.cross(state.visual, state.language_hat).output.value();
    for (std::size_t r = 1; r < cross.rows(); ++r)
        for (std::size_t j = 0; j < cross.cols(); ++j) EXPECT_NEAR(cross(r, j), cross(0, j), 1e-12);
}

TEST(Interactions, PaddedKeysAreIgnoredWhenMasked) {
    const auto c = verify::toy_config();
    ParamStore<double> store;
    Rng rng(11);
    mid::V2LParams<double> v2l(store, "v2l", c, rng);
    verify::jitter(store, rng, 0.1);
    auto a = random_state(c, rng);
    auto b = a;
    auto lm = a.language.value();
    for (std::size_t j = 0; j < c.hidden_dim; ++j) lm(c.max_tokens - 1, j) += 3.0;
    b.language = Var<double>::constant(lm);
    EXPECT_LT(max_abs_diff(mid::v2l_interact(a, v2l, true).value(), mid::v2l_interact(b, v2l, true).value()), 1e-12);
    EXPECT_GT(max_abs_diff(mid::v2l_interact(a, v2l, false).value(), mid::v2l_interact(b, v2l, false).value()), 1e-6);
}

TEST(PredictMask, ShapesAndZeroSummary) {
    const auto c = ModelConfig::desk();
    ParamStore<double> store;
    Rng rng(12);
    Linear<double> out_conv(store, "out", c.hidden_dim, c.hidden_dim, rng);
    auto state = random_state(c, rng);
    const auto logits = mid::predict_mask(state, out_conv, GridShape{64, 64});
    EXPECT_EQ(logits.low.rows(), 16u);
    EXPECT_EQ(logits.low.cols(), 16u);
    EXPECT_EQ(logits.full.rows(), 64u);
    EXPECT_EQ(logits.full.cols(), 64u);

    state.language_hat = Var<double>::constant(Matrix<double>(c.sequence_length(), c.hidden_dim));
    const auto zero_summary = mid::predict_mask(state, out_conv, GridShape{64, 64});
    for (double v : zero_summary.full.value().data()) EXPECT_EQ(v, 0.0);
}

TEST(PredictMask, SpatiallyConstantFeaturesGiveConstantLogits) {
    const auto c = verify::toy_config();
    ParamStore<double> store;
    Rng rng(13);
    Linear<double> out_conv(store, "out", c.hidden_dim, c.hidden_dim, rng);
    auto state = random_state(c, rng);
    state.visual = Var<double>::constant(repeat_row(verify::random_matrix(1, c.hidden_dim, rng), state.layout.total_rows()));
    const auto full = mid::predict_mask(state, out_conv, GridShape{64, 64}).full.value();
    for (double v : full.data()) EXPECT_NEAR(v, full[0], 1e-12);
}

TEST(Decoder, TopologiesFollowTheConfig) {
    auto c = verify::toy_config();
    {
        ParamStore<double> store;
        Rng rng(1);
        mid::Decoder<double> d(store, c, rng);
        EXPECT_EQ(d.l2v.size(), 1u);
        EXPECT_TRUE(store.contains("mid.l2v.cross.q.weight"));
    }
    c.decoder_mode = DecoderMode::SingleDirection;
    {
        ParamStore<double> store;
        Rng rng(1);
        mid::Decoder<double> d(store, c, rng);
        EXPECT_TRUE(d.l2v.empty());
        EXPECT_EQ(d.v2l.size(), 1u);
    }
    c.decoder_mode = DecoderMode::Bidirectional;
    c.decoder_rounds = 2;
    {
        ParamStore<double> store;
        Rng rng(1);
        mid::Decoder<double> d(store, c, rng);
        EXPECT_TRUE(store.contains("mid.l2v2.self.q.weight"));
        EXPECT_TRUE(store.contains("mid.v2l2.deform.offsets.weight"));
    }
}

TEST(Decoder, BypassSkipsInteractions) {
    auto c = verify::toy_config();
    c.decoder_bypass_attention = true;
    ParamStore<double> store;
    Rng rng(2);
    mid::Decoder<double> d(store, c, rng);
    std::array<Var<double>, 4> levels;
    std::array<GridShape, 4> grids;
    for (std::size_t i = 0; i < 4; ++i) {
        grids[i] = c.level_grid(i);
        levels[i] = Var<double>::constant(verify::random_matrix(grids[i].cells(), c.channels[i], rng));
    }
    const auto lang = verify::random_language(c, rng);
    Trace trace;
    const auto logits = d(levels, grids, lang, &trace);
    EXPECT_EQ(trace.find("mid.l2v.cross"), nullptr);
    auto state = mid::harmonize(levels, grids, lang, d.harmonize_params);
    EXPECT_EQ(logits.full.value(), mid::predict_mask(state, d.out_conv, GridShape{64, 64}).full.value());
}

#include "crobim/verify_suite.hpp"

#include <algorithm>
#include <cmath>

#include "crobim/dataio.hpp"
#include "crobim/model.hpp"
#include "crobim/objective.hpp"

namespace crobim::verify {

ModelConfig toy_config() {
    ModelConfig c;
    c.image_size = 64;
    c.channels = {4, 6, 8, 10};
    c.text_dim = 8;
    c.max_tokens = 5;
    c.num_prompts = 2;
    c.hidden_dim = 8;
    c.msda_heads = 2;
    c.msda_points = 2;
    c.text_heads = 2;
    c.text_ffn_dim = 12;
    c.compensation_dim = 8;
    c.compensation_heads = 2;
    c.decoder_heads = 2;
    c.decoder_ffn_dim = 12;
    c.topk_fraction = 0.5;
    return c;
}

Matrix<double> random_matrix(std::size_t rows, std::size_t cols, Rng& rng, double scale) {
    Matrix<double> m(rows, cols);
    for (auto& v : m.data()) v = scale * rng.uniform(-1.0, 1.0);
    return m;
}

void jitter(ParamStore<double>& store, Rng& rng, double scale) {
    for (auto& e : store.entries())
        for (auto& v : e.var.mutable_value().data()) v += scale * rng.uniform(-1.0, 1.0);
}

std::vector<int> random_tokens(std::size_t count, std::size_t vocab, Rng& rng) {
    std::vector<int> t;
    for (std::size_t i = 0; i < count; ++i) t.push_back(3 + static_cast<int>(rng.index(vocab - 3)));
    return t;
}

FeaturePyramid<double> random_pyramid(const ModelConfig& config, Rng& rng) {
    FeaturePyramid<double> p;
    for (std::size_t i = 0; i < 4; ++i) {
        p.grids[i] = config.level_grid(i);
        p.levels[i] = ag::Var<double>::constant(random_matrix(p.grids[i].cells(), config.channels[i], rng));
    }
    return p;
}

TokenFeatures<double> random_language(const ModelConfig& config, Rng& rng, std::size_t pads) {
    TokenFeatures<double> t;
    const std::size_t len = config.sequence_length();
    t.values = ag::Var<double>::constant(random_matrix(len, config.text_dim, rng));
    t.pad_mask.assign(len, true);
    for (std::size_t j = 0; j < pads && j + 1 < config.max_tokens; ++j) t.pad_mask[config.max_tokens - 1 - j] = false;
    t.cls_index = 0;
    return t;
}

// -- gradient suite ---------------------------------------------------------

namespace {

using Named = std::vector<std::pair<std::string, ag::Var<double>>>;

ag::Var<double> project(const ag::Var<double>& x, const Matrix<double>& r) {
    return ag::sum_all(ag::mul(x, ag::Var<double>::constant(r)));
}

Named store_params(const ParamStore<double>& store) {
    Named out;
    for (const auto& e : store.entries()) out.emplace_back(e.name, e.var);
    return out;
}

void append(std::vector<GradCheckReport>& all, const std::string& group, std::vector<GradCheckReport> part) {
    for (auto& r : part) {
        r.name = group + "/" + r.name;
        all.push_back(std::move(r));
    }
}

}  // namespace

std::vector<GradCheckReport> gradient_suite(const ModelConfig& config, const GradCheckOptions& options) {
    config.validate();
    std::vector<GradCheckReport> all;
    Rng rng(options.seed);
    std::array<GridShape, 4> grids;
    for (std::size_t i = 0; i < 4; ++i) grids[i] = config.level_grid(i);

    // CAPM in both context layouts, including the gradient reaching the visual levels.
    for (const auto mode : {ContextMode::RowStack, ContextMode::ChannelConcat}) {
        auto cfg = config;
        cfg.context_mode = mode;
        ParamStore<double> store;
        capm::PromptBank<double> bank(store, cfg, rng);
        auto pyramid = random_pyramid(cfg, rng);
        Named params = store_params(store);
        for (std::size_t i = 0; i < 4; ++i) {
            pyramid.levels[i] = ag::Var<double>::parameter(pyramid.levels[i].value());
            params.emplace_back("V" + std::to_string(i + 1), pyramid.levels[i]);
        }
        const auto r = random_matrix(cfg.num_prompts, cfg.text_dim, rng);
        auto loss = [&] { return project(capm::modulate_prompts(capm::pool_context(pyramid, bank, cfg), bank, cfg), r); };
        append(all, mode == ContextMode::RowStack ? "capm" : "capm.channel_concat",
               finite_difference_check(loss, params, options));
    }

    // Each LGFA stage.
    for (std::size_t i = 0; i < 4; ++i) {
        ParamStore<double> store;
        lgfa::StageFusionParams<double> stage(store, "stage", config.channels[i], config.sequence_length(),
                                              config.text_dim, rng);
        jitter(store, rng, 0.1);
        auto language = random_language(config, rng);
        language.values = ag::Var<double>::parameter(language.values.value());
        auto level = ag::Var<double>::parameter(random_matrix(grids[i].cells(), config.channels[i], rng));
        Named params = store_params(store);
        params.emplace_back("V", level);
        params.emplace_back("L", language.values);
        const auto r1 = random_matrix(grids[i].cells(), config.channels[i], rng);
        const auto r2 = random_matrix(grids[i].cells(), config.text_dim, rng, 0.1);
        auto loss = [&] {
            const auto out = lgfa::fuse_stage(level, grids[i], language, stage, i, config.lgfa_mask_padding);
            return ag::add(project(out.fused, r1), project(out.scores, r2));
        };
        append(all, "lgfa.stage" + std::to_string(i + 1), finite_difference_check(loss, params, options));
    }

    // Deficit compensation on a fixed region set.
    {
        ParamStore<double> store;
        lgfa::CompensationParams<double> comp(store, config, rng);
        jitter(store, rng, 0.1);
        std::array<ag::Var<double>, 4> fused;
        Named params = store_params(store);
        std::array<Matrix<double>, 4> r;
        for (std::size_t i = 0; i < 4; ++i) {
            fused[i] = ag::Var<double>::parameter(random_matrix(grids[i].cells(), config.channels[i], rng));
            params.emplace_back("V" + std::to_string(i + 1), fused[i]);
            r[i] = random_matrix(grids[i].cells(), config.channels[i], rng);
        }
        std::vector<lgfa::Cell> regions{{0, 0}};
        if (grids[3].cells() > 1) regions.push_back({grids[3].height - 1, grids[3].width - 1});
        auto loss = [&] {
            const auto out = lgfa::compensate_regions(fused, grids, regions, comp);
            auto total = project(out[0], r[0]);
            for (std::size_t i = 1; i < 4; ++i) total = ag::add(total, project(out[i], r[i]));
            return total;
        };
        append(all, "lgfa.compensation", finite_difference_check(loss, params, options));
    }

    // Decoder interactions and deformable attention.
    const auto layout = ag::LevelLayout::from_grids({grids.begin(), grids.end()});
    const std::size_t n = layout.total_rows(), d = config.hidden_dim, len = config.sequence_length();
    auto make_state = [&](Named& params) {
        mid::DecoderState<double> s;
        s.visual = ag::Var<double>::parameter(random_matrix(n, d, rng));
        s.language = ag::Var<double>::parameter(random_matrix(len, d, rng));
        s.layout = layout;
        s.pad_mask.assign(len, true);
        s.pad_mask[config.max_tokens - 1] = false;
        params.emplace_back("V", s.visual);
        params.emplace_back("L", s.language);
        return s;
    };
    {
        ParamStore<double> store;
        mid::L2VParams<double> l2v(store, "l2v", config, rng);
        jitter(store, rng, 0.1);
        Named params = store_params(store);
        const auto state = make_state(params);
        const auto r = random_matrix(len, d, rng);
        auto loss = [&] { return project(mid::l2v_interact(state, l2v, config.decoder_mask_padding), r); };
        append(all, "mid.l2v", finite_difference_check(loss, params, options));
    }
    {
        ParamStore<double> store;
        mid::V2LParams<double> v2l(store, "v2l", config, rng);
        jitter(store, rng, 0.1);
        Named params = store_params(store);
        const auto state = make_state(params);
        const auto r = random_matrix(n, d, rng);
        auto loss = [&] { return project(mid::v2l_interact(state, v2l, config.decoder_mask_padding), r); };
        append(all, "mid.v2l", finite_difference_check(loss, params, options));
    }
    {
        ParamStore<double> store;
        mid::DeformAttnParams<double> deform(store, "deform", d, config.msda_heads, 4, config.msda_points, rng);
        jitter(store, rng, 0.3);
        auto queries = ag::Var<double>::parameter(random_matrix(n, d, rng));
        auto values = ag::Var<double>::parameter(random_matrix(n, d, rng));
        Named params = store_params(store);
        params.emplace_back("queries", queries);
        params.emplace_back("values", values);
        const auto r = random_matrix(n, d, rng);
        auto loss = [&] { return project(mid::ms_deform_attn(queries, values, layout, deform), r); };
        append(all, "mid.deform", finite_difference_check(loss, params, options));
    }

    // Losses.
    {
        const std::size_t h = 6, w = 5;
        auto logits = ag::Var<double>::parameter(random_matrix(h, w, rng, 3.0));
        Mask target(h, w);
        for (auto& v : target.data()) v = rng.uniform() < 0.4 ? 1 : 0;
        append(all, "objective.ce",
               finite_difference_check([&] { return objective::ce_loss(logits, target); }, {{"logits", logits}},
                                       options));
        append(all, "objective.dice",
               finite_difference_check(
                   [&] { return objective::dice_loss(logits, target, config.dice_smoothing); },
                   {{"logits", logits}}, options));
    }

    // Whole model, two-sample batch.
    {
        CroBIM<double> model(config);
        jitter(model.params(), rng, 0.2);
        const auto data = dataio::synth_triplets(2, config.image_size, options.seed + 17);
        auto loss = [&] {
            auto a = model.loss(data[0]).total;
            auto b = model.loss(data[1]).total;
            return ag::scale(ag::add(a, b), 0.5);
        };
        auto opts = options;
        opts.probes = std::max<std::size_t>(1, options.probes / 3);
        append(all, "model", finite_difference_check(loss, store_params(model.params()), opts));
    }
    return all;
}

// -- oracle suite -----------------------------------------------------------

namespace {

double max_abs_diff(const Matrix<double>& a, const Matrix<double>& b) {
    if (!a.same_shape(b)) return std::numeric_limits<double>::infinity();
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

std::array<GridShape, 4> random_grids(Rng& rng, std::size_t max_coarse) {
    const std::size_t h = 1 + rng.index(max_coarse), w = 1 + rng.index(max_coarse);
    std::array<GridShape, 4> g;
    for (std::size_t i = 0; i < 4; ++i) g[i] = {h << (3 - i), w << (3 - i)};
    return g;
}

}  // namespace

std::vector<OracleReport> oracle_suite(std::size_t trials, std::uint64_t seed, double tolerance) {
    Rng rng(seed);
    std::vector<OracleReport> reports;
    auto begin = [&](const std::string& name) -> OracleReport& {
        reports.push_back({name, 0, 0.0, tolerance, false});
        return reports.back();
    };
    auto finish = [&](OracleReport& r) { r.passed = r.trials > 0 && r.max_abs_error < r.tolerance; };

    {
        auto& r = begin("fuse_stage");
        for (std::size_t t = 0; t < trials; ++t, ++r.trials) {
            const GridShape grid{1 + rng.index(6), 1 + rng.index(6)};
            const std::size_t c = 2 + rng.index(5), len = 2 + rng.index(5), dl = 2 + rng.index(5);
            ParamStore<double> store;
            lgfa::StageFusionParams<double> p(store, "s", c, len, dl, rng);
            jitter(store, rng, 0.2);
            TokenFeatures<double> lang;
            lang.values = ag::Var<double>::constant(random_matrix(len, dl, rng));
            for (std::size_t j = 0; j < len; ++j) lang.pad_mask.push_back(j == 0 || rng.uniform() < 0.7);
            const auto level = random_matrix(grid.cells(), c, rng);
            const bool mask = rng.uniform() < 0.5;
            const auto got = lgfa::fuse_stage(ag::Var<double>::constant(level), grid, lang, p, 0, mask);
            const auto want = oracle_fuse_stage(level, lang.values.value(), lang.pad_mask, snapshot(p), mask);
            r.max_abs_error = std::max({r.max_abs_error, max_abs_diff(got.fused.value(), want.fused),
                                        max_abs_diff(got.scores.value(), want.scores)});
        }
        finish(r);
    }
    {
        auto& r = begin("deficit_map");
        for (std::size_t t = 0; t < trials; ++t, ++r.trials) {
            const auto grids = random_grids(rng, 3);
            const std::size_t dl = 1 + rng.index(5), len = 2 + rng.index(20);
            std::array<Matrix<double>, 4> scores;
            for (std::size_t i = 0; i < 4; ++i) scores[i] = random_matrix(grids[i].cells(), dl, rng, 4.0);
            r.max_abs_error = std::max(r.max_abs_error, max_abs_diff(lgfa::deficit_map(scores, grids, len),
                                                                     oracle_deficit_map(scores, grids, len)));
        }
        finish(r);
    }
    {
        auto& r = begin("topk_regions");
        for (std::size_t t = 0; t < trials; ++t, ++r.trials) {
            Matrix<double> deficit(1 + rng.index(6), 1 + rng.index(6));
            const bool ties = rng.uniform() < 0.5;
            for (auto& v : deficit.data()) v = ties ? 0.25 * static_cast<double>(rng.index(4)) : rng.uniform();
            const std::size_t k = rng.index(deficit.size() + 1);
            const auto got = lgfa::topk_regions(deficit, k);
            const auto want = oracle_topk(deficit, k);
            bool same = got.size() == want.size();
            for (std::size_t i = 0; same && i < got.size(); ++i) {
                same = got[i].row == want[i].first && got[i].col == want[i].second;
            }
            r.max_abs_error = std::max(r.max_abs_error, same ? 0.0 : 1.0);
        }
        finish(r);
    }
    {
        auto& r = begin("compensate_regions");
        for (std::size_t t = 0; t < trials; ++t, ++r.trials) {
            const auto grids = random_grids(rng, 2);
            ModelConfig cfg = toy_config();
            for (auto& c : cfg.channels) c = 2 + rng.index(4);
            cfg.compensation_heads = 1 + rng.index(2);
            cfg.compensation_dim = 2 * cfg.compensation_heads * (1 + rng.index(2));
            ParamStore<double> store;
            lgfa::CompensationParams<double> p(store, cfg, rng);
            jitter(store, rng, 0.2);
            std::array<Matrix<double>, 4> fused;
            std::array<ag::Var<double>, 4> vars;
            for (std::size_t i = 0; i < 4; ++i) {
                fused[i] = random_matrix(grids[i].cells(), cfg.channels[i], rng);
                vars[i] = ag::Var<double>::constant(fused[i]);
            }
            std::vector<std::size_t> order(grids[3].cells());
            for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
            for (std::size_t i = order.size() - 1; i > 0; --i) std::swap(order[i], order[rng.index(i + 1)]);
            const std::size_t k = rng.index(order.size() + 1);
            std::vector<lgfa::Cell> regions;
            std::vector<std::pair<std::size_t, std::size_t>> cells;
            for (std::size_t i = 0; i < k; ++i) {
                regions.push_back({order[i] / grids[3].width, order[i] % grids[3].width});
                cells.emplace_back(regions.back().row, regions.back().col);
            }
            const auto got = lgfa::compensate_regions(vars, grids, regions, p);
            const auto want = oracle_compensate(fused, grids, cells, snapshot(p));
            for (std::size_t i = 0; i < 4; ++i) {
                r.max_abs_error = std::max(r.max_abs_error, max_abs_diff(got[i].value(), want[i]));
            }
        }
        finish(r);
    }
    {
        auto& r = begin("ms_deform_attn");
        for (std::size_t t = 0; t < trials; ++t, ++r.trials) {
            const auto grids = random_grids(rng, 2);
            const std::size_t heads = 1 + rng.index(2), points = 1 + rng.index(3), d = heads * (1 + rng.index(3));
            ParamStore<double> store;
            mid::DeformAttnParams<double> p(store, "d", d, heads, 4, points, rng);
            jitter(store, rng, 0.5);
            for (auto& v : p.offsets.bias.mutable_value().data()) v += rng.uniform(-3.0, 3.0);
            const auto layout = ag::LevelLayout::from_grids({grids.begin(), grids.end()});
            const auto q = random_matrix(layout.total_rows(), d, rng);
            const auto v = random_matrix(layout.total_rows(), d, rng);
            const auto got = mid::ms_deform_attn(ag::Var<double>::constant(q), ag::Var<double>::constant(v), layout, p);
            const auto want = oracle_ms_deform_attn(q, v, {grids.begin(), grids.end()}, snapshot(p));
            r.max_abs_error = std::max(r.max_abs_error, max_abs_diff(got.value(), want));
        }
        finish(r);
    }
    {
        auto& ce = begin("ce_loss");
        for (std::size_t t = 0; t < trials; ++t, ++ce.trials) {
            const auto logits = random_matrix(1 + rng.index(8), 1 + rng.index(8), rng, 6.0);
            Mask target(logits.rows(), logits.cols());
            for (auto& v : target.data()) v = rng.uniform() < 0.5 ? 1 : 0;
            const double got = objective::ce_loss(ag::Var<double>::constant(logits), target).item();
            ce.max_abs_error = std::max(ce.max_abs_error, std::abs(got - oracle_ce(logits, target)));
        }
        finish(ce);
        auto& dice = begin("dice_loss");
        for (std::size_t t = 0; t < trials; ++t, ++dice.trials) {
            const auto logits = random_matrix(1 + rng.index(8), 1 + rng.index(8), rng, 6.0);
            Mask target(logits.rows(), logits.cols());
            for (auto& v : target.data()) v = rng.uniform() < 0.5 ? 1 : 0;
            const double eps = rng.uniform(0.1, 2.0);
            const double got = objective::dice_loss(ag::Var<double>::constant(logits), target, eps).item();
            dice.max_abs_error = std::max(dice.max_abs_error, std::abs(got - oracle_dice(logits, target, eps)));
        }
        finish(dice);
    }
    return reports;
}

}  // namespace crobim::verify

// Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any failure.

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <json.hpp>
#include <sstream>
#include <string>

#include "crobim/dataio.hpp"
#include "crobim/train.hpp"
#include "crobim/verify_suite.hpp"

using namespace crobim;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool passed = true;
    std::ostringstream detail;

    void require(bool ok, const std::string& what) {
        if (!ok) {
            passed = false;
            detail << "  failed: " << what << "\n";
        }
    }
    void note(const std::string& line) { detail << "  " << line << "\n"; }
};

struct Criterion {
    int number;
    std::string name;
    double budget_seconds;
    std::function<void(Outcome&)> run;
};

std::string fmt(double v, int precision = 4) {
    std::ostringstream os;
    os << std::setprecision(precision) << v;
    return os.str();
}

// -- 1 ------------------------------------------------------------------------

void shape_suite(Outcome& out) {
    for (std::size_t h : {64u, 128u}) {
        auto c = ModelConfig::desk();
        c.image_size = h;
        const CroBIM<float> model(c);
        const auto sample = dataio::synth_triplets(1, h, 5)[0];
        Trace trace;
        const auto r = model.forward(sample.image, sample.tokens, &trace);
        const std::string tag = "H=" + std::to_string(h) + ": ";
        std::size_t n = 0;
        for (std::size_t i = 0; i < 4; ++i) {
            const std::size_t side = h >> (i + 2);
            n += side * side;
            out.require(r.pyramid.levels[i].rows() == side * side && r.pyramid.levels[i].cols() == c.channels[i],
                        tag + "pyramid level " + std::to_string(i + 1));
            out.require(r.aggregated.levels[i].rows() == side * side &&
                            r.aggregated.levels[i].cols() == c.channels[i],
                        tag + "aggregated level " + std::to_string(i + 1));
            out.require(r.aggregated.scores[i].rows() == side * side &&
                            r.aggregated.scores[i].cols() == c.text_dim,
                        tag + "stage scores " + std::to_string(i + 1));
        }
        out.require(n == h * h * 85 / 1024, tag + "token count closed form");
        out.require(r.language.values.rows() == c.sequence_length() && r.language.values.cols() == c.text_dim,
                    tag + "language features");
        out.require(r.aggregated.regions.size() == c.topk_count(), tag + "compensated cell count");
        out.require(r.logits.low.rows() == h / 4 && r.logits.low.cols() == h / 4, tag + "low-resolution logits");
        out.require(r.logits.full.rows() == h && r.logits.full.cols() == h, tag + "full-resolution logits");
        const auto* cross = trace.find("mid.v2l.cross");
        out.require(cross && cross->values.rows() == n && cross->values.cols() == c.sequence_length(),
                    tag + "decoder visual tokens");
        out.note(tag + "N = " + std::to_string(n) + ", logits " + std::to_string(h) + "x" + std::to_string(h));
    }
}

// -- 2 ------------------------------------------------------------------------

void normalization_suite(Outcome& out) {
    const auto c = ModelConfig::desk();
    const CroBIM<float> model(c);
    const auto data = dataio::synth_triplets(100, c.image_size, 77);
    const std::vector<std::pair<std::string, std::size_t>> entries{
        {"capm.attn", 0},          {"lgfa.stage1.softmax", 0}, {"lgfa.stage2.softmax", 0},
        {"lgfa.stage3.softmax", 0}, {"lgfa.stage4.softmax", 0}, {"mid.l2v.cross", 0},
        {"mid.l2v.self", 0},       {"mid.v2l.cross", 0},       {"mid.deform.weights", c.msda_points * 4},
    };
    double worst = 0.0;
    std::size_t rows = 0;
    for (const auto& sample : data) {
        Trace trace;
        model.forward(sample.image, sample.tokens, &trace);
        for (const auto& [name, group] : entries) {
            const auto* e = trace.find(name);
            if (!e) {
                out.require(false, "missing trace " + name);
                continue;
            }
            const auto& m = e->values;
            const std::size_t g = group == 0 ? m.cols() : group;
            for (std::size_t r = 0; r < m.rows(); ++r) {
                for (std::size_t start = 0; start < m.cols(); start += g) {
                    double s = 0.0;
                    for (std::size_t j = start; j < start + g; ++j) s += m(r, j);
                    worst = std::max(worst, std::abs(s - 1.0));
                    ++rows;
                }
            }
        }
    }
    out.require(worst < 1e-6, "max |row sum - 1| = " + fmt(worst));
    out.note(std::to_string(rows) + " distributions over 100 instances, max |sum - 1| = " + fmt(worst));
}

// -- 3 ------------------------------------------------------------------------

void gradient_suite(Outcome& out) {
    verify::GradCheckOptions o;
    o.eps = 1e-6;
    o.tol = 1e-4;
    const auto reports = verify::gradient_suite(verify::toy_config(), o);
    double worst = 0.0;
    for (const auto& r : reports) {
        worst = std::max(worst, r.max_rel_error);
        out.require(r.passed, r.name + " rel err " + fmt(r.max_rel_error));
    }
    out.require(!reports.empty(), "no gradient checks ran");
    out.note(std::to_string(reports.size()) + " parameters, max rel err " + fmt(worst));
}

// -- 4 ------------------------------------------------------------------------

void oracle_suite(Outcome& out) {
    const auto reports = verify::oracle_suite(50, 2024, 1e-10);
    for (const auto& r : reports) {
        out.require(r.passed && r.trials >= 50, r.name + " max abs err " + fmt(r.max_abs_error));
        out.note(r.name + ": " + std::to_string(r.trials) + " trials, max abs err " + fmt(r.max_abs_error));
    }
    out.require(reports.size() == 7, "expected 7 oracle comparisons");
}

// -- 5 ------------------------------------------------------------------------

void identity_suite(Outcome& out) {
    Rng rng(99);

    // Compensation disabled: aggregated levels are exactly the stage outputs.
    {
        auto c = verify::toy_config();
        c.use_compensation = false;
        ParamStore<double> store;
        lgfa::Aggregator<double> agg(store, c, rng);
        verify::jitter(store, rng, 0.1);
        const auto pyramid = verify::random_pyramid(c, rng);
        const auto language = verify::random_language(c, rng);
        const auto result = agg(pyramid, language);
        out.require(result.regions.empty(), "K = 0 selects no cells");
        std::array<ag::Var<double>, 4> fused;
        std::array<GridShape, 4> grids;
        for (std::size_t i = 0; i < 4; ++i) {
            grids[i] = c.level_grid(i);
            fused[i] = lgfa::fuse_stage(pyramid.levels[i], grids[i], language, agg.stages[i], i,
                                        c.lgfa_mask_padding)
                           .fused;
            out.require(result.levels[i].value() == fused[i].value(), "K = 0 level " + std::to_string(i + 1));
        }
        const auto same = lgfa::compensate_regions(fused, grids, {}, agg.compensation);
        for (std::size_t i = 0; i < 4; ++i)
            out.require(same[i].value() == fused[i].value(), "empty region list, level " + std::to_string(i + 1));
    }

    // Zero offsets on one level: each query reads its own cell.
    {
        const auto layout = ag::LevelLayout::from_grids({GridShape{8, 8}});
        ParamStore<double> store;
        mid::DeformAttnParams<double> p(store, "d", 6, 2, 1, 1, rng);
        for (auto* l : {&p.offsets, &p.value_proj, &p.output_proj}) {
            l->weight.mutable_value().fill(0.0);
            l->bias.mutable_value().fill(0.0);
        }
        for (std::size_t k = 0; k < 6; ++k) p.value_proj.weight.mutable_value()(k, k) = p.output_proj.weight.mutable_value()(k, k) = 1.0;
        for (auto& v : p.weights.weight.mutable_value().data()) v = rng.uniform(-1, 1);
        const auto x = verify::random_matrix(64, 6, rng);
        const auto y = mid::ms_deform_attn(ag::Var<double>::constant(x), ag::Var<double>::constant(x), layout, p);
        out.require(y.value() == x, "zero-offset deformable attention equals a gather");
    }

    // lambda endpoints drop the other term exactly.
    {
        auto c = ModelConfig::desk();
        const auto logits = ag::Var<double>::constant(verify::random_matrix(12, 12, rng, 3.0));
        Mask target(12, 12);
        for (auto& v : target.data()) v = rng.uniform() < 0.3;
        const double ce = objective::ce_loss(logits, target).item();
        const double dice = objective::dice_loss(logits, target, c.dice_smoothing).item();
        c.lambda_ce = 1.0;
        out.require(objective::combined_loss(logits, target, c).total.item() == ce, "lambda = 1 gives CE");
        c.lambda_ce = 0.0;
        out.require(objective::combined_loss(logits, target, c).total.item() == dice, "lambda = 0 gives Dice");
    }

    // Identical masks score 1 on every metric, including empty masks.
    {
        metrics::MetricAccumulator acc;
        for (int i = 0; i < 20; ++i) {
            Mask m(16, 16);
            if (i > 0)
                for (auto& v : m.data()) v = rng.uniform() < 0.5;
            acc.accumulate(m, m);
        }
        const auto r = acc.finalize();
        bool all_one = r.oiou == 1.0 && r.miou == 1.0;
        for (double p : r.precision) all_one = all_one && p == 1.0;
        out.require(all_one, "identical masks give 1 on every metric");
    }
    out.note("K = 0, zero-offset gather, lambda in {0, 1}, identical masks: exact");
}

// -- 6 ------------------------------------------------------------------------

void metrics_suite(Outcome& out) {
    Rng rng(6);
    std::vector<std::pair<Mask, Mask>> pairs;
    for (int i = 0; i < 1000; ++i) {
        Mask p(16, 16), g(16, 16);
        const double dp = rng.uniform(), dg = rng.uniform();
        for (auto& v : p.data()) v = rng.uniform() < dp;
        for (auto& v : g.data()) v = rng.uniform() < dg;
        pairs.emplace_back(std::move(p), std::move(g));
    }
    metrics::MetricAccumulator single;
    std::uint64_t sum_i = 0, sum_u = 0;
    std::size_t mismatches = 0;
    double iou_sum = 0.0;
    std::array<std::size_t, 5> hits{};
    for (const auto& [p, g] : pairs) {
        const auto s = single.accumulate(p, g);
        const auto [i, u] = verify::oracle_iou(p, g);
        if (s.intersection != i || s.union_ != u) ++mismatches;
        sum_i += i;
        sum_u += u;
        const double iou = u == 0 ? 1.0 : static_cast<double>(i) / static_cast<double>(u);
        iou_sum += iou;
        for (std::size_t t = 0; t < 5; ++t) hits[t] += iou >= metrics::kPrecisionThresholds[t];
    }
    const auto r = single.finalize();
    out.require(mismatches == 0, std::to_string(mismatches) + " per-sample count mismatches");
    out.require(r.oiou == static_cast<double>(sum_i) / static_cast<double>(sum_u), "oIoU");
    out.require(r.miou == iou_sum / 1000.0, "mIoU");
    for (std::size_t t = 0; t < 5; ++t)
        out.require(r.precision[t] == static_cast<double>(hits[t]) / 1000.0, metrics::threshold_key(t));

    for (std::size_t shards : {2u, 3u, 7u, 16u}) {
        std::vector<metrics::MetricAccumulator> parts(shards);
        for (std::size_t k = 0; k < pairs.size(); ++k) parts[k * shards / pairs.size()].accumulate(pairs[k].first, pairs[k].second);
        metrics::MetricAccumulator merged;
        for (const auto& part : parts) merged.merge(part);
        const auto m = merged.finalize();
        out.require(m.oiou == r.oiou && m.miou == r.miou && m.precision == r.precision && m.count == r.count,
                    std::to_string(shards) + "-shard merge equals the single pass");
    }
    out.note("1000 pairs exact; oIoU " + fmt(r.oiou, 6) + ", mIoU " + fmt(r.miou, 6));
}

// -- 7 ------------------------------------------------------------------------

void overfit_suite(Outcome& out) {
    const auto c = ModelConfig::desk();
    const auto data = dataio::synth_triplets(8, c.image_size, 1234);
    CroBIM<float> model(c);
    train::OptimConfig o;
    o.steps = 500;
    o.batch_size = 4;
    train::AdamW optim(model.params(), o);
    const auto log = train::train(model, optim, data, o);
    const auto r = train::evaluate(model, data).finalize();
    out.require(r.miou >= 0.90, "mIoU " + fmt(r.miou) + " < 0.90");
    out.note("500 steps, loss " + fmt(log.front().loss.total) + " -> " + fmt(log.back().loss.total) + ", mIoU " +
             fmt(r.miou) + ", oIoU " + fmt(r.oiou));
}

// -- 8 ------------------------------------------------------------------------

int run_cli(const std::string& args, const fs::path& log) {
    const std::string cmd = std::string("\"") + CROBIM_CLI + "\" " + args + " > \"" + log.string() + "\" 2>&1";
    return std::system(cmd.c_str());
}

void ablation_suite(Outcome& out) {
    const fs::path work = fs::current_path() / "acceptance_ablations";
    fs::remove_all(work);
    fs::create_directories(work);
    const std::string train_data = (work / "train").string(), test_data = (work / "test").string();
    out.require(run_cli("synth --split train --set synth_count=64 --set synth_seed=101 -o \"" + train_data + "\"",
                        work / "synth_train.log") == 0,
                "synth train split");
    out.require(run_cli("synth --split test --set synth_count=32 --set synth_seed=202 -o \"" + test_data + "\"",
                        work / "synth_test.log") == 0,
                "synth test split");

    const std::vector<std::pair<std::string, std::string>> variants{
        {"full", ""},
        {"no-capm", "--no-capm"},
        {"no-compensation", "--no-compensation"},
        {"single-direction", "--single-direction"},
    };
    const std::map<std::string, std::string> expected_key{
        {"no-capm", "use_capm = false"},
        {"no-compensation", "use_compensation = false"},
        {"single-direction", "decoder_mode = single"},
    };
    for (const auto& [name, flag] : variants) {
        const auto run_dir = work / name;
        const auto eval_dir = work / (name + "_eval");
        const int trained = run_cli("train " + flag + " --set manifest=\"" + train_data +
                                        "/manifest.tsv\" --set steps=500 --log-every 0 -o \"" + run_dir.string() + "\"",
                                    work / (name + "_train.log"));
        out.require(trained == 0, name + ": train exit " + std::to_string(trained));
        const int evaluated = run_cli("eval " + flag + " --checkpoint \"" + (run_dir / "checkpoint.ckpt").string() +
                                          "\" --set manifest=\"" + test_data + "/manifest.tsv\" --split test -o \"" +
                                          eval_dir.string() + "\"",
                                      work / (name + "_eval.log"));
        out.require(evaluated == 0, name + ": eval exit " + std::to_string(evaluated));
        if (trained != 0 || evaluated != 0) continue;

        if (auto it = expected_key.find(name); it != expected_key.end()) {
            std::ifstream cfg(run_dir / "config.txt");
            const std::string text((std::istreambuf_iterator<char>(cfg)), {});
            out.require(text.find(it->second) != std::string::npos, name + ": config echo lacks " + it->second);
        }
        std::ifstream js(eval_dir / "metrics.json");
        const auto j = nlohmann::json::parse(js, nullptr, false);
        const bool ok = !j.is_discarded() && j.contains("mIoU") && j.contains("oIoU") &&
                        std::isfinite(j["mIoU"].get<double>()) && j["count"].get<int>() == 32;
        out.require(ok, name + ": metrics.json");
        if (ok) {
            out.note(name + ": test mIoU " + fmt(j["mIoU"].get<double>()) + ", oIoU " +
                     fmt(j["oIoU"].get<double>()) + ", Pr@0.5 " + fmt(j["Pr@0.5"].get<double>()));
        }
    }
}

// -- 9 ------------------------------------------------------------------------

void stats_suite(Outcome& out) {
    const fs::path root = fs::path(CROBIM_TEST_DATA) / "stats";
    std::ifstream in(root / "golden.json");
    const auto golden = nlohmann::json::parse(in);
    const auto st = dataio::dataset_stats(dataio::stats_records(root / "manifest.tsv", ""));

    out.require(st.record_count == golden["record_count"].get<std::size_t>(), "record count");
    std::size_t words = 0;
    for (const auto& [len, n] : st.length_histogram) words += len * n;
    out.require(words == golden["total_words"].get<std::size_t>(), "total words");
    out.require(std::abs(st.average_length - golden["average_length"].get<double>()) < 1e-12, "average length");
    out.require(st.vocabulary_size == golden["vocabulary_size"].get<std::size_t>(), "vocabulary size");

    std::map<std::string, std::size_t> lengths;
    for (const auto& [len, n] : st.length_histogram) lengths[std::to_string(len)] = n;
    out.require(lengths == golden["length_histogram"].get<std::map<std::string, std::size_t>>(), "length histogram");
    out.require(st.category_counts == golden["category_counts"].get<std::map<std::string, std::size_t>>(),
                "category counts");
    std::map<std::string, std::size_t> sizes;
    for (const auto& [k, v] : st.size_histogram)
        if (v > 0) sizes[k] = v;
    out.require(sizes == golden["size_histogram"].get<std::map<std::string, std::size_t>>(), "size histogram");
    out.require(!st.top_words.empty() && st.top_words.front().first == golden["top_word"][0].get<std::string>() &&
                    st.top_words.front().second == golden["top_word"][1].get<std::size_t>(),
                "most frequent word");
    out.note("20 records, " + std::to_string(words) + " words, vocabulary " + std::to_string(st.vocabulary_size));
}

}  // namespace

int main() {
    const std::vector<Criterion> criteria{
        {1, "shape suite", 10, shape_suite},
        {2, "attention normalization", 30, normalization_suite},
        {3, "gradient checks", 300, gradient_suite},
        {4, "oracle equivalence", 120, oracle_suite},
        {5, "identity and degenerate cases", 60, identity_suite},
        {6, "metric arithmetic", 60, metrics_suite},
        {7, "overfit synthetic triplets", 300, overfit_suite},
        {8, "ablations via the CLI", 900, ablation_suite},
        {9, "statistics golden file", 5, stats_suite},
    };
    int failures = 0;
    for (const auto& c : criteria) {
        Outcome out;
        const auto start = std::chrono::steady_clock::now();
        try {
            c.run(out);
        } catch (const std::exception& e) {
            out.require(false, std::string("exception: ") + e.what());
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        out.require(secs < c.budget_seconds, "took " + fmt(secs) + " s, budget " + fmt(c.budget_seconds) + " s");
        failures += !out.passed;
        std::cout << (out.passed ? "[PASS] " : "[FAIL] ") << c.number << ". " << c.name << " (" << std::fixed
                  << std::setprecision(1) << secs << " s)" << std::defaultfloat << "\n"
                  << out.detail.str() << std::flush;
    }
    std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << "\n";
    return failures == 0 ? 0 : 1;
}

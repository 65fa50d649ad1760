#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <set>

#include "crobim/dataio.hpp"
#include "crobim/train.hpp"
#include "crobim/verify_suite.hpp"

using namespace crobim;
using train::AdamW;
using train::Checkpoint;
using train::OptimConfig;
using train::TrainHooks;
using train::batch_indices;
using train::config_from_checkpoint;
using train::evaluate;
using train::evaluate_sharded;
using train::loss_log_line;
using train::make_checkpoint;
using train::poly_lr;
using train::read_checkpoint;
using train::restore_checkpoint;
using train::write_checkpoint;
namespace fs = std::filesystem;

namespace {

ModelConfig small() {
    auto c = verify::toy_config();
    c.seed = 3;
    return c;
}

OptimConfig short_run(std::size_t steps) {
    OptimConfig o;
    o.steps = steps;
    o.batch_size = 2;
    return o;
}

std::vector<float> flatten(const ParamStore<float>& store) {
    std::vector<float> out;
    for (const auto& e : store.entries()) out.insert(out.end(), e.var.value().data().begin(), e.var.value().data().end());
    return out;
}

}  // namespace

TEST(PolyLr, Schedule) {
    EXPECT_DOUBLE_EQ(poly_lr(1e-3, 0, 100, 0.9), 1e-3);
    EXPECT_DOUBLE_EQ(poly_lr(1e-3, 50, 100, 0.9), 1e-3 * std::pow(0.5, 0.9));
    EXPECT_DOUBLE_EQ(poly_lr(2.0, 3, 4, 1.0), 0.5);
    EXPECT_EQ(poly_lr(1e-3, 100, 100, 0.9), 0.0);
    for (std::size_t s = 1; s < 100; ++s) EXPECT_LT(poly_lr(1.0, s, 100, 0.9), poly_lr(1.0, s - 1, 100, 0.9));
}

TEST(BatchIndices, DeterministicAndEachEpochIsAPermutation) {
    EXPECT_EQ(batch_indices(10, 3, 7, 42), batch_indices(10, 3, 7, 42));
    // Batches of 5 over 10 samples: steps 2k and 2k+1 cover epoch k exactly once.
    for (std::size_t epoch = 0; epoch < 4; ++epoch) {
        auto a = batch_indices(10, 5, 2 * epoch, 42), b = batch_indices(10, 5, 2 * epoch + 1, 42);
        std::set<std::size_t> seen(a.begin(), a.end());
        seen.insert(b.begin(), b.end());
        EXPECT_EQ(seen.size(), 10u);
        EXPECT_EQ(*seen.rbegin(), 9u);
    }
    EXPECT_NE(batch_indices(10, 10, 0, 1), batch_indices(10, 10, 0, 2));
    EXPECT_THROW(batch_indices(0, 2, 0, 1), ArgumentError);
}

TEST(AdamW, FirstStepsMatchHandFormula) {
    ParamStore<float> store;
    auto w = store.add("w", Matrix<float>(1, 2, std::vector<float>{1.0f, -2.0f}));
    OptimConfig c;
    AdamW opt(store, c);
    const double g[2] = {0.5, -0.25};
    double m[2] = {0, 0}, v[2] = {0, 0}, x[2] = {1.0, -2.0};
    for (int t = 1; t <= 3; ++t) {
        for (int i = 0; i < 2; ++i) w.mutable_grad()[i] = static_cast<float>(g[i]);
        opt.step(1e-2);
        for (int i = 0; i < 2; ++i) {
            m[i] = 0.9 * m[i] + 0.1 * g[i];
            v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
            const double mh = m[i] / (1 - std::pow(0.9, t)), vh = v[i] / (1 - std::pow(0.999, t));
            x[i] -= 1e-2 * (mh / (std::sqrt(vh) + 1e-8) + 0.01 * x[i]);
            EXPECT_NEAR(w.value()[i], x[i], 1e-6);
        }
    }
    EXPECT_EQ(opt.steps_taken(), 3u);
}

class TrainFixture : public ::testing::Test {
protected:
    static void SetUpTestSuite() { data_ = new std::vector<Triplet>(dataio::synth_triplets(4, 64, 21)); }
    static void TearDownTestSuite() { delete data_; }
    static std::vector<Triplet>* data_;
};

std::vector<Triplet>* TrainFixture::data_ = nullptr;

TEST_F(TrainFixture, LossLogAndResumeAreBitwiseReproducible) {
    const auto opt = short_run(4);
    CroBIM<float> full(small());
    AdamW full_opt(full.params(), opt);
    std::vector<Checkpoint> snapshots;
    TrainHooks hooks;
    hooks.on_checkpoint = [&](std::size_t step) { snapshots.push_back(make_checkpoint(full, &full_opt, step)); };
    auto o = opt;
    o.checkpoint_every = 2;
    const auto log = train::train(full, full_opt, *data_, o, hooks);
    ASSERT_EQ(log.size(), 4u);
    ASSERT_EQ(snapshots.size(), 2u);
    EXPECT_EQ(snapshots[0].step, 2u);
    for (const auto& e : log) EXPECT_TRUE(std::isfinite(e.loss.total));

    CroBIM<float> resumed(small());
    AdamW resumed_opt(resumed.params(), opt);
    restore_checkpoint(snapshots[0], resumed, &resumed_opt);
    EXPECT_EQ(resumed_opt.steps_taken(), 2u);
    const auto tail = train::train(resumed, resumed_opt, *data_, o);
    ASSERT_EQ(tail.size(), 2u);
    for (std::size_t i = 0; i < 2; ++i) EXPECT_EQ(loss_log_line(tail[i]), loss_log_line(log[i + 2]));
    EXPECT_EQ(flatten(resumed.params()), flatten(full.params()));
}

TEST_F(TrainFixture, CheckpointFileRoundTrip) {
    CroBIM<float> model(small());
    AdamW opt(model.params(), short_run(1));
    train::train(model, opt, *data_, short_run(1));
    const auto path = fs::temp_directory_path() / "crobim_test_roundtrip.ckpt";
    write_checkpoint(path, make_checkpoint(model, &opt, 1));
    const auto back = read_checkpoint(path);
    fs::remove(path);
    EXPECT_EQ(back.step, 1u);
    EXPECT_EQ(config_from_checkpoint(back).hidden_dim, small().hidden_dim);
    CroBIM<float> copy(small());
    AdamW copy_opt(copy.params(), short_run(1));
    restore_checkpoint(back, copy, &copy_opt);
    EXPECT_EQ(flatten(copy.params()), flatten(model.params()));
    for (std::size_t k = 0; k < opt.first_moments().size(); ++k) {
        EXPECT_EQ(copy_opt.first_moments()[k], opt.first_moments()[k]);
        EXPECT_EQ(copy_opt.second_moments()[k], opt.second_moments()[k]);
    }
}

TEST_F(TrainFixture, MismatchedCheckpointListsArrays) {
    CroBIM<float> model(small());
    const auto ckpt = make_checkpoint(model, nullptr, 0);
    auto other_cfg = small();
    other_cfg.hidden_dim = 4;
    CroBIM<float> other(other_cfg);
    try {
        restore_checkpoint(ckpt, other, nullptr);
        FAIL() << "expected LoadError";
    } catch (const LoadError& e) {
        EXPECT_NE(std::string(e.what()).find("checkpoint (8x8), model (8x4)"), std::string::npos) << e.what();
    }
}

TEST(Checkpoint, CorruptFileIsLoadError) {
    const auto path = fs::temp_directory_path() / "crobim_test_corrupt.ckpt";
    { std::ofstream(path) << "CROBIMCK garbage"; }
    EXPECT_THROW(read_checkpoint(path), LoadError);
    fs::remove(path);
    EXPECT_THROW(read_checkpoint(path), LoadError);
}

TEST_F(TrainFixture, ShardedEvaluationEqualsSinglePass) {
    CroBIM<float> model(small());
    const auto single = evaluate(model, *data_).finalize();
    for (std::size_t shards : {1u, 2u, 3u, 7u}) {
        const auto r = evaluate_sharded(model, *data_, shards);
        EXPECT_EQ(r.to_text(), single.to_text()) << shards;
    }
    EXPECT_EQ(evaluate(model, *data_, 1, 3).count(), 2u);
}

TEST_F(TrainFixture, NonFiniteParametersStopTraining) {
    CroBIM<float> model(small());
    AdamW opt(model.params(), short_run(2));
    model.params().entries().front().var.mutable_value()[0] = std::nanf("");
    EXPECT_THROW(train::train(model, opt, *data_, short_run(2)), NumericalError);
    EXPECT_EQ(opt.steps_taken(), 0u);
}

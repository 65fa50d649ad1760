#include <gtest/gtest.h>

#include "crobim/run_config.hpp"

using namespace crobim;

TEST(RunConfig, DeskDefaults) {
    const auto r = RunConfig::desk();
    EXPECT_DOUBLE_EQ(r.optim.learning_rate, 1e-3);
    EXPECT_EQ(r.optim.steps, 500u);
    EXPECT_EQ(r.optim.batch_size, 4u);
    EXPECT_NO_THROW(r.validate());
}

TEST(RunConfig, PaperPreset) {
    RunConfig r;
    r.apply({{"preset", "paper"}});
    EXPECT_DOUBLE_EQ(r.optim.learning_rate, 5e-5);
    EXPECT_DOUBLE_EQ(r.optim.weight_decay, 0.01);
    EXPECT_DOUBLE_EQ(r.optim.poly_power, 0.9);
    EXPECT_EQ(r.model.image_size, 480u);
}

TEST(RunConfig, PresetThenOverrides) {
    RunConfig r;
    r.apply({{"preset", "desk"}, {"steps", "20"}, {"hidden_dim", "32"}, {"manifest", "a/b.tsv"}});
    EXPECT_EQ(r.optim.steps, 20u);
    EXPECT_EQ(r.model.hidden_dim, 32u);
    EXPECT_EQ(r.manifest, "a/b.tsv");
    EXPECT_THROW(r.apply({{"preset", "huge"}}), ConfigError);
}

TEST(RunConfig, MapRoundTrip) {
    RunConfig r;
    r.apply({{"learning_rate", "0.002"}, {"eval_shards", "3"}, {"dump_attention", "true"}, {"lambda_ce", "1"}});
    RunConfig s;
    s.apply(r.to_map());
    EXPECT_EQ(s.to_map(), r.to_map());
}

TEST(RunConfig, ValidateRejectsZeroShards) {
    RunConfig r;
    r.eval_shards = 0;
    EXPECT_THROW(r.validate(), ConfigError);
}

TEST(KeyValues, ParsesCommentsAndWhitespace) {
    const auto kv = parse_key_values("# run\n steps = 10 \n\nlearning_rate=0.01  # faster\n");
    EXPECT_EQ(kv.size(), 2u);
    EXPECT_EQ(kv.at("steps"), "10");
    EXPECT_EQ(kv.at("learning_rate"), "0.01");
}

TEST(KeyValues, RejectsRepeatsAndMalformedLines) {
    EXPECT_THROW(parse_key_values("steps = 1\nsteps = 2\n"), ConfigError);
    EXPECT_THROW(parse_key_values("steps 1\n"), ConfigError);
    EXPECT_THROW(parse_key_values(" = 1\n"), ConfigError);
}

TEST(KeyValues, MissingFile) { EXPECT_THROW(read_config_file("/nonexistent/run.cfg"), ConfigError); }

// crobim: train, eval, predict, stats, verify and synth commands.

#include <chrono>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "crobim/dataio.hpp"
#include "crobim/dump.hpp"
#include "crobim/metrics.hpp"
#include "crobim/resample.hpp"
#include "crobim/run_config.hpp"
#include "crobim/train.hpp"
#include "crobim/verify_suite.hpp"

namespace fs = std::filesystem;
using namespace crobim;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitNumerical = 2;
constexpr int kExitVerify = 3;

constexpr const char* kOutputEnv = "CROBIM_OUTPUT_DIR";

struct ConfigFlags {
    std::string config_file;
    std::vector<std::string> sets;
    std::string out;
    bool no_capm = false;
    bool no_compensation = false;
    bool single_direction = false;

    void add_to(CLI::App& cmd, bool ablations) {
        cmd.add_option("-c,--config", config_file, "key = value config file")->check(CLI::ExistingFile);
        cmd.add_option("-s,--set", sets, "override one key, e.g. --set steps=200");
        cmd.add_option("-o,--out", out, "output directory (else $" + std::string(kOutputEnv) + ", else output_dir)");
        if (ablations) {
            cmd.add_flag("--no-capm", no_capm, "raw prompts, no context-aware modulation");
            cmd.add_flag("--no-compensation", no_compensation, "skip deficit compensation (K = 0)");
            cmd.add_flag("--single-direction", single_direction, "vision-to-language decoder only");
        }
    }

    /// Config file, then --set pairs, then ablation switches.
    std::map<std::string, std::string> user_keys() const {
        std::map<std::string, std::string> kv;
        if (!config_file.empty()) kv = read_config_file(config_file);
        for (const auto& s : sets) {
            const auto eq = s.find('=');
            if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects key=value, got '" + s + "'");
            kv[s.substr(0, eq)] = s.substr(eq + 1);
        }
        if (no_capm) kv["use_capm"] = "false";
        if (no_compensation) kv["use_compensation"] = "false";
        if (single_direction) kv["decoder_mode"] = "single";
        return kv;
    }

    RunConfig run_config(const std::map<std::string, std::string>& base = {}) const {
        auto kv = base;
        for (const auto& [k, v] : user_keys()) kv[k] = v;
        RunConfig run;
        run.apply(kv);
        if (const char* env = std::getenv(kOutputEnv); env && *env) run.output_dir = env;
        if (!out.empty()) run.output_dir = out;
        run.validate();
        return run;
    }
};

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream os(path);
    if (!os) throw LoadError("cannot write " + path.string());
    os << text;
}

std::vector<Triplet> load_data(const RunConfig& run, const std::string& split) {
    std::vector<Triplet> data;
    if (run.manifest.empty()) {
        data = dataio::synth_triplets(run.synth_count, run.model.image_size, run.synth_seed);
    } else {
        data = dataio::load_manifest(run.manifest, split);
    }
    for (auto& t : data) t = dataio::fit_triplet(t, run.model.image_size);
    return data;
}

std::string config_text(const std::map<std::string, std::string>& kv) {
    std::string s;
    for (const auto& [k, v] : kv) s += k + " = " + v + "\n";
    return s;
}

void write_metrics(const fs::path& dir, const metrics::MetricReport& report) {
    write_text(dir / "metrics.txt", report.to_text());
    write_text(dir / "metrics.json", report.to_json());
    std::cout << report.to_text();
}

// -- train ------------------------------------------------------------------

struct TrainArgs {
    ConfigFlags flags;
    std::string resume;
    std::size_t log_every = 50;
};

/// Keeps the loss log lines of steps before `step`.
std::string loss_log_prefix(const fs::path& path, std::size_t step) {
    std::ifstream in(path);
    std::string line, kept;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') {
            kept += line + "\n";
            continue;
        }
        if (std::stoull(line.substr(0, line.find('\t'))) < step) kept += line + "\n";
    }
    return kept;
}

int cmd_train(const TrainArgs& args) {
    std::optional<train::Checkpoint> resume;
    std::map<std::string, std::string> base;
    if (!args.resume.empty()) {
        resume = train::read_checkpoint(args.resume);
        base = resume->config;
    }
    const auto run = args.flags.run_config(base);
    const auto dir = run.output_dir;
    fs::create_directories(dir / "checkpoints");
    write_text(dir / "config.txt", config_text(run.to_map()));

    const auto data = load_data(run, "train");
    CroBIM<float> model(run.model);
    train::AdamW optim(model.params(), run.optim);
    if (resume) train::restore_checkpoint(*resume, model, &optim);

    const auto log_path = dir / "loss_log.tsv";
    const std::string header = "# step\tlr\ttotal\tce\tdice\n";
    write_text(log_path, resume ? loss_log_prefix(log_path, resume->step) : header);
    std::ofstream log(log_path, std::ios::app);

    const auto start = std::chrono::steady_clock::now();
    train::TrainHooks hooks;
    hooks.on_step = [&](const train::LossLogEntry& e) {
        log << train::loss_log_line(e) << '\n' << std::flush;
        if (args.log_every > 0 && (e.step % args.log_every == 0 || e.step + 1 == run.optim.steps)) {
            const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
            std::cerr << "step " << e.step << "  loss " << e.loss.total << "  ce " << e.loss.ce_term << "  dice "
                      << e.loss.dice_term << "  lr " << e.lr << "  " << std::fixed << std::setprecision(1) << secs
                      << "s" << std::defaultfloat << std::setprecision(6) << '\n';
        }
    };
    hooks.on_checkpoint = [&](std::size_t step) {
        const auto ckpt = train::make_checkpoint(model, &optim, step);
        std::ostringstream name;
        name << "step_" << std::setw(6) << std::setfill('0') << step << ".ckpt";
        train::write_checkpoint(dir / "checkpoints" / name.str(), ckpt);
        train::write_checkpoint(dir / "checkpoint.ckpt", ckpt);
    };

    try {
        train::train(model, optim, data, run.optim, hooks);
    } catch (const NumericalError&) {
        // Parameters still hold the last completed step.
        train::write_checkpoint(dir / "checkpoint.ckpt", train::make_checkpoint(model, &optim, optim.steps_taken()));
        throw;
    }
    if (resume && resume->step >= run.optim.steps) hooks.on_checkpoint(optim.steps_taken());

    std::vector<Triplet> val;
    if (!run.manifest.empty()) val = load_data(run, "val");
    if (val.empty()) val = data;
    write_metrics(dir, train::evaluate_sharded(model, val, run.eval_shards));
    return kExitOk;
}

// -- eval -------------------------------------------------------------------

struct EvalArgs {
    ConfigFlags flags;
    std::string checkpoint;
    std::string split = "test";
    std::size_t shards = 0;  // 0: eval_shards from the config
};

std::unique_ptr<CroBIM<float>> load_model(const std::string& path, const ConfigFlags& flags, RunConfig& run) {
    const auto ckpt = train::read_checkpoint(path);
    run = flags.run_config(ckpt.config);
    auto model = std::make_unique<CroBIM<float>>(run.model);
    train::restore_checkpoint(ckpt, *model, nullptr);
    return model;
}

int cmd_eval(const EvalArgs& args) {
    RunConfig run;
    const auto model = load_model(args.checkpoint, args.flags, run);
    fs::create_directories(run.output_dir);
    const auto data = load_data(run, run.manifest.empty() ? "" : args.split);
    if (data.empty()) throw LoadError("no records in split '" + args.split + "'");
    write_metrics(run.output_dir, train::evaluate_sharded(*model, data, args.shards ? args.shards : run.eval_shards));
    return kExitOk;
}

// -- predict ----------------------------------------------------------------

struct PredictArgs {
    ConfigFlags flags;
    std::string checkpoint;
    std::string image;
    std::string expression;
    bool dump = false;
};

int cmd_predict(const PredictArgs& args) {
    RunConfig run;
    const auto model = load_model(args.checkpoint, args.flags, run);
    const auto dir = run.output_dir;
    fs::create_directories(dir);

    const auto original = dataio::image_from_png(dataio::read_png(args.image, 3));
    const GridShape model_grid{run.model.image_size, run.model.image_size};
    const auto input = dataio::resize_image(original, model_grid);
    const auto tokens = Vocabulary::synthetic().encode(args.expression);

    ag::NoGradGuard no_grad;
    Trace trace;
    const bool dump = args.dump || run.dump_attention;
    const auto result = model->forward(input, tokens, dump ? &trace : nullptr);

    // Logits are resampled to the input resolution before thresholding.
    const auto& full = result.logits.full.value();
    Matrix<float> column(full.size(), 1);
    for (std::size_t i = 0; i < full.size(); ++i) column.data()[i] = full.data()[i];
    const auto resized = apply_row_map(bilinear_resize_map(model_grid, original.grid), column);
    Matrix<float> logits(original.grid.height, original.grid.width);
    for (std::size_t i = 0; i < resized.size(); ++i) logits.data()[i] = resized.data()[i];
    const auto mask = metrics::binarize(logits);

    dataio::write_png(dir / "mask.png", dataio::png_from_mask(mask));
    dataio::write_png(dir / "overlay.png", dump::overlay(original, mask));
    if (dump) dump::dump_trace(dir / "attention", trace, std::max(original.grid.height, original.grid.width));

    std::size_t area = 0;
    for (auto v : mask.storage()) area += v;
    std::cout << "mask " << mask.rows() << "x" << mask.cols() << " foreground " << area << " pixels\n";
    return kExitOk;
}

// -- stats ------------------------------------------------------------------

struct StatsArgs {
    ConfigFlags flags;
    std::string split;
    std::size_t top_k = 50;
};

int cmd_stats(const StatsArgs& args) {
    const auto run = args.flags.run_config();
    const auto records = run.manifest.empty()
                             ? dataio::stats_records(dataio::synth_triplets(run.synth_count, run.model.image_size,
                                                                            run.synth_seed))
                             : dataio::stats_records(fs::path(run.manifest), args.split);
    if (records.empty()) throw LoadError("no records to summarise");
    const auto stats = dataio::dataset_stats(records, args.top_k);
    fs::create_directories(run.output_dir);
    write_text(run.output_dir / "stats.json", stats.to_json());

    std::vector<std::pair<std::string, std::size_t>> lengths, sizes, categories;
    if (!stats.length_histogram.empty()) {
        for (std::size_t n = stats.length_histogram.begin()->first; n <= stats.length_histogram.rbegin()->first; ++n) {
            const auto it = stats.length_histogram.find(n);
            lengths.emplace_back(std::to_string(n), it == stats.length_histogram.end() ? 0 : it->second);
        }
    }
    for (const char* bucket : dataio::kSizeBuckets) {
        const auto it = stats.size_histogram.find(bucket);
        sizes.emplace_back(bucket, it == stats.size_histogram.end() ? 0 : it->second);
    }
    for (const auto& [name, count] : stats.category_counts) categories.emplace_back(name, count);
    dataio::write_png(run.output_dir / "length_histogram.png", dataio::render_histogram(lengths));
    dataio::write_png(run.output_dir / "size_histogram.png", dataio::render_histogram(sizes));
    dataio::write_png(run.output_dir / "category_histogram.png", dataio::render_histogram(categories));

    std::cout << "records " << stats.record_count << "\naverage_length " << stats.average_length
              << "\nvocabulary_size " << stats.vocabulary_size << '\n';
    return kExitOk;
}

// -- verify -----------------------------------------------------------------

struct VerifyArgs {
    ConfigFlags flags;
    bool desk = false;
    std::size_t probes = 6;
    std::size_t trials = 50;
    std::uint64_t seed = 1;
};

int cmd_verify(const VerifyArgs& args) {
    const auto run = args.flags.run_config();
    const auto model_config = args.desk ? run.model : verify::toy_config();
    verify::GradCheckOptions options;
    options.probes = args.probes;
    options.seed = args.seed;

    std::ostringstream table;
    table << "# kind\tname\tcount\tmax_error\ttolerance\tstatus\n";
    bool ok = true;
    for (const auto& r : verify::gradient_suite(model_config, options)) {
        ok = ok && r.passed;
        table << "grad\t" << r.name << '\t' << r.probes << '\t' << r.max_rel_error << '\t' << r.tolerance << '\t'
              << (r.passed ? "PASS" : "FAIL") << '\n';
    }
    for (const auto& r : verify::oracle_suite(args.trials, args.seed)) {
        ok = ok && r.passed;
        table << "oracle\t" << r.name << '\t' << r.trials << '\t' << r.max_abs_error << '\t' << r.tolerance << '\t'
              << (r.passed ? "PASS" : "FAIL") << '\n';
    }
    fs::create_directories(run.output_dir);
    write_text(run.output_dir / "verify_report.tsv", table.str());
    std::cout << table.str() << (ok ? "verify: all checks passed\n" : "verify: FAILED\n");
    return ok ? kExitOk : kExitVerify;
}

// -- synth ------------------------------------------------------------------

struct SynthArgs {
    ConfigFlags flags;
    std::string split = "train";
};

int cmd_synth(const SynthArgs& args) {
    const auto run = args.flags.run_config();
    const auto data = dataio::synth_triplets(run.synth_count, run.model.image_size, run.synth_seed);
    dataio::save_dataset(run.output_dir, data, args.split);
    std::cout << "wrote " << data.size() << " samples to " << (run.output_dir / "manifest.tsv").string() << '\n';
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"CroBIM referring segmentation for remote-sensing images"};
    app.require_subcommand(1);

    TrainArgs train_args;
    auto* train_cmd = app.add_subcommand("train", "train on a manifest or synthetic data");
    train_args.flags.add_to(*train_cmd, true);
    train_cmd->add_option("--resume", train_args.resume, "continue from a checkpoint")->check(CLI::ExistingFile);
    train_cmd->add_option("--log-every", train_args.log_every, "progress line interval (0: quiet)");

    EvalArgs eval_args;
    auto* eval_cmd = app.add_subcommand("eval", "metrics of a checkpoint on one split");
    eval_args.flags.add_to(*eval_cmd, true);
    eval_cmd->add_option("--checkpoint", eval_args.checkpoint)->required()->check(CLI::ExistingFile);
    eval_cmd->add_option("--split", eval_args.split, "manifest split");
    eval_cmd->add_option("--shards", eval_args.shards, "parallel evaluation shards");

    PredictArgs predict_args;
    auto* predict_cmd = app.add_subcommand("predict", "mask and overlay for one image and expression");
    predict_args.flags.add_to(*predict_cmd, false);
    predict_cmd->add_option("--checkpoint", predict_args.checkpoint)->required()->check(CLI::ExistingFile);
    predict_cmd->add_option("--image", predict_args.image)->required()->check(CLI::ExistingFile);
    predict_cmd->add_option("--expression", predict_args.expression)->required();
    predict_cmd->add_flag("--dump-attention", predict_args.dump, "write attention arrays and heat maps");

    StatsArgs stats_args;
    auto* stats_cmd = app.add_subcommand("stats", "expression and mask statistics");
    stats_args.flags.add_to(*stats_cmd, false);
    stats_cmd->add_option("--split", stats_args.split, "restrict to one split");
    stats_cmd->add_option("--top-k", stats_args.top_k, "most frequent words to list");

    VerifyArgs verify_args;
    auto* verify_cmd = app.add_subcommand("verify", "gradient checks and oracle comparisons");
    verify_args.flags.add_to(*verify_cmd, false);
    verify_cmd->add_flag("--desk", verify_args.desk, "check at the configured model size instead of toy size");
    verify_cmd->add_option("--probes", verify_args.probes, "random coordinates per parameter");
    verify_cmd->add_option("--trials", verify_args.trials, "oracle trials per operation");
    verify_cmd->add_option("--seed", verify_args.seed);

    SynthArgs synth_args;
    auto* synth_cmd = app.add_subcommand("synth", "write a synthetic dataset (synth_count, synth_seed)");
    synth_args.flags.add_to(*synth_cmd, false);
    synth_cmd->add_option("--split", synth_args.split);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? kExitOk : kExitUsage;
    }

    try {
        if (*train_cmd) return cmd_train(train_args);
        if (*eval_cmd) return cmd_eval(eval_args);
        if (*predict_cmd) return cmd_predict(predict_args);
        if (*stats_cmd) return cmd_stats(stats_args);
        if (*verify_cmd) return cmd_verify(verify_args);
        if (*synth_cmd) return cmd_synth(synth_args);
    } catch (const NumericalError& e) {
        std::cerr << "numerical failure: " << e.what() << '\n';
        return kExitNumerical;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitUsage;
    }
    return kExitUsage;
}

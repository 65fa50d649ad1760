#pragma once

// Optimisation, checkpoints and evaluation loops.

#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "crobim/metrics.hpp"
#include "crobim/model.hpp"

namespace crobim::train {

namespace fs = std::filesystem;

struct OptimConfig {
    double learning_rate = 1e-3;
    double weight_decay = 0.01;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double poly_power = 0.9;
    std::size_t steps = 500;
    std::size_t batch_size = 4;
    std::size_t checkpoint_every = 0;  // 0: final checkpoint only

    /// 5e-5, weight decay 0.01, polynomial decay.
    static OptimConfig paper_scale();
    void validate() const;
};

/// lr * (1 - step / total)^power for step in [0, total).
double poly_lr(double base, std::size_t step, std::size_t total, double power);

/// Decoupled-weight-decay Adam over every entry of a ParamStore<float>.
class AdamW {
public:
    AdamW(ParamStore<float>& store, const OptimConfig& config);

    /// One update with learning rate `lr` from the gradients currently held.
    void step(double lr);
    std::size_t steps_taken() const { return t_; }

    std::vector<Matrix<float>>& first_moments() { return m_; }
    std::vector<Matrix<float>>& second_moments() { return v_; }
    void set_steps_taken(std::size_t t) { t_ = t; }

private:
    ParamStore<float>& store_;
    OptimConfig config_;
    std::vector<Matrix<float>> m_;
    std::vector<Matrix<float>> v_;
    std::size_t t_ = 0;
};

/// Indices of the samples in batch `step`: an epoch-wise permutation seeded by
/// (seed, epoch), read cyclically. Depends only on its arguments.
std::vector<std::size_t> batch_indices(std::size_t dataset_size, std::size_t batch_size, std::size_t step,
                                       std::uint64_t seed);

struct LossLogEntry {
    std::size_t step = 0;
    double lr = 0.0;
    objective::LossReport loss;  // batch means
};

/// Single file: magic, format version, config echo, step, then named
/// little-endian float32 arrays (parameters, then "adam.m.*" / "adam.v.*").
struct Checkpoint {
    std::map<std::string, std::string> config;
    std::size_t step = 0;
    std::vector<std::pair<std::string, Matrix<float>>> arrays;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

void write_checkpoint(const fs::path& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const fs::path& path);

/// Snapshot of model parameters (and optimiser state when given).
Checkpoint make_checkpoint(const CroBIM<float>& model, const AdamW* optim, std::size_t step);
/// Copies parameters (and optimiser state) back. Mismatched names or shapes
/// raise LoadError listing every offending array.
void restore_checkpoint(const Checkpoint& ckpt, CroBIM<float>& model, AdamW* optim);
/// Builds the model config from a checkpoint's echo.
ModelConfig config_from_checkpoint(const Checkpoint& ckpt);

struct TrainHooks {
    std::function<void(const LossLogEntry&)> on_step;
    /// Called after every `checkpoint_every` steps and after the last step.
    std::function<void(std::size_t step)> on_checkpoint;
};

/// Runs steps [optim.steps_taken(), config.steps). Each step averages the
/// combined loss of one batch. A non-finite loss throws NumericalError before
/// the parameters are touched.
std::vector<LossLogEntry> train(CroBIM<float>& model, AdamW& optim, const std::vector<Triplet>& data,
                                const OptimConfig& config, const TrainHooks& hooks = {});

/// Inference + binarisation at 0.5 + accumulation, one shard.
metrics::MetricAccumulator evaluate(const CroBIM<float>& model, const std::vector<Triplet>& data,
                                    std::size_t begin = 0, std::size_t end = static_cast<std::size_t>(-1));

/// `shards` contiguous shards accumulated separately and merged.
metrics::MetricReport evaluate_sharded(const CroBIM<float>& model, const std::vector<Triplet>& data,
                                       std::size_t shards);

std::string loss_log_line(const LossLogEntry& e);

}  // namespace crobim::train

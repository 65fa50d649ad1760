#include "crobim/train.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <exception>
#include <fstream>
#include <sstream>
#include <thread>

namespace crobim::train {

OptimConfig OptimConfig::paper_scale() {
    OptimConfig c;
    c.learning_rate = 5e-5;
    c.weight_decay = 0.01;
    c.batch_size = 32;
    return c;
}

void OptimConfig::validate() const {
    auto fail = [](const std::string& m) { throw ConfigError(m); };
    if (!(learning_rate > 0.0)) fail("learning_rate must be positive");
    if (weight_decay < 0.0) fail("weight_decay must be non-negative");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) fail("Adam betas must lie in [0, 1)");
    if (!(adam_eps > 0.0)) fail("adam_eps must be positive");
    if (poly_power < 0.0) fail("poly_power must be non-negative");
    if (steps == 0) fail("steps must be >= 1");
    if (batch_size == 0) fail("batch_size must be >= 1");
}

double poly_lr(double base, std::size_t step, std::size_t total, double power) {
    if (total == 0 || step >= total) return 0.0;
    return base * std::pow(1.0 - static_cast<double>(step) / static_cast<double>(total), power);
}

AdamW::AdamW(ParamStore<float>& store, const OptimConfig& config) : store_(store), config_(config) {
    for (const auto& e : store_.entries()) {
        m_.emplace_back(e.var.rows(), e.var.cols());
        v_.emplace_back(e.var.rows(), e.var.cols());
    }
}

void AdamW::step(double lr) {
    ++t_;
    const double b1 = config_.beta1, b2 = config_.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
    auto& entries = store_.entries();
    for (std::size_t k = 0; k < entries.size(); ++k) {
        auto& var = entries[k].var;
        auto& w = var.mutable_value();
        const auto& g = var.mutable_grad();
        auto& m = m_[k];
        auto& v = v_[k];
        for (std::size_t i = 0; i < w.size(); ++i) {
            const double gi = g[i];
            const double mi = b1 * m[i] + (1.0 - b1) * gi;
            const double vi = b2 * v[i] + (1.0 - b2) * gi * gi;
            m[i] = static_cast<float>(mi);
            v[i] = static_cast<float>(vi);
            const double update = (mi / c1) / (std::sqrt(vi / c2) + config_.adam_eps);
            w[i] = static_cast<float>(w[i] - lr * (update + config_.weight_decay * w[i]));
        }
    }
}

std::vector<std::size_t> batch_indices(std::size_t dataset_size, std::size_t batch_size, std::size_t step,
                                       std::uint64_t seed) {
    if (dataset_size == 0) throw ArgumentError("batch_indices: empty dataset");
    std::vector<std::size_t> out;
    std::size_t cached_epoch = static_cast<std::size_t>(-1);
    std::vector<std::size_t> order(dataset_size);
    for (std::size_t j = 0; j < batch_size; ++j) {
        const std::size_t pos = step * batch_size + j;
        const std::size_t epoch = pos / dataset_size;
        if (epoch != cached_epoch) {
            Rng rng(seed ^ (0x9E3779B97F4A7C15ULL * (epoch + 1)));
            for (std::size_t i = 0; i < dataset_size; ++i) order[i] = i;
            for (std::size_t i = dataset_size - 1; i > 0; --i) std::swap(order[i], order[rng.index(i + 1)]);
            cached_epoch = epoch;
        }
        out.push_back(order[pos % dataset_size]);
    }
    return out;
}

// -- checkpoints ------------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'C', 'R', 'O', 'B', 'I', 'M', 'C', 'K'};

template <typename U>
void put(std::ostream& os, U value) {
    static_assert(std::is_integral_v<U>);
    for (std::size_t i = 0; i < sizeof(U); ++i) os.put(static_cast<char>((value >> (8 * i)) & 0xFF));
}

void put_string(std::ostream& os, const std::string& s) {
    put<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

template <typename U>
U get(std::istream& is) {
    U value = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) {
        const int c = is.get();
        if (c == EOF) throw LoadError("checkpoint truncated");
        value |= static_cast<U>(static_cast<unsigned char>(c)) << (8 * i);
    }
    return value;
}

std::string get_string(std::istream& is) {
    const auto n = get<std::uint32_t>(is);
    if (n > (1u << 24)) throw LoadError("checkpoint string length out of range");
    std::string s(n, '\0');
    if (!is.read(s.data(), n)) throw LoadError("checkpoint truncated");
    return s;
}

}  // namespace

void write_checkpoint(const fs::path& path, const Checkpoint& ckpt) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary);
        if (!os) throw std::runtime_error("cannot write checkpoint " + tmp.string());
        os.write(kMagic, sizeof kMagic);
        put<std::uint32_t>(os, kCheckpointVersion);
        put<std::uint32_t>(os, static_cast<std::uint32_t>(ckpt.config.size()));
        for (const auto& [k, v] : ckpt.config) {
            put_string(os, k);
            put_string(os, v);
        }
        put<std::uint64_t>(os, ckpt.step);
        put<std::uint32_t>(os, static_cast<std::uint32_t>(ckpt.arrays.size()));
        for (const auto& [name, m] : ckpt.arrays) {
            put_string(os, name);
            put<std::uint64_t>(os, m.rows());
            put<std::uint64_t>(os, m.cols());
            for (float f : m.storage()) put<std::uint32_t>(os, std::bit_cast<std::uint32_t>(f));
        }
        if (!os) throw std::runtime_error("failed writing checkpoint " + tmp.string());
    }
    fs::rename(tmp, path);
}

Checkpoint read_checkpoint(const fs::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw LoadError("cannot open checkpoint " + path.string());
    char magic[sizeof kMagic];
    if (!is.read(magic, sizeof magic) || std::memcmp(magic, kMagic, sizeof kMagic) != 0) {
        throw LoadError(path.string() + " is not a checkpoint");
    }
    const auto version = get<std::uint32_t>(is);
    if (version != kCheckpointVersion) {
        throw LoadError("checkpoint format version " + std::to_string(version) + ", expected " +
                        std::to_string(kCheckpointVersion));
    }
    Checkpoint ckpt;
    const auto entries = get<std::uint32_t>(is);
    for (std::uint32_t i = 0; i < entries; ++i) {
        auto k = get_string(is);
        ckpt.config[k] = get_string(is);
    }
    ckpt.step = get<std::uint64_t>(is);
    const auto arrays = get<std::uint32_t>(is);
    for (std::uint32_t a = 0; a < arrays; ++a) {
        auto name = get_string(is);
        const auto rows = get<std::uint64_t>(is), cols = get<std::uint64_t>(is);
        if (rows * cols > (std::uint64_t{1} << 32)) throw LoadError("checkpoint array '" + name + "' too large");
        Matrix<float> m(rows, cols);
        for (auto& f : m.data()) f = std::bit_cast<float>(get<std::uint32_t>(is));
        ckpt.arrays.emplace_back(std::move(name), std::move(m));
    }
    return ckpt;
}

Checkpoint make_checkpoint(const CroBIM<float>& model, const AdamW* optim, std::size_t step) {
    Checkpoint ckpt;
    ckpt.config = model.config().to_map();
    ckpt.step = step;
    const auto& entries = model.params().entries();
    for (const auto& e : entries) ckpt.arrays.emplace_back(e.name, e.var.value());
    if (optim) {
        auto& o = const_cast<AdamW&>(*optim);
        for (std::size_t k = 0; k < entries.size(); ++k) {
            ckpt.arrays.emplace_back("adam.m." + entries[k].name, o.first_moments()[k]);
        }
        for (std::size_t k = 0; k < entries.size(); ++k) {
            ckpt.arrays.emplace_back("adam.v." + entries[k].name, o.second_moments()[k]);
        }
    }
    return ckpt;
}

void restore_checkpoint(const Checkpoint& ckpt, CroBIM<float>& model, AdamW* optim) {
    std::map<std::string, const Matrix<float>*> by_name;
    for (const auto& [name, m] : ckpt.arrays) by_name[name] = &m;

    std::vector<std::string> problems;
    auto& entries = model.params().entries();
    auto check = [&](const std::string& name, const Matrix<float>& want) -> const Matrix<float>* {
        const auto it = by_name.find(name);
        if (it == by_name.end()) {
            problems.push_back(name + ": missing");
            return nullptr;
        }
        if (!it->second->same_shape(want)) {
            problems.push_back(name + ": checkpoint " + shape_string(*it->second) + ", model " + shape_string(want));
            return nullptr;
        }
        return it->second;
    };
    for (const auto& e : entries) check(e.name, e.var.value());
    if (optim) {
        for (const auto& e : entries) {
            check("adam.m." + e.name, e.var.value());
            check("adam.v." + e.name, e.var.value());
        }
    }
    if (!problems.empty()) {
        std::string msg = "checkpoint does not match the model:";
        for (const auto& p : problems) msg += "\n  " + p;
        throw LoadError(msg);
    }
    for (auto& e : entries) e.var.mutable_value() = *by_name.at(e.name);
    if (optim) {
        for (std::size_t k = 0; k < entries.size(); ++k) {
            optim->first_moments()[k] = *by_name.at("adam.m." + entries[k].name);
            optim->second_moments()[k] = *by_name.at("adam.v." + entries[k].name);
        }
        optim->set_steps_taken(ckpt.step);
    }
}

ModelConfig config_from_checkpoint(const Checkpoint& ckpt) {
    ModelConfig c;
    c.apply(ckpt.config);
    c.validate();
    return c;
}

// -- loops ------------------------------------------------------------------

std::vector<LossLogEntry> train(CroBIM<float>& model, AdamW& optim, const std::vector<Triplet>& data,
                                const OptimConfig& config, const TrainHooks& hooks) {
    config.validate();
    if (data.empty()) throw ArgumentError("train: empty dataset");
    std::vector<LossLogEntry> log;
    auto& store = model.params();
    const double inv_batch = 1.0 / static_cast<double>(config.batch_size);

    for (std::size_t step = optim.steps_taken(); step < config.steps; ++step) {
        LossLogEntry entry;
        entry.step = step;
        entry.lr = poly_lr(config.learning_rate, step, config.steps, config.poly_power);
        entry.loss.lambda = model.config().lambda_ce;
        store.zero_grad();
        for (std::size_t idx : batch_indices(data.size(), config.batch_size, step, model.config().seed)) {
            auto loss = model.loss(data[idx]);
            ag::backward(ag::scale(loss.total, inv_batch));
            entry.loss.total += loss.report.total * inv_batch;
            entry.loss.ce_term += loss.report.ce_term * inv_batch;
            entry.loss.dice_term += loss.report.dice_term * inv_batch;
        }
        for (const auto& e : store.entries()) {
            if (!e.var.grad().all_finite()) throw NumericalError("train", "non-finite gradient in " + e.name);
        }
        optim.step(entry.lr);
        log.push_back(entry);
        if (hooks.on_step) hooks.on_step(entry);
        const bool last = step + 1 == config.steps;
        if (hooks.on_checkpoint && (last || (config.checkpoint_every > 0 && (step + 1) % config.checkpoint_every == 0))) {
            hooks.on_checkpoint(step + 1);
        }
    }
    return log;
}

metrics::MetricAccumulator evaluate(const CroBIM<float>& model, const std::vector<Triplet>& data, std::size_t begin,
                                    std::size_t end) {
    ag::NoGradGuard no_grad;
    metrics::MetricAccumulator acc;
    end = std::min(end, data.size());
    for (std::size_t i = begin; i < end; ++i) {
        const auto result = model.forward(data[i].image, data[i].tokens);
        acc.accumulate(metrics::binarize(result.logits.full.value()), data[i].mask);
    }
    return acc;
}

metrics::MetricReport evaluate_sharded(const CroBIM<float>& model, const std::vector<Triplet>& data,
                                       std::size_t shards) {
    shards = std::clamp<std::size_t>(shards, 1, std::max<std::size_t>(data.size(), 1));
    std::vector<metrics::MetricAccumulator> parts(shards);
    std::vector<std::exception_ptr> errors(shards);
    std::vector<std::thread> workers;
    const std::size_t per = (data.size() + shards - 1) / shards;
    for (std::size_t s = 0; s < shards; ++s) {
        workers.emplace_back([&, s] {
            try {
                parts[s] = evaluate(model, data, s * per, (s + 1) * per);
            } catch (...) {
                errors[s] = std::current_exception();
            }
        });
    }
    for (auto& w : workers) w.join();
    for (const auto& e : errors)
        if (e) std::rethrow_exception(e);
    metrics::MetricAccumulator total;
    for (const auto& p : parts) total.merge(p);
    return total.finalize();
}

std::string loss_log_line(const LossLogEntry& e) {
    std::ostringstream os;
    os.precision(9);
    os << e.step << '\t' << e.lr << '\t' << e.loss.total << '\t' << e.loss.ce_term << '\t' << e.loss.dice_term;
    return os.str();
}

}  // namespace crobim::train

#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "crobim/autograd.hpp"

namespace crobim {

/// Deterministic source for parameter initialisation and data synthesis.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}
    /// Uniform in [0, 1) built from the top 53 bits; identical on every platform.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    /// Uniform integer in [0, n).
    std::size_t index(std::size_t n) { return static_cast<std::size_t>(uniform() * static_cast<double>(n)); }
    double normal();
    std::uint64_t next() { return engine_(); }

private:
    std::mt19937_64 engine_;
};

/// Ordered, named collection of trainable matrices.
template <typename T>
class ParamStore {
public:
    struct Entry {
        std::string name;
        ag::Var<T> var;
    };

    ag::Var<T> add(std::string name, Matrix<T> init);
    ag::Var<T> get(std::string_view name) const;
    bool contains(std::string_view name) const { return index_.count(std::string(name)) > 0; }

    const std::vector<Entry>& entries() const { return entries_; }
    std::vector<Entry>& entries() { return entries_; }
    std::size_t scalar_count() const;
    void zero_grad();

private:
    std::vector<Entry> entries_;
    std::map<std::string, std::size_t> index_;
};

/// Captured intermediate arrays (attention maps, scores, regions) keyed by name.
struct TraceEntry {
    std::string name;
    Matrix<double> values;
    std::optional<GridShape> grid;  // spatial layout of the rows, when meaningful
};

class Trace {
public:
    template <typename T>
    void record(std::string name, const Matrix<T>& m, std::optional<GridShape> grid = std::nullopt) {
        entries_.push_back({std::move(name), m.template cast<double>(), grid});
    }
    const std::vector<TraceEntry>& entries() const { return entries_; }
    const TraceEntry* find(std::string_view name) const;
    std::vector<const TraceEntry*> with_prefix(std::string_view prefix) const;

private:
    std::vector<TraceEntry> entries_;
};

template <typename T>
Matrix<T> xavier_uniform(std::size_t in, std::size_t out, Rng& rng);

/// Affine map x W + b with W (in x out) and b (1 x out).
template <typename T>
class Linear {
public:
    Linear() = default;
    Linear(ParamStore<T>& store, const std::string& name, std::size_t in, std::size_t out, Rng& rng,
           bool bias = true);

    ag::Var<T> operator()(const ag::Var<T>& x) const;
    std::size_t in_features() const { return weight.rows(); }
    std::size_t out_features() const { return weight.cols(); }

    ag::Var<T> weight;
    ag::Var<T> bias;  // empty when constructed without bias
};

template <typename T>
class LayerNorm {
public:
    LayerNorm() = default;
    LayerNorm(ParamStore<T>& store, const std::string& name, std::size_t dim, double eps);
    ag::Var<T> operator()(const ag::Var<T>& x) const;

    ag::Var<T> gamma;
    ag::Var<T> beta;
    double eps = 1e-5;
};

/// Two-layer GELU MLP.
template <typename T>
class FeedForward {
public:
    FeedForward() = default;
    FeedForward(ParamStore<T>& store, const std::string& name, std::size_t dim, std::size_t hidden, Rng& rng);
    ag::Var<T> operator()(const ag::Var<T>& x) const;

    Linear<T> fc1;
    Linear<T> fc2;
};

/// Scaled dot-product multi-head attention with optional key masking.
template <typename T>
class MultiHeadAttention {
public:
    struct Result {
        ag::Var<T> output;
        std::vector<ag::Var<T>> probs;  // one (queries x keys) matrix per head
    };

    MultiHeadAttention() = default;
    MultiHeadAttention(ParamStore<T>& store, const std::string& name, std::size_t query_dim,
                       std::size_t kv_dim, std::size_t model_dim, std::size_t heads, Rng& rng);

    /// key_mask[j] == false removes key j from every query's softmax.
    Result operator()(const ag::Var<T>& queries, const ag::Var<T>& keys_values,
                      const std::vector<bool>* key_mask = nullptr) const;

    Linear<T> wq, wk, wv, wo;
    std::size_t heads = 1;
};

/// Additive mask row: 0 for kept keys, a large negative value for masked ones.
template <typename T>
Matrix<T> key_mask_bias(std::size_t queries, const std::vector<bool>& key_mask);

}  // namespace crobim

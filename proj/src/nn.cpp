#include "crobim/nn.hpp"

#include <cmath>
#include <numbers>

namespace crobim {

double Rng::normal() {
    // Box-Muller on the portable uniform source.
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

template <typename T>
ag::Var<T> ParamStore<T>::add(std::string name, Matrix<T> init) {
    if (index_.count(name)) throw ArgumentError("duplicate parameter name '" + name + "'");
    auto var = ag::Var<T>::parameter(std::move(init));
    index_.emplace(name, entries_.size());
    entries_.push_back({std::move(name), var});
    return var;
}

template <typename T>
ag::Var<T> ParamStore<T>::get(std::string_view name) const {
    const auto it = index_.find(std::string(name));
    if (it == index_.end()) throw ArgumentError("no parameter named '" + std::string(name) + "'");
    return entries_[it->second].var;
}

template <typename T>
std::size_t ParamStore<T>::scalar_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.var.value().size();
    return n;
}

template <typename T>
void ParamStore<T>::zero_grad() {
    for (auto& e : entries_) e.var.zero_grad();
}

const TraceEntry* Trace::find(std::string_view name) const {
    for (const auto& e : entries_)
        if (e.name == name) return &e;
    return nullptr;
}

std::vector<const TraceEntry*> Trace::with_prefix(std::string_view prefix) const {
    std::vector<const TraceEntry*> out;
    for (const auto& e : entries_)
        if (std::string_view(e.name).substr(0, prefix.size()) == prefix) out.push_back(&e);
    return out;
}

template <typename T>
Matrix<T> xavier_uniform(std::size_t in, std::size_t out, Rng& rng) {
    const double a = std::sqrt(6.0 / static_cast<double>(in + out));
    Matrix<T> m(in, out);
    for (auto& v : m.data()) v = static_cast<T>(rng.uniform(-a, a));
    return m;
}

template <typename T>
Linear<T>::Linear(ParamStore<T>& store, const std::string& name, std::size_t in, std::size_t out, Rng& rng,
                  bool with_bias) {
    weight = store.add(name + ".weight", xavier_uniform<T>(in, out, rng));
    if (with_bias) bias = store.add(name + ".bias", Matrix<T>(1, out));
}

template <typename T>
ag::Var<T> Linear<T>::operator()(const ag::Var<T>& x) const {
    auto y = ag::matmul(x, weight);
    return bias ? ag::add_row(y, bias) : y;
}

template <typename T>
LayerNorm<T>::LayerNorm(ParamStore<T>& store, const std::string& name, std::size_t dim, double e) : eps(e) {
    gamma = store.add(name + ".gamma", Matrix<T>(1, dim, T{1}));
    beta = store.add(name + ".beta", Matrix<T>(1, dim));
}

template <typename T>
ag::Var<T> LayerNorm<T>::operator()(const ag::Var<T>& x) const {
    return ag::layer_norm(x, gamma, beta, eps);
}

template <typename T>
FeedForward<T>::FeedForward(ParamStore<T>& store, const std::string& name, std::size_t dim, std::size_t hidden,
                            Rng& rng)
    : fc1(store, name + ".fc1", dim, hidden, rng), fc2(store, name + ".fc2", hidden, dim, rng) {}

template <typename T>
ag::Var<T> FeedForward<T>::operator()(const ag::Var<T>& x) const {
    return fc2(ag::gelu(fc1(x)));
}

template <typename T>
Matrix<T> key_mask_bias(std::size_t queries, const std::vector<bool>& key_mask) {
    Matrix<T> bias(queries, key_mask.size());
    for (std::size_t i = 0; i < queries; ++i)
        for (std::size_t j = 0; j < key_mask.size(); ++j)
            if (!key_mask[j]) bias(i, j) = static_cast<T>(-1e9);
    return bias;
}

template <typename T>
MultiHeadAttention<T>::MultiHeadAttention(ParamStore<T>& store, const std::string& name, std::size_t query_dim,
                                          std::size_t kv_dim, std::size_t model_dim, std::size_t h, Rng& rng)
    : wq(store, name + ".q", query_dim, model_dim, rng),
      wk(store, name + ".k", kv_dim, model_dim, rng, false),  // a key bias only shifts each softmax row
      wv(store, name + ".v", kv_dim, model_dim, rng),
      wo(store, name + ".o", model_dim, query_dim, rng),
      heads(h) {
    if (h == 0 || model_dim % h != 0) throw ShapeError(name + ": heads must divide model width");
}

template <typename T>
typename MultiHeadAttention<T>::Result MultiHeadAttention<T>::operator()(const ag::Var<T>& queries,
                                                                         const ag::Var<T>& keys_values,
                                                                         const std::vector<bool>* key_mask) const {
    if (key_mask && key_mask->size() != keys_values.rows()) throw ShapeError("attention: key mask length mismatch");
    const auto q = wq(queries);
    const auto k = wk(keys_values);
    const auto v = wv(keys_values);
    const std::size_t dh = q.cols() / heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    std::optional<ag::Var<T>> bias;
    if (key_mask) bias = ag::Var<T>::constant(key_mask_bias<T>(queries.rows(), *key_mask));

    Result result;
    std::vector<ag::Var<T>> outs;
    for (std::size_t h = 0; h < heads; ++h) {
        auto qh = ag::slice_cols(q, h * dh, dh);
        auto kh = ag::slice_cols(k, h * dh, dh);
        auto vh = ag::slice_cols(v, h * dh, dh);
        auto scores = ag::scale(ag::matmul_nt(qh, kh), inv_sqrt);
        if (bias) scores = ag::add(scores, *bias);
        auto p = ag::softmax_rows(scores);
        outs.push_back(ag::matmul(p, vh));
        result.probs.push_back(p);
    }
    auto merged = heads == 1 ? outs.front() : ag::concat_cols<T>(outs);
    result.output = wo(merged);
    return result;
}

template class ParamStore<float>;
template class ParamStore<double>;
template Matrix<float> xavier_uniform<float>(std::size_t, std::size_t, Rng&);
template Matrix<double> xavier_uniform<double>(std::size_t, std::size_t, Rng&);
template class Linear<float>;
template class Linear<double>;
template class LayerNorm<float>;
template class LayerNorm<double>;
template class FeedForward<float>;
template class FeedForward<double>;
template class MultiHeadAttention<float>;
template class MultiHeadAttention<double>;
template Matrix<float> key_mask_bias<float>(std::size_t, const std::vector<bool>&);
template Matrix<double> key_mask_bias<double>(std::size_t, const std::vector<bool>&);

}  // namespace crobim

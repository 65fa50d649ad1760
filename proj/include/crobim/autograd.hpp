#pragma once

// Minimal reverse-mode automatic differentiation over dense matrices.
//
// A Var is a shared handle to a graph node. Operations build new nodes whose
// backward closures accumulate into their parents' gradients. Graph
// construction is skipped entirely while a NoGradGuard is alive on the
// current thread, which makes inference allocation-light and thread-safe
// for frozen parameters.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "crobim/tensor.hpp"

namespace crobim::ag {

template <typename T>
struct Node {
    Matrix<T> value;
    Matrix<T> grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;

    /// Gradient buffer, zero-initialised on first access.
    Matrix<T>& grad_buffer() {
        if (grad.empty() && !value.empty()) grad = Matrix<T>(value.rows(), value.cols());
        return grad;
    }
};

template <typename T>
class Var {
public:
    Var() = default;
    explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

    static Var constant(Matrix<T> value);
    static Var parameter(Matrix<T> value);

    const Matrix<T>& value() const { return node_->value; }
    /// Direct access for optimisers and finite-difference probes.
    Matrix<T>& mutable_value() { return node_->value; }
    const Matrix<T>& grad() const { return node_->grad; }
    Matrix<T>& mutable_grad() { return node_->grad_buffer(); }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    void zero_grad() {
        if (!node_->grad.empty()) node_->grad.fill(T{0});
    }

    std::size_t rows() const { return node_->value.rows(); }
    std::size_t cols() const { return node_->value.cols(); }
    T item() const;

    const std::shared_ptr<Node<T>>& node() const { return node_; }
    explicit operator bool() const noexcept { return static_cast<bool>(node_); }

private:
    std::shared_ptr<Node<T>> node_;
};

/// Disables graph recording on this thread for the guard's lifetime.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

bool grad_enabled() noexcept;

/// Seeds d(root)/d(root) = 1 and propagates through the graph. root must be 1x1.
template <typename T>
void backward(const Var<T>& root);

/// Sparse linear map between row spaces: out.row(r) = sum_j w_rj * in.row(j).
/// Pooling, bilinear resampling, gathers and block scatters are all
/// expressed through this one operator.
struct SparseRowMap {
    std::size_t out_rows = 0;
    std::size_t in_rows = 0;
    std::vector<std::size_t> offsets{0};  // CSR row pointer, size out_rows + 1
    std::vector<std::size_t> indices;
    std::vector<double> weights;

    SparseRowMap() = default;
    SparseRowMap(std::size_t out, std::size_t in) : out_rows(0), in_rows(in) { offsets.reserve(out + 1); }

    /// Appends one output row built from (input row, weight) pairs.
    void push_row(std::span<const std::pair<std::size_t, double>> terms);
    void push_row(std::initializer_list<std::pair<std::size_t, double>> terms) {
        push_row(std::span<const std::pair<std::size_t, double>>(terms.begin(), terms.size()));
    }
};

// -- linear algebra ---------------------------------------------------------
template <typename T> Var<T> matmul(const Var<T>& a, const Var<T>& b);     // a * b
template <typename T> Var<T> matmul_nt(const Var<T>& a, const Var<T>& b);  // a * b^T
template <typename T> Var<T> transpose(const Var<T>& a);
/// Same data, new (rows x cols) view; element count must match.
template <typename T> Var<T> reshape(const Var<T>& a, std::size_t rows, std::size_t cols);

// -- elementwise ------------------------------------------------------------
template <typename T> Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> sub(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> mul(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> scale(const Var<T>& a, double s);
/// a + row, with row (1 x cols) broadcast over every row of a.
template <typename T> Var<T> add_row(const Var<T>& a, const Var<T>& row);
/// a .* col, with col (rows x 1) broadcast over every column of a.
template <typename T> Var<T> mul_col(const Var<T>& a, const Var<T>& col);
template <typename T> Var<T> gelu(const Var<T>& a);

// -- normalisation ----------------------------------------------------------
/// Softmax over consecutive groups of `group` columns in every row
/// (group == 0 means the whole row).
template <typename T> Var<T> softmax_rows(const Var<T>& a, std::size_t group = 0);
template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, double eps);

// -- structure --------------------------------------------------------------
template <typename T> Var<T> row_mix(const Var<T>& x, const SparseRowMap& map);
template <typename T> Var<T> concat_rows(std::span<const Var<T>> parts);
template <typename T> Var<T> concat_cols(std::span<const Var<T>> parts);
template <typename T> Var<T> slice_rows(const Var<T>& a, std::size_t begin, std::size_t count);
template <typename T> Var<T> slice_cols(const Var<T>& a, std::size_t begin, std::size_t count);
/// Space-to-depth: (H*W x C) -> ((H/k)*(W/k) x k*k*C), columns ordered (dy, dx, c).
template <typename T> Var<T> patchify(const Var<T>& x, GridShape grid, std::size_t k);

// -- reductions and losses --------------------------------------------------
template <typename T> Var<T> sum_all(const Var<T>& a);
template <typename T> Var<T> mean_all(const Var<T>& a);
/// Mean binary cross-entropy with logits, numerically stable form.
template <typename T> Var<T> bce_with_logits(const Var<T>& logits, const Matrix<T>& target);
/// Soft Dice loss 1 - (2 sum p*y + eps) / (sum p + sum y + eps), p = sigmoid(logits).
template <typename T> Var<T> soft_dice(const Var<T>& logits, const Matrix<T>& target, double eps);

// -- deformable sampling ----------------------------------------------------
/// Geometry of the multi-level value tensor consumed by deform_sample.
struct LevelLayout {
    std::vector<GridShape> grids;
    std::vector<std::size_t> starts;  // first row of each level

    std::size_t total_rows() const {
        return grids.empty() ? 0 : starts.back() + grids.back().cells();
    }
    static LevelLayout from_grids(std::vector<GridShape> grids);
};

/// Multi-scale deformable gather.
///   value:     (rows of all levels) x D, heads own contiguous D/heads columns
///   locations: Nq x (heads*levels*points*2), normalised (x, y) per sample
///   weights:   Nq x (heads*levels*points)
/// out[q, h*dh + c] = sum_{l,p} w[q,h,l,p] * bilinear(value_l[., h*dh + c], x*W_l - 0.5, y*H_l - 0.5)
/// with zero padding outside each level. Differentiable in all three inputs.
template <typename T>
Var<T> deform_sample(const Var<T>& value, const LevelLayout& layout, const Var<T>& locations,
                     const Var<T>& weights, std::size_t heads, std::size_t points);

}  // namespace crobim::ag

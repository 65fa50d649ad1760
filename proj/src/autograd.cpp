#include "crobim/autograd.hpp"

#include <cmath>
#include <numbers>
#include <unordered_set>

namespace crobim::ag {

namespace {

thread_local bool g_grad_enabled = true;

template <typename T>
void require_same_shape(const Matrix<T>& a, const Matrix<T>& b, const char* op) {
    if (!a.same_shape(b)) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a) + " vs " + shape_string(b));
    }
}

// C += A * B
template <typename T>
void gemm_nn(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& c) {
    const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
    for (std::size_t i = 0; i < n; ++i) {
        T* crow = c.row(i).data();
        for (std::size_t p = 0; p < k; ++p) {
            const T av = a(i, p);
            if (av == T{0}) continue;
            const T* brow = b.row(p).data();
            for (std::size_t j = 0; j < m; ++j) crow[j] += av * brow[j];
        }
    }
}

// C += A * B^T
template <typename T>
void gemm_nt(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& c) {
    const std::size_t n = a.rows(), k = a.cols(), m = b.rows();
    for (std::size_t i = 0; i < n; ++i) {
        const T* arow = a.row(i).data();
        for (std::size_t j = 0; j < m; ++j) {
            const T* brow = b.row(j).data();
            T acc{0};
            for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
            c(i, j) += acc;
        }
    }
}

// C += A^T * B
template <typename T>
void gemm_tn(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& c) {
    const std::size_t k = a.rows(), n = a.cols(), m = b.cols();
    for (std::size_t p = 0; p < k; ++p) {
        const T* arow = a.row(p).data();
        const T* brow = b.row(p).data();
        for (std::size_t i = 0; i < n; ++i) {
            const T av = arow[i];
            if (av == T{0}) continue;
            T* crow = c.row(i).data();
            for (std::size_t j = 0; j < m; ++j) crow[j] += av * brow[j];
        }
    }
}

template <typename T>
Var<T> make_result(Matrix<T> value, std::vector<std::shared_ptr<Node<T>>> parents,
                   std::function<void(Node<T>&)> fn) {
    auto node = std::make_shared<Node<T>>();
    node->value = std::move(value);
    bool needs = false;
    if (g_grad_enabled) {
        for (const auto& p : parents) needs = needs || p->requires_grad;
    }
    if (needs) {
        node->requires_grad = true;
        node->parents = std::move(parents);
        node->backward = std::move(fn);
    }
    return Var<T>(std::move(node));
}

template <typename T>
T gelu_value(T x) {
    return static_cast<T>(0.5) * x * (T{1} + std::erf(x / std::numbers::sqrt2_v<T>));
}

template <typename T>
T gelu_deriv(T x) {
    const T cdf = static_cast<T>(0.5) * (T{1} + std::erf(x / std::numbers::sqrt2_v<T>));
    const T pdf = std::exp(static_cast<T>(-0.5) * x * x) / std::sqrt(T{2} * std::numbers::pi_v<T>);
    return cdf + x * pdf;
}

template <typename T>
T sigmoid(T z) {
    if (z >= T{0}) return T{1} / (T{1} + std::exp(-z));
    const T e = std::exp(z);
    return e / (T{1} + e);
}

}  // namespace

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() noexcept { return g_grad_enabled; }

void SparseRowMap::push_row(std::span<const std::pair<std::size_t, double>> terms) {
    for (const auto& [idx, w] : terms) {
        if (idx >= in_rows) throw ShapeError("SparseRowMap: input row out of range");
        indices.push_back(idx);
        weights.push_back(w);
    }
    offsets.push_back(indices.size());
    ++out_rows;
}

LevelLayout LevelLayout::from_grids(std::vector<GridShape> grids) {
    LevelLayout layout;
    std::size_t start = 0;
    for (const auto& g : grids) {
        layout.starts.push_back(start);
        start += g.cells();
    }
    layout.grids = std::move(grids);
    return layout;
}

template <typename T>
Var<T> Var<T>::constant(Matrix<T> value) {
    auto node = std::make_shared<Node<T>>();
    node->value = std::move(value);
    return Var(std::move(node));
}

template <typename T>
Var<T> Var<T>::parameter(Matrix<T> value) {
    auto node = std::make_shared<Node<T>>();
    node->value = std::move(value);
    node->requires_grad = true;
    return Var(std::move(node));
}

template <typename T>
T Var<T>::item() const {
    if (node_->value.size() != 1) throw ShapeError("item() on non-scalar " + shape_string(node_->value));
    return node_->value[0];
}

template <typename T>
void backward(const Var<T>& root) {
    if (root.value().size() != 1) throw ShapeError("backward() requires a scalar root");
    if (!root.requires_grad()) return;

    // Iterative post-order DFS for a topological order.
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> visited;
    std::vector<std::pair<Node<T>*, std::size_t>> stack{{root.node().get(), 0}};
    visited.insert(root.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node<T>* parent = node->parents[next++].get();
            if (parent->requires_grad && visited.insert(parent).second) stack.push_back({parent, 0});
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    root.node()->grad_buffer()[0] += T{1};
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>* node = *it;
        if (node->backward && !node->grad.empty()) node->backward(*node);
    }
    // Release interior gradients; leaves keep theirs for the optimiser.
    for (Node<T>* node : order) {
        if (node->backward) node->grad = Matrix<T>();
    }
}

// ---------------------------------------------------------------------------

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
    if (a.cols() != b.rows()) {
        throw ShapeError("matmul: " + shape_string(a.value()) + " * " + shape_string(b.value()));
    }
    Matrix<T> out(a.rows(), b.cols());
    gemm_nn(a.value(), b.value(), out);
    auto an = a.node(), bn = b.node();
    return make_result<T>(std::move(out), {an, bn}, [an, bn](Node<T>& self) {
        if (an->requires_grad) gemm_nt(self.grad, bn->value, an->grad_buffer());
        if (bn->requires_grad) gemm_tn(an->value, self.grad, bn->grad_buffer());
    });
}

template <typename T>
Var<T> matmul_nt(const Var<T>& a, const Var<T>& b) {
    if (a.cols() != b.cols()) {
        throw ShapeError("matmul_nt: " + shape_string(a.value()) + " * " + shape_string(b.value()) + "^T");
    }
    Matrix<T> out(a.rows(), b.rows());
    gemm_nt(a.value(), b.value(), out);
    auto an = a.node(), bn = b.node();
    return make_result<T>(std::move(out), {an, bn}, [an, bn](Node<T>& self) {
        if (an->requires_grad) gemm_nn(self.grad, bn->value, an->grad_buffer());
        if (bn->requires_grad) gemm_tn(self.grad, an->value, bn->grad_buffer());
    });
}

template <typename T>
Var<T> transpose(const Var<T>& a) {
    const auto& av = a.value();
    Matrix<T> out(av.cols(), av.rows());
    for (std::size_t i = 0; i < av.rows(); ++i)
        for (std::size_t j = 0; j < av.cols(); ++j) out(j, i) = av(i, j);
    auto an = a.node();
    return make_result<T>(std::move(out), {an}, [an](Node<T>& self) {
        auto& g = an->grad_buffer();
        for (std::size_t i = 0; i < g.rows(); ++i)
            for (std::size_t j = 0; j < g.cols(); ++j) g(i, j) += self.grad(j, i);
    });
}

template <typename T>
Var<T> reshape(const Var<T>& a, std::size_t rows, std::size_t cols) {
    if (rows * cols != a.value().size()) throw ShapeError("reshape: element count mismatch");
    Matrix<T> out(rows, cols, a.value().storage());
    auto an = a.node();
    return make_result<T>(std::move(out), {an}, [an](Node<T>& self) {
        auto& g = an->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    });
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    require_same_shape(a.value(), b.value(), "add");
    Matrix<T> out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
    auto an = a.node(), bn = b.node();
    return make_result<T>(std::move(out), {an, bn}, [an, bn](Node<T>& self) {
        for (auto* n : {an.get(), bn.get()}) {
            if (!n->requires_grad) continue;
            auto& g = n->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
    });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
    require_same_shape(a.value(), b.value(), "sub");
    Matrix<T> out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
    auto an = a.node(), bn = b.node();
    return make_result<T>(std::move(out), {an, bn}, [an, bn](Node<T>& self) {
        if (an->requires_grad) {
            auto& g = an->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
        if (bn->requires_grad) {
            auto& g = bn->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
        }
    });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
    require_same_shape(a.value(), b.value(), "mul");
    Matrix<T> out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
    auto an = a.node(), bn = b.node();
    return make_result<T>(std::move(out), {an, bn}, [an, bn](Node<T>& self) {
        if (an->requires_grad) {
            auto& g = an->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * bn->value[i];
        }
        if (bn->requires_grad) {
            auto& g = bn->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * an->value[i];
        }
    });
}

template <typename T>
Var<T> scale(const Var<T>& a, double s) {
    const T factor = static_cast<T>(s);
    Matrix<T> out = a.value();
    for (auto& v : out.data()) v *= factor;
    auto an = a.node();
    return make_result<T>(std::move(out), {an}, [an, factor](Node<T>& self) {
        auto& g = an->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += factor * self.grad[i];
    });
}

template <typename T>
Var<T> add_row(const Var<T>& a, const Var<T>& row) {
    if (row.rows() != 1 || row.cols() != a.cols()) {
        throw ShapeError("add_row: " + shape_string(a.value()) + " + " + shape_string(row.value()));
    }
    Matrix<T> out = a.value();
    const auto r = row.value().row(0);
    for (std::size_t i = 0; i < out.rows(); ++i) {
        auto o = out.row(i);
        for (std::size_t j = 0; j < o.size(); ++j) o[j] += r[j];
    }
    auto an = a.node(), rn = row.node();
    return make_result<T>(std::move(out), {an, rn}, [an, rn](Node<T>& self) {
        if (an->requires_grad) {
            auto& g = an->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
        if (rn->requires_grad) {
            auto g = rn->grad_buffer().row(0);
            for (std::size_t i = 0; i < self.grad.rows(); ++i) {
                const auto s = self.grad.row(i);
                for (std::size_t j = 0; j < g.size(); ++j) g[j] += s[j];
            }
        }
    });
}

template <typename T>
Var<T> mul_col(const Var<T>& a, const Var<T>& col) {
    if (col.cols() != 1 || col.rows() != a.rows()) {
        throw ShapeError("mul_col: " + shape_string(a.value()) + " .* " + shape_string(col.value()));
    }
    Matrix<T> out = a.value();
    for (std::size_t i = 0; i < out.rows(); ++i)
        for (auto& v : out.row(i)) v *= col.value()[i];
    auto an = a.node(), cn = col.node();
    return make_result<T>(std::move(out), {an, cn}, [an, cn](Node<T>& self) {
        if (an->requires_grad) {
            auto& g = an->grad_buffer();
            for (std::size_t i = 0; i < g.rows(); ++i) {
                const T c = cn->value[i];
                auto gr = g.row(i);
                const auto sr = self.grad.row(i);
                for (std::size_t j = 0; j < gr.size(); ++j) gr[j] += c * sr[j];
            }
        }
        if (cn->requires_grad) {
            auto& g = cn->grad_buffer();
            for (std::size_t i = 0; i < self.grad.rows(); ++i) {
                const auto ar = an->value.row(i);
                const auto sr = self.grad.row(i);
                T acc{0};
                for (std::size_t j = 0; j < ar.size(); ++j) acc += ar[j] * sr[j];
                g[i] += acc;
            }
        }
    });
}

template <typename T>
Var<T> gelu(const Var<T>& a) {
    Matrix<T> out = a.value();
    for (auto& v : out.data()) v = gelu_value(v);
    auto an = a.node();
    return make_result<T>(std::move(out), {an}, [an](Node<T>& self) {
        auto& g = an->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * gelu_deriv(an->value[i]);
    });
}

template <typename T>
Var<T> softmax_rows(const Var<T>& a, std::size_t group) {
    const std::size_t cols = a.cols();
    if (group == 0) group = cols;
    if (cols % group != 0) throw ShapeError("softmax_rows: group does not divide columns");
    Matrix<T> out = a.value();
    for (std::size_t i = 0; i < out.rows(); ++i) {
        auto r = out.row(i);
        for (std::size_t g0 = 0; g0 < cols; g0 += group) {
            T mx = r[g0];
            for (std::size_t j = g0; j < g0 + group; ++j) mx = std::max(mx, r[j]);
            T sum{0};
            for (std::size_t j = g0; j < g0 + group; ++j) {
                r[j] = std::exp(r[j] - mx);
                sum += r[j];
            }
            for (std::size_t j = g0; j < g0 + group; ++j) r[j] /= sum;
        }
    }
    auto an = a.node();
    return make_result<T>(std::move(out), {an}, [an, group](Node<T>& self) {
        auto& g = an->grad_buffer();
        for (std::size_t i = 0; i < g.rows(); ++i) {
            const auto y = self.value.row(i);
            const auto dy = self.grad.row(i);
            auto dx = g.row(i);
            for (std::size_t g0 = 0; g0 < y.size(); g0 += group) {
                T dot{0};
                for (std::size_t j = g0; j < g0 + group; ++j) dot += y[j] * dy[j];
                for (std::size_t j = g0; j < g0 + group; ++j) dx[j] += y[j] * (dy[j] - dot);
            }
        }
    });
}

template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, double eps) {
    const std::size_t n = x.rows(), d = x.cols();
    if (gamma.rows() != 1 || gamma.cols() != d || beta.rows() != 1 || beta.cols() != d) {
        throw ShapeError("layer_norm: affine parameters must be 1x" + std::to_string(d));
    }
    Matrix<T> xhat(n, d);
    std::vector<T> inv_std(n);
    Matrix<T> out(n, d);
    for (std::size_t i = 0; i < n; ++i) {
        const auto r = x.value().row(i);
        T mean{0};
        for (T v : r) mean += v;
        mean /= static_cast<T>(d);
        T var{0};
        for (T v : r) var += (v - mean) * (v - mean);
        var /= static_cast<T>(d);
        inv_std[i] = T{1} / std::sqrt(var + static_cast<T>(eps));
        for (std::size_t j = 0; j < d; ++j) {
            xhat(i, j) = (r[j] - mean) * inv_std[i];
            out(i, j) = xhat(i, j) * gamma.value()[j] + beta.value()[j];
        }
    }
    auto xn = x.node(), gn = gamma.node(), bn = beta.node();
    return make_result<T>(
        std::move(out), {xn, gn, bn},
        [xn, gn, bn, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<T>& self) {
            const std::size_t rows = xhat.rows(), dim = xhat.cols();
            if (gn->requires_grad || bn->requires_grad) {
                auto& gg = gn->grad_buffer();
                auto& gb = bn->grad_buffer();
                for (std::size_t i = 0; i < rows; ++i)
                    for (std::size_t j = 0; j < dim; ++j) {
                        gg[j] += self.grad(i, j) * xhat(i, j);
                        gb[j] += self.grad(i, j);
                    }
            }
            if (xn->requires_grad) {
                auto& gx = xn->grad_buffer();
                std::vector<T> dxhat(dim);
                for (std::size_t i = 0; i < rows; ++i) {
                    T sum_d{0}, sum_dx{0};
                    for (std::size_t j = 0; j < dim; ++j) {
                        dxhat[j] = self.grad(i, j) * gn->value[j];
                        sum_d += dxhat[j];
                        sum_dx += dxhat[j] * xhat(i, j);
                    }
                    const T inv_d = T{1} / static_cast<T>(dim);
                    for (std::size_t j = 0; j < dim; ++j) {
                        gx(i, j) += inv_std[i] * (dxhat[j] - inv_d * sum_d - xhat(i, j) * inv_d * sum_dx);
                    }
                }
            }
        });
}

template <typename T>
Var<T> row_mix(const Var<T>& x, const SparseRowMap& map) {
    if (map.in_rows != x.rows()) {
        throw ShapeError("row_mix: map expects " + std::to_string(map.in_rows) + " input rows, got " +
                         std::to_string(x.rows()));
    }
    const std::size_t d = x.cols();
    Matrix<T> out(map.out_rows, d);
    for (std::size_t r = 0; r < map.out_rows; ++r) {
        auto o = out.row(r);
        for (std::size_t t = map.offsets[r]; t < map.offsets[r + 1]; ++t) {
            const T w = static_cast<T>(map.weights[t]);
            const auto in = x.value().row(map.indices[t]);
            for (std::size_t j = 0; j < d; ++j) o[j] += w * in[j];
        }
    }
    auto xn = x.node();
    return make_result<T>(std::move(out), {xn}, [xn, map](Node<T>& self) {
        auto& g = xn->grad_buffer();
        for (std::size_t r = 0; r < map.out_rows; ++r) {
            const auto go = self.grad.row(r);
            for (std::size_t t = map.offsets[r]; t < map.offsets[r + 1]; ++t) {
                const T w = static_cast<T>(map.weights[t]);
                auto gi = g.row(map.indices[t]);
                for (std::size_t j = 0; j < go.size(); ++j) gi[j] += w * go[j];
            }
        }
    });
}

template <typename T>
Var<T> concat_rows(std::span<const Var<T>> parts) {
    if (parts.empty()) throw ShapeError("concat_rows: no inputs");
    const std::size_t d = parts[0].cols();
    std::size_t rows = 0;
    for (const auto& p : parts) {
        if (p.cols() != d) throw ShapeError("concat_rows: column mismatch");
        rows += p.rows();
    }
    Matrix<T> out(rows, d);
    std::size_t at = 0;
    std::vector<std::shared_ptr<Node<T>>> nodes;
    for (const auto& p : parts) {
        std::copy(p.value().data().begin(), p.value().data().end(), out.data().begin() + at * d);
        at += p.rows();
        nodes.push_back(p.node());
    }
    return make_result<T>(std::move(out), nodes, [nodes, d](Node<T>& self) {
        std::size_t offset = 0;
        for (const auto& n : nodes) {
            const std::size_t count = n->value.size();
            if (n->requires_grad) {
                auto& g = n->grad_buffer();
                for (std::size_t i = 0; i < count; ++i) g[i] += self.grad[offset + i];
            }
            offset += count;
        }
        (void)d;
    });
}

template <typename T>
Var<T> concat_cols(std::span<const Var<T>> parts) {
    if (parts.empty()) throw ShapeError("concat_cols: no inputs");
    const std::size_t n = parts[0].rows();
    std::size_t cols = 0;
    for (const auto& p : parts) {
        if (p.rows() != n) throw ShapeError("concat_cols: row mismatch");
        cols += p.cols();
    }
    Matrix<T> out(n, cols);
    std::vector<std::shared_ptr<Node<T>>> nodes;
    std::size_t c0 = 0;
    for (const auto& p : parts) {
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < p.cols(); ++j) out(i, c0 + j) = p.value()(i, j);
        c0 += p.cols();
        nodes.push_back(p.node());
    }
    return make_result<T>(std::move(out), nodes, [nodes](Node<T>& self) {
        std::size_t c = 0;
        for (const auto& node : nodes) {
            const std::size_t w = node->value.cols();
            if (node->requires_grad) {
                auto& g = node->grad_buffer();
                for (std::size_t i = 0; i < g.rows(); ++i)
                    for (std::size_t j = 0; j < w; ++j) g(i, j) += self.grad(i, c + j);
            }
            c += w;
        }
    });
}

template <typename T>
Var<T> slice_rows(const Var<T>& a, std::size_t begin, std::size_t count) {
    if (begin + count > a.rows()) throw ShapeError("slice_rows: range out of bounds");
    const std::size_t d = a.cols();
    std::vector<T> data(a.value().data().begin() + begin * d, a.value().data().begin() + (begin + count) * d);
    auto an = a.node();
    return make_result<T>(Matrix<T>(count, d, std::move(data)), {an}, [an, begin, d](Node<T>& self) {
        auto& g = an->grad_buffer();
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[begin * d + i] += self.grad[i];
    });
}

template <typename T>
Var<T> slice_cols(const Var<T>& a, std::size_t begin, std::size_t count) {
    if (begin + count > a.cols()) throw ShapeError("slice_cols: range out of bounds");
    Matrix<T> out(a.rows(), count);
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < count; ++j) out(i, j) = a.value()(i, begin + j);
    auto an = a.node();
    return make_result<T>(std::move(out), {an}, [an, begin](Node<T>& self) {
        auto& g = an->grad_buffer();
        for (std::size_t i = 0; i < self.grad.rows(); ++i)
            for (std::size_t j = 0; j < self.grad.cols(); ++j) g(i, begin + j) += self.grad(i, j);
    });
}

template <typename T>
Var<T> patchify(const Var<T>& x, GridShape grid, std::size_t k) {
    if (x.rows() != grid.cells()) throw ShapeError("patchify: rows do not match grid " + to_string(grid));
    if (k == 0 || grid.height % k != 0 || grid.width % k != 0) {
        throw ShapeError("patchify: grid " + to_string(grid) + " not divisible by " + std::to_string(k));
    }
    const std::size_t c = x.cols(), oh = grid.height / k, ow = grid.width / k;
    // Output element (cell, (dy*k + dx)*c + ch) <- input (y*W + x, ch).
    std::vector<std::size_t> source(oh * ow * k * k);
    for (std::size_t oy = 0; oy < oh; ++oy)
        for (std::size_t ox = 0; ox < ow; ++ox)
            for (std::size_t dy = 0; dy < k; ++dy)
                for (std::size_t dx = 0; dx < k; ++dx)
                    source[((oy * ow + ox) * k + dy) * k + dx] = (oy * k + dy) * grid.width + ox * k + dx;
    Matrix<T> out(oh * ow, k * k * c);
    for (std::size_t s = 0; s < source.size(); ++s) {
        const auto in = x.value().row(source[s]);
        std::copy(in.begin(), in.end(), out.data().begin() + s * c);
    }
    auto xn = x.node();
    return make_result<T>(std::move(out), {xn}, [xn, source = std::move(source), c](Node<T>& self) {
        auto& g = xn->grad_buffer();
        for (std::size_t s = 0; s < source.size(); ++s) {
            auto gi = g.row(source[s]);
            for (std::size_t ch = 0; ch < c; ++ch) gi[ch] += self.grad[s * c + ch];
        }
    });
}

template <typename T>
Var<T> sum_all(const Var<T>& a) {
    T acc{0};
    for (T v : a.value().data()) acc += v;
    auto an = a.node();
    return make_result<T>(Matrix<T>(1, 1, acc), {an}, [an](Node<T>& self) {
        auto& g = an->grad_buffer();
        for (auto& v : g.data()) v += self.grad[0];
    });
}

template <typename T>
Var<T> mean_all(const Var<T>& a) {
    return scale(sum_all(a), 1.0 / static_cast<double>(a.value().size()));
}

template <typename T>
Var<T> bce_with_logits(const Var<T>& logits, const Matrix<T>& target) {
    require_same_shape(logits.value(), target, "bce_with_logits");
    const auto& z = logits.value();
    const T n = static_cast<T>(z.size());
    T acc{0};
    for (std::size_t i = 0; i < z.size(); ++i) {
        const T zi = z[i];
        acc += std::max(zi, T{0}) - zi * target[i] + std::log1p(std::exp(-std::abs(zi)));
    }
    auto ln = logits.node();
    return make_result<T>(Matrix<T>(1, 1, acc / n), {ln}, [ln, target, n](Node<T>& self) {
        auto& g = ln->grad_buffer();
        const T s = self.grad[0] / n;
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * (sigmoid(ln->value[i]) - target[i]);
    });
}

template <typename T>
Var<T> soft_dice(const Var<T>& logits, const Matrix<T>& target, double eps) {
    require_same_shape(logits.value(), target, "soft_dice");
    if (!(eps > 0.0)) throw ArgumentError("soft_dice: smoothing must be positive");
    const auto& z = logits.value();
    Matrix<T> p(z.rows(), z.cols());
    T inter{0}, sp{0}, sy{0};
    for (std::size_t i = 0; i < z.size(); ++i) {
        p[i] = sigmoid(z[i]);
        inter += p[i] * target[i];
        sp += p[i];
        sy += target[i];
    }
    const T e = static_cast<T>(eps);
    const T num = T{2} * inter + e;
    const T den = sp + sy + e;
    auto ln = logits.node();
    return make_result<T>(Matrix<T>(1, 1, T{1} - num / den), {ln},
                          [ln, target, p = std::move(p), num, den](Node<T>& self) {
                              auto& g = ln->grad_buffer();
                              const T s = self.grad[0];
                              for (std::size_t i = 0; i < g.size(); ++i) {
                                  const T dldp = -(T{2} * target[i] * den - num) / (den * den);
                                  g[i] += s * dldp * p[i] * (T{1} - p[i]);
                              }
                          });
}

template <typename T>
Var<T> deform_sample(const Var<T>& value, const LevelLayout& layout, const Var<T>& locations,
                     const Var<T>& weights, std::size_t heads, std::size_t points) {
    const std::size_t levels = layout.grids.size();
    const std::size_t nq = locations.rows();
    const std::size_t d = value.cols();
    if (heads == 0 || d % heads != 0) throw ShapeError("deform_sample: heads must divide value width");
    if (value.rows() != layout.total_rows()) throw ShapeError("deform_sample: value rows do not match layout");
    if (locations.cols() != heads * levels * points * 2 || weights.cols() != heads * levels * points ||
        weights.rows() != nq) {
        throw ShapeError("deform_sample: location/weight widths inconsistent with heads*levels*points");
    }
    const std::size_t dh = d / heads;

    // One bilinear footprint per (query, head, level, point).
    struct Tap {
        std::ptrdiff_t row[4];  // -1 when the corner lies outside the level
        T w[4];
        T lh, lw;  // fractional parts, for the location derivative
    };
    auto make_tap = [&](std::size_t level, T x, T y) {
        const auto g = layout.grids[level];
        const T h_im = y * static_cast<T>(g.height) - static_cast<T>(0.5);
        const T w_im = x * static_cast<T>(g.width) - static_cast<T>(0.5);
        Tap tap{{-1, -1, -1, -1}, {0, 0, 0, 0}, 0, 0};
        const auto H = static_cast<std::ptrdiff_t>(g.height), W = static_cast<std::ptrdiff_t>(g.width);
        if (!(h_im > T{-1} && w_im > T{-1} && h_im < static_cast<T>(H) && w_im < static_cast<T>(W))) return tap;
        const auto h_low = static_cast<std::ptrdiff_t>(std::floor(h_im));
        const auto w_low = static_cast<std::ptrdiff_t>(std::floor(w_im));
        tap.lh = h_im - static_cast<T>(h_low);
        tap.lw = w_im - static_cast<T>(w_low);
        const T hh = T{1} - tap.lh, hw = T{1} - tap.lw;
        const std::ptrdiff_t ys[4] = {h_low, h_low, h_low + 1, h_low + 1};
        const std::ptrdiff_t xs[4] = {w_low, w_low + 1, w_low, w_low + 1};
        const T ws[4] = {hh * hw, hh * tap.lw, tap.lh * hw, tap.lh * tap.lw};
        for (int c = 0; c < 4; ++c) {
            if (ys[c] >= 0 && ys[c] < H && xs[c] >= 0 && xs[c] < W) {
                tap.row[c] = static_cast<std::ptrdiff_t>(layout.starts[level]) + ys[c] * W + xs[c];
                tap.w[c] = ws[c];
            }
        }
        return tap;
    };

    const std::size_t per_query = heads * levels * points;
    std::vector<Tap> taps(nq * per_query);
    Matrix<T> out(nq, d);
    const auto& val = value.value();
    for (std::size_t q = 0; q < nq; ++q) {
        const auto loc = locations.value().row(q);
        const auto wq = weights.value().row(q);
        for (std::size_t h = 0; h < heads; ++h)
            for (std::size_t l = 0; l < levels; ++l)
                for (std::size_t p = 0; p < points; ++p) {
                    const std::size_t s = (h * levels + l) * points + p;
                    Tap& tap = taps[q * per_query + s];
                    tap = make_tap(l, loc[2 * s], loc[2 * s + 1]);
                    const T aw = wq[s];
                    for (int c = 0; c < 4; ++c) {
                        if (tap.row[c] < 0) continue;
                        const T cw = aw * tap.w[c];
                        const auto vr = val.row(static_cast<std::size_t>(tap.row[c]));
                        for (std::size_t ch = 0; ch < dh; ++ch) out(q, h * dh + ch) += cw * vr[h * dh + ch];
                    }
                }
    }

    auto vn = value.node(), locn = locations.node(), wn = weights.node();
    return make_result<T>(
        std::move(out), {vn, locn, wn},
        [vn, locn, wn, taps = std::move(taps), layout, heads, levels, points, dh, per_query](Node<T>& self) {
            const std::size_t n_query = self.grad.rows();
            for (std::size_t q = 0; q < n_query; ++q) {
                const auto gout = self.grad.row(q);
                for (std::size_t h = 0; h < heads; ++h)
                    for (std::size_t l = 0; l < levels; ++l)
                        for (std::size_t p = 0; p < points; ++p) {
                            const std::size_t s = (h * levels + l) * points + p;
                            const Tap& tap = taps[q * per_query + s];
                            const T aw = wn->value(q, s);
                            // corner values projected on the upstream gradient
                            T cv[4] = {0, 0, 0, 0};
                            for (int c = 0; c < 4; ++c) {
                                if (tap.row[c] < 0) continue;
                                const auto vr = vn->value.row(static_cast<std::size_t>(tap.row[c]));
                                for (std::size_t ch = 0; ch < dh; ++ch) cv[c] += gout[h * dh + ch] * vr[h * dh + ch];
                            }
                            if (vn->requires_grad) {
                                auto& gv = vn->grad_buffer();
                                for (int c = 0; c < 4; ++c) {
                                    if (tap.row[c] < 0) continue;
                                    const T cw = aw * tap.w[c];
                                    auto gr = gv.row(static_cast<std::size_t>(tap.row[c]));
                                    for (std::size_t ch = 0; ch < dh; ++ch) gr[h * dh + ch] += cw * gout[h * dh + ch];
                                }
                            }
                            if (wn->requires_grad) {
                                T sampled{0};
                                for (int c = 0; c < 4; ++c) sampled += tap.w[c] * cv[c];
                                wn->grad_buffer()(q, s) += sampled;
                            }
                            if (locn->requires_grad) {
                                const T hh = T{1} - tap.lh, hw = T{1} - tap.lw;
                                const T d_him = -hw * cv[0] - tap.lw * cv[1] + hw * cv[2] + tap.lw * cv[3];
                                const T d_wim = -hh * cv[0] + hh * cv[1] - tap.lh * cv[2] + tap.lh * cv[3];
                                const auto g = layout.grids[l];
                                auto& gl = locn->grad_buffer();
                                gl(q, 2 * s) += aw * d_wim * static_cast<T>(g.width);
                                gl(q, 2 * s + 1) += aw * d_him * static_cast<T>(g.height);
                            }
                        }
            }
        });
}

// ---------------------------------------------------------------------------

#define CROBIM_INSTANTIATE(T)                                                                       \
    template class Var<T>;                                                                          \
    template void backward<T>(const Var<T>&);                                                       \
    template Var<T> matmul<T>(const Var<T>&, const Var<T>&);                                        \
    template Var<T> matmul_nt<T>(const Var<T>&, const Var<T>&);                                     \
    template Var<T> transpose<T>(const Var<T>&);                                                    \
    template Var<T> reshape<T>(const Var<T>&, std::size_t, std::size_t);                            \
    template Var<T> add<T>(const Var<T>&, const Var<T>&);                                           \
    template Var<T> sub<T>(const Var<T>&, const Var<T>&);                                           \
    template Var<T> mul<T>(const Var<T>&, const Var<T>&);                                           \
    template Var<T> scale<T>(const Var<T>&, double);                                                \
    template Var<T> add_row<T>(const Var<T>&, const Var<T>&);                                       \
    template Var<T> mul_col<T>(const Var<T>&, const Var<T>&);                                       \
    template Var<T> gelu<T>(const Var<T>&);                                                         \
    template Var<T> softmax_rows<T>(const Var<T>&, std::size_t);                                    \
    template Var<T> layer_norm<T>(const Var<T>&, const Var<T>&, const Var<T>&, double);             \
    template Var<T> row_mix<T>(const Var<T>&, const SparseRowMap&);                                 \
    template Var<T> concat_rows<T>(std::span<const Var<T>>);                                        \
    template Var<T> concat_cols<T>(std::span<const Var<T>>);                                        \
    template Var<T> slice_rows<T>(const Var<T>&, std::size_t, std::size_t);                         \
    template Var<T> slice_cols<T>(const Var<T>&, std::size_t, std::size_t);                         \
    template Var<T> patchify<T>(const Var<T>&, GridShape, std::size_t);                             \
    template Var<T> sum_all<T>(const Var<T>&);                                                      \
    template Var<T> mean_all<T>(const Var<T>&);                                                     \
    template Var<T> bce_with_logits<T>(const Var<T>&, const Matrix<T>&);                            \
    template Var<T> soft_dice<T>(const Var<T>&, const Matrix<T>&, double);                          \
    template Var<T> deform_sample<T>(const Var<T>&, const LevelLayout&, const Var<T>&, const Var<T>&, \
                                     std::size_t, std::size_t);

CROBIM_INSTANTIATE(float)
CROBIM_INSTANTIATE(double)

#undef CROBIM_INSTANTIATE

}  // namespace crobim::ag

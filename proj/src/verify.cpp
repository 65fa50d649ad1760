#include "crobim/verify.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

namespace crobim::verify {

// -- finite differences -----------------------------------------------------

double relative_error(double a, double b) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8});
}

namespace {

double finite_or_throw(double v, const std::string& where) {
    if (!std::isfinite(v)) throw NumericalError("finite_difference_check", "non-finite loss while probing " + where);
    return v;
}

std::vector<std::size_t> pick_probes(std::size_t n, std::size_t probes, std::mt19937_64& gen) {
    std::vector<std::size_t> out;
    if (probes >= n) {
        for (std::size_t i = 0; i < n; ++i) out.push_back(i);
        return out;
    }
    std::uniform_int_distribution<std::size_t> dist(0, n - 1);
    while (out.size() < probes) {
        const std::size_t i = dist(gen);
        if (std::find(out.begin(), out.end(), i) == out.end()) out.push_back(i);
    }
    return out;
}

}  // namespace

std::vector<GradCheckReport> finite_difference_check(
    const std::function<ag::Var<double>()>& loss,
    const std::vector<std::pair<std::string, ag::Var<double>>>& params, const GradCheckOptions& options) {
    if (!(options.eps > 0.0)) throw ArgumentError("finite_difference_check: eps must be positive");
    for (auto [name, var] : params) var.zero_grad();
    const auto root = loss();
    finite_or_throw(root.item(), "the base point");
    ag::backward(root);

    std::vector<Matrix<double>> analytic;
    for (auto [name, var] : params) {
        analytic.push_back(var.grad().empty() ? Matrix<double>(var.rows(), var.cols()) : var.grad());
    }

    std::mt19937_64 gen(options.seed);
    std::vector<GradCheckReport> reports;
    ag::NoGradGuard no_grad;
    for (std::size_t k = 0; k < params.size(); ++k) {
        auto var = params[k].second;
        GradCheckReport r;
        r.name = params[k].first;
        r.tolerance = options.tol;
        for (std::size_t i : pick_probes(var.value().size(), options.probes, gen)) {
            auto& x = var.mutable_value()[i];
            const double saved = x;
            x = saved + options.eps;
            const double up = finite_or_throw(loss().item(), r.name);
            x = saved - options.eps;
            const double down = finite_or_throw(loss().item(), r.name);
            x = saved;
            const double numeric = (up - down) / (2.0 * options.eps);
            r.max_rel_error = std::max(r.max_rel_error, relative_error(analytic[k][i], numeric));
            ++r.probes;
        }
        r.passed = r.max_rel_error < r.tolerance;
        reports.push_back(r);
    }
    return reports;
}

GradCheckReport finite_difference_check(const std::string& name,
                                        const std::function<double(const std::vector<double>&)>& f,
                                        const std::function<std::vector<double>(const std::vector<double>&)>& grad,
                                        const std::vector<double>& theta, const GradCheckOptions& options) {
    if (!(options.eps > 0.0)) throw ArgumentError("finite_difference_check: eps must be positive");
    finite_or_throw(f(theta), name);
    const auto analytic = grad(theta);
    if (analytic.size() != theta.size()) throw ShapeError("finite_difference_check: gradient size mismatch");
    std::mt19937_64 gen(options.seed);
    GradCheckReport r;
    r.name = name;
    r.tolerance = options.tol;
    auto probe = theta;
    for (std::size_t i : pick_probes(theta.size(), options.probes, gen)) {
        probe[i] = theta[i] + options.eps;
        const double up = finite_or_throw(f(probe), name);
        probe[i] = theta[i] - options.eps;
        const double down = finite_or_throw(f(probe), name);
        probe[i] = theta[i];
        r.max_rel_error = std::max(r.max_rel_error, relative_error(analytic[i], (up - down) / (2.0 * options.eps)));
        ++r.probes;
    }
    r.passed = r.max_rel_error < r.tolerance;
    return r;
}

// -- snapshots --------------------------------------------------------------

Affine snapshot(const Linear<double>& l) {
    return {l.weight.value(), l.bias ? l.bias.value() : Matrix<double>()};
}

Norm snapshot(const LayerNorm<double>& n) { return {n.gamma.value(), n.beta.value(), n.eps}; }

Attention snapshot(const MultiHeadAttention<double>& a) {
    return {snapshot(a.wq), snapshot(a.wk), snapshot(a.wv), snapshot(a.wo), a.heads};
}

StageWeights snapshot(const lgfa::StageFusionParams<double>& p) {
    return {snapshot(p.wq), snapshot(p.wk), snapshot(p.wv), snapshot(p.gate), snapshot(p.reweight)};
}

CompWeights snapshot(const lgfa::CompensationParams<double>& p) {
    CompWeights w;
    for (std::size_t i = 0; i < 4; ++i) {
        w.forward[i] = snapshot(p.forward_proj[i]);
        w.inverse[i] = snapshot(p.inverse_proj[i]);
    }
    w.norm = snapshot(p.norm);
    w.msa = snapshot(p.msa);
    return w;
}

DeformWeights snapshot(const mid::DeformAttnParams<double>& p) {
    return {snapshot(p.offsets), snapshot(p.weights), snapshot(p.value_proj), snapshot(p.output_proj),
            p.heads, p.levels, p.points};
}

// -- oracles ----------------------------------------------------------------

namespace {

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

/// In-place softmax of v[0..n).
void softmax(std::vector<double>& v) {
    double mx = -std::numeric_limits<double>::infinity();
    for (double x : v) mx = std::max(mx, x);
    double z = 0.0;
    for (double& x : v) {
        x = std::exp(x - mx);
        z += x;
    }
    for (double& x : v) x /= z;
}

Matrix<double> slice_columns(const Matrix<double>& m, std::size_t begin, std::size_t count) {
    Matrix<double> out(m.rows(), count);
    for (std::size_t r = 0; r < m.rows(); ++r)
        for (std::size_t c = 0; c < count; ++c) out(r, c) = m(r, begin + c);
    return out;
}

/// Bilinear read of one (y, x) position, zero outside, returning weight per flat row.
void deform_taps(double y_im, double x_im, GridShape g, std::vector<std::pair<std::size_t, double>>& taps) {
    taps.clear();
    const double H = static_cast<double>(g.height), W = static_cast<double>(g.width);
    if (!(y_im > -1.0 && x_im > -1.0 && y_im < H && x_im < W)) return;
    const double y0 = std::floor(y_im), x0 = std::floor(x_im);
    for (double yy : {y0, y0 + 1.0})
        for (double xx : {x0, x0 + 1.0}) {
            if (yy < 0 || xx < 0 || yy > H - 1 || xx > W - 1) continue;
            const double w = (1.0 - std::abs(y_im - yy)) * (1.0 - std::abs(x_im - xx));
            taps.emplace_back(static_cast<std::size_t>(yy) * g.width + static_cast<std::size_t>(xx), w);
        }
}

}  // namespace

Matrix<double> oracle_affine(const Matrix<double>& x, const Affine& a) {
    Matrix<double> y(x.rows(), a.w.cols());
    for (std::size_t r = 0; r < x.rows(); ++r)
        for (std::size_t o = 0; o < a.w.cols(); ++o) {
            double acc = a.b.empty() ? 0.0 : a.b(0, o);
            for (std::size_t i = 0; i < x.cols(); ++i) acc += x(r, i) * a.w(i, o);
            y(r, o) = acc;
        }
    return y;
}

Matrix<double> oracle_layer_norm(const Matrix<double>& x, const Norm& n) {
    Matrix<double> y(x.rows(), x.cols());
    const double d = static_cast<double>(x.cols());
    for (std::size_t r = 0; r < x.rows(); ++r) {
        double mean = 0.0;
        for (std::size_t c = 0; c < x.cols(); ++c) mean += x(r, c);
        mean /= d;
        double var = 0.0;
        for (std::size_t c = 0; c < x.cols(); ++c) var += (x(r, c) - mean) * (x(r, c) - mean);
        var /= d;
        for (std::size_t c = 0; c < x.cols(); ++c) {
            y(r, c) = (x(r, c) - mean) / std::sqrt(var + n.eps) * n.gamma(0, c) + n.beta(0, c);
        }
    }
    return y;
}

Matrix<double> oracle_attention(const Matrix<double>& queries, const Matrix<double>& keys,
                                const Matrix<double>& values, double scale, const std::vector<bool>* key_mask) {
    if (queries.cols() != keys.cols() || keys.rows() != values.rows()) throw ShapeError("oracle_attention: shapes");
    Matrix<double> out(queries.rows(), values.cols());
    for (std::size_t i = 0; i < queries.rows(); ++i) {
        std::vector<double> p(keys.rows());
        for (std::size_t j = 0; j < keys.rows(); ++j) {
            double s = 0.0;
            for (std::size_t c = 0; c < queries.cols(); ++c) s += queries(i, c) * keys(j, c);
            p[j] = scale * s + (key_mask && !(*key_mask)[j] ? -1e9 : 0.0);
        }
        softmax(p);
        for (std::size_t j = 0; j < keys.rows(); ++j)
            for (std::size_t c = 0; c < values.cols(); ++c) out(i, c) += p[j] * values(j, c);
    }
    return out;
}

Matrix<double> oracle_multihead(const Matrix<double>& queries, const Matrix<double>& keys_values, const Attention& a,
                                const std::vector<bool>* key_mask) {
    const auto q = oracle_affine(queries, a.wq);
    const auto k = oracle_affine(keys_values, a.wk);
    const auto v = oracle_affine(keys_values, a.wv);
    const std::size_t dh = q.cols() / a.heads;
    Matrix<double> merged(queries.rows(), q.cols());
    for (std::size_t h = 0; h < a.heads; ++h) {
        const auto o = oracle_attention(slice_columns(q, h * dh, dh), slice_columns(k, h * dh, dh),
                                        slice_columns(v, h * dh, dh), 1.0 / std::sqrt(static_cast<double>(dh)),
                                        key_mask);
        for (std::size_t r = 0; r < o.rows(); ++r)
            for (std::size_t c = 0; c < dh; ++c) merged(r, h * dh + c) = o(r, c);
    }
    return oracle_affine(merged, a.wo);
}

Matrix<double> oracle_resize(const Matrix<double>& map, GridShape from, GridShape to) {
    auto source = [](std::size_t i, std::size_t in, std::size_t out) {
        double s = (static_cast<double>(i) + 0.5) * static_cast<double>(in) / static_cast<double>(out) - 0.5;
        return std::max(s, 0.0);
    };
    Matrix<double> out(to.cells(), map.cols());
    for (std::size_t oy = 0; oy < to.height; ++oy)
        for (std::size_t ox = 0; ox < to.width; ++ox) {
            const double sy = source(oy, from.height, to.height), sx = source(ox, from.width, to.width);
            const auto y0 = static_cast<std::size_t>(sy), x0 = static_cast<std::size_t>(sx);
            const std::size_t y1 = std::min(y0 + 1, from.height - 1), x1 = std::min(x0 + 1, from.width - 1);
            const double fy = sy - static_cast<double>(y0), fx = sx - static_cast<double>(x0);
            for (std::size_t c = 0; c < map.cols(); ++c) {
                const double top = (1 - fx) * map(y0 * from.width + x0, c) + fx * map(y0 * from.width + x1, c);
                const double bot = (1 - fx) * map(y1 * from.width + x0, c) + fx * map(y1 * from.width + x1, c);
                out(oy * to.width + ox, c) = (1 - fy) * top + fy * bot;
            }
        }
    return out;
}

FuseResult oracle_fuse_stage(const Matrix<double>& level, const Matrix<double>& language,
                             const std::vector<bool>& pad_mask, const StageWeights& w, bool mask_padding) {
    const std::size_t n = level.rows(), len = language.rows(), dl = language.cols();
    const auto vq = oracle_affine(level, w.wq);  // n x len
    auto lk = oracle_affine(language, w.wk);      // len x dl
    auto lv = oracle_affine(language, w.wv);
    if (mask_padding) {
        for (std::size_t j = 0; j < len; ++j)
            if (!pad_mask[j])
                for (std::size_t c = 0; c < dl; ++c) lk(j, c) = lv(j, c) = 0.0;
    }
    FuseResult r{Matrix<double>(n, level.cols()), Matrix<double>(n, dl)};
    Matrix<double> mixed(n, len);
    const double scale = 1.0 / std::sqrt(static_cast<double>(len));
    for (std::size_t p = 0; p < n; ++p) {
        std::vector<double> row(dl);
        for (std::size_t c = 0; c < dl; ++c) {
            double s = 0.0;
            for (std::size_t j = 0; j < len; ++j) s += vq(p, j) * lk(j, c);
            r.scores(p, c) = s;
            row[c] = s * scale;
        }
        softmax(row);
        for (std::size_t j = 0; j < len; ++j) {
            double s = 0.0;
            for (std::size_t c = 0; c < dl; ++c) s += row[c] * lv(j, c);
            mixed(p, j) = s;
        }
    }
    auto gated = oracle_affine(mixed, w.gate);
    for (auto& v : gated.data()) v = gelu(v);
    const auto weights = oracle_affine(gated, w.reweight);
    for (std::size_t p = 0; p < n; ++p)
        for (std::size_t c = 0; c < level.cols(); ++c) r.fused(p, c) = weights(p, c) * level(p, c);
    return r;
}

Matrix<double> oracle_deficit_map(const std::array<Matrix<double>, 4>& scores, const std::array<GridShape, 4>& grids,
                                  std::size_t length) {
    const GridShape coarse = grids[3];
    std::array<std::vector<double>, 4> sal;
    for (std::size_t i = 0; i < 4; ++i) {
        const auto small = oracle_resize(scores[i], grids[i], coarse);
        sal[i].assign(coarse.cells(), 0.0);
        for (std::size_t d = 0; d < small.cols(); ++d) {
            std::vector<double> col(coarse.cells());
            for (std::size_t c = 0; c < coarse.cells(); ++c) col[c] = small(c, d) / std::sqrt(static_cast<double>(length));
            softmax(col);
            for (std::size_t c = 0; c < coarse.cells(); ++c) sal[i][c] += col[c] / static_cast<double>(small.cols());
        }
    }
    Matrix<double> m(coarse.height, coarse.width);
    for (std::size_t y = 0; y < coarse.height; ++y)
        for (std::size_t x = 0; x < coarse.width; ++x) {
            const std::size_t c = y * coarse.width + x;
            m(y, x) = std::abs(sal[0][c] - sal[1][c]) + std::abs(sal[1][c] - sal[2][c]) + std::abs(sal[2][c] - sal[3][c]);
        }
    return m;
}

std::vector<std::pair<std::size_t, std::size_t>> oracle_topk(const Matrix<double>& deficit, std::size_t k) {
    std::vector<std::pair<double, std::size_t>> all;
    for (std::size_t y = 0; y < deficit.rows(); ++y)
        for (std::size_t x = 0; x < deficit.cols(); ++x) all.emplace_back(-deficit(y, x), y * deficit.cols() + x);
    std::sort(all.begin(), all.end());
    std::vector<std::pair<std::size_t, std::size_t>> out;
    for (std::size_t i = 0; i < k && i < all.size(); ++i) {
        out.emplace_back(all[i].second / deficit.cols(), all[i].second % deficit.cols());
    }
    return out;
}

std::array<Matrix<double>, 4> oracle_compensate(const std::array<Matrix<double>, 4>& fused,
                                                const std::array<GridShape, 4>& grids,
                                                const std::vector<std::pair<std::size_t, std::size_t>>& cells,
                                                const CompWeights& w) {
    std::array<Matrix<double>, 4> out = fused;
    const GridShape coarse = grids[3];
    std::array<Matrix<double>, 4> small;
    for (std::size_t i = 0; i < 4; ++i) small[i] = oracle_resize(fused[i], grids[i], coarse);

    for (const auto& [cy, cx] : cells) {
        const std::size_t c = cy * coarse.width + cx;
        std::array<Matrix<double>, 4> picked;
        Matrix<double> seq(4, w.forward[0].w.cols());
        for (std::size_t i = 0; i < 4; ++i) {
            picked[i] = Matrix<double>(1, fused[i].cols());
            for (std::size_t ch = 0; ch < fused[i].cols(); ++ch) picked[i](0, ch) = small[i](c, ch);
            const auto t = oracle_affine(picked[i], w.forward[i]);
            for (std::size_t d = 0; d < t.cols(); ++d) seq(i, d) = t(0, d);
        }
        const auto normed = oracle_layer_norm(seq, w.norm);
        auto refined = oracle_multihead(normed, normed, w.msa);
        for (std::size_t i = 0; i < refined.size(); ++i) refined[i] += seq[i];
        for (std::size_t i = 0; i < 4; ++i) {
            Matrix<double> token(1, refined.cols());
            for (std::size_t d = 0; d < refined.cols(); ++d) token(0, d) = refined(i, d);
            const auto back = oracle_affine(token, w.inverse[i]);
            const std::size_t f = grids[i].height / coarse.height;
            for (std::size_t y = cy * f; y < (cy + 1) * f; ++y)
                for (std::size_t x = cx * f; x < (cx + 1) * f; ++x)
                    for (std::size_t ch = 0; ch < fused[i].cols(); ++ch) {
                        out[i](y * grids[i].width + x, ch) += back(0, ch) - picked[i](0, ch);
                    }
        }
    }
    return out;
}

Matrix<double> oracle_ms_deform_attn(const Matrix<double>& queries, const Matrix<double>& value_input,
                                     const std::vector<GridShape>& grids, const DeformWeights& w) {
    const auto offsets = oracle_affine(queries, w.offsets);
    const auto logits = oracle_affine(queries, w.weights);
    const auto value = oracle_affine(value_input, w.value);
    const std::size_t dh = value.cols() / w.heads;
    std::vector<std::size_t> starts;
    std::size_t acc = 0;
    for (const auto& g : grids) {
        starts.push_back(acc);
        acc += g.cells();
    }

    Matrix<double> sampled(queries.rows(), value.cols());
    std::vector<std::pair<std::size_t, double>> taps;
    std::size_t q = 0;
    for (std::size_t own = 0; own < grids.size(); ++own)
        for (std::size_t y = 0; y < grids[own].height; ++y)
            for (std::size_t x = 0; x < grids[own].width; ++x, ++q) {
                const double rx = (static_cast<double>(x) + 0.5) / static_cast<double>(grids[own].width);
                const double ry = (static_cast<double>(y) + 0.5) / static_cast<double>(grids[own].height);
                for (std::size_t h = 0; h < w.heads; ++h) {
                    std::vector<double> a(w.levels * w.points);
                    for (std::size_t s = 0; s < a.size(); ++s) a[s] = logits(q, h * w.levels * w.points + s);
                    softmax(a);
                    for (std::size_t l = 0; l < w.levels; ++l)
                        for (std::size_t p = 0; p < w.points; ++p) {
                            const std::size_t s = (h * w.levels + l) * w.points + p;
                            const double lx = rx + offsets(q, 2 * s) / static_cast<double>(grids[l].width);
                            const double ly = ry + offsets(q, 2 * s + 1) / static_cast<double>(grids[l].height);
                            deform_taps(ly * static_cast<double>(grids[l].height) - 0.5,
                                        lx * static_cast<double>(grids[l].width) - 0.5, grids[l], taps);
                            for (const auto& [cell, tw] : taps)
                                for (std::size_t c = 0; c < dh; ++c) {
                                    sampled(q, h * dh + c) +=
                                        a[l * w.points + p] * tw * value(starts[l] + cell, h * dh + c);
                                }
                        }
                }
            }
    return oracle_affine(sampled, w.output);
}

double oracle_ce(const Matrix<double>& logits, const Mask& target) {
    if (logits.rows() != target.rows() || logits.cols() != target.cols()) throw ShapeError("oracle_ce: shapes");
    double total = 0.0;
    for (std::size_t r = 0; r < logits.rows(); ++r)
        for (std::size_t c = 0; c < logits.cols(); ++c) {
            const double z = logits(r, c);
            const double y = target(r, c) ? 1.0 : 0.0;
            // -[y log s + (1-y) log(1-s)] with log s = -log1p(e^-z), log(1-s) = -z - log1p(e^-z)
            const double softplus_neg = z >= 0 ? std::log1p(std::exp(-z)) : -z + std::log1p(std::exp(z));
            total += y * softplus_neg + (1.0 - y) * (z + softplus_neg);
        }
    return total / static_cast<double>(logits.size());
}

double oracle_dice(const Matrix<double>& logits, const Mask& target, double eps) {
    if (logits.rows() != target.rows() || logits.cols() != target.cols()) throw ShapeError("oracle_dice: shapes");
    double inter = 0.0, ps = 0.0, ys = 0.0;
    for (std::size_t r = 0; r < logits.rows(); ++r)
        for (std::size_t c = 0; c < logits.cols(); ++c) {
            const double p = sigmoid(logits(r, c));
            const double y = target(r, c) ? 1.0 : 0.0;
            inter += p * y;
            ps += p;
            ys += y;
        }
    return 1.0 - (2.0 * inter + eps) / (ps + ys + eps);
}

std::pair<std::uint64_t, std::uint64_t> oracle_iou(const Mask& pred, const Mask& gt) {
    if (pred.rows() != gt.rows() || pred.cols() != gt.cols()) throw ShapeError("oracle_iou: shapes");
    std::uint64_t i = 0, u = 0;
    for (std::size_t r = 0; r < pred.rows(); ++r)
        for (std::size_t c = 0; c < pred.cols(); ++c) {
            const bool a = pred(r, c) != 0, b = gt(r, c) != 0;
            if (a && b) ++i;
            if (a || b) ++u;
        }
    return {i, u};
}

}  // namespace crobim::verify

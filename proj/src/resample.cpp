#include "crobim/resample.hpp"

#include <cmath>

namespace crobim {

namespace {

struct Axis {
    std::size_t lo, hi;
    double frac;
};

std::vector<Axis> bilinear_axis(std::size_t in, std::size_t out) {
    std::vector<Axis> axis(out);
    const double scale = static_cast<double>(in) / static_cast<double>(out);
    for (std::size_t d = 0; d < out; ++d) {
        double src = (static_cast<double>(d) + 0.5) * scale - 0.5;
        if (src < 0.0) src = 0.0;
        auto lo = static_cast<std::size_t>(src);
        if (lo > in - 1) lo = in - 1;
        const std::size_t hi = lo + (lo < in - 1 ? 1 : 0);
        axis[d] = {lo, hi, src - static_cast<double>(lo)};
    }
    return axis;
}

}  // namespace

ag::SparseRowMap bilinear_resize_map(GridShape from, GridShape to) {
    if (from.cells() == 0 || to.cells() == 0) throw ShapeError("bilinear_resize_map: empty grid");
    const auto ys = bilinear_axis(from.height, to.height);
    const auto xs = bilinear_axis(from.width, to.width);
    ag::SparseRowMap map(to.cells(), from.cells());
    std::vector<std::pair<std::size_t, double>> terms;
    for (const auto& y : ys) {
        for (const auto& x : xs) {
            terms.clear();
            const double wy[2] = {1.0 - y.frac, y.frac};
            const double wx[2] = {1.0 - x.frac, x.frac};
            const std::size_t yy[2] = {y.lo, y.hi};
            const std::size_t xx[2] = {x.lo, x.hi};
            for (int a = 0; a < 2; ++a)
                for (int b = 0; b < 2; ++b) {
                    const double w = wy[a] * wx[b];
                    if (w != 0.0) terms.emplace_back(yy[a] * from.width + xx[b], w);
                }
            map.push_row(terms);
        }
    }
    return map;
}

ag::SparseRowMap adaptive_avg_pool_map(GridShape from, std::size_t s) {
    if (s == 0) throw ArgumentError("adaptive_avg_pool_map: output size must be >= 1");
    ag::SparseRowMap map(s * s, from.cells());
    std::vector<std::pair<std::size_t, double>> terms;
    auto start = [](std::size_t i, std::size_t in, std::size_t out) { return (i * in) / out; };
    auto end = [](std::size_t i, std::size_t in, std::size_t out) { return ((i + 1) * in + out - 1) / out; };
    for (std::size_t i = 0; i < s; ++i) {
        const std::size_t y0 = start(i, from.height, s), y1 = end(i, from.height, s);
        for (std::size_t j = 0; j < s; ++j) {
            const std::size_t x0 = start(j, from.width, s), x1 = end(j, from.width, s);
            const double w = 1.0 / static_cast<double>((y1 - y0) * (x1 - x0));
            terms.clear();
            for (std::size_t y = y0; y < y1; ++y)
                for (std::size_t x = x0; x < x1; ++x) terms.emplace_back(y * from.width + x, w);
            map.push_row(terms);
        }
    }
    return map;
}

ag::SparseRowMap gather_rows_map(std::size_t in_rows, std::span<const std::size_t> rows) {
    ag::SparseRowMap map(rows.size(), in_rows);
    for (std::size_t r : rows) map.push_row({{r, 1.0}});
    return map;
}

}  // namespace crobim

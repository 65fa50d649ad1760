#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "crobim/autograd.hpp"

namespace crobim {

/// Bilinear resampling between grids with half-pixel centres
/// (the align_corners=false convention): src = (dst + 0.5) * in/out - 0.5,
/// clamped at the low edge, upper neighbour clamped to the last cell.
ag::SparseRowMap bilinear_resize_map(GridShape from, GridShape to);

/// Adaptive average pooling to an s x s grid. Cell (i, j) averages input rows
/// [floor(i*H/s), ceil((i+1)*H/s)) x [floor(j*W/s), ceil((j+1)*W/s)).
ag::SparseRowMap adaptive_avg_pool_map(GridShape from, std::size_t s);

/// Selects the given input rows in order.
ag::SparseRowMap gather_rows_map(std::size_t in_rows, std::span<const std::size_t> rows);

/// Applies a row map to a plain matrix (no graph).
template <typename T>
Matrix<T> apply_row_map(const ag::SparseRowMap& map, const Matrix<T>& x) {
    if (map.in_rows != x.rows()) throw ShapeError("apply_row_map: input rows mismatch");
    Matrix<T> out(map.out_rows, x.cols());
    for (std::size_t r = 0; r < map.out_rows; ++r) {
        auto o = out.row(r);
        for (std::size_t t = map.offsets[r]; t < map.offsets[r + 1]; ++t) {
            const T w = static_cast<T>(map.weights[t]);
            const auto in = x.row(map.indices[t]);
            for (std::size_t j = 0; j < o.size(); ++j) o[j] += w * in[j];
        }
    }
    return out;
}

}  // namespace crobim

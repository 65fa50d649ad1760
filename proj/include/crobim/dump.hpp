#pragma once

// Attention/intermediate dumps: raw float32 arrays, a JSON index and heat maps.

#include <filesystem>

#include "crobim/dataio.hpp"

namespace crobim::dump {

namespace fs = std::filesystem;

/// "CRBA", u32 rows, u32 cols, then rows*cols little-endian float32, row-major.
void write_array(const fs::path& path, const Matrix<double>& m);
Matrix<double> read_array(const fs::path& path);

/// H x W values min-max normalised through a blue-to-red ramp, each cell drawn
/// as a `cell` x `cell` block.
dataio::PngImage render_heatmap(const Matrix<double>& map, std::size_t cell);

/// Spatial view of a trace entry: the entry itself when it is H x W, the column
/// mean when its rows enumerate the grid cells; empty when it has no grid.
Matrix<double> spatial_view(const TraceEntry& entry);

/// Writes one .f32 file per entry, index.json, and a heat map PNG for every
/// entry with a spatial view.
void dump_trace(const fs::path& dir, const Trace& trace, std::size_t target_pixels = 256);

/// Image with the mask blended in red.
dataio::PngImage overlay(const Image& image, const Mask& mask);

}  // namespace crobim::dump

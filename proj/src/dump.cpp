#include "crobim/dump.hpp"

#include <algorithm>
#include <bit>
#include <cctype>
#include <cstring>
#include <fstream>

#include <json.hpp>

namespace crobim::dump {

namespace {

constexpr char kMagic[4] = {'C', 'R', 'B', 'A'};

void put_u32(std::ostream& os, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) os.put(static_cast<char>((v >> (8 * i)) & 0xFF));
}

std::uint32_t get_u32(std::istream& is) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
        const int c = is.get();
        if (c == EOF) throw LoadError("array file truncated");
        v |= static_cast<std::uint32_t>(static_cast<unsigned char>(c)) << (8 * i);
    }
    return v;
}

std::string file_stem(const std::string& name) {
    std::string s = name;
    for (char& c : s)
        if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '.' || c == '_' || c == '-')) c = '_';
    return s;
}

}  // namespace

void write_array(const fs::path& path, const Matrix<double>& m) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    os.write(kMagic, sizeof kMagic);
    put_u32(os, static_cast<std::uint32_t>(m.rows()));
    put_u32(os, static_cast<std::uint32_t>(m.cols()));
    for (double v : m.storage()) put_u32(os, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
}

Matrix<double> read_array(const fs::path& path) {
    std::ifstream is(path, std::ios::binary);
    char magic[4];
    if (!is || !is.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) {
        throw LoadError(path.string() + " is not an array dump");
    }
    const auto rows = get_u32(is), cols = get_u32(is);
    Matrix<double> m(rows, cols);
    for (auto& v : m.data()) v = std::bit_cast<float>(get_u32(is));
    return m;
}

dataio::PngImage render_heatmap(const Matrix<double>& map, std::size_t cell) {
    cell = std::max<std::size_t>(cell, 1);
    dataio::PngImage png{map.cols() * cell, map.rows() * cell, 3, {}};
    png.pixels.resize(png.width * png.height * 3);
    double lo = 0.0, hi = 0.0;
    if (!map.empty()) {
        const auto [mn, mx] = std::minmax_element(map.storage().begin(), map.storage().end());
        lo = *mn;
        hi = *mx;
    }
    const double span = hi > lo ? hi - lo : 1.0;
    for (std::size_t y = 0; y < png.height; ++y)
        for (std::size_t x = 0; x < png.width; ++x) {
            const double t = std::clamp((map(y / cell, x / cell) - lo) / span, 0.0, 1.0);
            auto* px = &png.pixels[(y * png.width + x) * 3];
            px[0] = static_cast<std::uint8_t>(255.0 * std::clamp(1.5 - std::abs(4.0 * t - 3.0), 0.0, 1.0));
            px[1] = static_cast<std::uint8_t>(255.0 * std::clamp(1.5 - std::abs(4.0 * t - 2.0), 0.0, 1.0));
            px[2] = static_cast<std::uint8_t>(255.0 * std::clamp(1.5 - std::abs(4.0 * t - 1.0), 0.0, 1.0));
        }
    return png;
}

Matrix<double> spatial_view(const TraceEntry& entry) {
    if (!entry.grid) return {};
    const auto g = *entry.grid;
    if (entry.values.rows() == g.height && entry.values.cols() == g.width) return entry.values;
    if (entry.values.rows() != g.cells() || entry.values.cols() == 0) return {};
    Matrix<double> map(g.height, g.width);
    for (std::size_t c = 0; c < g.cells(); ++c) {
        double s = 0.0;
        for (double v : entry.values.row(c)) s += v;
        map[c] = s / static_cast<double>(entry.values.cols());
    }
    return map;
}

void dump_trace(const fs::path& dir, const Trace& trace, std::size_t target_pixels) {
    fs::create_directories(dir);
    nlohmann::ordered_json index = nlohmann::ordered_json::array();
    for (const auto& e : trace.entries()) {
        const auto stem = file_stem(e.name);
        write_array(dir / (stem + ".f32"), e.values);
        nlohmann::ordered_json item;
        item["name"] = e.name;
        item["file"] = stem + ".f32";
        item["rows"] = e.values.rows();
        item["cols"] = e.values.cols();
        if (e.grid) item["grid"] = {e.grid->height, e.grid->width};
        const auto view = spatial_view(e);
        if (!view.empty()) {
            const std::size_t cell = std::max<std::size_t>(1, target_pixels / std::max(view.rows(), view.cols()));
            dataio::write_png(dir / (stem + ".png"), render_heatmap(view, cell));
            item["heatmap"] = stem + ".png";
        }
        index.push_back(item);
    }
    std::ofstream(dir / "index.json") << index.dump(2) << "\n";
}

dataio::PngImage overlay(const Image& image, const Mask& mask) {
    if (mask.rows() != image.grid.height || mask.cols() != image.grid.width) {
        throw ShapeError("overlay: mask " + shape_string(mask) + " vs image " + to_string(image.grid));
    }
    auto png = dataio::png_from_image(image);
    for (std::size_t i = 0; i < mask.size(); ++i) {
        if (!mask[i]) continue;
        auto* px = &png.pixels[i * 3];
        px[0] = static_cast<std::uint8_t>((px[0] + 255) / 2);
        px[1] = static_cast<std::uint8_t>(px[1] / 2);
        px[2] = static_cast<std::uint8_t>(px[2] / 2);
    }
    return png;
}

}  // namespace crobim::dump

#include "crobim/dataio.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <numbers>
#include <set>
#include <sstream>

#include "crobim/resample.hpp"

#include <json.hpp>

namespace crobim::dataio {

// -- PNG --------------------------------------------------------------------

PngImage read_png(const fs::path& path, std::size_t channels) {
    if (channels != 1 && channels != 3) throw ArgumentError("read_png: channels must be 1 or 3");
    png_image img{};
    img.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&img, path.c_str())) {
        throw LoadError("cannot read PNG " + path.string() + ": " + img.message);
    }
    img.format = channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
    PngImage out;
    out.width = img.width;
    out.height = img.height;
    out.channels = channels;
    out.pixels.resize(PNG_IMAGE_SIZE(img));
    if (!png_image_finish_read(&img, nullptr, out.pixels.data(), 0, nullptr)) {
        png_image_free(&img);
        throw LoadError("cannot decode PNG " + path.string() + ": " + img.message);
    }
    return out;
}

void write_png(const fs::path& path, const PngImage& image) {
    if (image.channels != 1 && image.channels != 3) throw ArgumentError("write_png: channels must be 1 or 3");
    if (image.pixels.size() != image.width * image.height * image.channels) {
        throw ShapeError("write_png: pixel buffer does not match " + std::to_string(image.width) + "x" +
                         std::to_string(image.height));
    }
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    png_image img{};
    img.version = PNG_IMAGE_VERSION;
    img.width = static_cast<png_uint_32>(image.width);
    img.height = static_cast<png_uint_32>(image.height);
    img.format = image.channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
    if (!png_image_write_to_file(&img, path.c_str(), 0, image.pixels.data(), 0, nullptr)) {
        throw std::runtime_error("cannot write PNG " + path.string() + ": " + img.message);
    }
}

Image image_from_png(const PngImage& png) {
    if (png.channels != 3) throw ArgumentError("image_from_png: RGB data required");
    Image img(png.height, png.width);
    for (std::size_t i = 0; i < png.pixels.size(); ++i) img.rgb[i] = static_cast<float>(png.pixels[i]) / 255.0f;
    return img;
}

PngImage png_from_image(const Image& image) {
    PngImage png{image.grid.width, image.grid.height, 3, std::vector<std::uint8_t>(image.rgb.size())};
    for (std::size_t i = 0; i < image.rgb.size(); ++i) {
        const float v = std::clamp(image.rgb[i], 0.0f, 1.0f);
        png.pixels[i] = static_cast<std::uint8_t>(std::lround(v * 255.0f));
    }
    return png;
}

Mask mask_from_png(const PngImage& png, bool* non_binary) {
    if (png.channels != 1) throw ArgumentError("mask_from_png: single-channel data required");
    Mask m(png.height, png.width);
    bool odd = false;
    for (std::size_t i = 0; i < png.pixels.size(); ++i) {
        const auto v = png.pixels[i];
        odd |= v != 0 && v != 1 && v != 255;
        m[i] = v != 0;
    }
    if (non_binary) *non_binary = odd;
    return m;
}

PngImage png_from_mask(const Mask& mask) {
    PngImage png{mask.cols(), mask.rows(), 1, std::vector<std::uint8_t>(mask.size())};
    for (std::size_t i = 0; i < mask.size(); ++i) png.pixels[i] = mask[i] ? 255 : 0;
    return png;
}

Image resize_image(const Image& image, GridShape to) {
    Image out(to.height, to.width);
    out.rgb = apply_row_map(bilinear_resize_map(image.grid, to), image.rgb);
    return out;
}

Mask resize_mask(const Mask& mask, GridShape to) {
    Mask out(to.height, to.width);
    for (std::size_t y = 0; y < to.height; ++y) {
        const std::size_t sy = std::min(mask.rows() - 1, (2 * y + 1) * mask.rows() / (2 * to.height));
        for (std::size_t x = 0; x < to.width; ++x) {
            const std::size_t sx = std::min(mask.cols() - 1, (2 * x + 1) * mask.cols() / (2 * to.width));
            out(y, x) = mask(sy, sx);
        }
    }
    return out;
}

Triplet fit_triplet(const Triplet& t, std::size_t size) {
    Triplet out = t;
    const GridShape target{size, size};
    if (t.image.grid.height != size || t.image.grid.width != size) out.image = resize_image(t.image, target);
    if (t.mask.rows() != size || t.mask.cols() != size) out.mask = resize_mask(t.mask, target);
    return out;
}

// -- manifest ---------------------------------------------------------------

namespace {

const std::set<std::string> kSplits{"train", "val", "test"};

std::vector<std::string> split_tabs(const std::string& line) {
    std::vector<std::string> fields;
    std::size_t start = 0;
    while (true) {
        const auto tab = line.find('\t', start);
        fields.push_back(line.substr(start, tab - start));
        if (tab == std::string::npos) break;
        start = tab + 1;
    }
    return fields;
}

}  // namespace

std::vector<ManifestRecord> read_manifest(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw LoadError("cannot open manifest " + path.string());
    std::vector<ManifestRecord> records;
    std::set<std::string> ids;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line.front() == '#') continue;
        const auto index = static_cast<std::ptrdiff_t>(records.size());
        auto f = split_tabs(line);
        if (f.size() != 6) {
            throw LoadError("expected 6 tab-separated fields, found " + std::to_string(f.size()), index);
        }
        ManifestRecord r{f[0], f[1], f[2], f[3], f[4], f[5]};
        if (r.id.empty()) throw LoadError("empty record id", index);
        if (!kSplits.count(r.split)) throw LoadError("unknown split '" + r.split + "'", index);
        if (!ids.insert(r.id).second) throw LoadError("duplicate record id '" + r.id + "'", index);
        records.push_back(std::move(r));
    }
    return records;
}

void write_manifest(const fs::path& path, const std::vector<ManifestRecord>& records) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write manifest " + path.string());
    for (const auto& r : records) {
        for (const auto* field : {&r.id, &r.image, &r.mask, &r.split, &r.category, &r.expression}) {
            if (field->find_first_of("\t\n") != std::string::npos) {
                throw ArgumentError("write_manifest: field of record '" + r.id + "' contains a tab or newline");
            }
        }
        out << r.id << '\t' << r.image << '\t' << r.mask << '\t' << r.split << '\t' << r.category << '\t'
            << r.expression << '\n';
    }
}

std::vector<Triplet> load_manifest(const fs::path& path, const std::string& split, const Vocabulary& vocab,
                                   std::vector<std::string>* warnings) {
    if (!split.empty() && !kSplits.count(split)) throw ArgumentError("load_manifest: unknown split '" + split + "'");
    const auto records = read_manifest(path);
    const auto root = path.parent_path();
    std::vector<Triplet> out;
    for (std::size_t i = 0; i < records.size(); ++i) {
        const auto& r = records[i];
        if (!split.empty() && r.split != split) continue;
        const auto index = static_cast<std::ptrdiff_t>(i);
        Triplet t;
        try {
            t.image = image_from_png(read_png(root / r.image, 3));
            bool non_binary = false;
            t.mask = mask_from_png(read_png(root / r.mask, 1), &non_binary);
            if (non_binary) {
                const std::string msg = "record " + std::to_string(i) + " (" + r.id +
                                        "): mask has non-binary values, binarised at nonzero";
                if (warnings) warnings->push_back(msg);
                else std::cerr << "warning: " << msg << "\n";
            }
        } catch (const LoadError& e) {
            throw LoadError(std::string(e.what()) + " (id " + r.id + ")", index);
        }
        if (t.mask.rows() != t.image.grid.height || t.mask.cols() != t.image.grid.width) {
            throw LoadError("mask size differs from image size (id " + r.id + ")", index);
        }
        t.expression = r.expression;
        t.tokens = vocab.encode(r.expression);
        t.category = r.category;
        t.source_id = r.id;
        out.push_back(std::move(t));
    }
    return out;
}

void save_dataset(const fs::path& dir, const std::vector<Triplet>& triplets, const std::string& split) {
    std::vector<ManifestRecord> records;
    for (std::size_t i = 0; i < triplets.size(); ++i) {
        const auto& t = triplets[i];
        ManifestRecord r;
        r.id = t.source_id.empty() ? "sample" + std::to_string(i) : t.source_id;
        r.image = "images/" + r.id + ".png";
        r.mask = "masks/" + r.id + ".png";
        r.split = split;
        r.category = t.category;
        r.expression = t.expression;
        write_png(dir / r.image, png_from_image(t.image));
        write_png(dir / r.mask, png_from_mask(t.mask));
        records.push_back(std::move(r));
    }
    write_manifest(dir / "manifest.tsv", records);
}

// -- synthetic data ---------------------------------------------------------

namespace {

struct Colour {
    const char* name;
    float r, g, b;
};

constexpr std::array<Colour, 8> kColours{{
    {"red", 0.85f, 0.15f, 0.15f},
    {"green", 0.20f, 0.75f, 0.25f},
    {"blue", 0.20f, 0.30f, 0.90f},
    {"yellow", 0.90f, 0.85f, 0.20f},
    {"purple", 0.60f, 0.25f, 0.75f},
    {"orange", 0.95f, 0.55f, 0.10f},
    {"white", 0.97f, 0.97f, 0.97f},
    {"cyan", 0.20f, 0.85f, 0.85f},
}};
constexpr std::array<const char*, 3> kShapes{"rectangular", "round", "triangular"};
constexpr std::array<const char*, 6> kCategories{"building", "tank", "field", "pool", "court", "ship"};
constexpr std::array<const char*, 3> kSizes{"small", "medium", "large"};
constexpr std::array<std::array<double, 2>, 3> kSizeRadius{{{0.07, 0.10}, {0.11, 0.15}, {0.16, 0.21}}};

struct Shape {
    std::size_t colour = 0;
    std::size_t kind = 0;
    std::size_t category = 0;
    std::size_t size_class = 0;
    double cx = 0, cy = 0, r = 0, aspect = 1;
    std::size_t area = 0;

    bool contains(double px, double py) const {
        const double dx = px - cx, dy = py - cy;
        switch (kind) {
            case 0: return std::abs(dx) <= r && std::abs(dy) <= r * aspect;
            case 1: return dx * dx + dy * dy <= r * r;
            default: {
                if (dy < -r || dy > r) return false;
                return std::abs(dx) <= (dy + r) / 2.0;
            }
        }
    }
    double half_height() const { return kind == 0 ? r * aspect : r; }
};

std::string third(double v, double size, const char* low, const char* high) {
    if (v < size / 3.0) return low;
    if (v < 2.0 * size / 3.0) return "center";
    return high;
}

}  // namespace

std::vector<SynthSample> synth_generate(std::size_t n, std::size_t image_size, std::uint64_t seed) {
    if (n == 0) throw ArgumentError("synth_generate: n must be >= 1");
    if (image_size < 16) throw ArgumentError("synth_generate: image_size must be >= 16");
    const double S = static_cast<double>(image_size);
    const auto& vocab = Vocabulary::synthetic();
    Rng rng(seed);
    std::vector<SynthSample> samples;

    for (std::size_t s = 0; s < n; ++s) {
        Image image(image_size, image_size);
        const double base = rng.uniform(0.25, 0.45);
        const double freq = rng.uniform(0.15, 0.45), phase_x = rng.uniform(0, 6.28), phase_y = rng.uniform(0, 6.28);
        for (std::size_t y = 0; y < image_size; ++y)
            for (std::size_t x = 0; x < image_size; ++x) {
                const double tex = 0.04 * std::sin(freq * static_cast<double>(x) + phase_x) *
                                   std::cos(freq * static_cast<double>(y) + phase_y);
                for (std::size_t c = 0; c < 3; ++c) {
                    const double tint = c == 1 ? 0.03 : 0.0;
                    image.rgb(y * image_size + x, c) =
                        static_cast<float>(std::clamp(base + tint + tex + rng.uniform(-0.06, 0.06), 0.0, 1.0));
                }
            }

        std::array<std::size_t, 8> palette{0, 1, 2, 3, 4, 5, 6, 7};
        for (std::size_t i = palette.size() - 1; i > 0; --i) std::swap(palette[i], palette[rng.index(i + 1)]);

        const std::size_t wanted = 1 + rng.index(3);
        std::vector<Shape> shapes;
        for (std::size_t k = 0; k < wanted; ++k) {
            Shape sh;
            sh.colour = palette[k];
            sh.kind = rng.index(kShapes.size());
            sh.category = rng.index(kCategories.size());
            sh.size_class = rng.index(kSizes.size());
            sh.r = S * rng.uniform(kSizeRadius[sh.size_class][0], kSizeRadius[sh.size_class][1]);
            sh.aspect = sh.kind == 0 ? rng.uniform(0.6, 1.0) : 1.0;
            bool placed = false;
            for (int attempt = 0; attempt < 200 && !placed; ++attempt) {
                sh.cx = rng.uniform(sh.r + 1.0, S - sh.r - 1.0);
                sh.cy = rng.uniform(sh.half_height() + 1.0, S - sh.half_height() - 1.0);
                placed = std::all_of(shapes.begin(), shapes.end(), [&](const Shape& o) {
                    return std::abs(sh.cx - o.cx) > sh.r + o.r + 2.0 ||
                           std::abs(sh.cy - o.cy) > sh.half_height() + o.half_height() + 2.0;
                });
            }
            if (placed) shapes.push_back(sh);
        }

        Mask owner(image_size, image_size, 0);  // 1 + shape index, 0 = background
        for (std::size_t y = 0; y < image_size; ++y)
            for (std::size_t x = 0; x < image_size; ++x)
                for (std::size_t k = 0; k < shapes.size(); ++k) {
                    if (!shapes[k].contains(static_cast<double>(x) + 0.5, static_cast<double>(y) + 0.5)) continue;
                    owner(y, x) = static_cast<std::uint8_t>(k + 1);
                    ++shapes[k].area;
                    const auto& col = kColours[shapes[k].colour];
                    const std::array<float, 3> rgb{col.r, col.g, col.b};
                    for (std::size_t c = 0; c < 3; ++c) {
                        image.rgb(y * image_size + x, c) =
                            static_cast<float>(std::clamp(rgb[c] + rng.uniform(-0.04, 0.04), 0.0, 1.0));
                    }
                }

        const std::size_t ref = rng.index(shapes.size());
        const Shape& target = shapes[ref];
        SynthSample sample;
        sample.object_count = shapes.size();
        auto& a = sample.attributes;
        a.category = kCategories[target.category];
        a.color = kColours[target.colour].name;
        a.shape = kShapes[target.kind];
        a.size = kSizes[target.size_class];
        const auto v = third(target.cy, S, "top", "bottom");
        const auto h = third(target.cx, S, "left", "right");
        a.location = v == "center" && h == "center" ? "in the center" : "at the " + v + " " + h;
        if (shapes.size() > 1) {
            const Shape& other = shapes[ref == 0 ? 1 : 0];
            const std::string other_name =
                std::string("the ") + kColours[other.colour].name + " " + kCategories[other.category];
            const double dx = target.cx - other.cx, dy = target.cy - other.cy;
            if (std::abs(dy) >= std::abs(dx)) a.relative_position = (dy < 0 ? "above " : "below ") + other_name;
            else a.relative_position = (dx < 0 ? "left of " : "right of ") + other_name;
            const double ratio = static_cast<double>(target.area) / static_cast<double>(std::max<std::size_t>(other.area, 1));
            a.relative_size = ratio > 1.25 ? "larger than it" : ratio < 0.8 ? "smaller than it" : "similar size to it";
        }
        a.count_context = shapes.size() == 1 ? "the only object"
                          : shapes.size() == 2 ? "one of two objects"
                                               : "one of three objects";

        std::string expr = "the " + a.size + " " + a.color + " " + a.shape + " " + a.category + " " + a.location;
        if (!a.relative_position.empty()) expr += " " + a.relative_position + " which is " + a.relative_size;
        expr += " " + a.count_context;

        auto& t = sample.triplet;
        t.image = std::move(image);
        t.mask = Mask(image_size, image_size);
        for (std::size_t i = 0; i < owner.size(); ++i) t.mask[i] = owner[i] == ref + 1 ? 1 : 0;
        t.expression = expr;
        t.tokens = vocab.encode(expr);
        t.category = a.category;
        t.source_id = "synth" + std::to_string(s);
        samples.push_back(std::move(sample));
    }
    return samples;
}

std::vector<Triplet> synth_triplets(std::size_t n, std::size_t image_size, std::uint64_t seed) {
    std::vector<Triplet> out;
    for (auto& s : synth_generate(n, image_size, seed)) out.push_back(std::move(s.triplet));
    return out;
}

// -- statistics -------------------------------------------------------------

namespace {

std::size_t size_bucket(std::size_t area, std::size_t total) {
    const double share = static_cast<double>(area) / static_cast<double>(total);
    if (share < 0.01) return 0;
    if (share < 0.05) return 1;
    if (share < 0.10) return 2;
    if (share < 0.25) return 3;
    return 4;
}

}  // namespace

DatasetStats dataset_stats(const std::vector<StatsRecord>& records, std::size_t top_k) {
    DatasetStats st;
    st.record_count = records.size();
    std::map<std::string, std::size_t> freq;
    std::size_t total_words = 0;
    for (const auto& r : records) {
        const auto words = split_words(r.expression);
        ++st.length_histogram[words.size()];
        total_words += words.size();
        for (const auto& w : words) ++freq[w];
        ++st.category_counts[r.category];
        if (r.mask_area && r.image_area && *r.image_area > 0) {
            ++st.size_histogram[kSizeBuckets[size_bucket(*r.mask_area, *r.image_area)]];
        }
    }
    st.average_length = records.empty() ? 0.0 : static_cast<double>(total_words) / static_cast<double>(records.size());
    st.vocabulary_size = freq.size();
    st.top_words.assign(freq.begin(), freq.end());
    std::stable_sort(st.top_words.begin(), st.top_words.end(),
                     [](const auto& a, const auto& b) { return a.second > b.second; });
    if (st.top_words.size() > top_k) st.top_words.resize(top_k);
    return st;
}

std::vector<StatsRecord> stats_records(const std::vector<Triplet>& triplets) {
    std::vector<StatsRecord> out;
    for (const auto& t : triplets) {
        std::size_t area = 0;
        for (auto v : t.mask.storage()) area += v != 0;
        out.push_back({t.expression, t.category, area, t.mask.size()});
    }
    return out;
}

std::vector<StatsRecord> stats_records(const fs::path& manifest, const std::string& split) {
    const auto base = manifest.parent_path();
    std::vector<StatsRecord> out;
    for (const auto& r : read_manifest(manifest)) {
        if (!split.empty() && r.split != split) continue;
        StatsRecord s{r.expression, r.category, std::nullopt, std::nullopt};
        const auto mask_path = base / r.mask;
        if (!r.mask.empty() && fs::exists(mask_path)) {
            const auto png = read_png(mask_path, 1);
            std::size_t area = 0;
            for (auto v : png.pixels) area += v != 0;
            s.mask_area = area;
            s.image_area = png.width * png.height;
        }
        out.push_back(std::move(s));
    }
    return out;
}

std::string DatasetStats::to_json() const {
    nlohmann::ordered_json j;
    j["record_count"] = record_count;
    j["average_length"] = average_length;
    j["vocabulary_size"] = vocabulary_size;
    auto& lengths = j["length_histogram"] = nlohmann::ordered_json::object();
    for (const auto& [len, count] : length_histogram) lengths[std::to_string(len)] = count;
    j["category_counts"] = category_counts;
    auto& sizes = j["size_histogram"] = nlohmann::ordered_json::object();
    for (const char* bucket : kSizeBuckets) {
        const auto it = size_histogram.find(bucket);
        sizes[bucket] = it == size_histogram.end() ? 0 : it->second;
    }
    auto& top = j["top_words"] = nlohmann::ordered_json::array();
    for (const auto& [word, count] : top_words) top.push_back({word, count});
    return j.dump(2) + "\n";
}

PngImage render_histogram(const std::vector<std::pair<std::string, std::size_t>>& bars, std::size_t width,
                          std::size_t height) {
    PngImage png{width, height, 3, std::vector<std::uint8_t>(width * height * 3, 255)};
    if (bars.empty()) return png;
    std::size_t peak = 1;
    for (const auto& b : bars) peak = std::max(peak, b.second);
    const std::size_t margin = 8;
    const double slot = static_cast<double>(width - 2 * margin) / static_cast<double>(bars.size());
    const std::size_t plot_h = height - 2 * margin;
    for (std::size_t i = 0; i < bars.size(); ++i) {
        const auto x0 = margin + static_cast<std::size_t>(static_cast<double>(i) * slot + slot * 0.1);
        const auto x1 = margin + static_cast<std::size_t>(static_cast<double>(i + 1) * slot - slot * 0.1);
        const auto bar_h = static_cast<std::size_t>(std::lround(static_cast<double>(plot_h) *
                                                                static_cast<double>(bars[i].second) /
                                                                static_cast<double>(peak)));
        for (std::size_t y = height - margin - bar_h; y < height - margin; ++y)
            for (std::size_t x = x0; x < std::max(x1, x0 + 1); ++x) {
                auto* px = &png.pixels[(y * width + x) * 3];
                px[0] = 60;
                px[1] = 110;
                px[2] = 190;
            }
    }
    for (std::size_t x = margin; x < width - margin; ++x) {
        auto* px = &png.pixels[((height - margin) * width + x) * 3];
        px[0] = px[1] = px[2] = 0;
    }
    return png;
}

}  // namespace crobim::dataio

#pragma once

// Triplet manifests, PNG image/mask files, the synthetic shapes generator and
// expression statistics.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "crobim/feature_core.hpp"

namespace crobim::dataio {

namespace fs = std::filesystem;

// -- PNG --------------------------------------------------------------------

/// 8-bit pixels, interleaved, `channels` per pixel (1 = gray, 3 = RGB).
struct PngImage {
    std::size_t width = 0;
    std::size_t height = 0;
    std::size_t channels = 0;
    std::vector<std::uint8_t> pixels;
};

/// Decodes any PNG to gray (channels == 1) or RGB (channels == 3). Throws LoadError.
PngImage read_png(const fs::path& path, std::size_t channels);
void write_png(const fs::path& path, const PngImage& image);

Image image_from_png(const PngImage& png);
PngImage png_from_image(const Image& image);
/// Nonzero pixels become 1. `non_binary` is set when values other than 0, 1, 255 occur.
Mask mask_from_png(const PngImage& png, bool* non_binary = nullptr);
/// 0 / 255 single-channel PNG.
PngImage png_from_mask(const Mask& mask);

/// Bilinear (half-pixel) image resize.
Image resize_image(const Image& image, GridShape to);
/// Nearest-neighbour mask resize: source cell floor((dst + 0.5) * in / out).
Mask resize_mask(const Mask& mask, GridShape to);
/// Both image and mask brought to size x size; unchanged when already there.
Triplet fit_triplet(const Triplet& t, std::size_t size);

// -- manifest ---------------------------------------------------------------

/// One tab-separated manifest line: id, image, mask, split, category, expression.
/// Paths are relative to the manifest's directory.
struct ManifestRecord {
    std::string id;
    std::string image;
    std::string mask;
    std::string split;
    std::string category;
    std::string expression;
    friend bool operator==(const ManifestRecord&, const ManifestRecord&) = default;
};

/// Lines starting with '#' and blank lines are skipped. Throws LoadError carrying
/// the record index on malformed lines, unknown splits or duplicate ids.
std::vector<ManifestRecord> read_manifest(const fs::path& path);
void write_manifest(const fs::path& path, const std::vector<ManifestRecord>& records);

/// Loads the triplets of `split` ("" selects every split) in manifest order.
/// Missing or undecodable files raise LoadError naming the record. Non-binary
/// masks are binarised and reported through `warnings` (stderr when null).
std::vector<Triplet> load_manifest(const fs::path& path, const std::string& split,
                                   const Vocabulary& vocab = Vocabulary::synthetic(),
                                   std::vector<std::string>* warnings = nullptr);

/// Writes <dir>/images/<id>.png, <dir>/masks/<id>.png and <dir>/manifest.tsv.
void save_dataset(const fs::path& dir, const std::vector<Triplet>& triplets, const std::string& split);

// -- synthetic data ---------------------------------------------------------

/// Attribute slots filled for a generated referent.
struct SynthAttributes {
    std::string category;
    std::string color;
    std::string shape;
    std::string size;
    std::string location;
    std::string relative_position;  // empty when the referent is alone
    std::string relative_size;      // empty when the referent is alone
    std::string count_context;
};

struct SynthSample {
    Triplet triplet;
    SynthAttributes attributes;
    std::size_t object_count = 0;
};

/// n images of 1-3 non-overlapping coloured shapes on textured noise. Colours are
/// distinct within an image, so the referent's colour and category identify it.
/// Fully determined by `seed`. Throws ArgumentError when n == 0.
std::vector<SynthSample> synth_generate(std::size_t n, std::size_t image_size, std::uint64_t seed);
std::vector<Triplet> synth_triplets(std::size_t n, std::size_t image_size, std::uint64_t seed);

// -- statistics -------------------------------------------------------------

struct StatsRecord {
    std::string expression;
    std::string category;
    std::optional<std::size_t> mask_area;   // referent pixels
    std::optional<std::size_t> image_area;  // total pixels
};

/// Object-size buckets by referent share of the image.
inline constexpr std::array<const char*, 5> kSizeBuckets{"<1%", "1-5%", "5-10%", "10-25%", ">=25%"};

struct DatasetStats {
    std::size_t record_count = 0;
    std::map<std::size_t, std::size_t> length_histogram;  // words -> expressions
    double average_length = 0.0;
    std::map<std::string, std::size_t> category_counts;
    std::map<std::string, std::size_t> size_histogram;  // bucket -> records with a mask
    std::size_t vocabulary_size = 0;
    std::vector<std::pair<std::string, std::size_t>> top_words;  // by count desc, then word

    std::string to_json() const;
};

DatasetStats dataset_stats(const std::vector<StatsRecord>& records, std::size_t top_k = 50);
std::vector<StatsRecord> stats_records(const std::vector<Triplet>& triplets);
/// Records of `split` ("" = all) straight from a manifest. Only mask files are
/// read; a missing mask leaves the areas empty instead of failing.
std::vector<StatsRecord> stats_records(const fs::path& manifest, const std::string& split);

/// Bar chart of a histogram as an RGB PNG.
PngImage render_histogram(const std::vector<std::pair<std::string, std::size_t>>& bars, std::size_t width = 480,
                          std::size_t height = 240);

}  // namespace crobim::dataio

#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "pioner/core.hpp"

namespace pioner {

// Decoded RGB image, HWC order, channels in [0, 1].
struct RgbImage {
    int width = 0;
    int height = 0;
    std::vector<float> rgb;
    // Stable identifier of the source (file stem or content hash). Adapters that
    // read precomputed grids look images up by this key.
    std::string key;
};

// Throws FormatError when the bytes are not a decodable image.
RgbImage decode_image(std::span<const unsigned char> bytes, std::string key = {});
RgbImage load_image_file(const std::filesystem::path& path);
std::vector<unsigned char> read_file_bytes(const std::filesystem::path& path);

// Bilinear resize to a square side x side image (aspect ratio not preserved).
RgbImage resize_square(const RgbImage& img, int side);

struct BackboneCapabilities {
    bool has_attention = false;
    bool has_text_encoder = false;
};

// Vision-language encoder seam: image -> PatchGrid, text -> embedding.
// Implementations are immutable after construction; encode calls may run
// concurrently.
class BackboneAdapter {
public:
    virtual ~BackboneAdapter() = default;

    virtual std::string name() const = 0;
    virtual int patch_size() const = 0;
    virtual int input_resolution() const = 0;
    virtual int embedding_dim() const = 0;
    virtual BackboneCapabilities capabilities() const = 0;
    // False for adapters that only need RgbImage::key and the original size.
    virtual bool needs_pixels() const { return true; }

    virtual PatchGrid encode_image(const RgbImage& image) const = 0;
    virtual Vector encode_text(const std::string& text) const = 0;

    int grid_side() const { return input_resolution() / patch_size(); }
};

// Deterministic, dependency-free adapter for tests and smoke runs.
// Patch embedding: seeded random projection of the patch mean RGB plus its
// 2x2 sub-patch means. Text embedding: seeded hashed bag-of-words projection.
class SyntheticAdapter final : public BackboneAdapter {
public:
    struct Options {
        int dim = 64;
        int patch_size = 14;
        int input_resolution = 518;
        std::uint64_t seed = 0;
        bool attention = true;
    };

    explicit SyntheticAdapter(Options opts);

    std::string name() const override { return "synthetic"; }
    int patch_size() const override { return opts_.patch_size; }
    int input_resolution() const override { return opts_.input_resolution; }
    int embedding_dim() const override { return opts_.dim; }
    BackboneCapabilities capabilities() const override { return {opts_.attention, true}; }

    PatchGrid encode_image(const RgbImage& image) const override;
    Vector encode_text(const std::string& text) const override;

    static constexpr int kFeatureCount = 15;

private:
    Options opts_;
    std::vector<double> projection_; // dim x kFeatureCount, row-major
};

// Serves grids exported offline (e.g. from a DINOv2/Talk2DINO run) as
// GridArchive files named <grid_dir>/<image key>.piongrid, and optionally text
// embeddings from a JSON-lines table {"text": ..., "embedding": [...]}.
class PrecomputedAdapter final : public BackboneAdapter {
public:
    struct Options {
        std::filesystem::path grid_dir;
        std::filesystem::path text_table;
        int dim = 0;
        int patch_size = 14;
        int input_resolution = 518;
        bool attention = false;
    };

    explicit PrecomputedAdapter(Options opts);

    std::string name() const override { return "precomputed"; }
    int patch_size() const override { return opts_.patch_size; }
    int input_resolution() const override { return opts_.input_resolution; }
    int embedding_dim() const override { return opts_.dim; }
    BackboneCapabilities capabilities() const override {
        return {opts_.attention, !texts_.empty()};
    }
    bool needs_pixels() const override { return false; }

    PatchGrid encode_image(const RgbImage& image) const override;
    Vector encode_text(const std::string& text) const override;

private:
    Options opts_;
    std::map<std::string, Vector> texts_;
};

// Registry keyed by backbone.name ("synthetic", "precomputed").
std::shared_ptr<const BackboneAdapter> make_adapter(const Config& cfg);

// ---- GridArchive ----
//
// Layout (all integers little-endian u32, floats little-endian IEEE-754):
//   "PIONGRID1" | rows | cols | dim | patch_size | src_h | src_w | orig_h |
//   orig_w | flags (bit0 = attention block) | name_len | name bytes |
//   rows*cols*dim payload floats (row, col, dim order) | [rows*cols attention]

inline constexpr std::string_view kGridMagic = "PIONGRID1";

void save_grid(const PatchGrid& grid, const std::filesystem::path& path,
               const std::string& name = "grid");
PatchGrid load_grid(const std::filesystem::path& path, std::string* name = nullptr);

std::vector<unsigned char> serialize_grid(const PatchGrid& grid, const std::string& name);
PatchGrid deserialize_grid(std::span<const unsigned char> bytes, std::string* name = nullptr);

} // namespace pioner

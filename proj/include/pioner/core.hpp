#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include <json.hpp>

#include "pioner/errors.hpp"

namespace pioner {

using json = nlohmann::json;
using Vector = std::vector<double>;

struct PixelSize {
    int height = 0;
    int width = 0;
    bool operator==(const PixelSize&) const = default;
};

// Dense rows x cols x dim grid of patch embeddings for one image.
// Flat patch index = row * cols + col; data is row-major (row, col, dim).
class PatchGrid {
public:
    PatchGrid() = default;
    PatchGrid(int rows, int cols, int dim, std::vector<float> data,
              PixelSize source_resolution, int patch_size,
              std::optional<std::vector<float>> attention = std::nullopt,
              std::optional<PixelSize> original_size = std::nullopt);

    int rows() const { return rows_; }
    int cols() const { return cols_; }
    int dim() const { return dim_; }
    std::size_t size() const { return static_cast<std::size_t>(rows_) * cols_; }
    int patch_size() const { return patch_size_; }
    PixelSize source_resolution() const { return source_resolution_; }
    // Pixel size of the image before it was resized for the backbone.
    PixelSize original_size() const { return original_size_; }

    const std::vector<float>& data() const { return data_; }
    const std::optional<std::vector<float>>& attention() const { return attention_; }
    bool has_attention() const { return attention_.has_value(); }

    const float* patch(std::size_t flat) const { return data_.data() + flat * dim_; }
    std::size_t flat_index(int row, int col) const {
        return static_cast<std::size_t>(row) * cols_ + col;
    }
    std::size_t bytes() const;

    bool operator==(const PatchGrid&) const = default;

private:
    int rows_ = 0;
    int cols_ = 0;
    int dim_ = 0;
    std::vector<float> data_;
    PixelSize source_resolution_;
    int patch_size_ = 0;
    std::optional<std::vector<float>> attention_;
    PixelSize original_size_;
};

// ---- region specs (region-spec/v1) ----

struct Point {
    double x = 0;
    double y = 0;
    bool operator==(const Point&) const = default;
};

struct Box {
    double x0 = 0, y0 = 0, x1 = 0, y1 = 0;
    bool operator==(const Box&) const = default;
};

struct ImageRegion {
    bool operator==(const ImageRegion&) const = default;
};
struct PatchRegion {
    int row = 0;
    int col = 0;
    bool operator==(const PatchRegion&) const = default;
};
struct BoxRegion {
    Box box;
    bool operator==(const BoxRegion&) const = default;
};
struct BoxSetRegion {
    std::vector<Box> boxes;
    bool operator==(const BoxSetRegion&) const = default;
};
struct TraceRegion {
    std::vector<Point> points;
    bool operator==(const TraceRegion&) const = default;
};

enum class RegionKind { image, patch, box, box_set, trace };

std::string_view to_string(RegionKind kind);
RegionKind region_kind_from_string(std::string_view s);

// Coordinates are original-image pixels for box, box_set and trace.
struct RegionSpec {
    std::variant<ImageRegion, PatchRegion, BoxRegion, BoxSetRegion, TraceRegion> payload;

    RegionKind kind() const { return static_cast<RegionKind>(payload.index()); }
    bool operator==(const RegionSpec&) const = default;

    static RegionSpec image() { return {ImageRegion{}}; }
    static RegionSpec patch(int row, int col) { return {PatchRegion{row, col}}; }
    static RegionSpec box(Box b) { return {BoxRegion{b}}; }
    static RegionSpec box_set(std::vector<Box> boxes) { return {BoxSetRegion{std::move(boxes)}}; }
    static RegionSpec trace(std::vector<Point> points) { return {TraceRegion{std::move(points)}}; }
};

inline constexpr std::string_view kRegionSpecVersion = "region-spec/v1";

// Throws ValidationError if the spec violates its invariants.
void validate(const RegionSpec& spec);

RegionSpec region_spec_from_json(const json& j);
RegionSpec parse_region_spec(std::string_view text);
json to_json(const RegionSpec& spec);
std::string serialize_region_spec(const RegionSpec& spec);

// ---- selections and embeddings ----

enum class AggregationMode { uniform, gaussian, attention };

std::string_view to_string(AggregationMode mode);
AggregationMode aggregation_mode_from_string(std::string_view s);

// Ordered multiset of flat patch indices with parallel weights.
struct PatchSelection {
    RegionKind kind = RegionKind::image;
    std::vector<std::size_t> indices;
    std::vector<double> weights;
};

struct RegionEmbedding {
    Vector vector;
    RegionKind kind = RegionKind::image;
    AggregationMode mode = AggregationMode::uniform;
};

struct Caption {
    std::string text;
    std::vector<int> token_ids;
    std::optional<double> score;
    // Set when generation produced no tokens before max_len.
    bool empty = false;
};

// ---- configuration ----

enum class GapMode { memory, noise, none };

std::string_view to_string(GapMode mode);
GapMode gap_mode_from_string(std::string_view s);

struct Config {
    struct Backbone {
        std::string name = "synthetic";
        int patch_size = 14;
        int input_resolution = 518;
        int dim = 64;
        std::uint64_t seed = 0;
        bool attention = true;
        std::string grid_dir;
        std::string text_table;
    } backbone;

    AggregationMode aggregation = AggregationMode::uniform;

    struct Gap {
        GapMode mode = GapMode::memory;
        double tau = 0.01;
        double sigma2 = 0.08;
        std::string preset;
        std::string memory;
        std::uint64_t noise_seed = 0;
    } gap;

    struct Decoder {
        std::string checkpoint;
        std::string strategy = "greedy";
        int beam_size = 3;
        int max_len = 64;
        int d_model = 256;
        int n_layer = 4;
        int n_head = 4;
        int max_vocab = 8192;
    } decoder;

    struct Train {
        int epochs = 10;
        double lr = 1e-5;
        int batch = 64;
        double weight_decay = 0.01;
        std::uint64_t seed = 0;
        bool deterministic = true;
        int workers = 1;
    } train;

    struct Service {
        std::string host = "0.0.0.0";
        int port = 8080;
        std::size_t cache_bytes = 256u << 20;
        std::size_t max_image_bytes = 20u << 20;
        int max_inflight = 64;
        std::string cors_origin = "*";
    } service;

    struct Metrics {
        // plugin name -> shell command speaking the line-delimited JSON protocol
        std::vector<std::pair<std::string, std::string>> plugins;
        std::string dense_similarity;
        std::vector<double> dense_thresholds{0.0, 0.05, 0.10, 0.15, 0.20, 0.25};
    } metrics;

    struct Tracebench {
        int retries = 3;
        int concurrency = 4;
        double rate_per_sec = 5.0;
        std::string endpoint = "http://localhost:11434/v1/chat/completions";
        std::string model = "llama3:8b";
        double timeout_s = 60.0;
    } tracebench;

    struct Eval {
        int jobs = 1;
        std::string image_root;
    } eval;

    // Applies one dotted key. Throws ConfigError naming the key on unknown keys,
    // wrong types, or out-of-range values.
    void set(const std::string& key, const json& value);
    // Flat dotted-key snapshot of every key.
    json to_json() const;
};

// Empty or whitespace-only files yield all defaults.
Config load_config(const std::string& path);
Config config_from_json(const json& doc);
// Applies "key=value" overrides on top of an existing config (CLI precedence).
void apply_override(Config& cfg, const std::string& assignment);

// ---- small shared helpers ----

double l2_norm(const Vector& v);
Vector l2_normalized(const Vector& v);
double cosine(const Vector& a, const Vector& b);

} // namespace pioner

#include "pioner/backbones.hpp"

#include <cctype>
#include <cmath>
#include <fstream>
#include <random>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "pioner/binary_io.hpp"

namespace pioner {

// ---------------------------------------------------------------------------
// file helpers

namespace binary {

void write_file(const std::filesystem::path& path, std::span<const unsigned char> bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IOError("cannot open '" + path.string() + "' for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IOError("failed writing '" + path.string() + "'");
}

std::vector<unsigned char> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IOError("cannot open '" + path.string() + "'");
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

} // namespace binary

std::vector<unsigned char> read_file_bytes(const std::filesystem::path& path) {
    return binary::read_file(path);
}

// ---------------------------------------------------------------------------
// images

RgbImage decode_image(std::span<const unsigned char> bytes, std::string key) {
    if (bytes.empty()) throw FormatError("empty image buffer");
    cv::Mat raw(1, static_cast<int>(bytes.size()), CV_8UC1, const_cast<unsigned char*>(bytes.data()));
    cv::Mat bgr;
    try {
        bgr = cv::imdecode(raw, cv::IMREAD_COLOR);
    } catch (const cv::Exception&) {
        bgr.release();
    }
    if (bgr.empty()) throw FormatError("undecodable image");

    cv::Mat rgb;
    cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
    cv::Mat rgbf;
    rgb.convertTo(rgbf, CV_32FC3, 1.0 / 255.0);

    RgbImage img;
    img.width = rgbf.cols;
    img.height = rgbf.rows;
    img.key = std::move(key);
    img.rgb.resize(static_cast<std::size_t>(img.width) * img.height * 3);
    for (int r = 0; r < rgbf.rows; ++r)
        std::memcpy(img.rgb.data() + static_cast<std::size_t>(r) * img.width * 3, rgbf.ptr<float>(r),
                    sizeof(float) * img.width * 3);
    return img;
}

RgbImage load_image_file(const std::filesystem::path& path) {
    auto bytes = read_file_bytes(path);
    return decode_image(bytes, path.stem().string());
}

RgbImage resize_square(const RgbImage& img, int side) {
    if (img.width == side && img.height == side) return img;
    cv::Mat src(img.height, img.width, CV_32FC3, const_cast<float*>(img.rgb.data()));
    cv::Mat dst;
    cv::resize(src, dst, cv::Size(side, side), 0, 0, cv::INTER_LINEAR);
    RgbImage out;
    out.width = side;
    out.height = side;
    out.key = img.key;
    out.rgb.assign(dst.ptr<float>(0), dst.ptr<float>(0) + static_cast<std::size_t>(side) * side * 3);
    return out;
}

// ---------------------------------------------------------------------------
// synthetic adapter

namespace {

void check_geometry(int patch_size, int input_resolution, int dim) {
    if (patch_size < 1 || input_resolution < 1)
        throw ValidationError("patch size and input resolution must be positive");
    if (input_resolution % patch_size != 0)
        throw ValidationError("input resolution " + std::to_string(input_resolution) +
                              " is not divisible by patch size " + std::to_string(patch_size));
    if (dim < 1) throw ValidationError("embedding dimension must be >= 1");
}

std::uint64_t fnv1a(std::string_view s, std::uint64_t seed) {
    std::uint64_t h = 1469598103934665603ull ^ (seed * 0x9e3779b97f4a7c15ull);
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

std::vector<std::string> words_of(const std::string& text) {
    std::vector<std::string> words;
    std::string cur;
    for (unsigned char c : text) {
        if (std::isalnum(c)) {
            cur.push_back(static_cast<char>(std::tolower(c)));
        } else if (!cur.empty()) {
            words.push_back(std::move(cur));
            cur.clear();
        }
    }
    if (!cur.empty()) words.push_back(std::move(cur));
    return words;
}

} // namespace

SyntheticAdapter::SyntheticAdapter(Options opts) : opts_(opts) {
    check_geometry(opts_.patch_size, opts_.input_resolution, opts_.dim);
    std::mt19937_64 rng(opts_.seed);
    std::normal_distribution<double> normal(0.0, 1.0 / std::sqrt(double(kFeatureCount)));
    projection_.resize(static_cast<std::size_t>(opts_.dim) * kFeatureCount);
    for (double& w : projection_) w = normal(rng);
}

PatchGrid SyntheticAdapter::encode_image(const RgbImage& image) const {
    if (image.width < 1 || image.height < 1 ||
        image.rgb.size() != static_cast<std::size_t>(image.width) * image.height * 3)
        throw BackboneError("unsupported image buffer");
    const int side = opts_.input_resolution;
    const int p = opts_.patch_size;
    const int n = side / p;
    const int half = std::max(1, p / 2);
    RgbImage resized = resize_square(image, side);

    std::vector<float> data(static_cast<std::size_t>(n) * n * opts_.dim);
    std::vector<double> luminance(static_cast<std::size_t>(n) * n);
    for (int pr = 0; pr < n; ++pr) {
        for (int pc = 0; pc < n; ++pc) {
            // feature layout: mean rgb, then 2x2 sub-patch mean rgb (tl, tr, bl, br)
            double feat[kFeatureCount] = {};
            int counts[4] = {};
            for (int y = 0; y < p; ++y) {
                for (int x = 0; x < p; ++x) {
                    const float* px =
                        &resized.rgb[(static_cast<std::size_t>(pr * p + y) * side + (pc * p + x)) * 3];
                    int q = (y < half ? 0 : 2) + (x < half ? 0 : 1);
                    if (p == 1) q = 0;
                    for (int ch = 0; ch < 3; ++ch) {
                        feat[ch] += px[ch];
                        feat[3 + q * 3 + ch] += px[ch];
                    }
                    ++counts[q];
                }
            }
            for (int ch = 0; ch < 3; ++ch) feat[ch] /= double(p) * p;
            for (int q = 0; q < 4; ++q)
                for (int ch = 0; ch < 3; ++ch)
                    feat[3 + q * 3 + ch] = counts[q] ? feat[3 + q * 3 + ch] / counts[q] : feat[ch];

            const std::size_t flat = static_cast<std::size_t>(pr) * n + pc;
            luminance[flat] = 0.299 * feat[0] + 0.587 * feat[1] + 0.114 * feat[2];
            float* out = &data[flat * opts_.dim];
            for (int d = 0; d < opts_.dim; ++d) {
                double acc = 0;
                for (int f = 0; f < kFeatureCount; ++f) acc += projection_[d * kFeatureCount + f] * feat[f];
                out[d] = static_cast<float>(acc);
            }
        }
    }

    std::optional<std::vector<float>> attention;
    if (opts_.attention) {
        // contrast against the mean luminance stands in for class-token attention
        double mean = 0;
        for (double l : luminance) mean += l;
        mean /= double(luminance.size());
        std::vector<double> raw(luminance.size());
        double total = 0;
        for (std::size_t i = 0; i < raw.size(); ++i) {
            raw[i] = std::abs(luminance[i] - mean) + 1e-3;
            total += raw[i];
        }
        attention.emplace(raw.size());
        for (std::size_t i = 0; i < raw.size(); ++i) (*attention)[i] = static_cast<float>(raw[i] / total);
    }
    return PatchGrid(n, n, opts_.dim, std::move(data), {side, side}, p, std::move(attention),
                     PixelSize{image.height, image.width});
}

Vector SyntheticAdapter::encode_text(const std::string& text) const {
    auto words = words_of(text);
    if (words.empty()) throw ValidationError("cannot encode empty text");
    Vector out(opts_.dim, 0.0);
    std::normal_distribution<double> normal(0.0, 1.0);
    for (const auto& w : words) {
        std::mt19937_64 rng(fnv1a(w, opts_.seed));
        for (double& x : out) x += normal(rng);
    }
    return out;
}

// ---------------------------------------------------------------------------
// precomputed adapter

PrecomputedAdapter::PrecomputedAdapter(Options opts) : opts_(std::move(opts)) {
    check_geometry(opts_.patch_size, opts_.input_resolution, opts_.dim);
    if (opts_.grid_dir.empty()) throw BackboneError("precomputed adapter needs backbone.grid_dir");
    if (!std::filesystem::is_directory(opts_.grid_dir))
        throw BackboneError("grid directory '" + opts_.grid_dir.string() + "' does not exist");
    if (!opts_.text_table.empty()) {
        std::ifstream in(opts_.text_table);
        if (!in) throw BackboneError("cannot open text table '" + opts_.text_table.string() + "'");
        std::string line;
        int lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
            try {
                json j = json::parse(line);
                Vector v = j.at("embedding").get<Vector>();
                if (static_cast<int>(v.size()) != opts_.dim)
                    throw BackboneError("text table line " + std::to_string(lineno) + " has wrong dimension");
                texts_[j.at("text").get<std::string>()] = std::move(v);
            } catch (const json::exception& e) {
                throw BackboneError("text table line " + std::to_string(lineno) + ": " + e.what());
            }
        }
    }
}

PatchGrid PrecomputedAdapter::encode_image(const RgbImage& image) const {
    if (image.key.empty()) throw BackboneError("precomputed adapter needs an image key");
    auto path = opts_.grid_dir / (image.key + ".piongrid");
    PatchGrid grid;
    try {
        grid = load_grid(path);
    } catch (const IOError& e) {
        throw BackboneError(std::string("no precomputed grid for image '") + image.key + "': " + e.what());
    }
    if (grid.dim() != opts_.dim || grid.rows() != grid_side() || grid.cols() != grid_side())
        throw BackboneError("precomputed grid '" + path.string() + "' does not match adapter geometry");
    if (image.width > 0 && image.height > 0 && grid.original_size() != PixelSize{image.height, image.width}) {
        return PatchGrid(grid.rows(), grid.cols(), grid.dim(), grid.data(), grid.source_resolution(),
                         grid.patch_size(), grid.attention(), PixelSize{image.height, image.width});
    }
    return grid;
}

Vector PrecomputedAdapter::encode_text(const std::string& text) const {
    if (texts_.empty()) throw CapabilityError("precomputed adapter has no text table");
    if (text.empty()) throw ValidationError("cannot encode empty text");
    auto it = texts_.find(text);
    if (it == texts_.end()) throw BackboneError("text not present in precomputed table: '" + text + "'");
    return it->second;
}

namespace {

std::shared_ptr<const BackboneAdapter> make_adapter_unchecked(const Config& cfg) {
    const auto& b = cfg.backbone;
    if (b.name == "synthetic")
        return std::make_shared<SyntheticAdapter>(
            SyntheticAdapter::Options{b.dim, b.patch_size, b.input_resolution, b.seed, b.attention});
    if (b.name == "precomputed")
        return std::make_shared<PrecomputedAdapter>(PrecomputedAdapter::Options{
            b.grid_dir, b.text_table, b.dim, b.patch_size, b.input_resolution, b.attention});
    throw ConfigError("config key 'backbone.name': unknown backbone '" + b.name + "'");
}

} // namespace

std::shared_ptr<const BackboneAdapter> make_adapter(const Config& cfg) {
    const auto& b = cfg.backbone;
    try {
        return make_adapter_unchecked(cfg);
    } catch (const ValidationError& e) {
        throw ConfigError("backbone '" + b.name + "': " + e.what());
    }
}

// ---------------------------------------------------------------------------
// GridArchive

std::vector<unsigned char> serialize_grid(const PatchGrid& grid, const std::string& name) {
    binary::Writer w;
    w.bytes(kGridMagic);
    w.u32(static_cast<std::uint32_t>(grid.rows()));
    w.u32(static_cast<std::uint32_t>(grid.cols()));
    w.u32(static_cast<std::uint32_t>(grid.dim()));
    w.u32(static_cast<std::uint32_t>(grid.patch_size()));
    w.u32(static_cast<std::uint32_t>(grid.source_resolution().height));
    w.u32(static_cast<std::uint32_t>(grid.source_resolution().width));
    w.u32(static_cast<std::uint32_t>(grid.original_size().height));
    w.u32(static_cast<std::uint32_t>(grid.original_size().width));
    w.u32(grid.has_attention() ? 1u : 0u);
    w.str(name);
    for (float x : grid.data()) w.f32(x);
    if (grid.has_attention())
        for (float a : *grid.attention()) w.f32(a);
    return std::move(w.buffer());
}

PatchGrid deserialize_grid(std::span<const unsigned char> bytes, std::string* name) {
    binary::Reader r(bytes);
    if (bytes.size() < kGridMagic.size() || r.bytes(kGridMagic.size()) != kGridMagic)
        throw FormatError("bad grid archive magic");
    const std::uint32_t rows = r.u32(), cols = r.u32(), dim = r.u32(), patch = r.u32();
    const std::uint32_t src_h = r.u32(), src_w = r.u32(), orig_h = r.u32(), orig_w = r.u32();
    const std::uint32_t flags = r.u32();
    std::string archive_name = r.str();
    if (flags > 1u) throw FormatError("unknown grid archive flags");
    if (rows == 0 || cols == 0 || dim == 0) throw FormatError("grid archive has empty dimensions");

    const std::uint64_t cells = std::uint64_t(rows) * cols;
    const std::uint64_t expected = (cells * dim + (flags & 1u ? cells : 0)) * 4;
    if (r.remaining() != expected)
        throw FormatError("grid archive payload is " + std::to_string(r.remaining()) + " bytes, header implies " +
                          std::to_string(expected));

    std::vector<float> data(cells * dim);
    for (float& x : data) x = r.f32();
    std::optional<std::vector<float>> attention;
    if (flags & 1u) {
        attention.emplace(cells);
        for (float& a : *attention) a = r.f32();
    }
    if (name) *name = archive_name;
    try {
        return PatchGrid(int(rows), int(cols), int(dim), std::move(data), {int(src_h), int(src_w)}, int(patch),
                         std::move(attention), PixelSize{int(orig_h), int(orig_w)});
    } catch (const ValidationError& e) {
        throw FormatError(std::string("invalid grid archive: ") + e.what());
    }
}

void save_grid(const PatchGrid& grid, const std::filesystem::path& path, const std::string& name) {
    binary::write_file(path, serialize_grid(grid, name));
}

PatchGrid load_grid(const std::filesystem::path& path, std::string* name) {
    return deserialize_grid(binary::read_file(path), name);
}

} // namespace pioner

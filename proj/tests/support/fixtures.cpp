#include "support/fixtures.hpp"

#include <array>
#include <cmath>
#include <map>
#include <cstdio>
#include <fstream>
#include <mutex>
#include <sstream>
#include <sys/wait.h>
#include <unistd.h>

#include <opencv2/imgcodecs.hpp>

namespace pioner::testing {

TempDir::TempDir() {
    std::string tmpl = (std::filesystem::temp_directory_path() / "pioner-test-XXXXXX").string();
    if (!mkdtemp(tmpl.data())) throw std::runtime_error("mkdtemp failed");
    path_ = tmpl;
}

TempDir::~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
}

void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    out << text;
}

std::string read_text(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::vector<unsigned char> make_png(int width, int height, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int> colour(0, 255);
    cv::Mat img(height, width, CV_8UC3);
    const int block = std::max(1, std::min(width, height) / 4);
    for (int by = 0; by < height; by += block) {
        for (int bx = 0; bx < width; bx += block) {
            cv::Vec3b c(colour(rng), colour(rng), colour(rng));
            for (int y = by; y < std::min(height, by + block); ++y)
                for (int x = bx; x < std::min(width, bx + block); ++x) img.at<cv::Vec3b>(y, x) = c;
        }
    }
    std::vector<unsigned char> buf;
    cv::imencode(".png", img, buf);
    return buf;
}

std::filesystem::path write_png(const std::filesystem::path& path, int width, int height, std::uint64_t seed) {
    auto bytes = make_png(width, height, seed);
    std::ofstream out(path, std::ios::binary);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    return path;
}

std::shared_ptr<SyntheticAdapter> small_adapter(int dim, int patch, int resolution) {
    return std::make_shared<SyntheticAdapter>(SyntheticAdapter::Options{dim, patch, resolution, 7, true});
}

PatchGrid random_grid(std::mt19937_64& rng, int rows, int cols, int dim, bool attention, PixelSize original) {
    std::normal_distribution<float> normal(0.0f, 1.0f);
    std::vector<float> data(static_cast<std::size_t>(rows) * cols * dim);
    for (float& x : data) x = normal(rng);
    std::optional<std::vector<float>> att;
    if (attention) {
        std::uniform_real_distribution<float> u(0.0f, 1.0f);
        att.emplace(static_cast<std::size_t>(rows) * cols);
        for (float& a : *att) a = u(rng) + 1e-3f;
    }
    const int patch = 14;
    PixelSize src{rows * patch, cols * patch};
    if (original.width == 0) original = src;
    return PatchGrid(rows, cols, dim, std::move(data), src, patch, std::move(att), original);
}

TrainSpec overfit_spec(const std::string& caption, GapMode mode) {
    TrainSpec spec;
    spec.corpus = {caption};
    spec.epochs = 200;
    spec.batch_size = 1;
    spec.lr = 3e-3;
    spec.weight_decay = 0.01;
    spec.mitigation = mode;
    spec.sigma2 = 0.0;
    spec.seed = 11;
    spec.d_model = 64;
    spec.n_layer = 4;
    spec.n_head = 4;
    spec.max_len = 32;
    return spec;
}

std::shared_ptr<const DecoderCheckpoint> overfit_checkpoint(const BackboneAdapter& adapter) {
    static std::mutex mu;
    static std::map<std::string, std::shared_ptr<const DecoderCheckpoint>> cache;
    std::lock_guard lock(mu);
    std::string key = adapter.name() + ":" + std::to_string(adapter.embedding_dim());
    auto& slot = cache[key];
    if (!slot) slot = std::make_shared<const DecoderCheckpoint>(train(overfit_spec(kDogCaption), adapter));
    return slot;
}

std::shared_ptr<const CaptionPipeline> dog_pipeline(std::shared_ptr<const BackboneAdapter> adapter) {
    auto ckpt = overfit_checkpoint(*adapter);
    auto bank = std::make_shared<const MemoryBank>(build_memory({kDogCaption}, *adapter, 0.01));
    return std::make_shared<const CaptionPipeline>(std::move(adapter), std::move(ckpt), std::move(bank),
                                                   GenerateOptions{});
}

std::string cli_path() { return PIONER_CLI_PATH; }

CommandResult run_command(const std::string& command) {
    CommandResult r;
    FILE* pipe = popen(command.c_str(), "r");
    if (!pipe) return r;
    std::array<char, 4096> buf{};
    std::size_t n;
    while ((n = fread(buf.data(), 1, buf.size(), pipe)) > 0) r.out.append(buf.data(), n);
    int status = pclose(pipe);
    r.status = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return r;
}

} // namespace pioner::testing

namespace pioner::testing {

namespace {

Box random_box(std::mt19937_64& rng, PixelSize size, bool integral) {
    std::uniform_real_distribution<double> ux(0.0, size.width), uy(0.0, size.height);
    for (;;) {
        double a = ux(rng), b = ux(rng), c = uy(rng), d = uy(rng);
        if (integral) {
            a = std::round(a), b = std::round(b), c = std::round(c), d = std::round(d);
        }
        Box box{std::min(a, b), std::min(c, d), std::max(a, b), std::max(c, d)};
        if (box.x0 < box.x1 && box.y0 < box.y1) return box;
    }
}

} // namespace

PatchGrid random_instance_grid(std::mt19937_64& rng, int max_side, int dim, bool attention) {
    std::uniform_int_distribution<int> side(1, max_side);
    const int rows = side(rng), cols = side(rng);
    std::uniform_int_distribution<int> extent(8, 640);
    PixelSize original{extent(rng), extent(rng)};
    return random_grid(rng, rows, cols, dim, attention, original);
}

RegionSpec random_region(std::mt19937_64& rng, const PatchGrid& grid) {
    const PixelSize size = grid.original_size();
    std::uniform_int_distribution<int> kind(0, 4);
    std::bernoulli_distribution coin(0.5);
    switch (kind(rng)) {
    case 0:
        return RegionSpec::image();
    case 1: {
        std::uniform_int_distribution<int> r(0, grid.rows() - 1), c(0, grid.cols() - 1);
        return RegionSpec::patch(r(rng), c(rng));
    }
    case 2:
        return RegionSpec::box(random_box(rng, size, coin(rng)));
    case 3: {
        std::uniform_int_distribution<int> k(1, 5);
        std::vector<Box> boxes;
        const bool integral = coin(rng);
        for (int i = k(rng); i > 0; --i) boxes.push_back(random_box(rng, size, integral));
        return RegionSpec::box_set(std::move(boxes));
    }
    default: {
        // points may leave the canvas slightly, as real mouse traces do
        std::uniform_real_distribution<double> ux(-0.1 * size.width, 1.1 * size.width);
        std::uniform_real_distribution<double> uy(-0.1 * size.height, 1.1 * size.height);
        std::uniform_int_distribution<int> len(1, 40);
        std::vector<Point> pts;
        for (int i = len(rng); i > 0; --i) pts.push_back({ux(rng), uy(rng)});
        return RegionSpec::trace(std::move(pts));
    }
    }
}

} // namespace pioner::testing

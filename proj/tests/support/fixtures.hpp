#pragma once

// Shared helpers for unit and acceptance tests.

#include <filesystem>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "pioner/backbones.hpp"
#include "pioner/decoder.hpp"
#include "pioner/gap.hpp"
#include "pioner/pipeline.hpp"

namespace pioner::testing {

class TempDir {
public:
    TempDir();
    ~TempDir();
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;
    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

void write_text(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);

// Encoded PNG of a width x height image with seeded colour blocks.
std::vector<unsigned char> make_png(int width, int height, std::uint64_t seed = 1);
std::filesystem::path write_png(const std::filesystem::path& path, int width, int height, std::uint64_t seed = 1);

std::shared_ptr<SyntheticAdapter> small_adapter(int dim = 16, int patch = 14, int resolution = 56);

// Random grid with finite entries, optionally with an attention map.
PatchGrid random_grid(std::mt19937_64& rng, int rows, int cols, int dim, bool attention = false,
                      PixelSize original = {});

inline const std::string kDogCaption = "A dog runs on the land.";

// Single-caption decoder overfit on the synthetic adapter (<= 200 steps).
TrainSpec overfit_spec(const std::string& caption, GapMode mode = GapMode::memory);

// Trains once per process and returns the shared checkpoint.
std::shared_ptr<const DecoderCheckpoint> overfit_checkpoint(const BackboneAdapter& adapter);

// Overfit decoder plus a one-entry memory bank holding kDogCaption.
std::shared_ptr<const CaptionPipeline> dog_pipeline(std::shared_ptr<const BackboneAdapter> adapter);

// Path of the built CLI binary (injected by CMake).
std::string cli_path();
// Runs a shell command, returns its exit status and captured stdout.
struct CommandResult {
    int status = -1;
    std::string out;
};
CommandResult run_command(const std::string& command);

} // namespace pioner::testing

namespace pioner::testing {

// Random valid region for a grid whose original size is `original`; boxes use
// integer coordinates half of the time so cell boundaries get exercised.
RegionSpec random_region(std::mt19937_64& rng, const PatchGrid& grid);

// Random grid of at most max_side x max_side cells with a random original size.
PatchGrid random_instance_grid(std::mt19937_64& rng, int max_side, int dim, bool attention = false);

} // namespace pioner::testing

#pragma once

#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "pioner/backbones.hpp"
#include "pioner/core.hpp"

namespace pioner {

// Text-embedding memory used to project visual embeddings into the text
// subspace. Columns are unit-norm and stored as float32 (the archive
// precision); computations widen them to double.
class MemoryBank {
public:
    MemoryBank(std::vector<std::string> entries, int dim, std::vector<float> columns, double tau);

    std::size_t size() const { return entries_.size(); }
    int dim() const { return dim_; }
    double tau() const { return tau_; }
    const std::vector<std::string>& entries() const { return entries_; }
    // Column j (the embedding of entries()[j]).
    const float* column(std::size_t j) const { return columns_.data() + j * dim_; }
    const std::vector<float>& columns() const { return columns_; }

private:
    std::vector<std::string> entries_;
    int dim_;
    std::vector<float> columns_; // N x dim, column j contiguous
    double tau_;
};

// Embeds, L2-normalizes and stores the corpus in order (no deduplication).
MemoryBank build_memory(const std::vector<std::string>& corpus, const BackboneAdapter& adapter, double tau);

// "PIONMEM1" | u32 version | f64 tau | u32 dim | u32 N | N x (u32 len, bytes) |
// N x dim float32 columns. All little-endian.
inline constexpr std::string_view kMemoryMagic = "PIONMEM1";
void save_memory(const MemoryBank& bank, const std::filesystem::path& path);
MemoryBank load_memory(const std::filesystem::path& path);
std::vector<unsigned char> serialize_memory(const MemoryBank& bank);

struct Projection {
    Vector vector;
    std::vector<double> alpha;
};

// v_proj = M alpha, alpha = softmax(M^T v_hat / tau), v_hat = v / |v|.
Projection project_with_weights(const Vector& v, const MemoryBank& bank);
Vector project(const Vector& v, const MemoryBank& bank);

struct NoiseConfig {
    double variance = 0.08;
    std::uint64_t seed = 0;
};

// Seeded Gaussian perturbation e + g, g ~ N(0, variance I). One instance per
// training worker; not thread-safe.
class Perturber {
public:
    explicit Perturber(NoiseConfig cfg);
    Vector perturb(const Vector& e);
    const NoiseConfig& config() const { return cfg_; }

private:
    NoiseConfig cfg_;
    std::mt19937_64 rng_;
    std::normal_distribution<double> normal_;
};

Vector perturb(const Vector& e, Perturber& perturber);

inline Vector passthrough(const Vector& v) { return v; }

} // namespace pioner

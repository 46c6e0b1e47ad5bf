#include "pioner/gap.hpp"

#include <algorithm>
#include <cmath>

#include "pioner/binary_io.hpp"

namespace pioner {

MemoryBank::MemoryBank(std::vector<std::string> entries, int dim, std::vector<float> columns, double tau)
    : entries_(std::move(entries)), dim_(dim), columns_(std::move(columns)), tau_(tau) {
    if (entries_.empty()) throw ValidationError("memory bank needs at least one entry");
    if (dim_ < 1) throw ValidationError("memory bank dimension must be >= 1");
    if (!(tau_ > 0) || !std::isfinite(tau_)) throw ValidationError("memory bank tau must be > 0");
    if (columns_.size() != entries_.size() * static_cast<std::size_t>(dim_))
        throw ValidationError("memory bank matrix size does not match entries x dim");
    for (std::size_t j = 0; j < entries_.size(); ++j) {
        double n2 = 0;
        for (int d = 0; d < dim_; ++d) n2 += double(column(j)[d]) * column(j)[d];
        if (std::abs(std::sqrt(n2) - 1.0) > 1e-6)
            throw ValidationError("memory column " + std::to_string(j) + " is not unit-norm");
    }
}

MemoryBank build_memory(const std::vector<std::string>& corpus, const BackboneAdapter& adapter, double tau) {
    if (corpus.empty()) throw ValidationError("memory corpus is empty");
    if (!adapter.capabilities().has_text_encoder)
        throw CapabilityError("backbone '" + adapter.name() + "' has no text encoder");
    const int dim = adapter.embedding_dim();
    std::vector<float> columns;
    columns.reserve(corpus.size() * dim);
    for (const auto& text : corpus) {
        Vector e = l2_normalized(adapter.encode_text(text));
        // renormalize after rounding so float32 columns stay unit-norm
        std::vector<float> f(e.begin(), e.end());
        double n2 = 0;
        for (float x : f) n2 += double(x) * x;
        double n = std::sqrt(n2);
        for (float x : f) columns.push_back(static_cast<float>(x / n));
    }
    return MemoryBank(corpus, dim, std::move(columns), tau);
}

std::vector<unsigned char> serialize_memory(const MemoryBank& bank) {
    binary::Writer w;
    w.bytes(kMemoryMagic);
    w.u32(1);
    w.f64(bank.tau());
    w.u32(static_cast<std::uint32_t>(bank.dim()));
    w.u32(static_cast<std::uint32_t>(bank.size()));
    for (const auto& s : bank.entries()) w.str(s);
    for (float x : bank.columns()) w.f32(x);
    return std::move(w.buffer());
}

void save_memory(const MemoryBank& bank, const std::filesystem::path& path) {
    binary::write_file(path, serialize_memory(bank));
}

MemoryBank load_memory(const std::filesystem::path& path) {
    auto bytes = binary::read_file(path);
    binary::Reader r(bytes);
    if (bytes.size() < kMemoryMagic.size() || r.bytes(kMemoryMagic.size()) != kMemoryMagic)
        throw FormatError("bad memory archive magic");
    if (r.u32() != 1) throw FormatError("unsupported memory archive version");
    double tau = r.f64();
    std::uint32_t dim = r.u32(), n = r.u32();
    std::vector<std::string> entries;
    entries.reserve(n);
    for (std::uint32_t i = 0; i < n; ++i) entries.push_back(r.str());
    if (r.remaining() != std::uint64_t(n) * dim * 4) throw FormatError("memory archive payload size mismatch");
    std::vector<float> columns(std::size_t(n) * dim);
    for (float& x : columns) x = r.f32();
    try {
        return MemoryBank(std::move(entries), int(dim), std::move(columns), tau);
    } catch (const ValidationError& e) {
        throw FormatError(std::string("invalid memory archive: ") + e.what());
    }
}

Projection project_with_weights(const Vector& v, const MemoryBank& bank) {
    if (static_cast<int>(v.size()) != bank.dim())
        throw ValidationError("projection input has dimension " + std::to_string(v.size()) + ", bank has " +
                              std::to_string(bank.dim()));
    for (double x : v)
        if (!std::isfinite(x)) throw ValidationError("projection input is not finite");
    const double norm = l2_norm(v);
    if (norm == 0) throw ZeroVectorError("cannot project a zero vector");

    const std::size_t n = bank.size();
    const int dim = bank.dim();
    std::vector<double> logits(n);
    for (std::size_t j = 0; j < n; ++j) {
        const float* m = bank.column(j);
        double dot = 0;
        for (int d = 0; d < dim; ++d) dot += double(m[d]) * (v[d] / norm);
        logits[j] = dot / bank.tau();
    }
    const double top = *std::max_element(logits.begin(), logits.end());
    Projection out;
    out.alpha.resize(n);
    double z = 0;
    for (std::size_t j = 0; j < n; ++j) {
        out.alpha[j] = std::exp(logits[j] - top);
        z += out.alpha[j];
    }
    for (double& a : out.alpha) a /= z;

    out.vector.assign(dim, 0.0);
    for (std::size_t j = 0; j < n; ++j) {
        const float* m = bank.column(j);
        for (int d = 0; d < dim; ++d) out.vector[d] += out.alpha[j] * double(m[d]);
    }
    return out;
}

Vector project(const Vector& v, const MemoryBank& bank) { return project_with_weights(v, bank).vector; }

Perturber::Perturber(NoiseConfig cfg)
    : cfg_(cfg), rng_(cfg.seed), normal_(0.0, std::sqrt(std::max(0.0, cfg.variance))) {
    if (!(cfg.variance >= 0)) throw ValidationError("noise variance must be >= 0");
}

Vector Perturber::perturb(const Vector& e) {
    for (double x : e)
        if (!std::isfinite(x)) throw ValidationError("perturb input is not finite");
    if (cfg_.variance == 0) return e;
    Vector out(e);
    for (double& x : out) x += normal_(rng_);
    return out;
}

Vector perturb(const Vector& e, Perturber& perturber) { return perturber.perturb(e); }

} // namespace pioner

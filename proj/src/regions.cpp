#include "pioner/regions.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

namespace pioner {

namespace {

// Half-open range of grid cells [first, last] overlapped with positive length by
// the normalized interval (lo, hi), where cell c spans [c, c + 1).
std::pair<int, int> overlapped_cells(double lo, double hi, int n) {
    int first = std::max(0, static_cast<int>(std::floor(lo)));
    int last = std::min(n - 1, static_cast<int>(std::ceil(hi)) - 1);
    while (first <= last && !(first + 1 > lo)) ++first;
    while (last >= first && !(last < hi)) --last;
    return {first, last};
}

void append_box(const Box& b, const PatchGrid& grid, std::vector<std::size_t>& out) {
    const auto orig = grid.original_size();
    // multiply before dividing so pixel coordinates on a cell boundary map exactly
    auto to_u = [&](double x) { return x * grid.cols() / orig.width; };
    auto to_v = [&](double y) { return y * grid.rows() / orig.height; };
    auto [c0, c1] = overlapped_cells(to_u(b.x0), to_u(b.x1), grid.cols());
    auto [r0, r1] = overlapped_cells(to_v(b.y0), to_v(b.y1), grid.rows());
    if (c0 > c1 || r0 > r1) throw EmptySelectionError("box does not overlap any patch of the image");
    for (int r = r0; r <= r1; ++r)
        for (int c = c0; c <= c1; ++c) out.push_back(grid.flat_index(r, c));
}

int clamp_cell(double coord, double extent, int n) {
    double u = std::floor(coord * n / extent);
    if (u < 0) return 0;
    if (u > n - 1) return n - 1;
    return static_cast<int>(u);
}

PatchSelection uniform(RegionKind kind, std::vector<std::size_t> indices) {
    PatchSelection sel;
    sel.kind = kind;
    sel.weights.assign(indices.size(), 1.0 / double(indices.size()));
    sel.indices = std::move(indices);
    return sel;
}

// Neumaier-compensated accumulator.
struct CompensatedSum {
    double sum = 0;
    double comp = 0;
    void add(double x) {
        double t = sum + x;
        if (std::abs(sum) >= std::abs(x))
            comp += (sum - t) + x;
        else
            comp += (x - t) + sum;
        sum = t;
    }
    double value() const { return sum + comp; }
};

struct Rect {
    int r0, c0, r1, c1;
};

// Returns the bounding rectangle when the selection is exactly a full
// rectangle of contiguous patches, each present once.
std::optional<Rect> as_rectangle(const PatchSelection& sel, const PatchGrid& grid) {
    std::set<std::size_t> distinct(sel.indices.begin(), sel.indices.end());
    if (distinct.size() != sel.indices.size()) return std::nullopt;
    Rect rect{grid.rows(), grid.cols(), -1, -1};
    for (std::size_t idx : distinct) {
        int r = static_cast<int>(idx / grid.cols()), c = static_cast<int>(idx % grid.cols());
        rect.r0 = std::min(rect.r0, r);
        rect.c0 = std::min(rect.c0, c);
        rect.r1 = std::max(rect.r1, r);
        rect.c1 = std::max(rect.c1, c);
    }
    std::size_t area = std::size_t(rect.r1 - rect.r0 + 1) * std::size_t(rect.c1 - rect.c0 + 1);
    if (area != distinct.size()) return std::nullopt;
    return rect;
}

} // namespace

PatchSelection select_patches(const RegionSpec& spec, const PatchGrid& grid) {
    validate(spec);
    std::vector<std::size_t> indices;
    switch (spec.kind()) {
    case RegionKind::image:
        indices.resize(grid.size());
        std::iota(indices.begin(), indices.end(), std::size_t{0});
        break;
    case RegionKind::patch: {
        const auto& p = std::get<PatchRegion>(spec.payload);
        if (p.row < 0 || p.row >= grid.rows() || p.col < 0 || p.col >= grid.cols())
            throw ValidationError("patch (" + std::to_string(p.row) + ", " + std::to_string(p.col) +
                                  ") is outside the " + std::to_string(grid.rows()) + "x" +
                                  std::to_string(grid.cols()) + " grid");
        indices.push_back(grid.flat_index(p.row, p.col));
        break;
    }
    case RegionKind::box:
        append_box(std::get<BoxRegion>(spec.payload).box, grid, indices);
        break;
    case RegionKind::box_set:
        for (const auto& b : std::get<BoxSetRegion>(spec.payload).boxes) append_box(b, grid, indices);
        break;
    case RegionKind::trace: {
        const auto orig = grid.original_size();
        for (const auto& pt : std::get<TraceRegion>(spec.payload).points) {
            int c = clamp_cell(pt.x, orig.width, grid.cols());
            int r = clamp_cell(pt.y, orig.height, grid.rows());
            indices.push_back(grid.flat_index(r, c));
        }
        break;
    }
    }
    if (indices.empty()) throw EmptySelectionError("region selects no patches");
    return uniform(spec.kind(), std::move(indices));
}

void validate(const PatchSelection& sel, const PatchGrid& grid) {
    if (sel.indices.empty()) throw ValidationError("selection is empty");
    if (sel.indices.size() != sel.weights.size())
        throw ValidationError("selection indices and weights differ in length");
    CompensatedSum total;
    for (std::size_t i = 0; i < sel.indices.size(); ++i) {
        if (sel.indices[i] >= grid.size())
            throw ValidationError("selection index " + std::to_string(sel.indices[i]) + " outside grid");
        if (!(sel.weights[i] >= 0) || !std::isfinite(sel.weights[i]))
            throw ValidationError("selection weights must be finite and nonnegative");
        total.add(sel.weights[i]);
    }
    if (std::abs(total.value() - 1.0) > 1e-9) throw ValidationError("selection weights do not sum to 1");
}

std::vector<double> gaussian_weights_unnormalized(int rows, int cols) {
    if (rows < 1 || cols < 1) throw ValidationError("gaussian weights need rows, cols >= 1");
    // integer numerator keeps mirrored coordinates exact negatives of each other
    auto coord = [](int i, int n) { return n == 1 ? 0.0 : double(2 * i - (n - 1)) / (n - 1); };
    std::vector<double> w(static_cast<std::size_t>(rows) * cols);
    for (int r = 0; r < rows; ++r) {
        double a = coord(r, rows);
        for (int c = 0; c < cols; ++c) {
            double b = coord(c, cols);
            w[static_cast<std::size_t>(r) * cols + c] = std::exp(-(a * a + b * b));
        }
    }
    return w;
}

std::vector<double> gaussian_weights(int rows, int cols) {
    auto w = gaussian_weights_unnormalized(rows, cols);
    CompensatedSum total;
    for (double x : w) total.add(x);
    for (double& x : w) x /= total.value();
    return w;
}

std::vector<double> mode_weights(const PatchSelection& sel, const PatchGrid& grid, AggregationMode mode) {
    validate(sel, grid);
    switch (mode) {
    case AggregationMode::uniform:
        return sel.weights;
    case AggregationMode::gaussian: {
        if (sel.kind != RegionKind::image && sel.kind != RegionKind::box && sel.kind != RegionKind::patch)
            throw ModeError("gaussian aggregation needs a rectangular region (image or box), got " +
                            std::string(to_string(sel.kind)));
        auto rect = as_rectangle(sel, grid);
        if (!rect) throw ModeError("gaussian aggregation needs a full rectangle of contiguous patches");
        const int h = rect->r1 - rect->r0 + 1, w = rect->c1 - rect->c0 + 1;
        auto g = gaussian_weights(h, w);
        std::vector<double> out(sel.indices.size());
        for (std::size_t i = 0; i < sel.indices.size(); ++i) {
            int r = static_cast<int>(sel.indices[i] / grid.cols()) - rect->r0;
            int c = static_cast<int>(sel.indices[i] % grid.cols()) - rect->c0;
            out[i] = g[static_cast<std::size_t>(r) * w + c];
        }
        return out;
    }
    case AggregationMode::attention: {
        if (!grid.has_attention()) throw ModeError("attention aggregation needs a grid with an attention map");
        const auto& att = *grid.attention();
        std::vector<double> out(sel.indices.size());
        CompensatedSum mass;
        for (std::size_t i = 0; i < sel.indices.size(); ++i) {
            out[i] = sel.weights[i] * double(att[sel.indices[i]]);
            mass.add(out[i]);
        }
        if (!(mass.value() > 0))
            throw DegenerateWeightError("attention mass over the selected patches is zero");
        for (double& x : out) x /= mass.value();
        return out;
    }
    }
    throw ModeError("unknown aggregation mode");
}

std::vector<std::pair<std::size_t, double>> merged_weights(const PatchSelection& sel,
                                                           const std::vector<double>& weights) {
    std::vector<std::pair<std::size_t, double>> pairs;
    pairs.reserve(sel.indices.size());
    for (std::size_t i = 0; i < sel.indices.size(); ++i) pairs.emplace_back(sel.indices[i], weights[i]);
    std::stable_sort(pairs.begin(), pairs.end(), [](auto& a, auto& b) { return a.first < b.first; });
    std::vector<std::pair<std::size_t, double>> merged;
    for (const auto& [idx, w] : pairs) {
        if (!merged.empty() && merged.back().first == idx)
            merged.back().second += w;
        else
            merged.emplace_back(idx, w);
    }
    return merged;
}

RegionEmbedding aggregate(const PatchSelection& sel, const PatchGrid& grid, AggregationMode mode) {
    auto weights = mode_weights(sel, grid, mode);

    // fixed ascending-index order; ties keep a value-sorted order so any
    // permutation of the multiset gives the same sequence of additions
    std::vector<std::pair<std::size_t, double>> terms;
    terms.reserve(sel.indices.size());
    for (std::size_t i = 0; i < sel.indices.size(); ++i) terms.emplace_back(sel.indices[i], weights[i]);
    std::sort(terms.begin(), terms.end());

    const int dim = grid.dim();
    std::vector<CompensatedSum> acc(dim);
    for (const auto& [idx, w] : terms) {
        const float* v = grid.patch(idx);
        for (int d = 0; d < dim; ++d) acc[d].add(w * double(v[d]));
    }
    RegionEmbedding out;
    out.kind = sel.kind;
    out.mode = mode;
    out.vector.resize(dim);
    for (int d = 0; d < dim; ++d) out.vector[d] = acc[d].value();
    return out;
}

} // namespace pioner

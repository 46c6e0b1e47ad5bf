#include "support/oracles.hpp"

#include <algorithm>
#include <cmath>
#include <variant>

namespace pioner::oracle {

double central_difference(const std::function<double(const std::vector<double>&)>& f, std::vector<double> x,
                          std::size_t i, double h) {
    const double x0 = x[i];
    x[i] = x0 + h;
    const double up = f(x);
    x[i] = x0 - h;
    const double down = f(x);
    return (up - down) / (2 * h);
}

double max_relative_error(const std::vector<double>& a, const std::vector<double>& b, double floor) {
    double worst = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double scale = std::max({std::abs(a[i]), std::abs(b[i]), floor});
        worst = std::max(worst, std::abs(a[i] - b[i]) / scale);
    }
    return worst;
}

} // namespace pioner::oracle

namespace pioner::oracle {

std::vector<std::size_t> box_cells(const Box& box, int rows, int cols, PixelSize original) {
    // Work in pixel units scaled by the cell count so that cell edges are
    // exact integers whenever the image dimensions are.
    std::vector<std::size_t> out;
    for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < cols; ++c) {
            const double cx0 = double(c) * original.width, cx1 = double(c + 1) * original.width;
            const double cy0 = double(r) * original.height, cy1 = double(r + 1) * original.height;
            const double ox = std::min(box.x1 * cols, cx1) - std::max(box.x0 * cols, cx0);
            const double oy = std::min(box.y1 * rows, cy1) - std::max(box.y0 * rows, cy0);
            if (ox > 0 && oy > 0) out.push_back(std::size_t(r) * cols + c);
        }
    }
    return out;
}

std::size_t trace_cell(const Point& p, int rows, int cols, PixelSize original) {
    const double x = std::clamp(p.x, 0.0, double(original.width));
    const double y = std::clamp(p.y, 0.0, double(original.height));
    int col = cols - 1, row = rows - 1;
    for (int c = 0; c < cols; ++c)
        if (x * cols >= double(c) * original.width && x * cols < double(c + 1) * original.width) col = c;
    for (int r = 0; r < rows; ++r)
        if (y * rows >= double(r) * original.height && y * rows < double(r + 1) * original.height) row = r;
    return std::size_t(row) * cols + col;
}

std::vector<double> weighted_sum(const PatchGrid& grid, const std::vector<std::size_t>& indices,
                                 const std::vector<double>& weights) {
    std::vector<double> out(grid.dim(), 0.0);
    for (std::size_t k = 0; k < indices.size(); ++k)
        for (int d = 0; d < grid.dim(); ++d) out[d] += weights[k] * grid.patch(indices[k])[d];
    return out;
}

std::vector<double> region_set_embedding(const PatchGrid& grid, const std::vector<Box>& boxes) {
    std::vector<double> sum(grid.dim(), 0.0);
    std::size_t count = 0;
    for (const Box& b : boxes) {
        for (std::size_t i : box_cells(b, grid.rows(), grid.cols(), grid.original_size())) {
            for (int d = 0; d < grid.dim(); ++d) sum[d] += grid.patch(i)[d];
            ++count;
        }
    }
    for (double& x : sum) x /= double(count);
    return sum;
}

std::vector<double> trace_embedding(const PatchGrid& grid, const std::vector<Point>& points) {
    std::vector<double> sum(grid.dim(), 0.0);
    for (const Point& p : points) {
        std::size_t i = trace_cell(p, grid.rows(), grid.cols(), grid.original_size());
        for (int d = 0; d < grid.dim(); ++d) sum[d] += grid.patch(i)[d];
    }
    for (double& x : sum) x /= double(points.size());
    return sum;
}

std::vector<double> uniform_embedding(const PatchGrid& grid, const RegionSpec& spec) {
    switch (spec.kind()) {
    case RegionKind::image: {
        std::vector<std::size_t> all(grid.size());
        for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
        return weighted_sum(grid, all, std::vector<double>(all.size(), 1.0 / double(all.size())));
    }
    case RegionKind::patch: {
        const auto& p = std::get<PatchRegion>(spec.payload);
        return weighted_sum(grid, {std::size_t(p.row) * grid.cols() + p.col}, {1.0});
    }
    case RegionKind::box:
        return region_set_embedding(grid, {std::get<BoxRegion>(spec.payload).box});
    case RegionKind::box_set:
        return region_set_embedding(grid, std::get<BoxSetRegion>(spec.payload).boxes);
    case RegionKind::trace:
        return trace_embedding(grid, std::get<TraceRegion>(spec.payload).points);
    }
    return {};
}

} // namespace pioner::oracle

namespace pioner::oracle {

std::vector<double> project_naive(const std::vector<std::vector<double>>& columns, const std::vector<double>& v,
                                  double tau, std::vector<double>* alpha) {
    long double norm = 0;
    for (double x : v) norm += (long double)x * x;
    norm = std::sqrt(norm);
    std::vector<long double> e(columns.size());
    long double z = 0;
    for (std::size_t j = 0; j < columns.size(); ++j) {
        long double dot = 0;
        for (std::size_t d = 0; d < v.size(); ++d) dot += (long double)columns[j][d] * v[d];
        e[j] = std::exp(dot / norm / tau);
        z += e[j];
    }
    std::vector<double> out(v.size(), 0.0);
    if (alpha) alpha->assign(columns.size(), 0.0);
    for (std::size_t j = 0; j < columns.size(); ++j) {
        const long double a = e[j] / z;
        if (alpha) (*alpha)[j] = double(a);
        for (std::size_t d = 0; d < v.size(); ++d) out[d] = double(out[d] + a * columns[j][d]);
    }
    return out;
}

} // namespace pioner::oracle

#include <cctype>
#include <map>
#include <set>
#include <sstream>

namespace pioner::oracle {

std::vector<std::string> words(const std::string& text) {
    std::string cleaned;
    for (unsigned char c : text) cleaned += std::ispunct(c) ? ' ' : char(std::tolower(c));
    std::istringstream in(cleaned);
    std::vector<std::string> out;
    for (std::string w; in >> w;) out.push_back(w);
    return out;
}

namespace {

// n-grams as space-joined strings, in order, with repeats
std::vector<std::string> grams(const std::vector<std::string>& w, int n) {
    std::vector<std::string> out;
    for (int i = 0; i + n <= int(w.size()); ++i) {
        std::string g = w[i];
        for (int k = 1; k < n; ++k) g += " " + w[i + k];
        out.push_back(g);
    }
    return out;
}

int occurrences(const std::vector<std::string>& list, const std::string& g) {
    return int(std::count(list.begin(), list.end(), g));
}

} // namespace

std::vector<double> cider_d(const std::vector<Record>& records) {
    const double n_docs = double(records.size());
    auto doc_freq = [&](const std::string& g, int n) {
        int df = 0;
        for (const auto& r : records) {
            bool any = false;
            for (const auto& ref : r.references)
                if (occurrences(grams(words(ref), n), g) > 0) any = true;
            df += any;
        }
        return double(df);
    };
    auto weight_vector = [&](const std::vector<std::string>& w, int n) {
        std::map<std::string, double> v;
        auto gs = grams(w, n);
        for (const auto& g : std::set<std::string>(gs.begin(), gs.end()))
            v[g] = occurrences(gs, g) * (std::log(n_docs) - std::log(std::max(1.0, doc_freq(g, n))));
        return v;
    };
    auto norm = [](const std::map<std::string, double>& v) {
        double s = 0;
        for (const auto& kv : v) s += kv.second * kv.second;
        return std::sqrt(s);
    };
    std::vector<double> out;
    double total = 0;
    for (const auto& r : records) {
        auto cw = words(r.candidate);
        double record = 0;
        for (const auto& ref : r.references) {
            auto rw = words(ref);
            // the length term counts bigrams, following the reference code
            double delta = double(grams(cw, 2).size()) - double(grams(rw, 2).size());
            double pen = std::exp(-delta * delta / 72.0);
            double s = 0;
            for (int n = 1; n <= 4; ++n) {
                auto hv = weight_vector(cw, n), rv = weight_vector(rw, n);
                double dot = 0;
                for (const auto& [g, h] : hv)
                    if (rv.count(g)) dot += std::min(h, rv[g]) * rv[g];
                double nh = norm(hv), nr = norm(rv);
                if (nh != 0 && nr != 0) dot /= nh * nr;
                s += dot * pen;
            }
            record += s / 4;
        }
        record = 10 * record / double(r.references.size());
        out.push_back(record);
        total += record;
    }
    out.push_back(total / n_docs);
    return out;
}

std::vector<double> bleu4(const std::vector<Record>& records) {
    auto score = [](const std::vector<double>& match, const std::vector<double>& total, double c, double r) {
        if (c == 0) return 0.0;
        double prod = 1;
        for (int n = 0; n < 4; ++n) {
            if (match[n] == 0) return 0.0;
            prod *= match[n] / total[n];
        }
        double bp = c > r ? 1.0 : std::exp(1 - r / c);
        return bp * std::pow(prod, 0.25);
    };
    std::vector<double> out, m_all(4, 0), t_all(4, 0);
    double c_all = 0, r_all = 0;
    for (const auto& rec : records) {
        auto cw = words(rec.candidate);
        std::vector<double> m(4, 0), t(4, 0);
        for (int n = 1; n <= 4; ++n) {
            auto cg = grams(cw, n);
            t[n - 1] = double(cg.size());
            for (const auto& g : std::set<std::string>(cg.begin(), cg.end())) {
                int best = 0;
                for (const auto& ref : rec.references) best = std::max(best, occurrences(grams(words(ref), n), g));
                m[n - 1] += std::min(occurrences(cg, g), best);
            }
        }
        double c = double(cw.size());
        double r = -1;
        for (const auto& ref : rec.references) {
            double len = double(words(ref).size());
            if (r < 0 || std::abs(len - c) < std::abs(r - c) || (std::abs(len - c) == std::abs(r - c) && len < r))
                r = len;
        }
        out.push_back(score(m, t, c, r));
        for (int n = 0; n < 4; ++n) {
            m_all[n] += m[n];
            t_all[n] += t[n];
        }
        c_all += c;
        r_all += r;
    }
    out.push_back(score(m_all, t_all, c_all, r_all));
    return out;
}

namespace {

bool is_subsequence(const std::vector<std::string>& sub, const std::vector<std::string>& of) {
    std::size_t j = 0;
    for (const auto& w : of)
        if (j < sub.size() && sub[j] == w) ++j;
    return j == sub.size();
}

// longest common subsequence by enumerating every subsequence of a
std::size_t lcs_brute(const std::vector<std::string>& a, const std::vector<std::string>& b) {
    std::size_t best = 0;
    for (unsigned mask = 0; mask < (1u << a.size()); ++mask) {
        std::vector<std::string> sub;
        for (std::size_t i = 0; i < a.size(); ++i)
            if (mask & (1u << i)) sub.push_back(a[i]);
        if (sub.size() > best && is_subsequence(sub, b)) best = sub.size();
    }
    return best;
}

} // namespace

std::vector<double> rouge_l(const std::vector<Record>& records) {
    std::vector<double> out;
    double total = 0;
    for (const auto& rec : records) {
        auto cw = words(rec.candidate);
        double p = 0, r = 0;
        for (const auto& ref : rec.references) {
            auto rw = words(ref);
            if (cw.empty() || rw.empty()) continue;
            double l = double(lcs_brute(cw, rw));
            p = std::max(p, l / double(cw.size()));
            r = std::max(r, l / double(rw.size()));
        }
        double f = (p > 0 && r > 0) ? (1 + 1.44) * p * r / (r + 1.44 * p) : 0.0;
        out.push_back(f);
        total += f;
    }
    out.push_back(total / double(records.size()));
    return out;
}

} // namespace pioner::oracle

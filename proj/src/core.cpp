#include "pioner/core.hpp"

#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace pioner {

// ---------------------------------------------------------------------------
// PatchGrid

PatchGrid::PatchGrid(int rows, int cols, int dim, std::vector<float> data,
                     PixelSize source_resolution, int patch_size,
                     std::optional<std::vector<float>> attention,
                     std::optional<PixelSize> original_size)
    : rows_(rows), cols_(cols), dim_(dim), data_(std::move(data)),
      source_resolution_(source_resolution), patch_size_(patch_size),
      attention_(std::move(attention)),
      original_size_(original_size.value_or(source_resolution)) {
    if (rows_ < 1 || cols_ < 1 || dim_ < 1)
        throw ValidationError("patch grid needs rows, cols, dim >= 1");
    if (data_.size() != size() * static_cast<std::size_t>(dim_))
        throw ValidationError("patch grid data length " + std::to_string(data_.size()) +
                              " does not match rows*cols*dim");
    for (float x : data_)
        if (!std::isfinite(x)) throw ValidationError("patch grid contains non-finite values");
    if (attention_) {
        if (attention_->size() != size())
            throw ValidationError("attention map size does not match grid");
        bool any_positive = false;
        for (float a : *attention_) {
            if (!std::isfinite(a) || a < 0) throw ValidationError("attention entries must be finite and >= 0");
            any_positive |= a > 0;
        }
        if (!any_positive) throw ValidationError("attention map has no positive entry");
    }
    if (original_size_.width < 1 || original_size_.height < 1)
        throw ValidationError("grid original size must be positive");
}

std::size_t PatchGrid::bytes() const {
    std::size_t n = data_.size() * sizeof(float);
    if (attention_) n += attention_->size() * sizeof(float);
    return n + sizeof(PatchGrid);
}

// ---------------------------------------------------------------------------
// enums

std::string_view to_string(RegionKind kind) {
    switch (kind) {
    case RegionKind::image: return "image";
    case RegionKind::patch: return "patch";
    case RegionKind::box: return "box";
    case RegionKind::box_set: return "box_set";
    case RegionKind::trace: return "trace";
    }
    return "?";
}

RegionKind region_kind_from_string(std::string_view s) {
    if (s == "image") return RegionKind::image;
    if (s == "patch") return RegionKind::patch;
    if (s == "box") return RegionKind::box;
    if (s == "box_set") return RegionKind::box_set;
    if (s == "trace") return RegionKind::trace;
    throw SchemaError("unknown region kind '" + std::string(s) + "'");
}

std::string_view to_string(AggregationMode mode) {
    switch (mode) {
    case AggregationMode::uniform: return "uniform";
    case AggregationMode::gaussian: return "gaussian";
    case AggregationMode::attention: return "attention";
    }
    return "?";
}

AggregationMode aggregation_mode_from_string(std::string_view s) {
    if (s == "uniform") return AggregationMode::uniform;
    if (s == "gaussian") return AggregationMode::gaussian;
    if (s == "attention") return AggregationMode::attention;
    throw ValidationError("unknown aggregation mode '" + std::string(s) + "'");
}

std::string_view to_string(GapMode mode) {
    switch (mode) {
    case GapMode::memory: return "memory";
    case GapMode::noise: return "noise";
    case GapMode::none: return "none";
    }
    return "?";
}

GapMode gap_mode_from_string(std::string_view s) {
    if (s == "memory") return GapMode::memory;
    if (s == "noise") return GapMode::noise;
    if (s == "none") return GapMode::none;
    throw ValidationError("unknown gap mode '" + std::string(s) + "'");
}

// ---------------------------------------------------------------------------
// region specs

namespace {

void check_finite(double v, const char* what) {
    if (!std::isfinite(v)) throw ValidationError(std::string(what) + " must be finite");
}

void validate_box(const Box& b) {
    check_finite(b.x0, "box x0");
    check_finite(b.y0, "box y0");
    check_finite(b.x1, "box x1");
    check_finite(b.y1, "box y1");
    if (!(b.x0 < b.x1) || !(b.y0 < b.y1))
        throw ValidationError("degenerate box: require x0 < x1 and y0 < y1");
}

double number_at(const json& arr, std::size_t i, const char* field) {
    const json& v = arr.at(i);
    if (!v.is_number()) throw SchemaError(std::string(field) + " entries must be numbers");
    return v.get<double>();
}

Box box_from_json(const json& j, const char* field) {
    if (!j.is_array() || j.size() != 4)
        throw SchemaError(std::string(field) + " must be an array [x0, y0, x1, y1]");
    return {number_at(j, 0, field), number_at(j, 1, field), number_at(j, 2, field),
            number_at(j, 3, field)};
}

const json& require(const json& j, const char* key) {
    auto it = j.find(key);
    if (it == j.end()) throw SchemaError(std::string("missing field '") + key + "'");
    return *it;
}

} // namespace

void validate(const RegionSpec& spec) {
    std::visit(
        [](const auto& r) {
            using T = std::decay_t<decltype(r)>;
            if constexpr (std::is_same_v<T, PatchRegion>) {
                if (r.row < 0 || r.col < 0) throw ValidationError("patch row/col must be >= 0");
            } else if constexpr (std::is_same_v<T, BoxRegion>) {
                validate_box(r.box);
            } else if constexpr (std::is_same_v<T, BoxSetRegion>) {
                if (r.boxes.empty()) throw ValidationError("box_set must contain at least one box");
                for (const auto& b : r.boxes) validate_box(b);
            } else if constexpr (std::is_same_v<T, TraceRegion>) {
                if (r.points.empty()) throw ValidationError("trace must contain at least one point");
                for (const auto& p : r.points) {
                    check_finite(p.x, "trace x");
                    check_finite(p.y, "trace y");
                }
            }
        },
        spec.payload);
}

RegionSpec region_spec_from_json(const json& j) {
    if (!j.is_object()) throw SchemaError("region spec must be a JSON object");
    const json& kind_field = require(j, "kind");
    if (!kind_field.is_string()) throw SchemaError("'kind' must be a string");
    if (auto v = j.find("version"); v != j.end() && *v != kRegionSpecVersion)
        throw SchemaError("unsupported region spec version " + v->dump());

    RegionSpec spec;
    switch (region_kind_from_string(kind_field.get<std::string>())) {
    case RegionKind::image:
        spec = RegionSpec::image();
        break;
    case RegionKind::patch: {
        const json& p = require(j, "patch");
        if (!p.is_array() || p.size() != 2 || !p[0].is_number_integer() || !p[1].is_number_integer())
            throw SchemaError("'patch' must be [row, col] integers");
        spec = RegionSpec::patch(p[0].get<int>(), p[1].get<int>());
        break;
    }
    case RegionKind::box:
        spec = RegionSpec::box(box_from_json(require(j, "box"), "box"));
        break;
    case RegionKind::box_set: {
        const json& arr = require(j, "boxes");
        if (!arr.is_array()) throw SchemaError("'boxes' must be an array");
        std::vector<Box> boxes;
        for (const auto& b : arr) boxes.push_back(box_from_json(b, "boxes"));
        spec = RegionSpec::box_set(std::move(boxes));
        break;
    }
    case RegionKind::trace: {
        const json& arr = require(j, "points");
        if (!arr.is_array()) throw SchemaError("'points' must be an array");
        std::vector<Point> points;
        for (const auto& p : arr) {
            if (!p.is_array() || p.size() != 2)
                throw SchemaError("trace points must be [x, y] pairs");
            points.push_back({number_at(p, 0, "points"), number_at(p, 1, "points")});
        }
        spec = RegionSpec::trace(std::move(points));
        break;
    }
    }
    validate(spec);
    return spec;
}

RegionSpec parse_region_spec(std::string_view text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw SchemaError(std::string("region spec is not valid JSON: ") + e.what());
    }
    return region_spec_from_json(j);
}

json to_json(const RegionSpec& spec) {
    json j;
    j["kind"] = std::string(to_string(spec.kind()));
    auto box_json = [](const Box& b) { return json::array({b.x0, b.y0, b.x1, b.y1}); };
    std::visit(
        [&](const auto& r) {
            using T = std::decay_t<decltype(r)>;
            if constexpr (std::is_same_v<T, PatchRegion>) {
                j["patch"] = {r.row, r.col};
            } else if constexpr (std::is_same_v<T, BoxRegion>) {
                j["box"] = box_json(r.box);
            } else if constexpr (std::is_same_v<T, BoxSetRegion>) {
                j["boxes"] = json::array();
                for (const auto& b : r.boxes) j["boxes"].push_back(box_json(b));
            } else if constexpr (std::is_same_v<T, TraceRegion>) {
                j["points"] = json::array();
                for (const auto& p : r.points) j["points"].push_back({p.x, p.y});
            }
        },
        spec.payload);
    return j;
}

std::string serialize_region_spec(const RegionSpec& spec) { return to_json(spec).dump(); }

// ---------------------------------------------------------------------------
// Config

namespace {

using Setter = std::function<void(Config&, const json&)>;
using Getter = std::function<json(const Config&)>;

struct KeyDesc {
    Setter set;
    Getter get;
};

[[noreturn]] void bad_type(const std::string& key, const char* expected) {
    throw ConfigError("config key '" + key + "' expects " + expected);
}

double as_number(const std::string& key, const json& v) {
    if (!v.is_number()) bad_type(key, "a number");
    return v.get<double>();
}

long long as_integer(const std::string& key, const json& v) {
    if (v.is_number_integer()) return v.get<long long>();
    if (v.is_number_float()) {
        double d = v.get<double>();
        if (std::floor(d) == d) return static_cast<long long>(d);
    }
    bad_type(key, "an integer");
}

std::string as_string(const std::string& key, const json& v) {
    if (!v.is_string()) bad_type(key, "a string");
    return v.get<std::string>();
}

bool as_bool(const std::string& key, const json& v) {
    if (!v.is_boolean()) bad_type(key, "a boolean");
    return v.get<bool>();
}

void require_that(bool ok, const std::string& key, const char* constraint) {
    if (!ok) throw ConfigError("config key '" + key + "' must be " + constraint);
}

const std::map<std::string, KeyDesc>& key_table() {
    static const std::map<std::string, KeyDesc> table = [] {
        std::map<std::string, KeyDesc> t;
        auto integer = [&](const std::string& key, auto field, long long min) {
            t[key] = {[key, field, min](Config& c, const json& v) {
                          long long x = as_integer(key, v);
                          require_that(x >= min, key, (">= " + std::to_string(min)).c_str());
                          field(c) = static_cast<std::decay_t<decltype(field(c))>>(x);
                      },
                      [field](const Config& c) { return json(field(c)); }};
        };
        auto string = [&](const std::string& key, auto field) {
            t[key] = {[key, field](Config& c, const json& v) { field(c) = as_string(key, v); },
                      [field](const Config& c) { return json(field(c)); }};
        };
        auto boolean = [&](const std::string& key, auto field) {
            t[key] = {[key, field](Config& c, const json& v) { field(c) = as_bool(key, v); },
                      [field](const Config& c) { return json(field(c)); }};
        };

        string("backbone.name", [](auto& c) -> auto& { return c.backbone.name; });
        integer("backbone.patch_size", [](auto& c) -> auto& { return c.backbone.patch_size; }, 1);
        integer("backbone.input_resolution",
                [](auto& c) -> auto& { return c.backbone.input_resolution; }, 1);
        integer("backbone.dim", [](auto& c) -> auto& { return c.backbone.dim; }, 1);
        integer("backbone.seed", [](auto& c) -> auto& { return c.backbone.seed; }, 0);
        boolean("backbone.attention", [](auto& c) -> auto& { return c.backbone.attention; });
        string("backbone.grid_dir", [](auto& c) -> auto& { return c.backbone.grid_dir; });
        string("backbone.text_table", [](auto& c) -> auto& { return c.backbone.text_table; });

        t["aggregation"] = {[](Config& c, const json& v) {
                                try {
                                    c.aggregation = aggregation_mode_from_string(as_string("aggregation", v));
                                } catch (const ValidationError& e) {
                                    throw ConfigError(std::string("config key 'aggregation': ") + e.what());
                                }
                            },
                            [](const Config& c) { return json(std::string(to_string(c.aggregation))); }};

        t["gap.mode"] = {[](Config& c, const json& v) {
                             try {
                                 c.gap.mode = gap_mode_from_string(as_string("gap.mode", v));
                             } catch (const ValidationError& e) {
                                 throw ConfigError(std::string("config key 'gap.mode': ") + e.what());
                             }
                         },
                         [](const Config& c) { return json(std::string(to_string(c.gap.mode))); }};
        t["gap.tau"] = {[](Config& c, const json& v) {
                            double x = as_number("gap.tau", v);
                            require_that(std::isfinite(x) && x > 0, "gap.tau", "> 0");
                            c.gap.tau = x;
                        },
                        [](const Config& c) { return json(c.gap.tau); }};
        t["gap.sigma2"] = {[](Config& c, const json& v) {
                               double x = as_number("gap.sigma2", v);
                               require_that(std::isfinite(x) && x >= 0, "gap.sigma2", ">= 0");
                               c.gap.sigma2 = x;
                           },
                           [](const Config& c) { return json(c.gap.sigma2); }};
        t["gap.preset"] = {[](Config& c, const json& v) {
                               std::string p = as_string("gap.preset", v);
                               if (p == "viecap-regime") {
                                   // noise-injection regime used for external-knowledge decoders
                                   c.gap.mode = GapMode::noise;
                                   c.gap.sigma2 = 16e-3;
                                   c.train.epochs = 15;
                                   c.train.batch = 80;
                                   c.train.lr = 2e-5;
                               } else if (p == "decap") {
                                   c.gap.mode = GapMode::memory;
                                   c.gap.tau = 0.01;
                                   c.train.epochs = 10;
                                   c.train.batch = 64;
                                   c.train.lr = 1e-5;
                                   c.train.weight_decay = 0.01;
                               } else if (!p.empty()) {
                                   throw ConfigError("config key 'gap.preset': unknown preset '" + p + "'");
                               }
                               c.gap.preset = p;
                           },
                           [](const Config& c) { return json(c.gap.preset); }};
        string("gap.memory", [](auto& c) -> auto& { return c.gap.memory; });
        integer("gap.noise_seed", [](auto& c) -> auto& { return c.gap.noise_seed; }, 0);

        string("decoder.checkpoint", [](auto& c) -> auto& { return c.decoder.checkpoint; });
        t["decoder.strategy"] = {[](Config& c, const json& v) {
                                     std::string s = as_string("decoder.strategy", v);
                                     require_that(s == "greedy" || s == "beam", "decoder.strategy",
                                                  "'greedy' or 'beam'");
                                     c.decoder.strategy = s;
                                 },
                                 [](const Config& c) { return json(c.decoder.strategy); }};
        integer("decoder.beam_size", [](auto& c) -> auto& { return c.decoder.beam_size; }, 1);
        integer("decoder.max_len", [](auto& c) -> auto& { return c.decoder.max_len; }, 1);
        integer("decoder.d_model", [](auto& c) -> auto& { return c.decoder.d_model; }, 1);
        integer("decoder.n_layer", [](auto& c) -> auto& { return c.decoder.n_layer; }, 1);
        integer("decoder.n_head", [](auto& c) -> auto& { return c.decoder.n_head; }, 1);
        integer("decoder.max_vocab", [](auto& c) -> auto& { return c.decoder.max_vocab; }, 1);

        integer("train.epochs", [](auto& c) -> auto& { return c.train.epochs; }, 1);
        t["train.lr"] = {[](Config& c, const json& v) {
                             double x = as_number("train.lr", v);
                             require_that(std::isfinite(x) && x > 0, "train.lr", "> 0");
                             c.train.lr = x;
                         },
                         [](const Config& c) { return json(c.train.lr); }};
        integer("train.batch", [](auto& c) -> auto& { return c.train.batch; }, 1);
        t["train.weight_decay"] = {[](Config& c, const json& v) {
                                       double x = as_number("train.weight_decay", v);
                                       require_that(std::isfinite(x) && x >= 0, "train.weight_decay", ">= 0");
                                       c.train.weight_decay = x;
                                   },
                                   [](const Config& c) { return json(c.train.weight_decay); }};
        integer("train.seed", [](auto& c) -> auto& { return c.train.seed; }, 0);
        boolean("train.deterministic", [](auto& c) -> auto& { return c.train.deterministic; });
        integer("train.workers", [](auto& c) -> auto& { return c.train.workers; }, 1);

        string("service.host", [](auto& c) -> auto& { return c.service.host; });
        integer("service.port", [](auto& c) -> auto& { return c.service.port; }, 0);
        integer("service.cache_bytes", [](auto& c) -> auto& { return c.service.cache_bytes; }, 0);
        integer("service.max_image_bytes", [](auto& c) -> auto& { return c.service.max_image_bytes; }, 1);
        integer("service.max_inflight", [](auto& c) -> auto& { return c.service.max_inflight; }, 1);
        string("service.cors_origin", [](auto& c) -> auto& { return c.service.cors_origin; });

        t["metrics.plugins"] = {[](Config& c, const json& v) {
                                    if (!v.is_object()) bad_type("metrics.plugins", "an object of name -> command");
                                    c.metrics.plugins.clear();
                                    for (auto it = v.begin(); it != v.end(); ++it)
                                        c.metrics.plugins.emplace_back(it.key(),
                                                                       as_string("metrics.plugins." + it.key(), *it));
                                },
                                [](const Config& c) {
                                    json o = json::object();
                                    for (const auto& [k, cmd] : c.metrics.plugins) o[k] = cmd;
                                    return o;
                                }};
        string("metrics.dense_similarity", [](auto& c) -> auto& { return c.metrics.dense_similarity; });
        t["metrics.dense_thresholds"] = {[](Config& c, const json& v) {
                                             if (!v.is_array() || v.empty())
                                                 bad_type("metrics.dense_thresholds", "a nonempty array of numbers");
                                             c.metrics.dense_thresholds.clear();
                                             for (const auto& x : v)
                                                 c.metrics.dense_thresholds.push_back(
                                                     as_number("metrics.dense_thresholds", x));
                                         },
                                         [](const Config& c) { return json(c.metrics.dense_thresholds); }};

        integer("tracebench.retries", [](auto& c) -> auto& { return c.tracebench.retries; }, 0);
        integer("tracebench.concurrency", [](auto& c) -> auto& { return c.tracebench.concurrency; }, 1);
        t["tracebench.rate_per_sec"] = {[](Config& c, const json& v) {
                                            double x = as_number("tracebench.rate_per_sec", v);
                                            require_that(x > 0, "tracebench.rate_per_sec", "> 0");
                                            c.tracebench.rate_per_sec = x;
                                        },
                                        [](const Config& c) { return json(c.tracebench.rate_per_sec); }};
        string("tracebench.endpoint", [](auto& c) -> auto& { return c.tracebench.endpoint; });
        string("tracebench.model", [](auto& c) -> auto& { return c.tracebench.model; });
        t["tracebench.timeout_s"] = {[](Config& c, const json& v) {
                                         double x = as_number("tracebench.timeout_s", v);
                                         require_that(x > 0, "tracebench.timeout_s", "> 0");
                                         c.tracebench.timeout_s = x;
                                     },
                                     [](const Config& c) { return json(c.tracebench.timeout_s); }};

        integer("eval.jobs", [](auto& c) -> auto& { return c.eval.jobs; }, 1);
        string("eval.image_root", [](auto& c) -> auto& { return c.eval.image_root; });
        return t;
    }();
    return table;
}

} // namespace

void Config::set(const std::string& key, const json& value) {
    const auto& table = key_table();
    auto it = table.find(key);
    if (it == table.end()) throw ConfigError("unknown config key '" + key + "'");
    it->second.set(*this, value);
}

json Config::to_json() const {
    json j = json::object();
    for (const auto& [key, desc] : key_table()) j[key] = desc.get(*this);
    return j;
}

Config config_from_json(const json& doc) {
    if (!doc.is_object()) throw ConfigError("config document must be a flat JSON object");
    Config cfg;
    // presets first so explicit keys win regardless of document order
    if (auto it = doc.find("gap.preset"); it != doc.end()) cfg.set("gap.preset", *it);
    for (auto it = doc.begin(); it != doc.end(); ++it)
        if (it.key() != "gap.preset") cfg.set(it.key(), it.value());
    return cfg;
}

Config load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    std::string text = ss.str();
    if (text.find_first_not_of(" \t\r\n") == std::string::npos) return Config{};
    json doc;
    try {
        doc = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ConfigError("config file '" + path + "' is not valid JSON: " + e.what());
    }
    return config_from_json(doc);
}

void apply_override(Config& cfg, const std::string& assignment) {
    auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0)
        throw ConfigError("override '" + assignment + "' must look like key=value");
    std::string key = assignment.substr(0, eq);
    std::string raw = assignment.substr(eq + 1);
    json value;
    try {
        value = json::parse(raw);
    } catch (const json::parse_error&) {
        value = raw;
    }
    cfg.set(key, value);
}

// ---------------------------------------------------------------------------

double l2_norm(const Vector& v) {
    // scaled so tiny or huge vectors neither underflow nor overflow
    double scale = 0;
    for (double x : v) scale = std::max(scale, std::abs(x));
    if (scale == 0 || !std::isfinite(scale)) return scale;
    double s = 0;
    for (double x : v) s += (x / scale) * (x / scale);
    return scale * std::sqrt(s);
}

Vector l2_normalized(const Vector& v) {
    double n = l2_norm(v);
    if (n == 0) throw ZeroVectorError("cannot normalize a zero vector");
    Vector out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] / n;
    return out;
}

double cosine(const Vector& a, const Vector& b) {
    if (a.size() != b.size()) throw ValidationError("cosine of vectors with different lengths");
    double dot = 0;
    for (std::size_t i = 0; i < a.size(); ++i) dot += a[i] * b[i];
    return dot / (l2_norm(a) * l2_norm(b));
}

} // namespace pioner

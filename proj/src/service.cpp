#include "pioner/service.hpp"

#include <algorithm>
#include <cctype>

#include <openssl/evp.h>

#include "pioner/errors.hpp"
#include "pioner/hash.hpp"

// after Eigen: <resolv.h> defines a _res macro
#include <httplib.h>

namespace pioner {

namespace {

ServiceResponse error_response(int status, const std::string& kind, const std::string& message) {
    return {status, {{"error", kind}, {"message", message}}};
}

class InflightGuard {
public:
    InflightGuard(std::atomic<int>& counter, int limit) : counter_(counter) {
        admitted_ = counter_.fetch_add(1) < limit;
    }
    ~InflightGuard() { counter_.fetch_sub(1); }
    bool admitted() const { return admitted_; }

private:
    std::atomic<int>& counter_;
    bool admitted_;
};

} // namespace

std::vector<unsigned char> decode_base64(std::string_view text) {
    if (text.starts_with("data:")) {
        auto comma = text.find(',');
        if (comma == std::string_view::npos || text.substr(0, comma).find(";base64") == std::string_view::npos)
            throw FormatError("data URL is not base64-encoded");
        text.remove_prefix(comma + 1);
    }
    std::string clean;
    for (char c : text)
        if (!std::isspace(static_cast<unsigned char>(c))) clean.push_back(c);
    if (clean.size() % 4 != 0) throw FormatError("base64 length is not a multiple of 4");
    std::vector<unsigned char> out(clean.size() / 4 * 3);
    int n = EVP_DecodeBlock(out.data(), reinterpret_cast<const unsigned char*>(clean.data()),
                            static_cast<int>(clean.size()));
    if (n < 0) throw FormatError("invalid base64");
    // EVP_DecodeBlock counts padding as zero bytes
    std::size_t pad = 0;
    if (!clean.empty() && clean.back() == '=') ++pad;
    if (clean.size() > 1 && clean[clean.size() - 2] == '=') ++pad;
    out.resize(static_cast<std::size_t>(n) - pad);
    return out;
}

CaptionService::CaptionService(Config cfg, std::shared_ptr<const BackboneAdapter> adapter,
                               std::shared_ptr<const CaptionPipeline> pipeline, std::string problem)
    : cfg_(std::move(cfg)), adapter_(std::move(adapter)), pipeline_(std::move(pipeline)), problem_(std::move(problem)),
      cache_(cfg_.service.cache_bytes) {
    if (pipeline_ && !adapter_) adapter_ = std::shared_ptr<const BackboneAdapter>(pipeline_, &pipeline_->adapter());
}

std::unique_ptr<CaptionService> CaptionService::from_config(const Config& cfg) {
    std::shared_ptr<const BackboneAdapter> adapter;
    std::shared_ptr<const CaptionPipeline> pipeline;
    std::string problem;
    try {
        adapter = make_adapter(cfg);
    } catch (const Error& e) {
        problem = std::string("backbone unavailable: ") + e.what();
    }
    if (adapter) {
        try {
            pipeline = std::make_shared<const CaptionPipeline>(CaptionPipeline::from_config(cfg, adapter));
        } catch (const Error& e) {
            problem = std::string("decoder unavailable: ") + e.what();
        }
    }
    return std::make_unique<CaptionService>(cfg, adapter, pipeline, problem);
}

ServiceResponse CaptionService::register_image(std::span<const unsigned char> bytes) {
    if (bytes.size() > cfg_.service.max_image_bytes)
        return error_response(413, "PayloadTooLarge",
                              "image is " + std::to_string(bytes.size()) + " bytes; limit is " +
                                  std::to_string(cfg_.service.max_image_bytes));
    if (bytes.empty()) return error_response(400, "FormatError", "empty request body");
    if (!adapter_) return error_response(503, "BackboneError", problem_);

    const std::string id = sha256_hex(bytes);
    bool hit = false;
    GridCache::GridPtr grid;
    try {
        grid = cache_.get_or_compute(
            id,
            [&] {
                RgbImage img = decode_image(bytes, id);
                ++encode_calls_;
                return adapter_->encode_image(img);
            },
            &hit);
    } catch (const FormatError& e) {
        return error_response(400, "FormatError", e.what());
    } catch (const BackboneError& e) {
        return error_response(503, "BackboneError", e.what());
    } catch (const Error& e) {
        return error_response(500, e.kind(), e.what());
    }
    return {200,
            {{"image_id", id},
             {"grid_rows", grid->rows()},
             {"grid_cols", grid->cols()},
             {"width", grid->original_size().width},
             {"height", grid->original_size().height},
             {"cached", hit}}};
}

ServiceResponse CaptionService::register_request(const std::string& content_type, const std::string& body) {
    if (content_type.starts_with("application/json")) {
        // base64 inflates by 4/3; check before decoding
        if (body.size() / 4 * 3 > cfg_.service.max_image_bytes + 1024)
            return error_response(413, "PayloadTooLarge", "image exceeds service.max_image_bytes");
        json j;
        try {
            j = json::parse(body);
        } catch (const json::exception& e) {
            return error_response(400, "FormatError", std::string("malformed JSON: ") + e.what());
        }
        if (!j.is_object() || !j.contains("image_base64") || !j["image_base64"].is_string())
            return error_response(400, "FormatError", "JSON uploads need a string field 'image_base64'");
        std::vector<unsigned char> bytes;
        try {
            bytes = decode_base64(j["image_base64"].get_ref<const std::string&>());
        } catch (const FormatError& e) {
            return error_response(400, "FormatError", e.what());
        }
        return register_image(bytes);
    }
    return register_image({reinterpret_cast<const unsigned char*>(body.data()), body.size()});
}

ServiceResponse CaptionService::caption(const std::string& image_id, const json& request) {
    if (!request.is_object()) return error_response(400, "FormatError", "request body must be a JSON object");
    auto grid = cache_.find(image_id);
    if (!grid)
        return error_response(404, "UnknownImage",
                              "image '" + image_id + "' is not cached; upload it again with POST /v1/images");
    if (!pipeline_) return error_response(503, "DecoderUnavailable", problem_);

    InflightGuard guard(inflight_, cfg_.service.max_inflight);
    if (!guard.admitted())
        return error_response(429, "Busy", "too many caption requests in flight; retry later");

    RegionSpec region;
    AggregationMode mode = cfg_.aggregation;
    bool return_weights = false;
    try {
        if (!request.contains("region")) throw SchemaError("missing field 'region'");
        region = region_spec_from_json(request["region"]);
        if (request.contains("aggregation")) {
            if (!request["aggregation"].is_string()) throw SchemaError("'aggregation' must be a string");
            mode = aggregation_mode_from_string(request["aggregation"].get<std::string>());
        }
        if (request.contains("return_weights")) {
            if (!request["return_weights"].is_boolean()) throw SchemaError("'return_weights' must be a boolean");
            return_weights = request["return_weights"].get<bool>();
        }
    } catch (const Error& e) {
        return error_response(422, e.kind(), e.what());
    }

    RegionCaption out;
    try {
        out = pipeline_->caption_grid(*grid, region, mode);
    } catch (const SchemaError& e) {
        return error_response(422, e.kind(), e.what());
    } catch (const ValidationError& e) {
        return error_response(422, e.kind(), e.what());
    } catch (const ModeError& e) {
        return error_response(422, e.kind(), e.what());
    } catch (const EmptySelectionError& e) {
        return error_response(422, e.kind(), e.what());
    } catch (const DegenerateWeightError& e) {
        return error_response(422, e.kind(), e.what());
    } catch (const Error& e) {
        return error_response(500, e.kind(), e.what());
    }

    json body = {{"image_id", image_id},
                 {"caption", out.caption.text},
                 {"aggregation", std::string(to_string(mode))},
                 {"empty", out.caption.empty}};
    if (return_weights) {
        json w = json::array();
        for (const auto& [index, weight] : out.weights)
            w.push_back({{"index", index},
                         {"row", index / static_cast<std::size_t>(grid->cols())},
                         {"col", index % static_cast<std::size_t>(grid->cols())},
                         {"weight", weight}});
        body["weights"] = w;
        body["grid_rows"] = grid->rows();
        body["grid_cols"] = grid->cols();
    }
    return {200, body};
}

ServiceResponse CaptionService::caption_request(const std::string& image_id, const std::string& body) {
    json j;
    try {
        j = json::parse(body);
    } catch (const json::exception& e) {
        return error_response(400, "FormatError", std::string("malformed JSON: ") + e.what());
    }
    return caption(image_id, j);
}

json CaptionService::health() const {
    json j;
    j["status"] = (adapter_ && pipeline_) ? "ok" : "degraded";
    j["backbone"] = adapter_ ? json(adapter_->name()) : json(nullptr);
    j["checkpoint_loaded"] = pipeline_ != nullptr;
    j["memory_bank_loaded"] = pipeline_ && pipeline_->memory() != nullptr;
    j["gap_mode"] = pipeline_ ? std::string(to_string(pipeline_->mode())) : std::string(to_string(cfg_.gap.mode));
    j["cache"] = {{"entries", cache_.size()}, {"bytes", cache_.bytes()}, {"budget", cache_.budget()}};
    if (!problem_.empty()) j["problem"] = problem_;
    return j;
}

json CaptionService::config() const {
    json j = cfg_.to_json();
    for (auto it = j.begin(); it != j.end(); ++it) {
        std::string key = it.key();
        std::transform(key.begin(), key.end(), key.begin(), [](unsigned char c) { return std::tolower(c); });
        if (key.find("token") != std::string::npos || key.find("secret") != std::string::npos ||
            key.find("password") != std::string::npos)
            *it = "<redacted>";
    }
    // plugin commands may carry credentials in their arguments
    if (j.contains("metrics.plugins") && j["metrics.plugins"].is_object())
        for (auto& cmd : j["metrics.plugins"]) cmd = "<redacted>";
    return j;
}

// ---- HTTP ----

struct HttpServer::Impl {
    CaptionService& service;
    httplib::Server server;

    explicit Impl(CaptionService& s) : service(s) {
        const auto& cfg = service.settings().service;
        const int threads = std::clamp(cfg.max_inflight, 4, 64);
        server.new_task_queue = [threads] { return new httplib::ThreadPool(static_cast<std::size_t>(threads)); };
        // room for base64 plus the JSON wrapper; the handler enforces the exact limit
        server.set_payload_max_length(cfg.max_image_bytes / 3 * 4 + 64 * 1024);
        server.set_default_headers({{"Access-Control-Allow-Origin", cfg.cors_origin},
                                    {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"},
                                    {"Access-Control-Allow-Headers", "Content-Type"}});

        auto send = [](httplib::Response& res, const ServiceResponse& r) {
            res.status = r.status;
            res.set_content(r.body.dump(), "application/json");
        };
        server.Options(".*", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });
        server.Post("/v1/images", [this, send](const httplib::Request& req, httplib::Response& res) {
            send(res, service.register_request(req.get_header_value("Content-Type"), req.body));
        });
        server.Post(R"(/v1/images/([0-9a-fA-F]+)/caption)",
                    [this, send](const httplib::Request& req, httplib::Response& res) {
                        send(res, service.caption_request(req.matches[1], req.body));
                    });
        server.Get("/v1/health", [this, send](const httplib::Request&, httplib::Response& res) {
            send(res, {200, service.health()});
        });
        server.Get("/v1/config", [this, send](const httplib::Request&, httplib::Response& res) {
            send(res, {200, service.config()});
        });
        server.set_error_handler([](const httplib::Request&, httplib::Response& res) {
            if (!res.body.empty()) return;
            std::string kind = res.status == 413 ? "PayloadTooLarge" : res.status == 404 ? "NotFound" : "HttpError";
            res.set_content(json{{"error", kind}, {"message", httplib::status_message(res.status)}}.dump(),
                            "application/json");
        });
        server.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
            std::string what = "internal error";
            try {
                std::rethrow_exception(ep);
            } catch (const std::exception& e) {
                what = e.what();
            } catch (...) {
            }
            res.status = 500;
            res.set_content(json{{"error", "InternalError"}, {"message", what}}.dump(), "application/json");
        });
    }
};

HttpServer::HttpServer(CaptionService& service) : impl_(std::make_unique<Impl>(service)) {}
HttpServer::~HttpServer() = default;

int HttpServer::bind(const std::string& host, int port) {
    if (port == 0) {
        int p = impl_->server.bind_to_any_port(host);
        if (p < 0) throw IOError("cannot bind " + host);
        return p;
    }
    if (!impl_->server.bind_to_port(host, port)) throw IOError("cannot bind " + host + ":" + std::to_string(port));
    return port;
}

void HttpServer::listen() { impl_->server.listen_after_bind(); }
void HttpServer::stop() { impl_->server.stop(); }
void HttpServer::wait_until_ready() { impl_->server.wait_until_ready(); }

} // namespace pioner

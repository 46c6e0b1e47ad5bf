#pragma once

#include <atomic>
#include <memory>
#include <span>
#include <string>

#include "pioner/backbones.hpp"
#include "pioner/grid_cache.hpp"
#include "pioner/pipeline.hpp"

namespace pioner {

struct ServiceResponse {
    int status = 200;
    json body;
};

// Request handling behind the HTTP endpoints, callable directly in tests.
// Immutable resources (adapter, pipeline) are shared across handler threads;
// the grid cache is the only mutable state.
class CaptionService {
public:
    // A null adapter or pipeline puts the service in degraded mode; `problem`
    // explains why in /v1/health.
    CaptionService(Config cfg, std::shared_ptr<const BackboneAdapter> adapter,
                   std::shared_ptr<const CaptionPipeline> pipeline, std::string problem = {});
    // Loading failures degrade the service instead of throwing.
    static std::unique_ptr<CaptionService> from_config(const Config& cfg);

    // POST /v1/images with raw image bytes.
    ServiceResponse register_image(std::span<const unsigned char> bytes);
    // POST /v1/images body: raw bytes, or JSON {"image_base64": "..."} (a
    // data: URL prefix is accepted) when the content type is application/json.
    ServiceResponse register_request(const std::string& content_type, const std::string& body);
    // POST /v1/images/{id}/caption body: {"region", "aggregation"?, "return_weights"?}.
    ServiceResponse caption(const std::string& image_id, const json& request);
    ServiceResponse caption_request(const std::string& image_id, const std::string& body);

    json health() const;
    // Config snapshot with plugin commands and secret-looking keys masked.
    json config() const;

    const Config& settings() const { return cfg_; }
    GridCache& cache() { return cache_; }
    std::size_t encode_calls() const { return encode_calls_.load(); }

private:
    Config cfg_;
    std::shared_ptr<const BackboneAdapter> adapter_;
    std::shared_ptr<const CaptionPipeline> pipeline_;
    std::string problem_;
    GridCache cache_;
    std::atomic<std::size_t> encode_calls_{0};
    std::atomic<int> inflight_{0};
};

// httplib server bound to a CaptionService, with CORS for the UI origin.
class HttpServer {
public:
    explicit HttpServer(CaptionService& service);
    ~HttpServer();
    // Binds and returns the port (port 0 picks an ephemeral one).
    int bind(const std::string& host, int port);
    // Blocks until stop().
    void listen();
    void stop();
    void wait_until_ready();

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

// base64 with optional "data:...;base64," prefix; throws FormatError.
std::vector<unsigned char> decode_base64(std::string_view text);

} // namespace pioner

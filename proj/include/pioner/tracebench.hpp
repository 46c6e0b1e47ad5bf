#pragma once

#include <chrono>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "pioner/core.hpp"

namespace pioner {

struct TimedPoint {
    double x = 0; // normalized [0, 1] in Localized Narratives
    double y = 0;
    double t = 0; // seconds
    bool operator==(const TimedPoint&) const = default;
};

struct Utterance {
    std::string text;
    double start = 0;
    double end = 0;
};

// Subset of a Localized Narratives record:
//   {"image_id", "annotator_id"?, "caption"?, "timed_caption": [{"utterance",
//    "start_time", "end_time"}], "traces": [[{"x", "y", "t"}]],
//    "sentences"?: [{"text", "start_time", "end_time"}], "width"?, "height"?}
// `sentences`, when present, overrides grouping utterances into sentences.
struct NarrativeRecord {
    std::string image_id;
    std::string annotator_id;
    std::string caption;
    std::vector<Utterance> utterances;
    std::vector<Utterance> sentences;
    std::vector<TimedPoint> trace; // all trace segments, in order
    std::optional<PixelSize> image_size;
};

// Throws DatasetError on missing fields, non-finite points or timestamps that
// decrease within a trace segment.
NarrativeRecord narrative_from_json(const json& j);

struct NarrativeFile {
    std::vector<NarrativeRecord> records;
    std::vector<std::string> skipped; // reasons, one per malformed line
};
NarrativeFile load_narratives(const std::filesystem::path& path);

// Sentence time windows: explicit sentences, else utterances grouped until one
// ends in '.', '!' or '?'.
std::vector<Utterance> sentence_windows(const NarrativeRecord& record);

struct SentenceTrace {
    std::string sentence;
    double start = 0;
    double end = 0;
    std::vector<TimedPoint> points; // timestamps within [start, end], original order
};
std::vector<SentenceTrace> split_by_sentence(const NarrativeRecord& record);

// Points kept by trimming floor(0.15 L) from each end: [first, last) indices.
// An empty result keeps the middle point instead.
std::pair<std::size_t, std::size_t> trim_range(std::size_t length);
std::vector<TimedPoint> trim_trace(const std::vector<TimedPoint>& points);

const std::string& trace_rewrite_prompt_template();
std::string build_rewrite_prompt(const std::string& sentence);
// Content of the first {...} span (outer braces removed, whitespace trimmed).
std::optional<std::string> parse_braced(const std::string& response);

class LLMClient {
public:
    virtual ~LLMClient() = default;
    // Throws LLMError on transport failures.
    virtual std::string complete(const std::string& prompt) = 0;
};

// Replays responses recorded in a JSONL file of {"input", "response"} lines.
// A prompt is answered only if it is exactly build_rewrite_prompt(input) for
// some recorded input, so the fixture also pins the prompt text.
class RecordedLLM final : public LLMClient {
public:
    explicit RecordedLLM(const std::filesystem::path& fixture);
    RecordedLLM(const std::vector<std::pair<std::string, std::string>>& input_response);
    std::string complete(const std::string& prompt) override;
    std::size_t calls() const;

private:
    std::unordered_map<std::string, std::string> by_prompt_hash_;
    mutable std::mutex mu_;
    std::size_t calls_ = 0;
};

// OpenAI-compatible chat-completions endpoint, e.g.
// http://localhost:11434/v1/chat/completions. Sends PIONER_LLM_TOKEN (if set)
// as a bearer token; temperature 0.
class HttpLLM final : public LLMClient {
public:
    HttpLLM(std::string url, std::string model, double timeout_s = 60.0);
    std::string complete(const std::string& prompt) override;

private:
    std::string origin_;
    std::string path_;
    std::string model_;
    double timeout_s_;
    std::string token_;
};

// Blocking token bucket shared by LLM workers.
class TokenBucket {
public:
    TokenBucket(double rate_per_sec, double burst);
    void acquire();

private:
    double rate_;
    double burst_;
    double tokens_;
    std::chrono::steady_clock::time_point last_;
    std::mutex mu_;
};

enum class TraceStatus { valid, invalid, discarded_empty, discarded_error };
std::string_view to_string(TraceStatus status);

struct Rewrite {
    TraceStatus status = TraceStatus::discarded_error;
    std::string caption;
    std::string reason;
    int attempts = 0;
};
// Sends the prompt, parses the braced span; "<INVALID>" marks the sentence
// invalid. Transport errors and unparseable replies are retried `retries`
// more times, then reported as discarded_error.
Rewrite rewrite_caption(const std::string& sentence, LLMClient& llm, int retries = 3, TokenBucket* bucket = nullptr,
                        double backoff_s = 0.0);

struct TraceSample {
    std::string id;
    std::string image_id;
    std::string image;
    std::optional<PixelSize> image_size;
    std::vector<Point> points; // original-image pixels, after trimming
    std::string sentence;
    std::string caption;
    TraceStatus status = TraceStatus::discarded_error;
    std::string reason;
};
// Trace-task JSONL line (valid samples only are written by write_benchmark).
json to_json(const TraceSample& sample);

struct BenchmarkStats {
    std::size_t records = 0;
    std::size_t sentences = 0;
    std::size_t valid = 0;
    std::size_t invalid = 0;
    std::size_t discarded_empty = 0;
    std::size_t discarded_error = 0;
    std::size_t images = 0;
    std::size_t discarded_images = 0; // images left without any valid sample
    json to_json() const;
};

struct BenchmarkOptions {
    int retries = 3;
    int concurrency = 4;
    double rate_per_sec = 0; // 0 = unlimited
    double backoff_s = 0.0;
    std::string image_pattern = "{image_id}.jpg";
    // Pixel sizes by image id, used when a record has no width/height.
    std::map<std::string, PixelSize> image_sizes;
};

struct BenchmarkResult {
    std::vector<TraceSample> samples; // every sentence, in record order
    BenchmarkStats stats;
};

// split -> trim -> rewrite for every record.
BenchmarkResult build_benchmark(const std::vector<NarrativeRecord>& records, LLMClient& llm,
                                const BenchmarkOptions& opts);
// Writes valid samples to `out` (JSONL) and stats to `out`.stats.json.
void write_benchmark(const BenchmarkResult& result, const std::filesystem::path& out);

} // namespace pioner

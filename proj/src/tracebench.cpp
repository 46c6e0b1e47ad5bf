#include "pioner/tracebench.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <set>
#include <thread>

#include <httplib.h>

#include "pioner/errors.hpp"
#include "pioner/hash.hpp"

namespace pioner {

namespace {

std::string trim(std::string_view s) {
    auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string_view::npos) return {};
    auto e = s.find_last_not_of(" \t\r\n");
    return std::string(s.substr(b, e - b + 1));
}

double number_field(const json& j, const char* key, const std::string& where) {
    if (!j.contains(key) || !j[key].is_number()) throw DatasetError(where + ": '" + key + "' must be a number");
    double v = j[key].get<double>();
    if (!std::isfinite(v)) throw DatasetError(where + ": '" + key + "' is not finite");
    return v;
}

std::vector<Utterance> utterances_from(const json& arr, const char* text_key, const std::string& where) {
    if (!arr.is_array()) throw DatasetError(where + " must be an array");
    std::vector<Utterance> out;
    for (std::size_t i = 0; i < arr.size(); ++i) {
        const auto& u = arr[i];
        std::string at = where + "[" + std::to_string(i) + "]";
        if (!u.is_object() || !u.contains(text_key) || !u[text_key].is_string())
            throw DatasetError(at + ": '" + text_key + "' must be a string");
        Utterance x{u[text_key].get<std::string>(), number_field(u, "start_time", at), number_field(u, "end_time", at)};
        if (x.end < x.start) throw DatasetError(at + ": end_time precedes start_time");
        out.push_back(std::move(x));
    }
    return out;
}

bool ends_sentence(const std::string& text) {
    std::string t = trim(text);
    // closing quotes or brackets may follow the terminator
    while (!t.empty() && (t.back() == '"' || t.back() == '\'' || t.back() == ')')) t.pop_back();
    return !t.empty() && (t.back() == '.' || t.back() == '!' || t.back() == '?');
}

std::string replace_all(std::string s, std::string_view from, std::string_view to) {
    for (std::size_t pos = 0; (pos = s.find(from, pos)) != std::string::npos; pos += to.size())
        s.replace(pos, from.size(), to);
    return s;
}

} // namespace

NarrativeRecord narrative_from_json(const json& j) {
    if (!j.is_object()) throw DatasetError("narrative record must be a JSON object");
    NarrativeRecord r;
    if (!j.contains("image_id")) throw DatasetError("missing 'image_id'");
    const auto& id = j["image_id"];
    if (id.is_string())
        r.image_id = id.get<std::string>();
    else if (id.is_number_integer())
        r.image_id = std::to_string(id.get<long long>());
    else
        throw DatasetError("'image_id' must be a string or integer");
    if (r.image_id.empty()) throw DatasetError("'image_id' is empty");
    if (j.contains("annotator_id")) {
        const auto& a = j["annotator_id"];
        r.annotator_id = a.is_string() ? a.get<std::string>() : a.dump();
    }
    if (j.contains("caption") && j["caption"].is_string()) r.caption = j["caption"].get<std::string>();

    if (!j.contains("timed_caption")) throw DatasetError(r.image_id + ": missing 'timed_caption'");
    r.utterances = utterances_from(j["timed_caption"], "utterance", r.image_id + ": timed_caption");
    if (j.contains("sentences")) r.sentences = utterances_from(j["sentences"], "text", r.image_id + ": sentences");

    if (!j.contains("traces") || !j["traces"].is_array()) throw DatasetError(r.image_id + ": 'traces' must be an array");
    const auto& traces = j["traces"];
    for (std::size_t s = 0; s < traces.size(); ++s) {
        if (!traces[s].is_array()) throw DatasetError(r.image_id + ": traces[" + std::to_string(s) + "] must be an array");
        double last_t = -INFINITY;
        for (std::size_t i = 0; i < traces[s].size(); ++i) {
            std::string at = r.image_id + ": traces[" + std::to_string(s) + "][" + std::to_string(i) + "]";
            const auto& p = traces[s][i];
            if (!p.is_object()) throw DatasetError(at + " must be an object");
            TimedPoint pt{number_field(p, "x", at), number_field(p, "y", at), number_field(p, "t", at)};
            if (pt.t < last_t) throw DatasetError(at + ": timestamps decrease within a trace");
            last_t = pt.t;
            r.trace.push_back(pt);
        }
    }

    const bool has_w = j.contains("width"), has_h = j.contains("height");
    if (has_w != has_h) throw DatasetError(r.image_id + ": 'width' and 'height' must be given together");
    if (has_w) {
        if (!j["width"].is_number_integer() || !j["height"].is_number_integer())
            throw DatasetError(r.image_id + ": 'width'/'height' must be integers");
        PixelSize size{j["height"].get<int>(), j["width"].get<int>()};
        if (size.width <= 0 || size.height <= 0) throw DatasetError(r.image_id + ": image size must be positive");
        r.image_size = size;
    }
    return r;
}

NarrativeFile load_narratives(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DatasetError("cannot open narratives file " + path.string());
    NarrativeFile out;
    std::string line;
    for (std::size_t n = 1; std::getline(in, line); ++n) {
        if (trim(line).empty()) continue;
        try {
            out.records.push_back(narrative_from_json(json::parse(line)));
        } catch (const json::exception& e) {
            out.skipped.push_back("line " + std::to_string(n) + ": " + e.what());
        } catch (const DatasetError& e) {
            out.skipped.push_back("line " + std::to_string(n) + ": " + e.what());
        }
    }
    return out;
}

std::vector<Utterance> sentence_windows(const NarrativeRecord& record) {
    if (!record.sentences.empty()) return record.sentences;
    std::vector<Utterance> out;
    std::optional<Utterance> cur;
    for (const auto& u : record.utterances) {
        std::string text = trim(u.text);
        if (text.empty()) continue;
        if (!cur)
            cur = Utterance{text, u.start, u.end};
        else {
            cur->text += " " + text;
            cur->end = std::max(cur->end, u.end);
        }
        if (ends_sentence(text)) {
            out.push_back(std::move(*cur));
            cur.reset();
        }
    }
    if (cur) out.push_back(std::move(*cur));
    return out;
}

std::vector<SentenceTrace> split_by_sentence(const NarrativeRecord& record) {
    std::vector<SentenceTrace> out;
    for (const auto& w : sentence_windows(record)) {
        SentenceTrace s{trim(w.text), w.start, w.end, {}};
        for (const auto& p : record.trace)
            if (p.t >= w.start && p.t <= w.end) s.points.push_back(p);
        out.push_back(std::move(s));
    }
    return out;
}

std::pair<std::size_t, std::size_t> trim_range(std::size_t length) {
    if (length == 0) return {0, 0};
    // integer form of floor(0.15 L), immune to 0.15 not being representable
    const std::size_t drop = length * 15 / 100;
    if (2 * drop >= length) {
        const std::size_t mid = (length - 1) / 2;
        return {mid, mid + 1};
    }
    return {drop, length - drop};
}

std::vector<TimedPoint> trim_trace(const std::vector<TimedPoint>& points) {
    auto [b, e] = trim_range(points.size());
    return {points.begin() + static_cast<std::ptrdiff_t>(b), points.begin() + static_cast<std::ptrdiff_t>(e)};
}

std::string build_rewrite_prompt(const std::string& sentence) {
    return replace_all(trace_rewrite_prompt_template(), "<INPUT CAPTION>", sentence);
}

std::optional<std::string> parse_braced(const std::string& response) {
    auto open = response.find('{');
    if (open == std::string::npos) return std::nullopt;
    int depth = 0;
    for (std::size_t i = open; i < response.size(); ++i) {
        if (response[i] == '{')
            ++depth;
        else if (response[i] == '}' && --depth == 0)
            return trim(std::string_view(response).substr(open + 1, i - open - 1));
    }
    return std::nullopt;
}

// ---- LLM clients ----

RecordedLLM::RecordedLLM(const std::vector<std::pair<std::string, std::string>>& input_response) {
    for (const auto& [input, response] : input_response)
        by_prompt_hash_[sha256_hex(build_rewrite_prompt(input))] = response;
}

RecordedLLM::RecordedLLM(const std::filesystem::path& fixture) {
    std::ifstream in(fixture);
    if (!in) throw IOError("cannot open LLM fixture " + fixture.string());
    std::string line;
    for (std::size_t n = 1; std::getline(in, line); ++n) {
        if (trim(line).empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw FormatError(fixture.string() + ":" + std::to_string(n) + ": " + e.what());
        }
        if (!j.contains("input") || !j["input"].is_string() || !j.contains("response") || !j["response"].is_string())
            throw FormatError(fixture.string() + ":" + std::to_string(n) + ": need string 'input' and 'response'");
        std::string hash = sha256_hex(build_rewrite_prompt(j["input"].get<std::string>()));
        if (j.contains("prompt_sha256") && j["prompt_sha256"] != hash)
            throw FormatError(fixture.string() + ":" + std::to_string(n) +
                              ": prompt_sha256 does not match the current prompt template");
        by_prompt_hash_[hash] = j["response"].get<std::string>();
    }
}

std::string RecordedLLM::complete(const std::string& prompt) {
    {
        std::lock_guard lock(mu_);
        ++calls_;
    }
    auto it = by_prompt_hash_.find(sha256_hex(prompt));
    if (it == by_prompt_hash_.end()) throw LLMError("no recorded response for this prompt");
    return it->second;
}

std::size_t RecordedLLM::calls() const {
    std::lock_guard lock(mu_);
    return calls_;
}

HttpLLM::HttpLLM(std::string url, std::string model, double timeout_s)
    : model_(std::move(model)), timeout_s_(timeout_s) {
    auto scheme_end = url.find("://");
    if (scheme_end == std::string::npos) throw ConfigError("LLM endpoint '" + url + "' has no scheme");
    std::string scheme = url.substr(0, scheme_end);
    if (scheme != "http" && scheme != "https") throw ConfigError("LLM endpoint scheme must be http or https");
    auto path_start = url.find('/', scheme_end + 3);
    origin_ = url.substr(0, path_start);
    path_ = path_start == std::string::npos ? "/v1/chat/completions" : url.substr(path_start);
    if (const char* tok = std::getenv("PIONER_LLM_TOKEN")) token_ = tok;
}

std::string HttpLLM::complete(const std::string& prompt) {
    httplib::Client client(origin_);
    const auto secs = static_cast<time_t>(timeout_s_);
    const auto usecs = static_cast<time_t>((timeout_s_ - static_cast<double>(secs)) * 1e6);
    client.set_connection_timeout(secs, usecs);
    client.set_read_timeout(secs, usecs);
    client.set_write_timeout(secs, usecs);
    httplib::Headers headers;
    if (!token_.empty()) headers.emplace("Authorization", "Bearer " + token_);
    json body = {{"model", model_},
                 {"temperature", 0},
                 {"messages", json::array({{{"role", "user"}, {"content", prompt}}})}};
    auto res = client.Post(path_, headers, body.dump(), "application/json");
    if (!res) throw LLMError("LLM request to " + origin_ + path_ + " failed: " + httplib::to_string(res.error()));
    if (res->status != 200) throw LLMError("LLM endpoint returned HTTP " + std::to_string(res->status));
    try {
        auto j = json::parse(res->body);
        return j.at("choices").at(0).at("message").at("content").get<std::string>();
    } catch (const json::exception& e) {
        throw LLMError(std::string("malformed chat-completion response: ") + e.what());
    }
}

TokenBucket::TokenBucket(double rate_per_sec, double burst)
    : rate_(rate_per_sec), burst_(std::max(1.0, burst)), tokens_(burst_), last_(std::chrono::steady_clock::now()) {}

void TokenBucket::acquire() {
    if (rate_ <= 0) return;
    std::unique_lock lock(mu_);
    for (;;) {
        auto now = std::chrono::steady_clock::now();
        tokens_ = std::min(burst_, tokens_ + std::chrono::duration<double>(now - last_).count() * rate_);
        last_ = now;
        if (tokens_ >= 1.0) {
            tokens_ -= 1.0;
            return;
        }
        // sleeping under the lock keeps waiters in FIFO-ish order
        std::this_thread::sleep_for(std::chrono::duration<double>((1.0 - tokens_) / rate_));
    }
}

// ---- rewriting ----

std::string_view to_string(TraceStatus status) {
    switch (status) {
    case TraceStatus::valid: return "valid";
    case TraceStatus::invalid: return "invalid";
    case TraceStatus::discarded_empty: return "discarded_empty";
    case TraceStatus::discarded_error: return "discarded_error";
    }
    return "?";
}

Rewrite rewrite_caption(const std::string& sentence, LLMClient& llm, int retries, TokenBucket* bucket,
                        double backoff_s) {
    Rewrite out;
    const std::string prompt = build_rewrite_prompt(sentence);
    for (int attempt = 0; attempt <= std::max(0, retries); ++attempt) {
        if (attempt > 0 && backoff_s > 0)
            std::this_thread::sleep_for(std::chrono::duration<double>(backoff_s * std::pow(2.0, attempt - 1)));
        if (bucket) bucket->acquire();
        out.attempts = attempt + 1;
        std::string response;
        try {
            response = llm.complete(prompt);
        } catch (const LLMError& e) {
            out.reason = e.what();
            continue;
        }
        auto braced = parse_braced(response);
        if (!braced || braced->empty()) {
            out.reason = "unparseable LLM output: " + response.substr(0, 200);
            continue;
        }
        if (*braced == "<INVALID>") {
            out.status = TraceStatus::invalid;
            out.reason.clear();
            return out;
        }
        out.status = TraceStatus::valid;
        out.caption = *braced;
        out.reason.clear();
        return out;
    }
    out.status = TraceStatus::discarded_error;
    return out;
}

json to_json(const TraceSample& s) {
    json j = {{"id", s.id},
              {"image", s.image},
              {"region", to_json(RegionSpec::trace(s.points))},
              {"references", json::array({s.caption})},
              {"sentence", s.sentence}};
    if (s.image_size) j["image_size"] = {s.image_size->width, s.image_size->height};
    return j;
}

json BenchmarkStats::to_json() const {
    return {{"records", records},
            {"sentences", sentences},
            {"valid", valid},
            {"invalid", invalid},
            {"discarded_empty", discarded_empty},
            {"discarded_error", discarded_error},
            {"images", images},
            {"discarded_images", discarded_images}};
}

BenchmarkResult build_benchmark(const std::vector<NarrativeRecord>& records, LLMClient& llm,
                                const BenchmarkOptions& opts) {
    BenchmarkResult result;
    std::vector<std::size_t> needs_llm;

    for (std::size_t r = 0; r < records.size(); ++r) {
        const auto& rec = records[r];
        std::optional<PixelSize> size = rec.image_size;
        if (!size) {
            auto it = opts.image_sizes.find(rec.image_id);
            if (it != opts.image_sizes.end()) size = it->second;
        }
        const std::string image = replace_all(opts.image_pattern, "{image_id}", rec.image_id);
        const std::string stem = rec.image_id + (rec.annotator_id.empty() ? "" : "_" + rec.annotator_id);
        auto sentences = split_by_sentence(rec);
        for (std::size_t k = 0; k < sentences.size(); ++k) {
            TraceSample s;
            s.id = stem + "_" + std::to_string(k);
            s.image_id = rec.image_id;
            s.image = image;
            s.image_size = size;
            s.sentence = sentences[k].sentence;
            if (sentences[k].points.empty() || s.sentence.empty()) {
                s.status = TraceStatus::discarded_empty;
                s.reason = s.sentence.empty() ? "empty sentence" : "no trace points inside the sentence window";
            } else if (!size) {
                s.status = TraceStatus::discarded_error;
                s.reason = "image size unknown; pass width/height or an image-size map";
            } else {
                for (const auto& p : trim_trace(sentences[k].points))
                    s.points.push_back({p.x * size->width, p.y * size->height});
                needs_llm.push_back(result.samples.size());
            }
            result.samples.push_back(std::move(s));
        }
    }

    TokenBucket bucket(opts.rate_per_sec, std::max(1, opts.concurrency));
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t i; (i = next.fetch_add(1)) < needs_llm.size();) {
            TraceSample& s = result.samples[needs_llm[i]];
            Rewrite rw = rewrite_caption(s.sentence, llm, opts.retries, &bucket, opts.backoff_s);
            s.status = rw.status;
            s.caption = rw.caption;
            s.reason = rw.reason;
        }
    };
    const int n = std::max(1, std::min<int>(opts.concurrency, static_cast<int>(needs_llm.size())));
    std::vector<std::thread> pool;
    for (int t = 1; t < n; ++t) pool.emplace_back(worker);
    worker();
    for (auto& t : pool) t.join();

    auto& st = result.stats;
    st.records = records.size();
    st.sentences = result.samples.size();
    std::set<std::string> images, with_valid;
    for (const auto& r : records) images.insert(r.image_id);
    for (const auto& s : result.samples) {
        switch (s.status) {
        case TraceStatus::valid:
            ++st.valid;
            with_valid.insert(s.image_id);
            break;
        case TraceStatus::invalid: ++st.invalid; break;
        case TraceStatus::discarded_empty: ++st.discarded_empty; break;
        case TraceStatus::discarded_error: ++st.discarded_error; break;
        }
    }
    st.images = images.size();
    st.discarded_images = images.size() - with_valid.size();
    return result;
}

void write_benchmark(const BenchmarkResult& result, const std::filesystem::path& out) {
    if (out.has_parent_path()) std::filesystem::create_directories(out.parent_path());
    std::ofstream f(out, std::ios::binary);
    if (!f) throw IOError("cannot write " + out.string());
    for (const auto& s : result.samples)
        if (s.status == TraceStatus::valid) f << to_json(s).dump() << '\n';
    std::ofstream stats(out.string() + ".stats.json", std::ios::binary);
    if (!stats) throw IOError("cannot write " + out.string() + ".stats.json");
    json j = result.stats.to_json();
    json discarded = json::array();
    for (const auto& s : result.samples)
        if (s.status == TraceStatus::discarded_error) discarded.push_back({{"id", s.id}, {"reason", s.reason}});
    j["errors"] = discarded;
    stats << j.dump(2) << '\n';
}

} // namespace pioner

#include "pioner/metrics.hpp"

#include <algorithm>
#include <cctype>
#include <cerrno>
#include <chrono>
#include <cmath>
#include <csignal>
#include <cstring>
#include <iostream>
#include <map>
#include <thread>
#include <unordered_map>

#include <fcntl.h>
#include <poll.h>
#include <sys/wait.h>
#include <unistd.h>

namespace pioner {

std::vector<std::string> tokenize_caption(std::string_view text) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : text) {
        auto c = static_cast<unsigned char>(ch);
        if (std::isspace(c) || std::ispunct(c)) {
            if (!cur.empty()) out.push_back(std::move(cur));
            cur.clear();
        } else {
            cur.push_back(static_cast<char>(std::tolower(c)));
        }
    }
    if (!cur.empty()) out.push_back(std::move(cur));
    return out;
}

namespace {

using Ngram = std::vector<std::string>;
using NgramCounts = std::map<Ngram, int>;

// counts[n-1] holds the n-grams of order n
std::vector<NgramCounts> ngram_counts(const std::vector<std::string>& words, int max_n) {
    std::vector<NgramCounts> counts(max_n);
    for (int n = 1; n <= max_n; ++n)
        for (std::size_t i = 0; i + n <= words.size(); ++i)
            ++counts[n - 1][Ngram(words.begin() + i, words.begin() + i + n)];
    return counts;
}

void require_records(const std::vector<EvalRecord>& records, const char* metric) {
    if (records.empty()) throw ValidationError(std::string(metric) + " needs at least one record");
    for (const auto& r : records)
        if (r.references.empty())
            throw ValidationError(std::string(metric) + ": record '" + r.id + "' has no references");
}

double mean(const std::vector<double>& xs) {
    double s = 0;
    for (double x : xs) s += x;
    return xs.empty() ? 0.0 : s / double(xs.size());
}

// ---- CIDEr-D ----

constexpr int kCiderN = 4;
constexpr double kCiderSigma = 6.0;

struct TfIdf {
    std::vector<std::map<Ngram, double>> vec;
    std::vector<double> norm;
    double length = 0; // bigram count, as in the reference implementation
};

TfIdf tfidf(const std::vector<NgramCounts>& counts, const std::map<Ngram, int>& df, double log_n_docs) {
    TfIdf t;
    t.vec.resize(kCiderN);
    t.norm.assign(kCiderN, 0.0);
    for (int n = 0; n < kCiderN; ++n) {
        for (const auto& [gram, tf] : counts[n]) {
            auto it = df.find(gram);
            const double d = std::log(std::max(1.0, it == df.end() ? 0.0 : double(it->second)));
            const double w = double(tf) * (log_n_docs - d);
            t.vec[n][gram] = w;
            t.norm[n] += w * w;
            if (n == 1) t.length += tf;
        }
        t.norm[n] = std::sqrt(t.norm[n]);
    }
    return t;
}

double cider_pair(const TfIdf& hyp, const TfIdf& ref) {
    const double delta = hyp.length - ref.length;
    const double penalty = std::exp(-(delta * delta) / (2 * kCiderSigma * kCiderSigma));
    double total = 0;
    for (int n = 0; n < kCiderN; ++n) {
        double val = 0;
        for (const auto& [gram, w] : hyp.vec[n]) {
            auto it = ref.vec[n].find(gram);
            if (it != ref.vec[n].end()) val += std::min(w, it->second) * it->second;
        }
        if (hyp.norm[n] != 0 && ref.norm[n] != 0) val /= hyp.norm[n] * ref.norm[n];
        total += val * penalty;
    }
    return total / kCiderN;
}

// ---- BLEU ----

struct BleuStats {
    std::array<double, 4> correct{};
    std::array<double, 4> guess{};
    double cand_len = 0;
    double ref_len = 0;
};

BleuStats bleu_stats(const EvalRecord& r) {
    BleuStats s;
    auto cand = tokenize_caption(r.candidate);
    auto cand_counts = ngram_counts(cand, 4);
    std::vector<std::vector<NgramCounts>> refs;
    std::vector<std::size_t> ref_lens;
    for (const auto& ref : r.references) {
        auto words = tokenize_caption(ref);
        ref_lens.push_back(words.size());
        refs.push_back(ngram_counts(words, 4));
    }
    s.cand_len = double(cand.size());
    // closest reference length, ties go to the shorter one
    std::size_t best = ref_lens[0];
    for (std::size_t len : ref_lens) {
        auto dist = [&](std::size_t l) { return l > cand.size() ? l - cand.size() : cand.size() - l; };
        if (dist(len) < dist(best) || (dist(len) == dist(best) && len < best)) best = len;
    }
    s.ref_len = double(best);
    for (int n = 0; n < 4; ++n) {
        for (const auto& [gram, c] : cand_counts[n]) {
            int max_ref = 0;
            for (const auto& rc : refs) {
                auto it = rc[n].find(gram);
                if (it != rc[n].end()) max_ref = std::max(max_ref, it->second);
            }
            s.correct[n] += std::min(c, max_ref);
        }
        s.guess[n] = double(cand.size() >= std::size_t(n + 1) ? cand.size() - n : 0);
    }
    return s;
}

double bleu_from(const BleuStats& s) {
    if (s.cand_len == 0) return 0.0;
    double log_p = 0;
    for (int n = 0; n < 4; ++n) {
        if (s.correct[n] == 0) return 0.0;
        log_p += std::log(s.correct[n] / s.guess[n]);
    }
    double bp = s.cand_len > s.ref_len ? 1.0 : std::exp(1.0 - s.ref_len / s.cand_len);
    return bp * std::exp(log_p / 4);
}

// ---- ROUGE-L ----

std::size_t lcs_length(const std::vector<std::string>& a, const std::vector<std::string>& b) {
    std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
    for (std::size_t i = 1; i <= a.size(); ++i) {
        for (std::size_t j = 1; j <= b.size(); ++j)
            cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

double rouge_record(const EvalRecord& r) {
    auto cand = tokenize_caption(r.candidate);
    if (cand.empty()) return 0.0;
    double p_max = 0, r_max = 0;
    for (const auto& ref : r.references) {
        auto words = tokenize_caption(ref);
        if (words.empty()) continue;
        const double lcs = double(lcs_length(cand, words));
        p_max = std::max(p_max, lcs / double(cand.size()));
        r_max = std::max(r_max, lcs / double(words.size()));
    }
    if (p_max == 0 || r_max == 0) return 0.0;
    const double b2 = kRougeBeta * kRougeBeta;
    return ((1 + b2) * p_max * r_max) / (r_max + b2 * p_max);
}

class NativeScorer final : public ScorerPlugin {
public:
    explicit NativeScorer(std::string metric) : metric_(std::move(metric)) {}
    std::string name() const override { return metric_; }
    MetricResult score(const std::vector<EvalRecord>& records) const override {
        if (metric_ == "cider_d") return cider_d(records);
        if (metric_ == "bleu4") return bleu4(records);
        return rouge_l(records);
    }

private:
    std::string metric_;
};

} // namespace

MetricResult cider_d(const std::vector<EvalRecord>& records) {
    require_records(records, "CIDEr-D");
    std::vector<std::vector<std::vector<NgramCounts>>> ref_counts(records.size());
    std::map<Ngram, int> df;
    for (std::size_t i = 0; i < records.size(); ++i) {
        std::map<Ngram, bool> seen;
        for (const auto& ref : records[i].references) {
            ref_counts[i].push_back(ngram_counts(tokenize_caption(ref), kCiderN));
            for (const auto& order : ref_counts[i].back())
                for (const auto& kv : order) seen[kv.first] = true;
        }
        for (const auto& kv : seen) ++df[kv.first];
    }
    const double log_n = std::log(double(records.size()));
    MetricResult out;
    out.per_record.reserve(records.size());
    for (std::size_t i = 0; i < records.size(); ++i) {
        TfIdf hyp = tfidf(ngram_counts(tokenize_caption(records[i].candidate), kCiderN), df, log_n);
        double sum = 0;
        for (const auto& rc : ref_counts[i]) sum += cider_pair(hyp, tfidf(rc, df, log_n));
        out.per_record.push_back(10.0 * sum / double(ref_counts[i].size()));
    }
    out.corpus = mean(out.per_record);
    return out;
}

MetricResult bleu4(const std::vector<EvalRecord>& records) {
    require_records(records, "BLEU-4");
    BleuStats total;
    MetricResult out;
    for (const auto& r : records) {
        BleuStats s = bleu_stats(r);
        out.per_record.push_back(bleu_from(s));
        for (int n = 0; n < 4; ++n) {
            total.correct[n] += s.correct[n];
            total.guess[n] += s.guess[n];
        }
        total.cand_len += s.cand_len;
        total.ref_len += s.ref_len;
    }
    out.corpus = bleu_from(total);
    return out;
}

MetricResult rouge_l(const std::vector<EvalRecord>& records) {
    require_records(records, "ROUGE-L");
    MetricResult out;
    for (const auto& r : records) out.per_record.push_back(rouge_record(r));
    out.corpus = mean(out.per_record);
    return out;
}

std::unique_ptr<ScorerPlugin> native_scorer(const std::string& metric) {
    if (metric != "cider_d" && metric != "bleu4" && metric != "rouge_l")
        throw ConfigError("unknown native metric '" + metric + "'");
    return std::make_unique<NativeScorer>(metric);
}

// ---- subprocess plugin ----

SubprocessScorer::SubprocessScorer(std::string name, std::string command, double timeout_s)
    : name_(std::move(name)), command_(std::move(command)), timeout_s_(timeout_s) {
    if (command_.empty()) throw ConfigError("scorer plugin '" + name_ + "' has an empty command");
}

namespace {

void write_all(int fd, const std::string& data) {
    // a plugin that exits early must not kill us with SIGPIPE
    sigset_t block, old;
    sigemptyset(&block);
    sigaddset(&block, SIGPIPE);
    pthread_sigmask(SIG_BLOCK, &block, &old);
    std::size_t off = 0;
    while (off < data.size()) {
        ssize_t n = ::write(fd, data.data() + off, data.size() - off);
        if (n < 0) {
            if (errno == EINTR) continue;
            break;
        }
        off += std::size_t(n);
    }
    ::close(fd);
    timespec zero{0, 0};
    while (sigtimedwait(&block, nullptr, &zero) > 0) {
    }
    pthread_sigmask(SIG_SETMASK, &old, nullptr);
}

} // namespace

MetricResult SubprocessScorer::score(const std::vector<EvalRecord>& records) const {
    auto fail = [&](const std::string& why) { return PluginError("scorer plugin '" + name_ + "': " + why); };
    std::string request;
    for (const auto& r : records)
        request += json{{"id", r.id}, {"candidate", r.candidate}, {"references", r.references}}.dump() + "\n";

    int in_pipe[2], out_pipe[2];
    if (pipe2(in_pipe, O_CLOEXEC) != 0) throw fail("pipe failed");
    if (pipe2(out_pipe, O_CLOEXEC) != 0) {
        ::close(in_pipe[0]);
        ::close(in_pipe[1]);
        throw fail("pipe failed");
    }
    pid_t pid = fork();
    if (pid < 0) throw fail("fork failed");
    if (pid == 0) {
        dup2(in_pipe[0], STDIN_FILENO);
        dup2(out_pipe[1], STDOUT_FILENO);
        execl("/bin/sh", "sh", "-c", command_.c_str(), static_cast<char*>(nullptr));
        _exit(127);
    }
    ::close(in_pipe[0]);
    ::close(out_pipe[1]);
    std::thread writer(write_all, in_pipe[1], std::move(request));

    std::string output;
    bool timed_out = false;
    const auto deadline = std::chrono::steady_clock::now() + std::chrono::duration<double>(timeout_s_);
    char buf[8192];
    for (;;) {
        auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - std::chrono::steady_clock::now());
        if (left.count() <= 0) {
            timed_out = true;
            break;
        }
        pollfd p{out_pipe[0], POLLIN, 0};
        int rc = poll(&p, 1, int(std::min<long long>(left.count(), 1000)));
        if (rc < 0 && errno != EINTR) break;
        if (rc <= 0) continue;
        ssize_t n = ::read(out_pipe[0], buf, sizeof buf);
        if (n < 0 && errno == EINTR) continue;
        if (n <= 0) break;
        output.append(buf, std::size_t(n));
    }
    ::close(out_pipe[0]);
    if (timed_out) kill(pid, SIGKILL);
    writer.join();
    int status = 0;
    waitpid(pid, &status, 0);
    if (timed_out) throw fail("timed out after " + std::to_string(timeout_s_) + " s");
    if (!WIFEXITED(status) || WEXITSTATUS(status) != 0)
        throw fail("exited with status " + std::to_string(WIFEXITED(status) ? WEXITSTATUS(status) : -1));

    std::unordered_map<std::string, double> scores;
    std::size_t pos = 0;
    while (pos < output.size()) {
        std::size_t nl = output.find('\n', pos);
        std::string line = output.substr(pos, nl == std::string::npos ? std::string::npos : nl - pos);
        pos = nl == std::string::npos ? output.size() : nl + 1;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            json j = json::parse(line);
            double s = j.at("score").get<double>();
            if (!std::isfinite(s)) throw fail("non-finite score for id " + j.at("id").dump());
            scores[j.at("id").get<std::string>()] = s;
        } catch (const json::exception& e) {
            throw fail(std::string("malformed response line: ") + e.what());
        }
    }
    MetricResult out;
    for (const auto& r : records) {
        auto it = scores.find(r.id);
        if (it == scores.end()) throw fail("no score returned for id '" + r.id + "'");
        out.per_record.push_back(it->second);
    }
    out.corpus = mean(out.per_record);
    return out;
}

std::vector<std::unique_ptr<ScorerPlugin>> configured_plugins(const Config& cfg) {
    std::vector<std::unique_ptr<ScorerPlugin>> out;
    for (const auto& [name, command] : cfg.metrics.plugins)
        out.push_back(std::make_unique<SubprocessScorer>(name, command));
    return out;
}

// ---- dense mAP ----

double dense_map(const std::vector<double>& similarities, const std::vector<double>& thresholds) {
    if (similarities.empty()) throw ValidationError("dense mAP needs at least one record");
    if (thresholds.empty()) throw ValidationError("dense mAP needs at least one threshold");
    // integer pass counts and one final division keep the result correctly rounded
    std::size_t passed = 0;
    for (double theta : thresholds)
        for (double s : similarities)
            if (s >= theta) ++passed;
    return double(passed) / (double(similarities.size()) * double(thresholds.size()));
}

DenseMapResult dense_map(const std::vector<EvalRecord>& records, const ScorerPlugin& similarity,
                         const std::vector<double>& thresholds) {
    DenseMapResult out;
    out.similarity = similarity.name();
    out.similarities = similarity.score(records).per_record;
    for (double theta : thresholds) out.ap.push_back(dense_map(out.similarities, {theta}));
    out.map = dense_map(out.similarities, thresholds);
    return out;
}

std::unique_ptr<ScorerPlugin> dense_similarity_scorer(const Config& cfg) {
    const std::string& want = cfg.metrics.dense_similarity;
    if (!want.empty()) {
        for (const auto& [name, command] : cfg.metrics.plugins)
            if (name == want) return std::make_unique<SubprocessScorer>(name, command);
        if (want == "rouge_l" || want == "cider_d" || want == "bleu4") return native_scorer(want);
        throw ConfigError("config key 'metrics.dense_similarity': no plugin named '" + want + "'");
    }
    std::cerr << "warning: metrics.dense_similarity is not set; dense mAP uses native ROUGE-L instead of METEOR, "
                 "so values are not comparable to published METEOR-based mAP\n";
    return native_scorer("rouge_l");
}

} // namespace pioner

#pragma once

#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "pioner/core.hpp"

namespace pioner {

struct EvalRecord {
    std::string id;
    std::string candidate; // may be empty; scored, never skipped
    std::vector<std::string> references;
};

struct MetricResult {
    double corpus = 0;
    std::vector<double> per_record;
};

// Lowercase, ASCII punctuation to spaces, split on whitespace. Shared by every
// native metric.
std::vector<std::string> tokenize_caption(std::string_view text);

// CIDEr-D as in coco-caption: n = 1..4 TF-IDF vectors, IDF from the references
// of `records`, clipped candidate weights, Gaussian length penalty (sigma 6),
// averaged over references and scaled by 10. Corpus score is the record mean.
MetricResult cider_d(const std::vector<EvalRecord>& records);

// Corpus BLEU-4: clipped n-gram precisions pooled over records, geometric
// mean, brevity penalty against the closest reference length (ties to the
// shorter). No smoothing: any n-gram order without a match gives 0. Per-record
// values are the same formula on each record alone.
MetricResult bleu4(const std::vector<EvalRecord>& records);

// ROUGE-L F-measure with beta = 1.2 (coco-caption convention), precision and
// recall each maximized over references; corpus score is the record mean.
MetricResult rouge_l(const std::vector<EvalRecord>& records);
inline constexpr double kRougeBeta = 1.2;

// External metric seam (METEOR, SPICE, CLIP-S, ...).
class ScorerPlugin {
public:
    virtual ~ScorerPlugin() = default;
    virtual std::string name() const = 0;
    // Per-record scores in record order plus the corpus score.
    virtual MetricResult score(const std::vector<EvalRecord>& records) const = 0;
};

// Native metric wrapped as a plugin: "cider_d", "bleu4" or "rouge_l".
std::unique_ptr<ScorerPlugin> native_scorer(const std::string& metric);

// Runs `command` through /bin/sh once per score() call. Protocol: one JSON
// request per line on stdin, {"id", "candidate", "references"}; after stdin
// closes the plugin answers one {"id", "score"} line per request, in any order.
// Corpus score is the mean of the per-record scores.
class SubprocessScorer final : public ScorerPlugin {
public:
    SubprocessScorer(std::string name, std::string command, double timeout_s = 300.0);
    std::string name() const override { return name_; }
    MetricResult score(const std::vector<EvalRecord>& records) const override;

private:
    std::string name_;
    std::string command_;
    double timeout_s_;
};

// Builds every scorer named in metrics.plugins.
std::vector<std::unique_ptr<ScorerPlugin>> configured_plugins(const Config& cfg);

// mAP over similarity thresholds with ground-truth boxes: AP(theta) is the
// fraction of records with similarity >= theta; mAP is the mean over thetas.
double dense_map(const std::vector<double>& similarities, const std::vector<double>& thresholds);

struct DenseMapResult {
    double map = 0;
    std::vector<double> ap; // per threshold
    std::vector<double> similarities;
    std::string similarity; // scorer name used
};
DenseMapResult dense_map(const std::vector<EvalRecord>& records, const ScorerPlugin& similarity,
                         const std::vector<double>& thresholds);

// Similarity for dense mAP per config: the plugin named by
// metrics.dense_similarity, else native ROUGE-L with a warning on stderr.
std::unique_ptr<ScorerPlugin> dense_similarity_scorer(const Config& cfg);

} // namespace pioner

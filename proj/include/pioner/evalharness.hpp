#pragma once

#include <atomic>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "pioner/backbones.hpp"
#include "pioner/grid_cache.hpp"
#include "pioner/metrics.hpp"
#include "pioner/pipeline.hpp"

namespace pioner {

enum class Task { trace, dense, region_set, image };
std::string_view to_string(Task task);
Task task_from_string(std::string_view s);
// Region kind each task requires.
RegionKind task_region_kind(Task task);

// One JSON line per sample:
//   {"id": str, "image": str, "region": region-spec/v1,
//    "references": [str, ...], "image_size": [width, height]?}
// `image` is a path relative to the dataset file (or eval.image_root).
struct TaskSample {
    std::string id;
    std::string image;
    RegionSpec region;
    std::vector<std::string> references;
    std::optional<PixelSize> image_size;
};
json to_json(const TaskSample& sample);

struct SkippedRecord {
    std::size_t line = 0;
    std::string id;
    std::string reason;
};

// Lazy JSONL reader: next() yields validated samples and skips (and records)
// malformed ones.
class DatasetReader {
public:
    // Throws DatasetError if the file cannot be opened.
    DatasetReader(Task task, const std::filesystem::path& path);

    bool next(TaskSample& out);
    Task task() const { return task_; }
    const std::filesystem::path& path() const { return path_; }
    const std::vector<SkippedRecord>& skipped() const { return skipped_; }

private:
    Task task_;
    std::filesystem::path path_;
    std::ifstream in_;
    std::size_t line_ = 0;
    std::vector<SkippedRecord> skipped_;
};

struct Dataset {
    std::vector<TaskSample> samples;
    std::vector<SkippedRecord> skipped;
};
// Reads everything; DatasetError when no valid sample remains.
Dataset load_dataset(Task task, const std::filesystem::path& path);

// Captioning seam so the harness can run with a stub instead of a trained
// decoder.
class CaptionBackend {
public:
    virtual ~CaptionBackend() = default;
    virtual std::string name() const = 0;
    virtual Caption caption(const PatchGrid& grid, const TaskSample& sample, AggregationMode mode) const = 0;
};

class PipelineBackend final : public CaptionBackend {
public:
    explicit PipelineBackend(std::shared_ptr<const CaptionPipeline> pipeline) : pipeline_(std::move(pipeline)) {}
    std::string name() const override { return "pipeline"; }
    Caption caption(const PatchGrid& grid, const TaskSample& sample, AggregationMode mode) const override {
        return pipeline_->caption_grid(grid, sample.region, mode).caption;
    }

private:
    std::shared_ptr<const CaptionPipeline> pipeline_;
};

// Returns the sample's first reference (after checking the region selects
// patches); the perfect-decoder stub used to validate the harness.
class EchoBackend final : public CaptionBackend {
public:
    std::string name() const override { return "echo"; }
    Caption caption(const PatchGrid& grid, const TaskSample& sample, AggregationMode mode) const override;
};

struct SampleResult {
    std::string id;
    std::string image;
    std::string candidate;
    std::vector<std::string> references;
    std::string error; // empty when captioning succeeded
};

struct EvalReport {
    Task task = Task::image;
    std::string dataset;
    std::size_t n_samples = 0;
    std::size_t n_skipped = 0;
    std::size_t n_failed = 0;
    std::size_t encode_calls = 0;
    std::vector<std::pair<std::string, double>> metrics;
    std::vector<SampleResult> samples;
    std::string per_sample_path;
    json config;

    json to_json() const; // omits the per-sample rows
    std::string table() const;
};

struct RunOptions {
    AggregationMode aggregation = AggregationMode::uniform;
    int jobs = 1;
    std::filesystem::path image_root; // relative image paths resolve here; empty = cwd
};

// Captions every sample (grids cached per image), then scores CIDEr-D,
// BLEU-4, ROUGE-L, dense mAP for the dense task, and any configured plugins.
// Per-sample failures become empty captions and are counted.
EvalReport run_task(Task task, const Dataset& dataset, const std::string& dataset_id, const Config& cfg,
                    const BackboneAdapter& adapter, const CaptionBackend& backend, GridCache& cache,
                    const RunOptions& opts);

// Writes `path` (report JSON), `path`.txt (table) and `path`.samples.jsonl.
void write_report(EvalReport& report, const std::filesystem::path& path);

// Upstream converters to the JSONL schema above. Each returns the number of
// samples written.
// Visual Genome region_descriptions.json -> dense task.
std::size_t convert_visual_genome(const std::filesystem::path& in, const std::filesystem::path& out,
                                  std::size_t max_images = 0);
// Karpathy dataset_coco.json -> image task for one split.
std::size_t convert_karpathy(const std::filesystem::path& in, const std::filesystem::path& out,
                             const std::string& split = "test");

} // namespace pioner

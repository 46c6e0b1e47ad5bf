#include "pioner/evalharness.hpp"

#include <iomanip>
#include <iostream>
#include <mutex>
#include <sstream>
#include <thread>

namespace pioner {

std::string_view to_string(Task task) {
    switch (task) {
    case Task::trace: return "trace";
    case Task::dense: return "dense";
    case Task::region_set: return "region-set";
    case Task::image: return "image";
    }
    return "?";
}

Task task_from_string(std::string_view s) {
    if (s == "trace") return Task::trace;
    if (s == "dense") return Task::dense;
    if (s == "region-set" || s == "region_set") return Task::region_set;
    if (s == "image") return Task::image;
    throw ConfigError("unknown task '" + std::string(s) + "' (expected trace, dense, region-set or image)");
}

RegionKind task_region_kind(Task task) {
    switch (task) {
    case Task::trace: return RegionKind::trace;
    case Task::dense: return RegionKind::box;
    case Task::region_set: return RegionKind::box_set;
    case Task::image: return RegionKind::image;
    }
    return RegionKind::image;
}

json to_json(const TaskSample& s) {
    json j{{"id", s.id}, {"image", s.image}, {"region", to_json(s.region)}, {"references", s.references}};
    if (s.image_size) j["image_size"] = {s.image_size->width, s.image_size->height};
    return j;
}

// ---------------------------------------------------------------------------
// loading

DatasetReader::DatasetReader(Task task, const std::filesystem::path& path) : task_(task), path_(path), in_(path) {
    if (!in_) throw DatasetError("cannot open dataset '" + path.string() + "'");
}

namespace {

TaskSample parse_sample(const json& j, Task task) {
    if (!j.is_object()) throw DatasetError("record is not a JSON object");
    TaskSample s;
    auto id = j.find("id");
    if (id == j.end()) throw DatasetError("missing field 'id'");
    s.id = id->is_string() ? id->get<std::string>() : id->dump();
    auto fail = [&](const std::string& why) { return DatasetError("record '" + s.id + "': " + why); };

    auto image = j.find("image");
    if (image == j.end() || !image->is_string() || image->get<std::string>().empty())
        throw fail("missing or empty 'image'");
    s.image = image->get<std::string>();

    auto region = j.find("region");
    if (region == j.end()) throw fail("missing field 'region'");
    try {
        s.region = region_spec_from_json(*region);
    } catch (const Error& e) {
        throw fail(e.what());
    }
    if (s.region.kind() != task_region_kind(task))
        throw fail("region kind '" + std::string(to_string(s.region.kind())) + "' does not match task '" +
                   std::string(to_string(task)) + "'");

    auto refs = j.find("references");
    if (refs == j.end() || !refs->is_array() || refs->empty()) throw fail("'references' must be a nonempty array");
    for (const auto& r : *refs) {
        if (!r.is_string()) throw fail("references must be strings");
        s.references.push_back(r.get<std::string>());
    }

    if (auto size = j.find("image_size"); size != j.end()) {
        if (!size->is_array() || size->size() != 2 || !(*size)[0].is_number_integer() ||
            !(*size)[1].is_number_integer())
            throw fail("'image_size' must be [width, height] integers");
        PixelSize px{(*size)[1].get<int>(), (*size)[0].get<int>()};
        if (px.width <= 0 || px.height <= 0) throw fail("'image_size' must be positive");
        s.image_size = px;
    }
    return s;
}

} // namespace

bool DatasetReader::next(TaskSample& out) {
    std::string text;
    while (std::getline(in_, text)) {
        ++line_;
        if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
        json j;
        try {
            j = json::parse(text);
        } catch (const json::exception& e) {
            skipped_.push_back({line_, "", std::string("invalid JSON: ") + e.what()});
            continue;
        }
        try {
            out = parse_sample(j, task_);
            return true;
        } catch (const DatasetError& e) {
            std::string id;
            if (j.is_object() && j.contains("id")) id = j["id"].is_string() ? j["id"].get<std::string>() : j["id"].dump();
            skipped_.push_back({line_, id, e.what()});
        }
    }
    return false;
}

Dataset load_dataset(Task task, const std::filesystem::path& path) {
    DatasetReader reader(task, path);
    Dataset ds;
    TaskSample s;
    while (reader.next(s)) ds.samples.push_back(std::move(s));
    ds.skipped = reader.skipped();
    if (ds.samples.empty())
        throw DatasetError("dataset '" + path.string() + "' has no valid samples (" +
                           std::to_string(ds.skipped.size()) + " skipped)");
    return ds;
}

// ---------------------------------------------------------------------------
// running

Caption EchoBackend::caption(const PatchGrid& grid, const TaskSample& sample, AggregationMode mode) const {
    aggregate(select_patches(sample.region, grid), grid, mode);
    Caption c;
    c.text = sample.references.front();
    c.empty = c.text.empty();
    return c;
}

namespace {

void check_mode(Task task, AggregationMode mode, const BackboneAdapter& adapter) {
    if (mode == AggregationMode::gaussian && (task == Task::trace || task == Task::region_set))
        throw ConfigError("gaussian aggregation needs rectangular regions; task '" + std::string(to_string(task)) +
                          "' has none");
    if (mode == AggregationMode::attention && !adapter.capabilities().has_attention)
        throw ConfigError("attention aggregation needs a backbone with an attention map");
}

PatchGrid encode_sample_image(const BackboneAdapter& adapter, const std::filesystem::path& path,
                              const TaskSample& sample) {
    if (adapter.needs_pixels()) {
        if (!std::filesystem::exists(path)) throw DatasetError("record '" + sample.id + "': missing image " + path.string());
        return adapter.encode_image(load_image_file(path));
    }
    RgbImage ref;
    ref.key = path.stem().string();
    if (sample.image_size) {
        ref.width = sample.image_size->width;
        ref.height = sample.image_size->height;
    }
    return adapter.encode_image(ref);
}

} // namespace

EvalReport run_task(Task task, const Dataset& dataset, const std::string& dataset_id, const Config& cfg,
                    const BackboneAdapter& adapter, const CaptionBackend& backend, GridCache& cache,
                    const RunOptions& opts) {
    if (dataset.samples.empty()) throw DatasetError("dataset '" + dataset_id + "' is empty");
    check_mode(task, opts.aggregation, adapter);
    const std::size_t computed_before = cache.computations();

    std::vector<SampleResult> results(dataset.samples.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t i = next++; i < dataset.samples.size(); i = next++) {
            const TaskSample& s = dataset.samples[i];
            SampleResult& r = results[i];
            r.id = s.id;
            r.image = s.image;
            r.references = s.references;
            try {
                std::filesystem::path path = s.image;
                if (path.is_relative()) path = opts.image_root / path;
                // image_size is part of the key: it changes the grid's coordinate frame
                std::string key = path.lexically_normal().string();
                if (s.image_size)
                    key += "@" + std::to_string(s.image_size->width) + "x" + std::to_string(s.image_size->height);
                auto grid = cache.get_or_compute(key, [&] { return encode_sample_image(adapter, path, s); });
                Caption c = backend.caption(*grid, s, opts.aggregation);
                r.candidate = c.text;
                if (c.empty) r.error = "empty generation";
            } catch (const std::exception& e) {
                r.candidate.clear();
                r.error = e.what();
            }
        }
    };
    const int jobs = std::max(1, opts.jobs);
    if (jobs == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int t = 0; t < jobs; ++t) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }

    EvalReport report;
    report.task = task;
    report.dataset = dataset_id;
    report.n_samples = results.size();
    report.n_skipped = dataset.skipped.size();
    report.encode_calls = cache.computations() - computed_before;
    report.config = cfg.to_json();
    for (const auto& r : results)
        if (!r.error.empty()) ++report.n_failed;

    std::vector<EvalRecord> records;
    for (const auto& r : results) records.push_back({r.id, r.candidate, r.references});
    report.metrics.emplace_back("CIDEr-D", cider_d(records).corpus);
    report.metrics.emplace_back("BLEU-4", bleu4(records).corpus);
    report.metrics.emplace_back("ROUGE-L", rouge_l(records).corpus);
    if (task == Task::dense) {
        auto sim = dense_similarity_scorer(cfg);
        auto m = dense_map(records, *sim, cfg.metrics.dense_thresholds);
        report.metrics.emplace_back("mAP[" + m.similarity + "]", m.map);
    }
    for (const auto& plugin : configured_plugins(cfg)) report.metrics.emplace_back(plugin->name(), plugin->score(records).corpus);
    report.samples = std::move(results);
    return report;
}

json EvalReport::to_json() const {
    json m = json::object();
    for (const auto& [k, v] : metrics) m[k] = v;
    return json{{"task", std::string(pioner::to_string(task))},
                {"dataset", dataset},
                {"n_samples", n_samples},
                {"n_skipped", n_skipped},
                {"n_failed", n_failed},
                {"encode_calls", encode_calls},
                {"metrics", m},
                {"per_sample", per_sample_path},
                {"config", config}};
}

std::string EvalReport::table() const {
    std::ostringstream out;
    out << "task     " << pioner::to_string(task) << "\n"
        << "dataset  " << dataset << "\n"
        << "samples  " << n_samples << " (" << n_skipped << " skipped, " << n_failed << " failed)\n"
        << "encodes  " << encode_calls << "\n\n";
    std::size_t width = 6;
    for (const auto& [k, v] : metrics) width = std::max(width, k.size());
    out << std::left << std::setw(int(width) + 2) << "metric" << "value\n";
    for (const auto& [k, v] : metrics)
        out << std::left << std::setw(int(width) + 2) << k << std::fixed << std::setprecision(4) << v << "\n";
    return out.str();
}

void write_report(EvalReport& report, const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::filesystem::path samples = path;
    samples += ".samples.jsonl";
    report.per_sample_path = samples.string();
    {
        std::ofstream out(samples);
        if (!out) throw IOError("cannot write " + samples.string());
        for (const auto& s : report.samples) {
            json row{{"id", s.id}, {"image", s.image}, {"candidate", s.candidate}, {"references", s.references}};
            if (!s.error.empty()) row["error"] = s.error;
            out << row.dump() << "\n";
        }
    }
    std::ofstream out(path);
    if (!out) throw IOError("cannot write " + path.string());
    out << report.to_json().dump(2) << "\n";
    std::filesystem::path table = path;
    table += ".txt";
    std::ofstream(table) << report.table();
}

// ---------------------------------------------------------------------------
// converters

namespace {

json read_json_file(const std::filesystem::path& in) {
    std::ifstream f(in);
    if (!f) throw DatasetError("cannot open " + in.string());
    try {
        return json::parse(f);
    } catch (const json::exception& e) {
        throw DatasetError(in.string() + ": " + e.what());
    }
}

} // namespace

std::size_t convert_visual_genome(const std::filesystem::path& in, const std::filesystem::path& out,
                                  std::size_t max_images) {
    try {
        json doc = read_json_file(in);
        if (!doc.is_array()) throw DatasetError("region descriptions must be a JSON array");
        std::ofstream o(out);
        if (!o) throw IOError("cannot write " + out.string());
        std::size_t written = 0, images = 0;
        for (const auto& img : doc) {
            if (max_images && images >= max_images) break;
            ++images;
            const auto image_id = img.at("id").dump();
            for (const auto& r : img.at("regions")) {
                const double x = r.at("x").get<double>(), y = r.at("y").get<double>();
                const double w = r.at("width").get<double>(), h = r.at("height").get<double>();
                if (!(w > 0 && h > 0)) continue;
                TaskSample s{r.at("region_id").dump(), image_id + ".jpg", RegionSpec::box({x, y, x + w, y + h}),
                             {r.at("phrase").get<std::string>()}, std::nullopt};
                o << to_json(s).dump() << "\n";
                ++written;
            }
        }
        return written;
    } catch (const json::exception& e) {
        throw DatasetError(in.string() + ": unexpected layout: " + e.what());
    }
}

std::size_t convert_karpathy(const std::filesystem::path& in, const std::filesystem::path& out,
                             const std::string& split) {
    try {
        json doc = read_json_file(in);
        std::ofstream o(out);
        if (!o) throw IOError("cannot write " + out.string());
        std::size_t written = 0;
        for (const auto& img : doc.at("images")) {
            if (img.value("split", "") != split) continue;
            TaskSample s;
            s.id = img.contains("cocoid") ? img["cocoid"].dump() : img.at("filename").get<std::string>();
            s.image = img.contains("filepath") ? img["filepath"].get<std::string>() + "/" + img.at("filename").get<std::string>()
                                               : img.at("filename").get<std::string>();
            s.region = RegionSpec::image();
            for (const auto& sent : img.at("sentences")) s.references.push_back(sent.at("raw").get<std::string>());
            o << to_json(s).dump() << "\n";
            ++written;
        }
        return written;
    } catch (const json::exception& e) {
        throw DatasetError(in.string() + ": unexpected layout: " + e.what());
    }
}

} // namespace pioner

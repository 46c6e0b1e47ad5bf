// pioner: region captioning workflows from the command line.
// Exit codes: 0 ok, 2 usage or configuration error, 3 runtime failure.

#include <csignal>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <thread>

#include <CLI11.hpp>

#include "pioner/errors.hpp"
#include "pioner/evalharness.hpp"
#include "pioner/gap.hpp"
#include "pioner/pipeline.hpp"
#include "pioner/service.hpp"
#include "pioner/tracebench.hpp"

using namespace pioner;
namespace fs = std::filesystem;

namespace {

constexpr int kUsage = 2;
constexpr int kRuntime = 3;

// Errors caused by what the user asked for rather than by the run itself.
bool is_usage_error(const Error& e) {
    static const std::set<std::string> kinds = {"ConfigError",     "SchemaError",         "ValidationError",
                                                "ModeError",       "EmptySelectionError", "DegenerateWeightError",
                                                "CapabilityError", "DatasetError"};
    return kinds.count(e.kind()) > 0;
}

struct Common {
    std::string config_path;
    std::vector<std::string> overrides;
};

Config resolve_config(const Common& common) {
    Config cfg;
    std::string path = common.config_path;
    if (path.empty())
        if (const char* env = std::getenv("PIONER_CONFIG")) path = env;
    if (!path.empty()) cfg = load_config(path);
    for (const auto& o : common.overrides) apply_override(cfg, o);
    return cfg;
}

template <class T>
void set_if(Config& cfg, const std::string& key, const std::optional<T>& value) {
    if (value) cfg.set(key, json(*value));
}

void require_file(const std::string& path, const std::string& what) {
    if (path.empty()) throw ConfigError(what + " is required");
    if (!fs::is_regular_file(path)) throw ConfigError(what + " '" + path + "' does not exist");
}

std::vector<std::string> read_corpus(const std::string& path) {
    require_file(path, "--corpus");
    std::ifstream in(path);
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.find_first_not_of(" \t") != std::string::npos) lines.push_back(line);
    }
    if (lines.empty()) throw ConfigError("corpus '" + path + "' has no captions");
    return lines;
}

json parse_region_arg(const std::string& arg) {
    std::string text = arg;
    if (!arg.empty() && arg[0] == '@') {
        std::ifstream in(arg.substr(1));
        if (!in) throw ConfigError("cannot read region file '" + arg.substr(1) + "'");
        text.assign(std::istreambuf_iterator<char>(in), {});
    }
    try {
        return json::parse(text);
    } catch (const json::parse_error& e) {
        throw SchemaError(std::string("--region is not valid JSON: ") + e.what());
    }
}

std::shared_ptr<const CaptionPipeline> load_pipeline(const Config& cfg) {
    auto adapter = make_adapter(cfg);
    return std::make_shared<const CaptionPipeline>(CaptionPipeline::from_config(cfg, adapter));
}

// ---- subcommands ----

struct TrainArgs {
    std::string corpus, out, mitigation;
    std::optional<int> epochs, batch;
    std::optional<double> lr, sigma2;
    std::optional<std::uint64_t> seed;
};

int cmd_train(const Common& common, const TrainArgs& a) {
    Config cfg = resolve_config(common);
    if (!a.mitigation.empty()) cfg.set("gap.mode", a.mitigation);
    set_if(cfg, "train.epochs", a.epochs);
    set_if(cfg, "train.batch", a.batch);
    set_if(cfg, "train.lr", a.lr);
    set_if(cfg, "train.seed", a.seed);
    set_if(cfg, "gap.sigma2", a.sigma2);
    if (a.out.empty()) throw ConfigError("--out is required");
    auto corpus = read_corpus(a.corpus);
    auto adapter = make_adapter(cfg);
    TrainSpec spec = TrainSpec::from_config(cfg, corpus);
    spec.corpus_id = fs::path(a.corpus).filename().string();
    TrainLog log;
    int last_epoch = -1;
    auto ckpt = train(spec, *adapter, &log, [&](const TrainProgress& p) {
        const int every = std::max(1, spec.epochs / 10);
        if (p.epoch != last_epoch && (p.epoch % every == 0 || p.epoch + 1 == spec.epochs)) {
            last_epoch = p.epoch;
            std::cerr << "epoch " << p.epoch + 1 << "/" << spec.epochs << " step " << p.step << " loss " << p.loss
                      << "\n";
        }
    });
    save_checkpoint(ckpt, a.out);
    json logj = ckpt.meta.to_json();
    logj["step_losses"] = log.step_losses;
    std::ofstream(a.out + ".log.json") << logj.dump(2) << "\n";
    std::cout << "wrote " << a.out << " (" << ckpt.meta.steps << " steps, final loss " << ckpt.meta.final_loss
              << ")\n";
    return 0;
}

int cmd_build_memory(const Common& common, const std::string& corpus_path, const std::string& out,
                     const std::optional<double>& tau) {
    Config cfg = resolve_config(common);
    set_if(cfg, "gap.tau", tau);
    if (out.empty()) throw ConfigError("--out is required");
    auto corpus = read_corpus(corpus_path);
    auto adapter = make_adapter(cfg);
    auto bank = build_memory(corpus, *adapter, cfg.gap.tau);
    save_memory(bank, out);
    std::cout << "wrote " << out << " (" << bank.size() << " entries, dim " << bank.dim() << ")\n";
    return 0;
}

struct CaptionArgs {
    std::string image, region = R"({"kind":"image"})", ckpt, bank, aggregation;
    bool weights = false;
};

int cmd_caption(const Common& common, const CaptionArgs& a) {
    Config cfg = resolve_config(common);
    if (!a.ckpt.empty()) cfg.set("decoder.checkpoint", a.ckpt);
    if (!a.bank.empty()) cfg.set("gap.memory", a.bank);
    if (!a.aggregation.empty()) cfg.set("aggregation", a.aggregation);
    require_file(a.image, "--image");
    RegionSpec region = region_spec_from_json(parse_region_arg(a.region));
    auto pipeline = load_pipeline(cfg);
    RgbImage image;
    try {
        image = load_image_file(a.image);
    } catch (const FormatError& e) {
        throw ConfigError(std::string("--image: ") + e.what());
    }
    auto out = pipeline->caption_region(image, region, cfg.aggregation);
    std::cout << out.caption.text << "\n";
    if (a.weights) {
        json w = json::array();
        for (const auto& [index, weight] : out.weights) w.push_back({{"index", index}, {"weight", weight}});
        std::cout << w.dump() << "\n";
    }
    return 0;
}

struct EvalArgs {
    std::string task, dataset, ckpt, bank, report, decoder = "pipeline", aggregation, image_root;
    std::optional<int> jobs;
};

int cmd_eval(const Common& common, const EvalArgs& a) {
    Config cfg = resolve_config(common);
    Task task = task_from_string(a.task);
    if (!a.ckpt.empty()) cfg.set("decoder.checkpoint", a.ckpt);
    if (!a.bank.empty()) cfg.set("gap.memory", a.bank);
    if (!a.aggregation.empty()) cfg.set("aggregation", a.aggregation);
    if (!a.image_root.empty()) cfg.set("eval.image_root", a.image_root);
    set_if(cfg, "eval.jobs", a.jobs);
    if (a.report.empty()) throw ConfigError("--report is required");
    require_file(a.dataset, "--dataset");
    auto dataset = load_dataset(task, a.dataset);

    std::shared_ptr<const BackboneAdapter> adapter;
    std::unique_ptr<CaptionBackend> backend;
    if (a.decoder == "echo") {
        adapter = make_adapter(cfg);
        backend = std::make_unique<EchoBackend>();
    } else if (a.decoder == "pipeline") {
        auto pipeline = load_pipeline(cfg);
        adapter = std::shared_ptr<const BackboneAdapter>(pipeline, &pipeline->adapter());
        backend = std::make_unique<PipelineBackend>(pipeline);
    } else {
        throw ConfigError("--decoder must be 'pipeline' or 'echo'");
    }
    GridCache cache;
    RunOptions opts;
    opts.aggregation = cfg.aggregation;
    opts.jobs = cfg.eval.jobs;
    opts.image_root = cfg.eval.image_root.empty() ? fs::absolute(a.dataset).parent_path() : fs::path(cfg.eval.image_root);
    auto report = run_task(task, dataset, fs::path(a.dataset).filename().string(), cfg, *adapter, *backend, cache,
                           opts);
    write_report(report, a.report);
    std::cout << report.table();
    return 0;
}

struct TracebenchArgs {
    std::string narratives, llm, recorded, out, image_sizes, image_pattern = "{image_id}.jpg", model;
    std::optional<int> concurrency, retries;
    std::optional<double> rate;
};

int cmd_tracebench(const Common& common, const TracebenchArgs& a) {
    Config cfg = resolve_config(common);
    set_if(cfg, "tracebench.concurrency", a.concurrency);
    set_if(cfg, "tracebench.retries", a.retries);
    set_if(cfg, "tracebench.rate_per_sec", a.rate);
    if (!a.llm.empty()) cfg.set("tracebench.endpoint", a.llm);
    if (!a.model.empty()) cfg.set("tracebench.model", a.model);
    if (a.out.empty()) throw ConfigError("--out is required");
    require_file(a.narratives, "--narratives");

    BenchmarkOptions opts;
    opts.retries = cfg.tracebench.retries;
    opts.concurrency = cfg.tracebench.concurrency;
    opts.rate_per_sec = cfg.tracebench.rate_per_sec;
    opts.image_pattern = a.image_pattern;
    if (!a.image_sizes.empty()) {
        require_file(a.image_sizes, "--image-sizes");
        json sizes;
        try {
            sizes = json::parse(std::ifstream(a.image_sizes));
        } catch (const json::exception& e) {
            throw ConfigError("--image-sizes is not valid JSON: " + std::string(e.what()));
        }
        if (!sizes.is_object()) throw ConfigError("--image-sizes must map image id -> [width, height]");
        for (auto it = sizes.begin(); it != sizes.end(); ++it) {
            const auto& v = it.value();
            if (!v.is_array() || v.size() != 2 || !v[0].is_number_integer() || !v[1].is_number_integer())
                throw ConfigError("--image-sizes: '" + it.key() + "' must be [width, height]");
            opts.image_sizes[it.key()] = PixelSize{v[1].get<int>(), v[0].get<int>()};
        }
    }

    std::unique_ptr<LLMClient> llm;
    if (!a.recorded.empty()) {
        require_file(a.recorded, "--recorded");
        llm = std::make_unique<RecordedLLM>(fs::path(a.recorded));
        opts.rate_per_sec = 0;
    } else {
        llm = std::make_unique<HttpLLM>(cfg.tracebench.endpoint, cfg.tracebench.model, cfg.tracebench.timeout_s);
        opts.backoff_s = 1.0;
    }

    auto file = load_narratives(a.narratives);
    for (const auto& s : file.skipped) std::cerr << "skipped " << s << "\n";
    if (file.records.empty()) throw DatasetError("no valid narrative records in " + a.narratives);
    auto result = build_benchmark(file.records, *llm, opts);
    write_benchmark(result, a.out);
    std::cout << result.stats.to_json().dump(2) << "\n";
    return 0;
}

int cmd_serve(const Common& common, const std::optional<std::string>& host, const std::optional<int>& port,
              const std::string& ckpt, const std::string& bank) {
    Config cfg = resolve_config(common);
    set_if(cfg, "service.host", host);
    set_if(cfg, "service.port", port);
    if (!ckpt.empty()) cfg.set("decoder.checkpoint", ckpt);
    if (!bank.empty()) cfg.set("gap.memory", bank);

    // handle SIGINT/SIGTERM synchronously on this thread
    sigset_t signals;
    sigemptyset(&signals);
    sigaddset(&signals, SIGINT);
    sigaddset(&signals, SIGTERM);
    pthread_sigmask(SIG_BLOCK, &signals, nullptr);

    auto service = CaptionService::from_config(cfg);
    auto health = service->health();
    if (health["status"] != "ok") std::cerr << "warning: service degraded: " << health.value("problem", "") << "\n";
    HttpServer server(*service);
    int bound = server.bind(cfg.service.host, cfg.service.port);
    std::thread listener([&] { server.listen(); });
    server.wait_until_ready();
    std::cout << "listening on http://" << cfg.service.host << ":" << bound << std::endl;
    int sig = 0;
    sigwait(&signals, &sig);
    std::cerr << "shutting down\n";
    server.stop();
    listener.join();
    return 0;
}

int cmd_convert(const std::string& format, const std::string& in, const std::string& out, std::size_t max_images,
                const std::string& split) {
    require_file(in, "--in");
    if (out.empty()) throw ConfigError("--out is required");
    std::size_t n = format == "vg" ? convert_visual_genome(in, out, max_images) : convert_karpathy(in, out, split);
    std::cout << "wrote " << n << " samples to " << out << "\n";
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Region captioning over patch-level vision-language features"};
    app.require_subcommand(1);
    // --config/--set may also follow the subcommand
    app.fallthrough();
    Common common;
    app.add_option("--config", common.config_path, "JSON config file (default: $PIONER_CONFIG)");
    app.add_option("--set", common.overrides, "Config override key=value (repeatable)");

    TrainArgs train_args;
    auto* train_cmd = app.add_subcommand("train-decoder", "Train the text-only decoder on a caption corpus");
    train_cmd->add_option("--corpus", train_args.corpus, "One caption per line")->required();
    train_cmd->add_option("--out", train_args.out, "Checkpoint path")->required();
    train_cmd->add_option("--mitigation", train_args.mitigation, "memory, noise or none")
        ->check(CLI::IsMember({"memory", "noise", "none"}));
    train_cmd->add_option("--epochs", train_args.epochs);
    train_cmd->add_option("--lr", train_args.lr);
    train_cmd->add_option("--batch", train_args.batch);
    train_cmd->add_option("--seed", train_args.seed);
    train_cmd->add_option("--sigma2", train_args.sigma2, "Noise variance (noise mitigation)");

    std::string mem_corpus, mem_out;
    std::optional<double> mem_tau;
    auto* mem_cmd = app.add_subcommand("build-memory", "Embed a caption corpus into a memory bank");
    mem_cmd->add_option("--corpus", mem_corpus)->required();
    mem_cmd->add_option("--out", mem_out)->required();
    mem_cmd->add_option("--tau", mem_tau, "Softmax temperature stored in the bank");

    CaptionArgs cap_args;
    auto* cap_cmd = app.add_subcommand("caption", "Caption one region of an image");
    cap_cmd->add_option("--image", cap_args.image)->required();
    cap_cmd->add_option("--region", cap_args.region, "region-spec/v1 JSON or @file (default: whole image)");
    cap_cmd->add_option("--ckpt", cap_args.ckpt);
    cap_cmd->add_option("--bank", cap_args.bank);
    cap_cmd->add_option("--aggregation", cap_args.aggregation);
    cap_cmd->add_flag("--weights", cap_args.weights, "Also print per-patch weights as JSON");

    EvalArgs eval_args;
    auto* eval_cmd = app.add_subcommand("eval", "Run a benchmark task and write a report");
    eval_cmd->add_option("--task", eval_args.task, "trace, dense, region-set or image")->required();
    eval_cmd->add_option("--dataset", eval_args.dataset)->required();
    eval_cmd->add_option("--report", eval_args.report)->required();
    eval_cmd->add_option("--ckpt", eval_args.ckpt);
    eval_cmd->add_option("--bank", eval_args.bank);
    eval_cmd->add_option("--decoder", eval_args.decoder, "pipeline (default) or echo");
    eval_cmd->add_option("--aggregation", eval_args.aggregation);
    eval_cmd->add_option("--image-root", eval_args.image_root);
    eval_cmd->add_option("--jobs", eval_args.jobs);

    TracebenchArgs tb_args;
    auto* tb_cmd = app.add_subcommand("tracebench", "Trace benchmark construction");
    tb_cmd->require_subcommand(1);
    auto* tb_build = tb_cmd->add_subcommand("build", "Build trace-task JSONL from narratives");
    tb_build->add_option("--narratives", tb_args.narratives)->required();
    tb_build->add_option("--out", tb_args.out)->required();
    auto* llm_opt = tb_build->add_option("--llm", tb_args.llm, "Chat-completions endpoint URL");
    auto* rec_opt = tb_build->add_option("--recorded", tb_args.recorded, "Recorded LLM responses (JSONL)");
    llm_opt->excludes(rec_opt);
    tb_build->add_option("--model", tb_args.model);
    tb_build->add_option("--image-sizes", tb_args.image_sizes, "JSON map image id -> [width, height]");
    tb_build->add_option("--image-pattern", tb_args.image_pattern, "Image path template with {image_id}");
    tb_build->add_option("--concurrency", tb_args.concurrency);
    tb_build->add_option("--retries", tb_args.retries);
    tb_build->add_option("--rate", tb_args.rate, "LLM requests per second");

    std::optional<std::string> serve_host;
    std::optional<int> serve_port;
    std::string serve_ckpt, serve_bank;
    auto* serve_cmd = app.add_subcommand("serve", "Run the HTTP captioning service");
    serve_cmd->add_option("--host", serve_host);
    serve_cmd->add_option("--port", serve_port, "0 picks a free port");
    serve_cmd->add_option("--ckpt", serve_ckpt);
    serve_cmd->add_option("--bank", serve_bank);

    std::string conv_in, conv_out, conv_split = "test";
    std::size_t conv_max = 0;
    auto* conv_cmd = app.add_subcommand("convert", "Convert upstream annotations to task JSONL");
    conv_cmd->require_subcommand(1);
    auto* conv_vg = conv_cmd->add_subcommand("vg", "Visual Genome region descriptions -> dense");
    auto* conv_k = conv_cmd->add_subcommand("karpathy", "Karpathy COCO split -> image");
    for (auto* c : {conv_vg, conv_k}) {
        c->add_option("--in", conv_in)->required();
        c->add_option("--out", conv_out)->required();
    }
    conv_vg->add_option("--max-images", conv_max);
    conv_k->add_option("--split", conv_split);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : kUsage;
    }

    try {
        if (*train_cmd) return cmd_train(common, train_args);
        if (*mem_cmd) return cmd_build_memory(common, mem_corpus, mem_out, mem_tau);
        if (*cap_cmd) return cmd_caption(common, cap_args);
        if (*eval_cmd) return cmd_eval(common, eval_args);
        if (*tb_build) return cmd_tracebench(common, tb_args);
        if (*serve_cmd) return cmd_serve(common, serve_host, serve_port, serve_ckpt, serve_bank);
        if (*conv_vg) return cmd_convert("vg", conv_in, conv_out, conv_max, conv_split);
        if (*conv_k) return cmd_convert("karpathy", conv_in, conv_out, conv_max, conv_split);
    } catch (const Error& e) {
        std::cerr << "error (" << e.kind() << "): " << e.what() << "\n";
        return is_usage_error(e) ? kUsage : kRuntime;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kRuntime;
    }
    return kUsage;
}

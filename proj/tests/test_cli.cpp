#include <doctest.h>

#include <chrono>
#include <csignal>
#include <regex>
#include <thread>

#include "pioner/evalharness.hpp"
#include "pioner/gap.hpp"
#include "support/fixtures.hpp"

// after Eigen: <resolv.h> defines a _res macro
#include <httplib.h>

using namespace pioner;
using pioner::testing::read_text;
using pioner::testing::run_command;
using pioner::testing::TempDir;
using pioner::testing::write_text;

namespace {

const std::string kSmall = " --set decoder.d_model=64 --set train.batch=1 --set decoder.max_len=32";

std::string q(const std::filesystem::path& p) { return "'" + p.string() + "'"; }

std::string cli(const std::string& args) { return pioner::testing::cli_path() + " " + args + " 2>&1"; }

// Trains the one-caption decoder and bank through the CLI once per process.
struct Trained {
    TempDir dir;
    std::filesystem::path ckpt, bank, image;
    Trained() {
        write_text(dir / "corpus.txt", pioner::testing::kDogCaption + "\n");
        ckpt = dir / "ckpt.bin";
        bank = dir / "bank.bin";
        image = pioner::testing::write_png(dir / "img.png", 90, 70, 12);
        auto t = run_command(cli("train-decoder --corpus " + q(dir / "corpus.txt") + " --out " + q(ckpt) +
                                 " --epochs 200 --lr 3e-3 --seed 11" + kSmall));
        REQUIRE_MESSAGE(t.status == 0, t.out);
        auto m = run_command(cli("build-memory --corpus " + q(dir / "corpus.txt") + " --out " + q(bank)));
        REQUIRE_MESSAGE(m.status == 0, m.out);
    }
    std::string caption_args() const { return "caption --image " + q(image) + " --ckpt " + q(ckpt) + " --bank " + q(bank); }
};

const Trained& trained() {
    static Trained t;
    return t;
}

} // namespace

TEST_CASE("cli: help and usage errors") {
    CHECK(run_command(cli("--help")).status == 0);
    for (const char* sub : {"train-decoder", "build-memory", "caption", "eval", "tracebench build", "serve",
                            "convert vg"})
        CHECK(run_command(cli(std::string(sub) + " --help")).status == 0);
    CHECK(run_command(cli("")).status == 2);
    CHECK(run_command(cli("frobnicate")).status == 2);
    CHECK(run_command(cli("train-decoder --out x.bin")).status == 2);
}

TEST_CASE("cli: train-decoder") {
    TempDir dir;
    write_text(dir / "c.txt", "a cat\n");
    auto missing = run_command(cli("train-decoder --corpus " + q(dir / "nope.txt") + " --out " + q(dir / "o.bin")));
    CHECK(missing.status == 2);
    CHECK(missing.out.find("does not exist") != std::string::npos);
    CHECK(run_command(cli("train-decoder --corpus " + q(dir / "c.txt") + " --out " + q(dir / "o.bin") + " --epochs 0"))
              .status == 2);
    CHECK(run_command(cli("train-decoder --corpus " + q(dir / "c.txt") + " --out " + q(dir / "o.bin") +
                          " --mitigation magic"))
              .status == 2);

    const auto& t = trained();
    auto ckpt = load_checkpoint(t.ckpt);
    CHECK(ckpt.meta.steps == 200);
    CHECK(ckpt.mitigation == GapMode::memory);
    auto log = json::parse(read_text(t.ckpt.string() + ".log.json"));
    CHECK(log["step_losses"].size() == 200);
}

TEST_CASE("cli: build-memory") {
    TempDir dir;
    write_text(dir / "c.txt", "a cat\na dog\n\na bus\n");
    auto r = run_command(cli("build-memory --corpus " + q(dir / "c.txt") + " --out " + q(dir / "m.bin")));
    REQUIRE(r.status == 0);
    CHECK(load_memory(dir / "m.bin").size() == 3);
    REQUIRE(run_command(cli("build-memory --corpus " + q(dir / "c.txt") + " --out " + q(dir / "n.bin"))).status == 0);
    CHECK(read_text(dir / "m.bin") == read_text(dir / "n.bin"));
    CHECK(run_command(cli("build-memory --corpus " + q(dir / "c.txt") + " --out " + q(dir / "m.bin") + " --tau 0"))
              .status == 2);
}

TEST_CASE("cli: config precedence is defaults < file < --set < flags") {
    TempDir dir;
    write_text(dir / "c.txt", "a cat\n");
    write_text(dir / "cfg.json", R"({"gap.tau": 0.5})");
    auto tau_of = [&](const std::string& args, const std::string& env = "") {
        auto r = run_command(env + cli(args + " build-memory --corpus " + q(dir / "c.txt") + " --out " + q(dir / "m.bin")));
        REQUIRE_MESSAGE(r.status == 0, r.out);
        return load_memory(dir / "m.bin").tau();
    };
    CHECK(tau_of("") == 0.01);
    CHECK(tau_of("--config " + q(dir / "cfg.json")) == 0.5);
    CHECK(tau_of("", "PIONER_CONFIG=" + q(dir / "cfg.json") + " ") == 0.5);
    CHECK(tau_of("--config " + q(dir / "cfg.json") + " --set gap.tau=0.2") == 0.2);
    auto r = run_command(cli("--config " + q(dir / "cfg.json") + " --set gap.tau=0.2 build-memory --tau 0.1 --corpus " +
                             q(dir / "c.txt") + " --out " + q(dir / "m.bin")));
    REQUIRE(r.status == 0);
    CHECK(load_memory(dir / "m.bin").tau() == 0.1);

    write_text(dir / "bad.json", R"({"gap.tua": 1})");
    auto bad = run_command(cli("--config " + q(dir / "bad.json") + " build-memory --corpus " + q(dir / "c.txt") +
                               " --out " + q(dir / "m.bin")));
    CHECK(bad.status == 2);
    CHECK(bad.out.find("gap.tua") != std::string::npos);
}

TEST_CASE("cli: caption") {
    const auto& t = trained();
    auto whole = run_command(cli(t.caption_args() + R"( --region '{"kind": "image"}')"));
    auto box = run_command(cli(t.caption_args() + R"( --region '{"kind": "box", "box": [0, 0, 90, 70]}')"));
    REQUIRE(whole.status == 0);
    CHECK(whole.out == box.out);
    CHECK(whole.out == pioner::testing::kDogCaption + "\n");

    auto trace = run_command(cli(t.caption_args() + R"( --region '{"kind": "trace", "points": [[3, 4], [60, 50]]}')"));
    CHECK(trace.status == 0);
    CHECK(trace.out == pioner::testing::kDogCaption + "\n");

    auto weights = run_command(cli(t.caption_args() + R"( --weights --region '{"kind": "patch", "patch": [0, 1]}')"));
    REQUIRE(weights.status == 0);
    auto lines = weights.out.substr(weights.out.find('\n') + 1);
    CHECK(json::parse(lines) == json::parse(R"([{"index": 1, "weight": 1.0}])"));

    CHECK(run_command(cli(t.caption_args() + " --region '{bad'")).status == 2);
    CHECK(run_command(cli(t.caption_args() + R"( --region '{"kind": "blob"}')")).status == 2);
    CHECK(run_command(cli(t.caption_args() + R"( --aggregation gaussian --region '{"kind": "trace", "points": [[1, 1]]}')"))
              .status == 2);
    // checkpoint trained for memory projection, config asks for noise
    CHECK(run_command(cli(t.caption_args() + " --set gap.mode=noise")).status == 2);
}

TEST_CASE("cli: eval") {
    TempDir dir;
    const char* refs[] = {"a red bus on the road", "two cats sleep on a sofa", "a man rides a horse"};
    std::string lines;
    for (int i = 0; i < 3; ++i) {
        pioner::testing::write_png(dir / (std::to_string(i) + ".png"), 40 + 10 * i, 50, i + 1);
        lines += json{{"id", std::to_string(i)},
                      {"image", std::to_string(i) + ".png"},
                      {"region", {{"kind", "image"}}},
                      {"references", {refs[i]}}}
                     .dump() +
                 "\n";
    }
    write_text(dir / "ds.jsonl", lines);
    auto r = run_command(cli("eval --task image --decoder echo --dataset " + q(dir / "ds.jsonl") + " --report " +
                             q(dir / "rep.json")));
    REQUIRE_MESSAGE(r.status == 0, r.out);
    auto rep = json::parse(read_text(dir / "rep.json"));
    CHECK(rep["metrics"]["CIDEr-D"].get<double>() == doctest::Approx(10.0).epsilon(1e-12));
    CHECK(rep["metrics"]["BLEU-4"].get<double>() == doctest::Approx(1.0));
    CHECK(rep["n_samples"] == 3);

    CHECK(run_command(cli("eval --task captions --decoder echo --dataset " + q(dir / "ds.jsonl") + " --report " +
                          q(dir / "r.json")))
              .status == 2);
    CHECK(run_command(cli("eval --task image --decoder echo --dataset " + q(dir / "none.jsonl") + " --report " +
                          q(dir / "r.json")))
              .status == 2);

    const auto& t = trained();
    auto p = run_command(cli("eval --task image --dataset " + q(dir / "ds.jsonl") + " --report " + q(dir / "p.json") +
                             " --ckpt " + q(t.ckpt) + " --bank " + q(t.bank)));
    REQUIRE_MESSAGE(p.status == 0, p.out);
    auto rows = read_text(dir / "p.json.samples.jsonl");
    CHECK(rows.find(pioner::testing::kDogCaption) != std::string::npos);
}

TEST_CASE("cli: tracebench build with recorded responses") {
    TempDir dir;
    const auto fixtures = std::filesystem::path(PIONER_SOURCE_DIR) / "tests" / "fixtures";
    auto r = run_command(cli("tracebench build --narratives " + q(fixtures / "narratives_figure.jsonl") +
                             " --recorded " + q(fixtures / "trace_llm_recorded.jsonl") + " --out " +
                             q(dir / "trace.jsonl")));
    REQUIRE_MESSAGE(r.status == 0, r.out);
    auto ds = load_dataset(Task::trace, dir / "trace.jsonl");
    CHECK(ds.samples.size() == 4);
    auto stats = json::parse(read_text(dir.path() / "trace.jsonl.stats.json"));
    CHECK(stats["invalid"] == 2);

    auto both = run_command(cli("tracebench build --narratives " + q(fixtures / "narratives_figure.jsonl") +
                                " --recorded x --llm http://x --out " + q(dir / "t.jsonl")));
    CHECK(both.status == 2);
}

TEST_CASE("cli: convert") {
    TempDir dir;
    write_text(dir / "vg.json", R"([{"id": 7, "regions": [
        {"region_id": 1, "image_id": 7, "phrase": "a red car", "x": 1, "y": 2, "width": 10, "height": 5},
        {"region_id": 2, "image_id": 7, "phrase": "bad", "x": 1, "y": 2, "width": 0, "height": 5}]}])");
    auto r = run_command(cli("convert vg --in " + q(dir / "vg.json") + " --out " + q(dir / "vg.jsonl")));
    REQUIRE_MESSAGE(r.status == 0, r.out);
    CHECK(load_dataset(Task::dense, dir / "vg.jsonl").samples.size() == 1);
    CHECK(run_command(cli("convert vg --in " + q(dir / "missing.json") + " --out " + q(dir / "vg.jsonl"))).status == 2);
}

TEST_CASE("cli: serve answers health checks and stops on SIGTERM") {
    const auto& t = trained();
    TempDir dir;
    auto log = dir / "serve.log";
    auto launch = run_command(pioner::testing::cli_path() + " serve --host 127.0.0.1 --port 0 --ckpt " + q(t.ckpt) +
                              " --bank " + q(t.bank) + " > " + q(log) + " 2>&1 & echo $!");
    const pid_t pid = std::stoi(launch.out);
    std::smatch m;
    std::string text;
    const std::regex listening(R"(listening on http://127\.0\.0\.1:(\d+))");
    for (int i = 0; i < 200 && !std::regex_search(text, m, listening); ++i) {
        std::this_thread::sleep_for(std::chrono::milliseconds(25));
        text = read_text(log);
    }
    REQUIRE_MESSAGE(std::regex_search(text, m, listening), text);
    httplib::Client client("127.0.0.1", std::stoi(m[1]));
    auto health = client.Get("/v1/health");
    REQUIRE(health);
    CHECK(json::parse(health->body)["status"] == "ok");

    kill(pid, SIGTERM);
    bool gone = false;
    for (int i = 0; i < 200 && !gone; ++i) {
        std::this_thread::sleep_for(std::chrono::milliseconds(25));
        // the shell that launched it is gone, so an unreaped zombie also counts
        auto stat = read_text("/proc/" + std::to_string(pid) + "/stat");
        auto paren = stat.rfind(')');
        gone = kill(pid, 0) != 0 || (paren != std::string::npos && stat.size() > paren + 2 && stat[paren + 2] == 'Z');
    }
    CHECK(gone);
}

TEST_CASE("tools: export_grids writes archives the precomputed adapter reads") {
    TempDir dir;
    const std::string script = std::string(PIONER_SOURCE_DIR) + "/tools/export_grids.py";
    const std::string make = "python3 -c \"import numpy as np; np.savez('" + (dir / "img7.npz").string() +
                             "', patches=(np.arange(2*2*4, dtype=np.float32)/7).reshape(2,2,4), "
                             "attention=np.arange(4, dtype=np.float32).reshape(2,2)+1, orig_size=[50,80])\"";
    REQUIRE(run_command(make + " 2>&1").status == 0);
    auto r = run_command("python3 " + script + " " + q(dir / "img7.npz") + " --out-dir " + q(dir / "grids") + " 2>&1");
    REQUIRE_MESSAGE(r.status == 0, r.out);
    std::string name;
    auto grid = load_grid(dir / "grids" / "img7.piongrid", &name);
    CHECK(name == "img7");
    CHECK(grid.rows() == 2);
    CHECK(grid.cols() == 2);
    CHECK(grid.dim() == 4);
    CHECK(grid.original_size() == PixelSize{50, 80});
    CHECK(grid.source_resolution() == PixelSize{28, 28});
    for (std::size_t i = 0; i < grid.data().size(); ++i) CHECK(grid.data()[i] == float(i) / 7.0f);
    REQUIRE(grid.has_attention());
    CHECK((*grid.attention())[3] == 4.0f);

    PrecomputedAdapter adapter({dir / "grids", {}, 4, 14, 28, true});
    RgbImage key_only;
    key_only.key = "img7";
    CHECK(adapter.encode_image(key_only) == grid);
}

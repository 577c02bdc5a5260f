#define DOCTEST_CONFIG_IMPLEMENT

#include <doctest.h>

#include <sys/wait.h>

#include <array>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "grounder/config.hpp"

using namespace grounder;
namespace fs = std::filesystem;

namespace {

std::string g_cli;  // path to the binary under test, from argv

struct RunOutput {
    int exit_code = -1;
    std::string out;  // stdout + stderr interleaved
};

RunOutput run_cli(const std::string& args) {
    const std::string cmd = g_cli + " " + args + " 2>&1";
    std::array<char, 512> buf{};
    RunOutput r;
    FILE* p = popen(cmd.c_str(), "r");
    REQUIRE(p != nullptr);
    while (fgets(buf.data(), buf.size(), p)) r.out += buf.data();
    const int status = pclose(p);
    r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return r;
}

fs::path temp_dir(const std::string& tag) {
    const auto dir = fs::temp_directory_path() / ("grounder-cli-" + tag);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

// Shared across cases: a small dataset plus a 1-epoch checkpoint, built once.
struct SmokeRun {
    fs::path dir;
    std::string config_path;
    std::string dataset_dir;
    std::string run_dir;
    double seconds = 0.0;

    static const SmokeRun& instance() {
        static SmokeRun s = build();
        return s;
    }

private:
    static SmokeRun build() {
        SmokeRun s;
        s.dir = temp_dir("smoke");
        s.dataset_dir = (s.dir / "data").string();
        s.run_dir = (s.dir / "run").string();
        s.config_path = (s.dir / "cfg.txt").string();
        std::ofstream cfg(s.config_path);
        cfg << "preset = toy\n"
            << "dataset_dir = " << s.dataset_dir << "\n"
            << "out_dir = " << s.run_dir << "\n"
            << "synth.n_samples = 32\n"
            << "synth.seed = 9\n"
            << "split.train = 0.6\n"
            << "split.val = 0.2\n"
            << "split.test = 0.2\n"
            << "train.epochs = 1\n"
            << "train.lr_drop_epoch = 0\n"
            << "train.batch_size = 8\n"
            << "train.seed = 4\n";
        cfg.close();

        auto gen = run_cli("gen-synthetic --config " + s.config_path);
        REQUIRE(gen.exit_code == 0);

        const auto t0 = std::chrono::steady_clock::now();
        auto tr = run_cli("train --config " + s.config_path);
        s.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        INFO(tr.out);
        REQUIRE(tr.exit_code == 0);
        return s;
    }
};

}  // namespace

TEST_CASE("gen-synthetic writes a loadable dataset and echoes its config") {
    const auto& s = SmokeRun::instance();
    CHECK(fs::exists(fs::path(s.dataset_dir) / "manifest.json"));
    CHECK(fs::exists(fs::path(s.dataset_dir) / "annotations.jsonl"));
    CHECK(fs::exists(fs::path(s.dataset_dir) / "effective_config.txt"));
    CHECK(load_dataset(s.dataset_dir).size() == 32);
    CHECK(load_manifest(s.dataset_dir)["generator"]["n_samples"] == 32);
}

TEST_CASE("config echo round-trips through the parser") {
    const auto& s = SmokeRun::instance();
    std::ifstream f(fs::path(s.dataset_dir) / "effective_config.txt");
    std::ostringstream os;
    os << f.rdbuf();
    const RunConfig echoed = parse_config_text(os.str());
    const RunConfig original = parse_config_file(s.config_path);
    CHECK(echoed.model == original.model);
    CHECK(echoed.train.epochs == original.train.epochs);
    CHECK(echoed.train.seed == original.train.seed);
    CHECK(echoed.synth.n_samples == original.synth.n_samples);
    CHECK(echoed.split.train == original.split.train);
    CHECK(echoed.dataset_dir == original.dataset_dir);
    CHECK(echo_config(echoed) == os.str());  // fixed point
}

TEST_CASE("config parsing: presets, overrides, unknown keys") {
    CHECK(parse_config_text("preset = toy\n").model == ModelConfig::toy());
    CHECK(parse_config_text("preset = paper\n").model == ModelConfig::full());
    CHECK(parse_config_text("preset = full\n").model == ModelConfig::full());

    // The preset applies first even when written after the override.
    const auto cfg = parse_config_text("model.vlt_layers = 5\npreset = toy\n");
    CHECK(cfg.model.vlt_layers == 5);

    CHECK_THROWS_AS(parse_config_text("preset = huge\n"), ConfigError);
    CHECK_THROWS_AS(parse_config_text("model.depth = 3\n"), ConfigError);
    CHECK_THROWS_AS(parse_config_text("train.epochs = soon\n"), ConfigError);
    CHECK_THROWS_AS(parse_config_text("just a line\n"), ConfigError);
    CHECK_NOTHROW(parse_config_text("# comment\n\ntrain.epochs = 3 # inline\n"));
}

TEST_CASE("one-epoch training smoke run finishes quickly and logs") {
    const auto& s = SmokeRun::instance();
    MESSAGE("train smoke run took " << s.seconds << " s");
    CHECK(s.seconds < 60.0);
    CHECK(fs::exists(fs::path(s.run_dir) / "best.ckpt"));
    CHECK(fs::exists(fs::path(s.run_dir) / "effective_config.txt"));

    std::ifstream log(fs::path(s.run_dir) / "loss_report.jsonl");
    REQUIRE(log.good());
    int steps = 0, epochs = 0;
    std::string line;
    while (std::getline(log, line)) {
        const auto j = nlohmann::json::parse(line);
        if (j["type"] == "step") ++steps;
        if (j["type"] == "epoch") ++epochs;
    }
    // 32 samples * 0.6 -> about 19 train samples -> 3 batches of 8.
    CHECK(steps >= 2);
    CHECK(epochs == 1);
}

TEST_CASE("eval scores the fixture predictions file") {
    const auto dir = temp_dir("fixture");
    {
        std::ofstream f(dir / "preds.jsonl");
        f << R"({"id":"a","iou":0.6})" << "\n"
          << R"({"id":"b","iou":0.4})" << "\n"
          << R"({"id":"c","iou":0.55})" << "\n";
    }
    const auto r = run_cli("eval --predictions " + (dir / "preds.jsonl").string() + " --out " +
                           (dir / "out").string());
    CHECK(r.exit_code == 0);
    CHECK(r.out.find("Acc 66.67, mIoU 51.67") != std::string::npos);

    std::ifstream mf(dir / "out" / "metrics.json");
    REQUIRE(mf.good());
    const auto m = nlohmann::json::parse(mf);
    CHECK(m["n"] == 3);
}

TEST_CASE("eval runs a checkpoint against a named split") {
    const auto& s = SmokeRun::instance();
    const auto r = run_cli("eval --config " + s.config_path + " --checkpoint " + s.run_dir +
                           "/best.ckpt --split val");
    INFO(r.out);
    CHECK(r.exit_code == 0);
    CHECK(r.out.find("split=val") != std::string::npos);
    CHECK(fs::exists(fs::path(s.run_dir) / "predictions_val.jsonl"));
    CHECK(fs::exists(fs::path(s.run_dir) / "metrics.json"));

    // The dump and the printed metrics agree.
    const auto m = metrics_from_dump((fs::path(s.run_dir) / "predictions_val.jsonl").string());
    CHECK(r.out.find(format_metrics(m)) != std::string::npos);
}

TEST_CASE("predict is deterministic and can emit a heatmap") {
    const auto& s = SmokeRun::instance();
    const std::string img = s.dataset_dir + "/images/synth-00000.png";
    const std::string base = "predict --checkpoint " + s.run_dir + "/best.ckpt --image " + img +
                             " --phrase \"circle in the upper left\"";

    const auto r1 = run_cli(base);
    const auto r2 = run_cli(base);
    INFO(r1.out);
    CHECK(r1.exit_code == 0);
    CHECK(r1.out == r2.out);
    CHECK(r1.out.find("box cxcywh (normalized):") != std::string::npos);
    CHECK(r1.out.find("box xywh (pixels):") != std::string::npos);

    const auto heat = (fs::path(s.dir) / "attn.png").string();
    const auto r3 = run_cli(base + " --heatmap " + heat);
    CHECK(r3.exit_code == 0);
    CHECK(fs::exists(heat));
    CHECK(fs::exists(heat + ".txt"));
}

TEST_CASE("exit codes separate config, data and runtime failures") {
    const auto& s = SmokeRun::instance();
    const auto dir = temp_dir("codes");

    SUBCASE("missing config file -> 2") {
        CHECK(run_cli("train --config " + (dir / "nope.txt").string()).exit_code == 2);
    }
    SUBCASE("unknown key -> 2") {
        std::ofstream(dir / "bad.txt") << "nonsense.key = 1\n";
        CHECK(run_cli("train --config " + (dir / "bad.txt").string()).exit_code == 2);
    }
    SUBCASE("unknown flag -> 2") {
        CHECK(run_cli("train --frobnicate").exit_code == 2);
    }
    SUBCASE("missing subcommand -> 2") {
        CHECK(run_cli("").exit_code == 2);
    }
    SUBCASE("missing dataset -> 3") {
        std::ofstream(dir / "cfg.txt") << "preset = toy\ndataset_dir = " << (dir / "void").string()
                                       << "\nout_dir = " << (dir / "out").string() << "\n";
        const auto r = run_cli("train --config " + (dir / "cfg.txt").string());
        INFO(r.out);
        CHECK(r.exit_code == 3);
    }
    SUBCASE("corrupt checkpoint -> 3") {
        std::ofstream(dir / "junk.ckpt") << "not a checkpoint";
        const auto r = run_cli("eval --config " + s.config_path + " --checkpoint " +
                               (dir / "junk.ckpt").string());
        INFO(r.out);
        CHECK(r.exit_code == 3);
    }
    SUBCASE("missing predictions dump -> 3") {
        CHECK(run_cli("eval --predictions " + (dir / "ghost.jsonl").string()).exit_code == 3);
    }
}

TEST_CASE("seeds subcommand trains per seed and aggregates") {
    const auto& s = SmokeRun::instance();
    const auto out = temp_dir("seeds");
    const auto r = run_cli("seeds --config " + s.config_path + " --seeds 1,2 --out " +
                           out.string());
    INFO(r.out);
    CHECK(r.exit_code == 0);
    CHECK(r.out.find("seed 1:") != std::string::npos);
    CHECK(r.out.find("seed 2:") != std::string::npos);
    CHECK(r.out.find("mean over 2 seeds:") != std::string::npos);

    std::ifstream f(out / "seeds.json");
    REQUIRE(f.good());
    const auto agg = nlohmann::json::parse(f);
    CHECK(agg["per_seed"].size() == 2);
    const double mean = (agg["per_seed"][0]["acc"].get<double>() +
                         agg["per_seed"][1]["acc"].get<double>()) /
                        2.0;
    CHECK(agg["acc"].get<double>() == doctest::Approx(mean).epsilon(1e-12));
}

int main(int argc, char** argv) {
    if (argc < 2) {
        std::fprintf(stderr, "usage: test_cli [doctest args] <cli-binary>\n");
        return 64;
    }
    g_cli = argv[argc - 1];  // binary path appended by the test harness
    doctest::Context ctx;
    ctx.applyCommandLine(argc - 1, argv);
    return ctx.run();
}

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include <CLI11.hpp>

#include "grounder/config.hpp"
#include "grounder/engine.hpp"

namespace fs = std::filesystem;
using namespace grounder;

namespace {

struct CommonFlags {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
};

RunConfig load_run_config(const CommonFlags& f) {
    RunConfig cfg = f.config.empty() ? preset_config("toy") : parse_config_file(f.config);
    if (f.seed) {
        cfg.train.seed = *f.seed;
        cfg.synth.seed = *f.seed;
    }
    if (!f.out.empty()) cfg.out_dir = f.out;
    cfg.validate();
    return cfg;
}

NormStats stats_from_json(const nlohmann::json& norm) {
    return {norm.at("mean").get<double>(), norm.at("stddev").get<double>()};
}

// Training-split statistics: prefer the manifest (computed at generation
// time), fall back to computing them here.
NormStats resolve_stats(const RunConfig& cfg, const std::vector<GroundingSample>& train_split) {
    try {
        const auto m = load_manifest(cfg.dataset_dir);
        if (m.contains("norm")) return stats_from_json(m["norm"]);
    } catch (const DataError&) {
    }
    return compute_norm_stats(train_split);
}

Vocabulary vocab_of(const std::vector<GroundingSample>& samples) {
    std::vector<std::string> phrases;
    phrases.reserve(samples.size());
    for (const auto& s : samples) phrases.push_back(s.phrase);
    return Vocabulary::from_corpus(phrases);
}

void write_json(const fs::path& path, const nlohmann::json& j) {
    std::ofstream f(path);
    if (!f) throw DataError("cannot write " + path.string());
    f << j.dump(2) << "\n";
}

int cmd_gen_synthetic(const CommonFlags& flags) {
    RunConfig cfg = load_run_config(flags);
    if (!flags.out.empty()) cfg.dataset_dir = flags.out;  // --out names the dataset dir here
    fs::create_directories(cfg.dataset_dir);
    write_config(cfg, (fs::path(cfg.dataset_dir) / "effective_config.txt").string());

    const auto data = generate_synthetic(cfg.synth);
    write_dataset(cfg.dataset_dir, data);
    std::cout << "wrote " << data.samples.size() << " samples to " << cfg.dataset_dir << "\n";
    return 0;
}

struct LoadedSplits {
    Splits splits;
    NormStats stats;
};

LoadedSplits load_splits(const RunConfig& cfg) {
    const auto samples = load_dataset(cfg.dataset_dir);
    LoadedSplits out{split_by_patient(samples, cfg.split), {}};
    out.stats = resolve_stats(cfg, out.splits.train);
    return out;
}

int cmd_train(const CommonFlags& flags) {
    const RunConfig cfg = load_run_config(flags);
    fs::create_directories(cfg.out_dir);
    write_config(cfg, (fs::path(cfg.out_dir) / "effective_config.txt").string());

    const auto data = load_splits(cfg);
    Model model(cfg.model, vocab_of(data.splits.train));
    model.params().init_all(cfg.train.seed);
    std::cout << "training on " << data.splits.train.size() << " samples, validating on "
              << data.splits.val.size() << " (" << model.params().parameter_count()
              << " parameters)\n";

    const auto res = train(model, cfg.train, data.splits.train, data.splits.val, data.stats,
                           cfg.out_dir);
    std::cout << "best epoch " << res.best_epoch << ": " << format_metrics(res.best_val)
              << " (val, n=" << res.best_val.n << ")\n"
              << "checkpoint " << res.checkpoint << "\n";
    return 0;
}

const std::vector<GroundingSample>& pick_split(const Splits& s, const std::string& name) {
    if (name == "train") return s.train;
    if (name == "val") return s.val;
    if (name == "test") return s.test;
    throw ConfigError("unknown split '" + name + "' (expected train, val or test)");
}

int cmd_eval(const CommonFlags& flags, const std::string& checkpoint, const std::string& split,
             const std::string& predictions) {
    if (!predictions.empty()) {
        // Fixture mode: score an existing per-sample dump.
        const auto m = metrics_from_dump(predictions);
        std::cout << format_metrics(m) << " (n=" << m.n << ")\n";
        if (!flags.out.empty()) {
            fs::create_directories(flags.out);
            write_json(fs::path(flags.out) / "metrics.json", to_json(m));
        }
        return 0;
    }
    if (checkpoint.empty()) throw ConfigError("eval needs --checkpoint or --predictions");

    const RunConfig cfg = load_run_config(flags);
    nlohmann::json extra;
    Model model = Model::load_checkpoint(checkpoint, &extra);

    const auto samples = load_dataset(cfg.dataset_dir);
    const auto splits = split_by_patient(samples, cfg.split);
    const auto& chosen = pick_split(splits, split);

    const NormStats stats = extra.contains("norm") ? stats_from_json(extra["norm"])
                                                   : resolve_stats(cfg, splits.train);
    fs::create_directories(cfg.out_dir);
    EvalOptions opts;
    opts.dump_path = (fs::path(cfg.out_dir) / ("predictions_" + split + ".jsonl")).string();
    const auto m = evaluate(model, chosen, stats, opts);
    std::cout << format_metrics(m) << " (n=" << m.n << ", split=" << split << ")\n";

    auto j = to_json(m);
    j["split"] = split;
    j["checkpoint"] = checkpoint;
    write_json(fs::path(cfg.out_dir) / "metrics.json", j);
    return 0;
}

int cmd_predict(const std::string& checkpoint, const std::string& image_path,
                const std::string& phrase, const std::string& heatmap) {
    nlohmann::json extra;
    Model model = Model::load_checkpoint(checkpoint, &extra);
    if (!extra.contains("norm"))
        throw DataError("checkpoint carries no normalization statistics; re-train to regenerate");
    const NormStats stats = stats_from_json(extra["norm"]);

    GroundingSample sample{.id = "query",
                           .image = load_image(image_path),
                           .phrase = phrase,
                           .gt_box = BoundingBox::xywh_topleft(0, 0, 1, 1, Frame::pixel(1, 1)),
                           .patient_id = "query"};
    sample.gt_box = BoundingBox::xywh_topleft(0, 0, sample.image.width, sample.image.height,
                                              Frame::pixel(sample.image.width, sample.image.height));

    const auto pre = preprocess(sample, model.config().image_size, stats);
    RunCtx rc = model.ctx(false);
    const auto fwd = model.forward(pre.input, phrase, rc);

    const auto& v = fwd.pred.value();
    const int out = pre.map.out_size;
    const Corners canvas{(v(0, 0) - 0.5 * v(0, 2)) * out, (v(0, 1) - 0.5 * v(0, 3)) * out,
                         (v(0, 0) + 0.5 * v(0, 2)) * out, (v(0, 1) + 0.5 * v(0, 3)) * out};
    const Corners px = pre.map.invert(canvas);

    std::printf("box cxcywh (normalized): %.6f %.6f %.6f %.6f\n", v(0, 0), v(0, 1), v(0, 2),
                v(0, 3));
    std::printf("box xywh (pixels): %.2f %.2f %.2f %.2f\n", px.x0, px.y0, px.x1 - px.x0,
                px.y1 - px.y0);

    if (!heatmap.empty()) {
        export_attention(model, sample, stats, heatmap);
        std::cout << "heatmap " << heatmap << " (+ .txt sidecar)\n";
    }
    return 0;
}

int cmd_seeds(const CommonFlags& flags, const std::vector<std::uint64_t>& seeds) {
    if (seeds.empty()) throw ConfigError("seeds: need at least one seed");
    RunConfig cfg = load_run_config(flags);
    fs::create_directories(cfg.out_dir);
    write_config(cfg, (fs::path(cfg.out_dir) / "effective_config.txt").string());

    const auto data = load_splits(cfg);
    const auto vocab = vocab_of(data.splits.train);

    std::vector<SeedMetrics> runs;
    for (const auto seed : seeds) {
        TrainConfig tcfg = cfg.train;
        tcfg.seed = seed;
        Model model(cfg.model, vocab);
        model.params().init_all(seed);

        const auto run_dir = fs::path(cfg.out_dir) / ("seed-" + std::to_string(seed));
        const auto res = train(model, tcfg, data.splits.train, data.splits.val, data.stats,
                               run_dir.string());

        auto best = Model::load_checkpoint(res.checkpoint);
        const auto m = evaluate(best, data.splits.test, data.stats);
        std::cout << "seed " << seed << ": " << format_metrics(m) << " (test, n=" << m.n << ")\n";
        runs.push_back({seed, m});
    }

    const auto agg = aggregate_seeds(runs);
    std::cout << "mean over " << runs.size() << " seeds: " << format_metrics(agg.mean) << "\n";
    write_json(fs::path(cfg.out_dir) / "seeds.json", to_json(agg));
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"phrase grounding: synthetic data, training, evaluation"};
    app.require_subcommand(1);

    CommonFlags flags;
    std::string checkpoint, split = "test", predictions, image_path, phrase, heatmap;
    std::vector<std::uint64_t> seeds;

    auto add_common = [&](CLI::App* sub, bool with_seed = true) {
        sub->add_option("--config", flags.config, "config file (key = value lines)");
        sub->add_option("--out", flags.out, "output directory");
        if (with_seed) sub->add_option("--seed", flags.seed, "override train/generator seed");
    };

    auto* gen = app.add_subcommand("gen-synthetic", "generate a synthetic findings dataset");
    add_common(gen);
    auto* tr = app.add_subcommand("train", "train a grounding model");
    add_common(tr);
    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint or a predictions dump");
    add_common(ev, false);
    ev->add_option("--checkpoint", checkpoint, "checkpoint to evaluate");
    ev->add_option("--split", split, "train|val|test (default test)");
    ev->add_option("--predictions", predictions, "score an existing per-sample dump instead");
    auto* pr = app.add_subcommand("predict", "ground one phrase in one image");
    pr->add_option("--checkpoint", checkpoint, "trained checkpoint")->required();
    pr->add_option("--image", image_path, "input image (PNG)")->required();
    pr->add_option("--phrase", phrase, "finding phrase")->required();
    pr->add_option("--heatmap", heatmap, "write the box-query attention overlay here");
    auto* se = app.add_subcommand("seeds", "train/evaluate across seeds and aggregate");
    add_common(se, false);
    se->add_option("--seeds", seeds, "seed list")->delimiter(',')->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;  // flag/usage problems are config errors
    }

    try {
        if (gen->parsed()) return cmd_gen_synthetic(flags);
        if (tr->parsed()) return cmd_train(flags);
        if (ev->parsed()) return cmd_eval(flags, checkpoint, split, predictions);
        if (pr->parsed()) return cmd_predict(checkpoint, image_path, phrase, heatmap);
        if (se->parsed()) return cmd_seeds(flags, seeds);
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const DataError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 4;
    }
    return 0;
}

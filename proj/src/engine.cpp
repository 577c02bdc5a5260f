#include "grounder/engine.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

namespace fs = std::filesystem;

namespace grounder {

void TrainConfig::validate() const {
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (lr_vision <= 0 || lr_text <= 0 || lr_vlt <= 0)
        throw ConfigError("learning rates must be positive");
    if (lr_drop_epoch < 0 || lr_drop_epoch >= epochs)
        throw ConfigError("lr_drop_epoch must lie inside [0, epochs)");
    if (lr_drop_factor < 1) throw ConfigError("lr_drop_factor must be >= 1");
    if (warmup_steps < 0) throw ConfigError("warmup_steps must be >= 0");
    if (weight_decay < 0) throw ConfigError("weight_decay must be >= 0");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (lambda < 0) throw ConfigError("lambda must be >= 0");
    if (mu < 0) throw ConfigError("mu must be >= 0");
    if (tau <= 0) throw ConfigError("tau must be positive");
    if (negatives < 1) throw ConfigError("negatives must be >= 1");
    if (iou_ceiling <= 0 || iou_ceiling >= 1) throw ConfigError("iou_ceiling must be in (0, 1)");
    if (neg_min_size <= 0 || neg_min_size > 0.5)
        throw ConfigError("neg_min_size must be in (0, 0.5]");
}

nlohmann::json TrainConfig::to_json() const {
    return {{"epochs", epochs},
            {"lr_vision", lr_vision},
            {"lr_text", lr_text},
            {"lr_vlt", lr_vlt},
            {"lr_drop_epoch", lr_drop_epoch},
            {"lr_drop_factor", lr_drop_factor},
            {"warmup_steps", warmup_steps},
            {"weight_decay", weight_decay},
            {"batch_size", batch_size},
            {"seed", seed},
            {"lambda", lambda},
            {"mu", mu},
            {"tau", tau},
            {"negatives", negatives},
            {"iou_ceiling", iou_ceiling},
            {"neg_min_size", neg_min_size}};
}

double lr_at(const TrainConfig& cfg, ParamGroup group, int epoch) {
    double base = cfg.lr_vlt;
    if (group == ParamGroup::VISION) base = cfg.lr_vision;
    if (group == ParamGroup::TEXT) base = cfg.lr_text;
    return epoch >= cfg.lr_drop_epoch ? base / cfg.lr_drop_factor : base;
}

std::string format_metrics(const Metrics& m) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "Acc %.2f, mIoU %.2f", m.acc * 100.0, m.miou * 100.0);
    return buf;
}

Metrics metrics_from_ious(const std::vector<double>& ious) {
    if (ious.empty()) throw InputError("metrics need at least one sample");
    Metrics m;
    m.n = static_cast<long>(ious.size());
    double sum = 0.0;
    long pos = 0;
    for (double v : ious) {
        sum += v;
        if (v > 0.5) ++pos;  // strictly greater: 0.5 counts negative
    }
    m.acc = static_cast<double>(pos) / static_cast<double>(m.n);
    m.miou = sum / static_cast<double>(m.n);
    return m;
}

Metrics metrics_from_dump(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw DataError("cannot open predictions dump: " + path);
    std::vector<double> ious;
    std::string line;
    long ln = 0;
    while (std::getline(f, line)) {
        ++ln;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw DataError("predictions dump line " + std::to_string(ln) + ": " + e.what());
        }
        if (!j.contains("iou") || !j["iou"].is_number())
            throw DataError("predictions dump line " + std::to_string(ln) + ": missing 'iou'");
        ious.push_back(j["iou"].get<double>());
    }
    return metrics_from_ious(ious);
}

AggregateMetrics aggregate_seeds(const std::vector<SeedMetrics>& runs) {
    if (runs.empty()) throw InputError("aggregate_seeds needs at least one run");
    AggregateMetrics out;
    out.per_seed = runs;
    for (const auto& r : runs) {
        out.mean.acc += r.m.acc;
        out.mean.miou += r.m.miou;
        out.mean.n += r.m.n;
    }
    out.mean.acc /= static_cast<double>(runs.size());
    out.mean.miou /= static_cast<double>(runs.size());
    return out;
}

nlohmann::json to_json(const Metrics& m) {
    return {{"acc", m.acc}, {"miou", m.miou}, {"n", m.n}};
}

nlohmann::json to_json(const AggregateMetrics& a) {
    nlohmann::json per = nlohmann::json::array();
    for (const auto& r : a.per_seed) {
        auto j = to_json(r.m);
        j["seed"] = r.seed;
        per.push_back(std::move(j));
    }
    auto out = to_json(a.mean);
    out["per_seed"] = std::move(per);
    return out;
}

namespace {

struct PreSample {
    Preprocessed pre;
    std::vector<int> ids;
    const GroundingSample* src;
};

std::vector<PreSample> prepare(Model& model, const std::vector<GroundingSample>& samples,
                               const NormStats& stats) {
    std::vector<PreSample> out;
    out.reserve(samples.size());
    for (const auto& s : samples)
        out.push_back({preprocess(s, model.config().image_size, stats), model.tokenize(s.phrase),
                       &s});
    return out;
}

// Prediction IoU in the sample's own pixel frame. The inverse letterbox can
// push a bad prediction outside the frame, so the comparison runs on raw
// corners rather than checked boxes.
double scored_iou(const PreSample& ps, const Tensor& pred, Corners* pred_px = nullptr) {
    const auto& v = pred.value();
    const int out = ps.pre.map.out_size;
    const Corners canvas{(v(0, 0) - 0.5 * v(0, 2)) * out, (v(0, 1) - 0.5 * v(0, 3)) * out,
                         (v(0, 0) + 0.5 * v(0, 2)) * out, (v(0, 1) + 0.5 * v(0, 3)) * out};
    const Corners px = ps.pre.map.invert(canvas);
    if (pred_px) *pred_px = px;
    return iou(px, ps.src->gt_box.corners());
}

std::vector<double> eval_ious(Model& model, const std::vector<PreSample>& pre,
                              const std::string& dump_path) {
    std::ofstream dump;
    if (!dump_path.empty()) {
        dump.open(dump_path);
        if (!dump) throw DataError("cannot write predictions dump: " + dump_path);
    }
    std::vector<double> ious;
    ious.reserve(pre.size());
    for (const auto& ps : pre) {
        RunCtx rc = model.ctx(false);
        auto vis = model.encode_image(ps.pre.input, rc);
        auto txt = model.encode_phrase(ps.ids, rc);
        auto fused = model.fuse(vis, txt, rc);
        auto pred = model.predict_box(fused.token(fused.reg_index()), rc);
        Corners px{};
        const double v = scored_iou(ps, pred, &px);
        ious.push_back(v);
        if (dump.is_open()) {
            const Corners gt = ps.src->gt_box.corners();
            dump << nlohmann::json{{"id", ps.src->id},
                                   {"iou", v},
                                   {"pred", {px.x0, px.y0, px.x1, px.y1}},
                                   {"gt", {gt.x0, gt.y0, gt.x1, gt.y1}}}
                        .dump()
                 << "\n";
        }
    }
    return ious;
}

// Decoupled weight decay + adaptive moments over the store's entries, one
// learning rate per parameter group.
class GroupedAdamW {
public:
    GroupedAdamW(ParamStore& store, const TrainConfig& cfg) : store_(store), cfg_(cfg) {}

    void step(std::vector<Mat>& grads, int epoch) {
        ++t_;
        const double c1 = 1.0 - std::pow(kBeta1, t_);
        const double c2 = 1.0 - std::pow(kBeta2, t_);
        for (size_t i = 0; i < store_.size(); ++i) {
            auto& e = store_.entry(static_cast<int>(i));
            Mat& g = grads[i];
            if (g.size() == 0) continue;
            if (e.m.size() == 0) {
                e.m = Mat::Zero(e.value.rows(), e.value.cols());
                e.v = Mat::Zero(e.value.rows(), e.value.cols());
            }
            const double lr = warmup_scale() * lr_at(cfg_, e.group, epoch);
            e.m = kBeta1 * e.m + (1.0 - kBeta1) * g;
            e.v = kBeta2 * e.v + (1.0 - kBeta2) * g.cwiseProduct(g);
            const Mat mhat = e.m / c1;
            const Mat vhat = e.v / c2;
            e.value -= lr * (mhat.array() / (vhat.array().sqrt() + kEps)).matrix();
            e.value -= lr * cfg_.weight_decay * e.value;
        }
    }

    // Ramp factor of the step just taken (or about to be logged); 1 once
    // past the warmup window or when warmup is off.
    double warmup_scale() const {
        if (cfg_.warmup_steps <= 0) return 1.0;
        return std::min(1.0, static_cast<double>(t_) / cfg_.warmup_steps);
    }

private:
    static constexpr double kBeta1 = 0.9;
    static constexpr double kBeta2 = 0.999;
    static constexpr double kEps = 1e-8;
    ParamStore& store_;
    TrainConfig cfg_;
    long t_ = 0;
};

}  // namespace

Metrics evaluate(Model& model, const std::vector<GroundingSample>& samples,
                 const NormStats& stats, const EvalOptions& opts) {
    if (samples.empty()) throw InputError("evaluate: empty sample list");
    const auto pre = prepare(model, samples, stats);
    return metrics_from_ious(eval_ious(model, pre, opts.dump_path));
}

TrainResult train(Model& model, const TrainConfig& cfg,
                  const std::vector<GroundingSample>& train_set,
                  const std::vector<GroundingSample>& val_set, const NormStats& stats,
                  const std::string& run_dir) {
    cfg.validate();
    if (train_set.empty() || val_set.empty())
        throw InputError("train: both train and val splits must be non-empty");
    fs::create_directories(run_dir);

    std::ofstream report(fs::path(run_dir) / "loss_report.jsonl");
    if (!report) throw DataError("cannot write loss report in " + run_dir);

    const auto pre_train = prepare(model, train_set, stats);
    const auto pre_val = prepare(model, val_set, stats);

    ParamStore& store = model.params();
    GroupedAdamW opt(store, cfg);
    std::vector<Mat> grads(store.size());

    TrainResult result;
    result.checkpoint = (fs::path(run_dir) / "best.ckpt").string();
    double best_acc = -1.0, best_miou = -1.0;
    double step_ms_total = 0.0;
    long steps_total = 0;

    std::vector<size_t> order(pre_train.size());
    std::iota(order.begin(), order.end(), 0);

    auto emit = [&](nlohmann::json j) {
        report << j.dump() << "\n";
        report.flush();
        result.log.push_back(std::move(j));
    };

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::mt19937_64 shuffle_rng(mix_seed(cfg.seed, 0x5u, static_cast<std::uint64_t>(epoch)));
        std::shuffle(order.begin(), order.end(), shuffle_rng);

        double epoch_total = 0.0;
        long epoch_steps = 0;

        for (size_t begin = 0, step = 0; begin < order.size(); begin += cfg.batch_size, ++step) {
            const size_t end = std::min(order.size(), begin + cfg.batch_size);
            const double inv_n = 1.0 / static_cast<double>(end - begin);
            const auto t0 = std::chrono::steady_clock::now();

            for (auto& g : grads) g.resize(0, 0);
            double box_sum = 0.0, taco_sum = 0.0, fea_sum = 0.0, total_sum = 0.0;
            nlohmann::json sample_ids = nlohmann::json::array();

            for (size_t k = begin; k < end; ++k) {
                const PreSample& ps = pre_train[order[k]];
                sample_ids.push_back(ps.src->id);
                std::mt19937_64 rng(mix_seed(
                    cfg.seed, (static_cast<std::uint64_t>(epoch) << 32) | step, order[k]));

                RunCtx rc = model.ctx(true, &rng);
                auto vis = model.encode_image(ps.pre.input, rc);
                auto txt = model.encode_phrase(ps.ids, rc);
                auto fused = model.fuse(vis, txt, rc);
                auto pred = model.predict_box(fused.token(fused.reg_index()), rc);

                Mat gt(1, 4);
                const auto& g = ps.pre.gt.coords();
                gt << g[0], g[1], g[2], g[3];
                Tensor box_t = box_loss_t(pred, Tensor::constant(gt), cfg.lambda);

                Tensor total = box_t;
                if (cfg.mu > 0) {
                    const auto negs = sample_negative_boxes(ps.pre.gt, cfg.negatives,
                                                            cfg.iou_ceiling, cfg.neg_min_size, rng);
                    const auto terms = taco_loss(fused, ps.pre.gt, negs, cfg.tau);
                    total = total_loss(box_t, terms.taco, cfg.mu);
                    taco_sum += terms.taco.item();
                    fea_sum += terms.fea.item();
                }
                box_sum += box_t.item();
                total_sum += total.item();
                if (!std::isfinite(total.item())) {
                    std::string ids;
                    for (const auto& id : sample_ids) ids += " " + id.get<std::string>();
                    throw NumericError("non-finite loss (epoch " + std::to_string(epoch) +
                                       ", step " + std::to_string(step) + "); batch samples:" + ids);
                }

                (inv_n * total).backward();
                for (size_t i = 0; i < store.size(); ++i) {
                    const Mat& lg = store.leaf(static_cast<int>(i)).grad();
                    if (lg.size() == 0) continue;
                    if (grads[i].size() == 0)
                        grads[i] = lg;
                    else
                        grads[i] += lg;
                }
            }

            opt.step(grads, epoch);

            const double ms = std::chrono::duration<double, std::milli>(
                                  std::chrono::steady_clock::now() - t0)
                                  .count();
            step_ms_total += ms;
            ++steps_total;
            epoch_total += total_sum * inv_n;
            ++epoch_steps;

            nlohmann::json rec{{"type", "step"},
                               {"epoch", epoch},
                               {"step", static_cast<long>(step)},
                               {"samples", sample_ids},
                               {"box", box_sum * inv_n},
                               {"total", total_sum * inv_n},
                               {"lr_vision", opt.warmup_scale() * lr_at(cfg, ParamGroup::VISION, epoch)},
                               {"lr_text", opt.warmup_scale() * lr_at(cfg, ParamGroup::TEXT, epoch)},
                               {"lr_vlt", opt.warmup_scale() * lr_at(cfg, ParamGroup::VLT, epoch)}};
            if (cfg.mu > 0) {
                rec["taco"] = taco_sum * inv_n;
                rec["fea"] = fea_sum * inv_n;
            }
            emit(std::move(rec));
        }

        const double epoch_mean = epoch_total / static_cast<double>(epoch_steps);
        if (epoch == 0) result.first_epoch_mean_total = epoch_mean;
        result.final_epoch_mean_total = epoch_mean;

        const auto val = metrics_from_ious(eval_ious(model, pre_val, ""));
        const bool best = val.acc > best_acc || (val.acc == best_acc && val.miou > best_miou);
        if (best) {
            best_acc = val.acc;
            best_miou = val.miou;
            result.best_epoch = epoch;
            result.best_val = val;
            model.save_checkpoint(result.checkpoint,
                                  {{"epoch", epoch},
                                   {"val_acc", val.acc},
                                   {"val_miou", val.miou},
                                   {"norm", {{"mean", stats.mean}, {"stddev", stats.stddev}}},
                                   {"train_config", cfg.to_json()}});
        }
        emit({{"type", "epoch"},
              {"epoch", epoch},
              {"mean_total", epoch_mean},
              {"val_acc", val.acc},
              {"val_miou", val.miou},
              {"val_n", val.n},
              {"best", best}});
    }

    result.mean_step_ms = steps_total > 0 ? step_ms_total / static_cast<double>(steps_total) : 0.0;
    return result;
}

void export_attention(Model& model, const GroundingSample& sample, const NormStats& stats,
                      const std::string& out_png) {
    const int out = model.config().image_size;
    const Preprocessed pre = preprocess(sample, out, stats);
    const auto ids = model.tokenize(sample.phrase);

    RunCtx rc = model.ctx(false);
    auto vis = model.encode_image(pre.input, rc);
    auto txt = model.encode_phrase(ids, rc);
    auto fused = model.fuse(vis, txt, rc);

    const Mat row = fused.attn_row(fused.reg_index()).value();
    cv::Mat grid(fused.grid_rows, fused.grid_cols, CV_64F);
    for (int r = 0; r < fused.grid_rows; ++r)
        for (int c = 0; c < fused.grid_cols; ++c) grid.at<double>(r, c) = row(0, r * fused.grid_cols + c);

    {
        std::ofstream side(out_png + ".txt");
        if (!side) throw DataError("cannot write attention sidecar for " + out_png);
        side.precision(17);
        for (int r = 0; r < grid.rows; ++r) {
            for (int c = 0; c < grid.cols; ++c) side << (c ? " " : "") << grid.at<double>(r, c);
            side << "\n";
        }
    }

    cv::Mat heat;
    cv::resize(grid, heat, cv::Size(out, out), 0, 0, cv::INTER_LINEAR);
    double lo, hi;
    cv::minMaxLoc(heat, &lo, &hi);
    if (hi - lo > 1e-12)
        heat = (heat - lo) / (hi - lo);
    else
        heat = cv::Mat::zeros(out, out, CV_64F);  // uniform attention stays flat

    // Background: the letterboxed image itself, de-standardized for display.
    cv::Mat overlay(out, out, CV_8UC3);
    for (int y = 0; y < out; ++y)
        for (int x = 0; x < out; ++x) {
            double gray = 0.0;
            for (int c = 0; c < pre.input.c; ++c) gray += pre.input.px(y * out + x, c);
            gray = std::clamp(gray / pre.input.c * stats.stddev + stats.mean, 0.0, 1.0);
            const double h = heat.at<double>(y, x);
            const double base = 0.5 * gray;
            auto q = [](double v) {
                return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
            };
            overlay.at<cv::Vec3b>(y, x) = {q(base), q(base), q(base + 0.5 * h)};  // BGR, red ramp
        }
    if (!cv::imwrite(out_png, overlay)) throw DataError("cannot write heatmap: " + out_png);
}

}  // namespace grounder

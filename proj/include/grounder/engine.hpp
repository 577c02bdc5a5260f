#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "grounder/data.hpp"
#include "grounder/model.hpp"
#include "grounder/taco.hpp"

namespace grounder {

struct TrainConfig {
    int epochs = 90;
    double lr_vision = 1e-5;
    double lr_text = 1e-5;
    double lr_vlt = 5e-5;  // fusion stack, [REG] token and grounding head
    int lr_drop_epoch = 60;
    double lr_drop_factor = 10.0;
    int warmup_steps = 0;  // linear rate ramp over the first optimizer steps; 0 disables
    double weight_decay = 1e-4;
    int batch_size = 16;
    std::uint64_t seed = 0;
    double lambda = 1.0;  // giou weight inside the box objective
    double mu = 0.05;     // contrastive weight; 0 disables that path entirely
    double tau = 0.07;
    int negatives = 5;
    double iou_ceiling = 0.1;
    double neg_min_size = 0.05;

    void validate() const;
    nlohmann::json to_json() const;
};

// Group learning rate at a zero-based epoch: the base rate until
// lr_drop_epoch, divided by lr_drop_factor from then on.
double lr_at(const TrainConfig& cfg, ParamGroup group, int epoch);

struct Metrics {
    double acc = 0.0;   // fraction with IoU strictly above 0.5
    double miou = 0.0;  // arithmetic mean IoU
    long n = 0;
};

// "Acc 66.67, mIoU 51.67" (percentages, two decimals).
std::string format_metrics(const Metrics& m);

Metrics metrics_from_ious(const std::vector<double>& ious);

// Recomputes metrics from a per-sample dump: one record per line, each with
// an "iou" field. Cross-checks evaluate()'s own reduction.
Metrics metrics_from_dump(const std::string& path);

struct SeedMetrics {
    std::uint64_t seed = 0;
    Metrics m;
};

struct AggregateMetrics {
    Metrics mean;  // acc/miou averaged over runs, n summed
    std::vector<SeedMetrics> per_seed;
};

AggregateMetrics aggregate_seeds(const std::vector<SeedMetrics>& runs);
nlohmann::json to_json(const Metrics& m);
nlohmann::json to_json(const AggregateMetrics& a);

struct EvalOptions {
    std::string dump_path;  // per-sample JSONL (id, iou, boxes); empty = none
};

// Inference over samples: each prediction is mapped back to the sample's own
// pixel frame through the letterbox inverse before scoring against gt.
Metrics evaluate(Model& model, const std::vector<GroundingSample>& samples,
                 const NormStats& stats, const EvalOptions& opts = {});

struct TrainResult {
    std::string checkpoint;  // best-validation weights
    int best_epoch = -1;
    Metrics best_val;
    double first_epoch_mean_total = 0.0;
    double final_epoch_mean_total = 0.0;
    double mean_step_ms = 0.0;
    std::vector<nlohmann::json> log;  // step and epoch records as written
};

// Full training protocol: shuffled mini-batches, decoupled-weight-decay
// adaptive-moment updates in three parameter groups, the step-drop schedule,
// per-epoch validation and best-checkpoint retention. Writes
// loss_report.jsonl and best.ckpt under run_dir.
TrainResult train(Model& model, const TrainConfig& cfg,
                  const std::vector<GroundingSample>& train_set,
                  const std::vector<GroundingSample>& val_set, const NormStats& stats,
                  const std::string& run_dir);

// Renders the box-query token's attention over the visual grid: writes an
// overlay PNG at out_png and the raw grid values to out_png + ".txt".
void export_attention(Model& model, const GroundingSample& sample, const NormStats& stats,
                      const std::string& out_png);

}  // namespace grounder

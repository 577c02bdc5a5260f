#pragma once

#include <vector>

#include "grounder/geometry.hpp"
#include "grounder/model.hpp"

namespace grounder {

struct GridShape {
    int rows = 0, cols = 0;
    int count() const { return rows * cols; }
};

// Indices (row-major) of grid cells whose centers fall inside the box. The
// box must be in the normalized frame. An empty selection snaps to the cell
// center nearest the box center and bumps the "pool_empty_selection" counter.
std::vector<int> cells_in_box(const GridShape& grid, const BoundingBox& box);

// Mean of the selected rows; used on both token features and attention rows.
Tensor pool_rows(const Tensor& m, const std::vector<int>& cells);

// Region-conditioned slices of a fused forward pass: mean-pooled token
// feature and mean-pooled attention row over the cells covered by the box.
struct RegionContext {
    Tensor h_box;  // 1 x fused_width
    Tensor a_box;  // 1 x n_fused
    std::vector<int> cells;
};

RegionContext make_region(const FusedOutput& fused, const BoundingBox& box);

// InfoNCE over region features, positive first: -log softmax_0(z) with
// z_k = <h_cls, h_box_k> / tau. Diagnostic only; not part of the total loss.
Tensor feature_alignment_loss(const Tensor& h_cls, const std::vector<RegionContext>& regions,
                              double tau);

// Attention-guided context vector: elementwise product of the [CLS], [REG]
// and region attention rows, L2-normalized, used as weights over the fused
// tokens.
Tensor context_pooling(const Tensor& a_cls, const Tensor& a_reg, const Tensor& a_box,
                       const Tensor& tokens);

struct TacoOptions {
    bool zero_context = false;  // test hook: drop the context vectors
};

struct TacoTerms {
    Tensor taco;  // context-augmented contrastive loss
    Tensor fea;   // plain feature alignment, logged but never optimized
};

// Contrastive alignment between the phrase feature and the ground-truth
// region against sampled negative regions, both sides augmented with the
// tri-attention context vector.
TacoTerms taco_loss(const FusedOutput& fused, const BoundingBox& gt_box,
                    const NegativeBoxSet& negatives, double tau,
                    const TacoOptions& opts = {});

// total = box + mu * taco
Tensor total_loss(const Tensor& box_loss, const Tensor& taco, double mu);

}  // namespace grounder

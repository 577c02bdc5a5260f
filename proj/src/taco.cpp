#include "grounder/taco.hpp"

#include <cmath>
#include <limits>

namespace grounder {

std::vector<int> cells_in_box(const GridShape& grid, const BoundingBox& box) {
    if (grid.rows < 1 || grid.cols < 1) throw ConfigError("cells_in_box: empty grid");
    if (box.frame().is_pixel)
        throw ConfigError("cells_in_box expects a box in the normalized frame");
    const Corners c = box.corners();
    std::vector<int> cells;
    for (int r = 0; r < grid.rows; ++r) {
        const double cy = (r + 0.5) / grid.rows;
        if (cy < c.y0 || cy > c.y1) continue;
        for (int col = 0; col < grid.cols; ++col) {
            const double cx = (col + 0.5) / grid.cols;
            if (cx >= c.x0 && cx <= c.x1) cells.push_back(r * grid.cols + col);
        }
    }
    if (!cells.empty()) return cells;

    // Degenerately small boxes cover no cell center; fall back to the single
    // nearest cell so pooling stays well defined.
    WarnCounters::instance().bump("pool_empty_selection");
    const double bx = 0.5 * (c.x0 + c.x1);
    const double by = 0.5 * (c.y0 + c.y1);
    int best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (int r = 0; r < grid.rows; ++r) {
        for (int col = 0; col < grid.cols; ++col) {
            const double dx = (col + 0.5) / grid.cols - bx;
            const double dy = (r + 0.5) / grid.rows - by;
            const double d = dx * dx + dy * dy;
            if (d < best_d) {
                best_d = d;
                best = r * grid.cols + col;
            }
        }
    }
    return {best};
}

Tensor pool_rows(const Tensor& m, const std::vector<int>& cells) {
    return rows_mean(m, cells);
}

RegionContext make_region(const FusedOutput& fused, const BoundingBox& box) {
    const GridShape grid{fused.grid_rows, fused.grid_cols};
    RegionContext rc;
    rc.cells = cells_in_box(grid, box);
    rc.h_box = pool_rows(fused.tokens, rc.cells);
    rc.a_box = pool_rows(fused.attn, rc.cells);
    return rc;
}

namespace {

Tensor dot(const Tensor& a, const Tensor& b) { return sum_all(cmul(a, b)); }

// -log softmax_0 over a list of scalar logits, max-shifted for stability.
Tensor nll_first(const std::vector<Tensor>& logits) {
    double m = -std::numeric_limits<double>::infinity();
    for (const auto& z : logits) m = std::max(m, z.item());
    std::vector<Tensor> shifted;
    shifted.reserve(logits.size());
    for (const auto& z : logits) shifted.push_back(add_scalar(z, -m));
    Tensor lse = log_t(sum_all(exp_t(concat_cols(shifted))));
    return lse - shifted[0];
}

}  // namespace

Tensor feature_alignment_loss(const Tensor& h_cls, const std::vector<RegionContext>& regions,
                              double tau) {
    if (!(tau > 0.0)) throw ConfigError("temperature must be positive");
    if (regions.empty()) throw ConfigError("feature_alignment_loss needs the positive region");
    std::vector<Tensor> z;
    z.reserve(regions.size());
    for (const auto& r : regions) z.push_back(dot(h_cls, r.h_box) * (1.0 / tau));
    return nll_first(z);
}

Tensor context_pooling(const Tensor& a_cls, const Tensor& a_reg, const Tensor& a_box,
                       const Tensor& tokens) {
    Tensor t = l2_normalize_row(cmul(cmul(a_cls, a_reg), a_box));
    return matmul(t, tokens);
}

TacoTerms taco_loss(const FusedOutput& fused, const BoundingBox& gt_box,
                    const NegativeBoxSet& negatives, double tau, const TacoOptions& opts) {
    if (!(tau > 0.0)) throw ConfigError("temperature must be positive");

    std::vector<RegionContext> regions;
    regions.reserve(negatives.boxes.size() + 1);
    regions.push_back(make_region(fused, gt_box));
    for (const auto& b : negatives.boxes) regions.push_back(make_region(fused, b));

    const Tensor h_cls = fused.h_cls();
    const Tensor a_cls = fused.attn_row(fused.cls_index());
    const Tensor a_reg = fused.attn_row(fused.reg_index());

    std::vector<Tensor> z;
    z.reserve(regions.size());
    for (const auto& r : regions) {
        Tensor u, v;
        if (opts.zero_context) {
            u = h_cls;
            v = r.h_box;
        } else {
            Tensor c = context_pooling(a_cls, a_reg, r.a_box, fused.tokens);
            u = h_cls + c;
            v = r.h_box + c;
        }
        z.push_back(dot(u, v) * (1.0 / tau));
    }

    TacoTerms out;
    out.taco = nll_first(z);
    out.fea = feature_alignment_loss(h_cls, regions, tau);
    return out;
}

Tensor total_loss(const Tensor& box_loss, const Tensor& taco, double mu) {
    if (mu == 0.0) return box_loss;
    return box_loss + mu * taco;
}

}  // namespace grounder

#pragma once

#include "grounder/common.hpp"
#include "grounder/tensor.hpp"

#include <array>
#include <random>
#include <vector>

namespace grounder {

enum class BoxConvention { XYWH_TOPLEFT, CXCYWH };

// Coordinate frame: pixel space with known image dimensions, or the unit square.
struct Frame {
    static Frame pixel(double w, double h) {
        if (!(w > 0.0) || !(h > 0.0))
            throw ConfigError("Frame::pixel requires positive dimensions");
        return Frame{true, w, h};
    }
    static Frame normalized() { return Frame{false, 1.0, 1.0}; }

    bool is_pixel = false;
    double width = 1.0;
    double height = 1.0;

    bool operator==(const Frame& o) const {
        if (is_pixel != o.is_pixel) return false;
        if (!is_pixel) return true;
        return width == o.width && height == o.height;
    }
};

// Axis-aligned corners, used internally and by the evaluation path where
// frame-invariant construction checks would get in the way.
struct Corners {
    double x0, y0, x1, y1;
    double area() const { return (x1 - x0) * (y1 - y0); }
};

class BoundingBox {
public:
    BoundingBox(std::array<double, 4> coords, BoxConvention conv, Frame frame);

    static BoundingBox xywh_topleft(double x, double y, double w, double h, Frame frame) {
        return BoundingBox({x, y, w, h}, BoxConvention::XYWH_TOPLEFT, frame);
    }
    static BoundingBox cxcywh(double cx, double cy, double w, double h, Frame frame) {
        return BoundingBox({cx, cy, w, h}, BoxConvention::CXCYWH, frame);
    }

    const std::array<double, 4>& coords() const { return coords_; }
    BoxConvention convention() const { return conv_; }
    const Frame& frame() const { return frame_; }
    double width() const { return coords_[2]; }
    double height() const { return coords_[3]; }

    Corners corners() const;  // in this box's own frame

private:
    std::array<double, 4> coords_;
    BoxConvention conv_;
    Frame frame_;
};

// Representation change only; the geometric region is preserved.
BoundingBox convert(const BoundingBox& box, BoxConvention conv, const Frame& frame);

double iou(const Corners& a, const Corners& b);
double giou(const Corners& a, const Corners& b);
double iou(const BoundingBox& a, const BoundingBox& b);
double giou(const BoundingBox& a, const BoundingBox& b);

// Smooth L1 with beta = 1, mean-reduced over the 4 coordinates. Inputs are
// normalized CXCYWH 4-vectors.
double smooth_l1(const std::array<double, 4>& pred, const std::array<double, 4>& gt);

// Eq-style combined box objective: smooth_l1 + lambda * (1 - giou).
double box_loss(const BoundingBox& pred, const BoundingBox& gt, double lambda);

struct NegativeBoxSet {
    std::vector<BoundingBox> boxes;
    double iou_ceiling;
    BoundingBox anchor;
};

// Rejection-samples K normalized CXCYWH boxes with IoU(candidate, anchor) <=
// iou_ceiling. Deterministic given the generator state. max_attempts == 0
// selects the default of 1000 * K.
NegativeBoxSet sample_negative_boxes(const BoundingBox& anchor, int k, double iou_ceiling,
                                     double min_size, std::mt19937_64& rng,
                                     long max_attempts = 0);

// Differentiable counterparts on 1x4 normalized CXCYWH tensors; these drive
// the training objective while the plain overloads above serve metrics and
// the tests' independent cross-checks.
Tensor smooth_l1_t(const Tensor& pred, const Tensor& gt);
Tensor giou_t(const Tensor& pred, const Tensor& gt);
Tensor box_loss_t(const Tensor& pred, const Tensor& gt, double lambda);

}  // namespace grounder

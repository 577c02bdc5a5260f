#include "grounder/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace grounder {

namespace {

constexpr double kCoordSlack = 1e-9;

std::string frame_str(const Frame& f) {
    std::ostringstream os;
    if (f.is_pixel)
        os << "PIXEL(" << f.width << "," << f.height << ")";
    else
        os << "NORMALIZED";
    return os.str();
}

void validate(const std::array<double, 4>& c, BoxConvention conv, const Frame& f) {
    for (double v : c)
        if (!std::isfinite(v)) throw DataError("BoundingBox: non-finite coordinate");
    if (!(c[2] > 0.0) || !(c[3] > 0.0))
        throw DataError("BoundingBox: degenerate box (width/height must be > 0)");
    const double xmax = f.width, ymax = f.height;
    auto in_range = [](double v, double hi) {
        const double slack = kCoordSlack * std::max(1.0, hi);
        return v >= -slack && v <= hi + slack;
    };
    if (!in_range(c[0], xmax) || !in_range(c[1], ymax) || !in_range(c[2], xmax) ||
        !in_range(c[3], ymax)) {
        std::ostringstream os;
        os << "BoundingBox: coordinates (" << c[0] << "," << c[1] << "," << c[2] << "," << c[3]
           << ") outside frame " << frame_str(f);
        throw DataError(os.str());
    }
    (void)conv;
}

Corners to_corners(const std::array<double, 4>& c, BoxConvention conv) {
    if (conv == BoxConvention::XYWH_TOPLEFT) return {c[0], c[1], c[0] + c[2], c[1] + c[3]};
    return {c[0] - 0.5 * c[2], c[1] - 0.5 * c[3], c[0] + 0.5 * c[2], c[1] + 0.5 * c[3]};
}

}  // namespace

BoundingBox::BoundingBox(std::array<double, 4> coords, BoxConvention conv, Frame frame)
    : coords_(coords), conv_(conv), frame_(frame) {
    validate(coords_, conv_, frame_);
}

Corners BoundingBox::corners() const { return to_corners(coords_, conv_); }

BoundingBox convert(const BoundingBox& box, BoxConvention conv, const Frame& frame) {
    if (conv == box.convention() && frame == box.frame()) return box;
    if (box.frame().is_pixel && frame.is_pixel && !(box.frame() == frame))
        throw ConfigError("convert: no geometric identification between two pixel frames of different size");

    Corners c = box.corners();
    // Into the unit square first.
    if (box.frame().is_pixel) {
        c.x0 /= box.frame().width;
        c.x1 /= box.frame().width;
        c.y0 /= box.frame().height;
        c.y1 /= box.frame().height;
    }
    if (frame.is_pixel) {
        c.x0 *= frame.width;
        c.x1 *= frame.width;
        c.y0 *= frame.height;
        c.y1 *= frame.height;
    }
    if (conv == BoxConvention::XYWH_TOPLEFT)
        return BoundingBox({c.x0, c.y0, c.x1 - c.x0, c.y1 - c.y0}, conv, frame);
    return BoundingBox(
        {0.5 * (c.x0 + c.x1), 0.5 * (c.y0 + c.y1), c.x1 - c.x0, c.y1 - c.y0}, conv, frame);
}

double iou(const Corners& a, const Corners& b) {
    const double iw = std::min(a.x1, b.x1) - std::max(a.x0, b.x0);
    const double ih = std::min(a.y1, b.y1) - std::max(a.y0, b.y0);
    if (iw <= 0.0 || ih <= 0.0) return 0.0;
    const double inter = iw * ih;
    const double uni = a.area() + b.area() - inter;
    return inter / uni;
}

double giou(const Corners& a, const Corners& b) {
    const double iw = std::min(a.x1, b.x1) - std::max(a.x0, b.x0);
    const double ih = std::min(a.y1, b.y1) - std::max(a.y0, b.y0);
    const double inter = (iw > 0.0 && ih > 0.0) ? iw * ih : 0.0;
    const double uni = a.area() + b.area() - inter;
    const double ew = std::max(a.x1, b.x1) - std::min(a.x0, b.x0);
    const double eh = std::max(a.y1, b.y1) - std::min(a.y0, b.y0);
    const double enclose = ew * eh;
    return inter / uni - (enclose - uni) / enclose;
}

namespace {

// Brings b into a's frame; both reduced to corners.
std::pair<Corners, Corners> aligned_corners(const BoundingBox& a, const BoundingBox& b) {
    if (a.frame() == b.frame()) return {a.corners(), b.corners()};
    const BoundingBox bb = convert(b, b.convention(), a.frame());
    return {a.corners(), bb.corners()};
}

}  // namespace

double iou(const BoundingBox& a, const BoundingBox& b) {
    auto [ca, cb] = aligned_corners(a, b);
    return iou(ca, cb);
}

double giou(const BoundingBox& a, const BoundingBox& b) {
    auto [ca, cb] = aligned_corners(a, b);
    return giou(ca, cb);
}

double smooth_l1(const std::array<double, 4>& pred, const std::array<double, 4>& gt) {
    double acc = 0.0;
    for (int i = 0; i < 4; ++i) {
        const double d = std::abs(pred[i] - gt[i]);
        acc += d < 1.0 ? 0.5 * d * d : d - 0.5;
    }
    return acc / 4.0;
}

double box_loss(const BoundingBox& pred, const BoundingBox& gt, double lambda) {
    if (lambda < 0.0) throw ConfigError("box_loss: lambda must be >= 0");
    const BoundingBox p = convert(pred, BoxConvention::CXCYWH, Frame::normalized());
    const BoundingBox g = convert(gt, BoxConvention::CXCYWH, Frame::normalized());
    return smooth_l1(p.coords(), g.coords()) + lambda * (1.0 - giou(p, g));
}

NegativeBoxSet sample_negative_boxes(const BoundingBox& anchor, int k, double iou_ceiling,
                                     double min_size, std::mt19937_64& rng, long max_attempts) {
    if (k < 1) throw ConfigError("sample_negative_boxes: K must be >= 1");
    if (iou_ceiling < 0.0 || iou_ceiling >= 1.0)
        throw ConfigError("sample_negative_boxes: iou_ceiling must lie in [0,1)");
    if (anchor.frame().is_pixel)
        throw ConfigError("sample_negative_boxes: anchor must be NORMALIZED");
    if (max_attempts <= 0) max_attempts = 1000L * k;

    std::uniform_real_distribution<double> uni(0.0, 1.0);
    const Corners ac = anchor.corners();

    NegativeBoxSet out{{}, iou_ceiling, anchor};
    out.boxes.reserve(static_cast<size_t>(k));
    long attempts = 0;
    while (static_cast<int>(out.boxes.size()) < k) {
        if (attempts++ >= max_attempts) {
            const auto& c = anchor.coords();
            std::ostringstream os;
            os << "sample_negative_boxes: no candidate with IoU <= " << iou_ceiling << " found after "
               << max_attempts << " attempts for anchor cxcywh(" << c[0] << "," << c[1] << ","
               << c[2] << "," << c[3] << ")";
            throw SamplingError(os.str());
        }
        const double w = min_size + (1.0 - min_size) * uni(rng);
        const double h = min_size + (1.0 - min_size) * uni(rng);
        const double cx = 0.5 * w + (1.0 - w) * uni(rng);
        const double cy = 0.5 * h + (1.0 - h) * uni(rng);
        const Corners cand{cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h};
        if (iou(cand, ac) > iou_ceiling) continue;
        out.boxes.push_back(BoundingBox::cxcywh(cx, cy, w, h, Frame::normalized()));
    }
    return out;
}

namespace {

void check_vec4(const Tensor& t, const char* name) {
    if (t.rows() != 1 || t.cols() != 4)
        throw ShapeError(std::string(name) + ": expected a 1x4 tensor");
}

struct CornersT {
    Tensor x0, y0, x1, y1;
};

CornersT corners_t(const Tensor& b) {
    Tensor cx = block(b, 0, 0, 1, 1), cy = block(b, 0, 1, 1, 1);
    Tensor hw = 0.5 * block(b, 0, 2, 1, 1), hh = 0.5 * block(b, 0, 3, 1, 1);
    return {cx - hw, cy - hh, cx + hw, cy + hh};
}

}  // namespace

Tensor smooth_l1_t(const Tensor& pred, const Tensor& gt) {
    check_vec4(pred, "smooth_l1_t");
    check_vec4(gt, "smooth_l1_t");
    Tensor d = abs_t(pred - gt);
    // Piecewise selection mask is a constant of the forward values; exact a.e.
    Mat quad_mask = (d.value().array() < 1.0).cast<double>();
    Tensor mq = Tensor::constant(quad_mask);
    Tensor ml = Tensor::constant(Mat(1.0 - quad_mask.array()));
    Tensor out = cmul(mq, 0.5 * square(d)) + cmul(ml, add_scalar(d, -0.5));
    return mean_all(out);
}

Tensor giou_t(const Tensor& pred, const Tensor& gt) {
    check_vec4(pred, "giou_t");
    check_vec4(gt, "giou_t");
    CornersT a = corners_t(pred), b = corners_t(gt);
    Tensor zero = Tensor::constant(Mat::Zero(1, 1));
    Tensor iw = emax(zero, emin(a.x1, b.x1) - emax(a.x0, b.x0));
    Tensor ih = emax(zero, emin(a.y1, b.y1) - emax(a.y0, b.y0));
    Tensor inter = cmul(iw, ih);
    Tensor area_a = cmul(a.x1 - a.x0, a.y1 - a.y0);
    Tensor area_b = cmul(b.x1 - b.x0, b.y1 - b.y0);
    Tensor uni = area_a + area_b - inter;
    Tensor enclose = cmul(emax(a.x1, b.x1) - emin(a.x0, b.x0), emax(a.y1, b.y1) - emin(a.y0, b.y0));
    return cdiv(inter, uni) - cdiv(enclose - uni, enclose);
}

Tensor box_loss_t(const Tensor& pred, const Tensor& gt, double lambda) {
    if (lambda < 0.0) throw ConfigError("box_loss_t: lambda must be >= 0");
    Tensor l1 = smooth_l1_t(pred, gt);
    if (lambda == 0.0) return l1;
    Tensor g = giou_t(pred, gt);
    return l1 + lambda * (add_scalar(-g, 1.0));
}

}  // namespace grounder

#include "grounder/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <set>
#include <sstream>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

namespace fs = std::filesystem;

namespace grounder {

std::uint64_t fnv1a(const void* data, size_t len) {
    const auto* p = static_cast<const unsigned char*>(data);
    std::uint64_t h = 14695981039346656037ULL;
    for (size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 1099511628211ULL;
    }
    return h;
}

namespace {

cv::Mat to_cv(const Image& img) {
    cv::Mat m(img.height, img.width, img.channels == 1 ? CV_64FC1 : CV_64FC3);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) {
            if (img.channels == 1)
                m.at<double>(y, x) = img.at(y, x, 0);
            else
                m.at<cv::Vec3d>(y, x) = {img.at(y, x, 0), img.at(y, x, 1), img.at(y, x, 2)};
        }
    return m;
}

Image read_png(const fs::path& path) {
    cv::Mat m = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
    if (m.empty()) throw ImageReadError("cannot read image: " + path.string());
    double denom = 255.0;
    if (m.depth() == CV_16U)
        denom = 65535.0;
    else if (m.depth() != CV_8U)
        throw ImageReadError("unsupported bit depth in " + path.string() + " (need 8 or 16 bit)");
    if (m.channels() == 4) cv::cvtColor(m, m, cv::COLOR_BGRA2BGR);
    if (m.channels() != 1 && m.channels() != 3)
        throw ImageReadError("unsupported channel count in " + path.string());

    Image img;
    img.width = m.cols;
    img.height = m.rows;
    img.channels = m.channels();
    img.px.resize(static_cast<size_t>(m.rows) * m.cols * m.channels());
    for (int y = 0; y < m.rows; ++y)
        for (int x = 0; x < m.cols; ++x) {
            if (m.channels() == 1) {
                const double v = m.depth() == CV_8U ? m.at<std::uint8_t>(y, x) : m.at<std::uint16_t>(y, x);
                img.at(y, x, 0) = v / denom;
            } else {
                // OpenCV loads BGR; store RGB.
                if (m.depth() == CV_8U) {
                    const auto v = m.at<cv::Vec3b>(y, x);
                    img.at(y, x, 0) = v[2] / denom;
                    img.at(y, x, 1) = v[1] / denom;
                    img.at(y, x, 2) = v[0] / denom;
                } else {
                    const auto v = m.at<cv::Vec3w>(y, x);
                    img.at(y, x, 0) = v[2] / denom;
                    img.at(y, x, 1) = v[1] / denom;
                    img.at(y, x, 2) = v[0] / denom;
                }
            }
        }
    return img;
}

std::vector<std::uint8_t> encode_png(const Image& img) {
    cv::Mat m(img.height, img.width, img.channels == 1 ? CV_8UC1 : CV_8UC3);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) {
            auto q = [&](int c) {
                const double v = std::clamp(img.at(y, x, c), 0.0, 1.0);
                return static_cast<std::uint8_t>(std::lround(v * 255.0));
            };
            if (img.channels == 1)
                m.at<std::uint8_t>(y, x) = q(0);
            else
                m.at<cv::Vec3b>(y, x) = {q(2), q(1), q(0)};  // RGB -> BGR
        }
    std::vector<std::uint8_t> buf;
    if (!cv::imencode(".png", m, buf)) throw DataError("png encoding failed");
    return buf;
}

[[noreturn]] void field_error(long line, const std::string& what) {
    throw AnnotationFieldError("annotations line " + std::to_string(line) + ": " + what);
}

}  // namespace

Image load_image(const std::string& path) { return read_png(path); }

std::vector<GroundingSample> load_annotations(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw DataError("cannot open annotation file: " + path);
    const fs::path base = fs::path(path).parent_path();

    std::vector<GroundingSample> out;
    std::map<std::string, std::vector<long>> id_lines;
    std::string line;
    long ln = 0;
    while (std::getline(f, line)) {
        ++ln;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;

        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            field_error(ln, std::string("not a valid record: ") + e.what());
        }
        if (!j.is_object()) field_error(ln, "record is not a mapping");

        auto str = [&](const char* k) {
            if (!j.contains(k) || !j[k].is_string())
                field_error(ln, std::string("missing or non-string field '") + k + "'");
            return j[k].get<std::string>();
        };
        auto num = [&](const char* k) {
            if (!j.contains(k) || !j[k].is_number())
                field_error(ln, std::string("missing or non-numeric field '") + k + "'");
            return j[k].get<double>();
        };

        GroundingSample s{.id = str("id"),
                          .image = {},
                          .phrase = str("phrase"),
                          .gt_box = BoundingBox::xywh_topleft(0, 0, 1, 1, Frame::pixel(1, 1)),
                          .patient_id = str("patient_id")};
        const std::string rel = str("image");
        const double width = num("width");
        const double height = num("height");
        if (width <= 0 || height <= 0 || width != std::floor(width) || height != std::floor(height))
            field_error(ln, "width/height must be positive integers");
        if (s.phrase.find_first_not_of(" \t") == std::string::npos)
            field_error(ln, "phrase must be non-empty");

        if (!j.contains("bbox") || !j["bbox"].is_array() || j["bbox"].size() != 4)
            field_error(ln, "missing or malformed field 'bbox' (need [x, y, w, h])");
        std::array<double, 4> bb{};
        for (size_t k = 0; k < 4; ++k) {
            if (!j["bbox"][k].is_number()) field_error(ln, "bbox entries must be numbers");
            bb[k] = j["bbox"][k].get<double>();
        }
        if (!(bb[2] > 0) || !(bb[3] > 0) || bb[0] < 0 || bb[1] < 0 || bb[0] + bb[2] > width ||
            bb[1] + bb[3] > height) {
            std::ostringstream os;
            os << "record '" << s.id << "' (line " << ln << "): bbox [" << bb[0] << "," << bb[1]
               << "," << bb[2] << "," << bb[3] << "] not inside the " << width << "x" << height
               << " frame";
            throw BoxBoundsError(os.str());
        }

        id_lines[s.id].push_back(ln);

        s.image = read_png(base / rel);
        if (s.image.width != static_cast<int>(width) || s.image.height != static_cast<int>(height))
            field_error(ln, "declared size " + std::to_string(static_cast<int>(width)) + "x" +
                                std::to_string(static_cast<int>(height)) + " does not match image " +
                                std::to_string(s.image.width) + "x" + std::to_string(s.image.height));

        s.gt_box = BoundingBox::xywh_topleft(bb[0], bb[1], bb[2], bb[3], Frame::pixel(width, height));
        out.push_back(std::move(s));
    }

    std::string dups;
    for (const auto& [id, lines] : id_lines)
        if (lines.size() > 1) {
            dups += dups.empty() ? "" : ", ";
            dups += "'" + id + "' (lines";
            for (long l : lines) dups += " " + std::to_string(l);
            dups += ")";
        }
    if (!dups.empty()) throw DuplicateIdError("duplicate ids: " + dups);
    return out;
}

void SplitSpec::validate() const {
    if (train < 0 || val < 0 || test < 0) throw ConfigError("split ratios must be non-negative");
    if (std::abs(train + val + test - 1.0) > 1e-9) throw ConfigError("split ratios must sum to 1");
}

Splits split_by_patient(const std::vector<GroundingSample>& samples, const SplitSpec& spec) {
    spec.validate();
    std::vector<std::string> patients;
    std::set<std::string> seen;
    for (const auto& s : samples)
        if (seen.insert(s.patient_id).second) patients.push_back(s.patient_id);

    const std::array<double, 3> ratios{spec.train, spec.val, spec.test};
    int active = 0;
    for (double r : ratios) active += r > 0 ? 1 : 0;
    if (static_cast<int>(patients.size()) < active)
        throw DataError("fewer patients (" + std::to_string(patients.size()) + ") than splits (" +
                        std::to_string(active) + ")");

    std::mt19937_64 rng(spec.seed);
    std::shuffle(patients.begin(), patients.end(), rng);

    // Largest-remainder apportionment of patients to splits.
    const auto P = static_cast<double>(patients.size());
    std::array<long, 3> count{};
    std::array<double, 3> frac{};
    long assigned = 0;
    for (int i = 0; i < 3; ++i) {
        const double ideal = ratios[i] * P;
        count[i] = static_cast<long>(std::floor(ideal));
        frac[i] = ideal - static_cast<double>(count[i]);
        assigned += count[i];
    }
    std::array<int, 3> order{0, 1, 2};
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return frac[a] > frac[b]; });
    for (long r = static_cast<long>(patients.size()) - assigned, i = 0; r > 0; --r, ++i)
        ++count[order[static_cast<size_t>(i % 3)]];

    std::map<std::string, int> split_of;
    size_t next = 0;
    for (int part = 0; part < 3; ++part)
        for (long k = 0; k < count[part]; ++k) split_of[patients[next++]] = part;

    Splits out;
    for (const auto& s : samples) {
        switch (split_of.at(s.patient_id)) {
            case 0: out.train.push_back(s); break;
            case 1: out.val.push_back(s); break;
            default: out.test.push_back(s); break;
        }
    }
    return out;
}

NormStats compute_norm_stats(const std::vector<GroundingSample>& samples) {
    if (samples.empty()) throw InputError("compute_norm_stats: no samples");
    double sum = 0.0, sumsq = 0.0;
    long n = 0;
    for (const auto& s : samples)
        for (double v : s.image.px) {
            sum += v;
            sumsq += v * v;
            ++n;
        }
    NormStats st;
    st.mean = sum / static_cast<double>(n);
    const double var = std::max(0.0, sumsq / static_cast<double>(n) - st.mean * st.mean);
    st.stddev = std::sqrt(var);
    if (st.stddev < 1e-12) st.stddev = 1.0;
    return st;
}

LetterboxMap letterbox_map(int src_w, int src_h, int out_size) {
    if (src_w <= 0 || src_h <= 0 || out_size <= 0)
        throw ConfigError("letterbox_map: dimensions must be positive");
    LetterboxMap m;
    m.out_size = out_size;
    m.scale = static_cast<double>(out_size) / std::max(src_w, src_h);
    m.pad_x = 0.5 * (out_size - src_w * m.scale);
    m.pad_y = 0.5 * (out_size - src_h * m.scale);
    return m;
}

Preprocessed preprocess(const GroundingSample& sample, int out_size, const NormStats& stats) {
    const Image& im = sample.image;
    const LetterboxMap map = letterbox_map(im.width, im.height, out_size);

    cv::Mat src = to_cv(im);
    src = (src - stats.mean) / stats.stddev;

    const int cw = std::max(1, static_cast<int>(std::lround(im.width * map.scale)));
    const int ch = std::max(1, static_cast<int>(std::lround(im.height * map.scale)));
    cv::Mat content;
    cv::resize(src, content, cv::Size(cw, ch), 0, 0,
               map.scale < 1.0 ? cv::INTER_AREA : cv::INTER_LINEAR);

    cv::Mat canvas = cv::Mat::zeros(out_size, out_size, src.type());
    const int ox = (out_size - cw) / 2;
    const int oy = (out_size - ch) / 2;
    content.copyTo(canvas(cv::Rect(ox, oy, cw, ch)));

    Preprocessed out{.input = {}, .gt = BoundingBox::cxcywh(0.5, 0.5, 1, 1, Frame::normalized()),
                     .map = map};
    out.input.h = out_size;
    out.input.w = out_size;
    out.input.c = im.channels;
    out.input.px = Mat(out_size * out_size, im.channels);
    for (int y = 0; y < out_size; ++y)
        for (int x = 0; x < out_size; ++x)
            for (int c = 0; c < im.channels; ++c)
                out.input.px(y * out_size + x, c) =
                    im.channels == 1 ? canvas.at<double>(y, x) : canvas.at<cv::Vec3d>(y, x)[c];

    const Corners mapped = map.apply(sample.gt_box.corners());
    const double inv = 1.0 / out_size;
    out.gt = BoundingBox::cxcywh(0.5 * (mapped.x0 + mapped.x1) * inv,
                                 0.5 * (mapped.y0 + mapped.y1) * inv,
                                 (mapped.x1 - mapped.x0) * inv, (mapped.y1 - mapped.y0) * inv,
                                 Frame::normalized());
    return out;
}

// ---------------------------------------------------------------------------
// Synthetic findings generator
// ---------------------------------------------------------------------------

namespace {

enum class Kind { SQUARE = 0, CIRCLE, TRIANGLE, BLOB };

struct Shape {
    Kind kind;
    bool large, bright, speckled;
    double cx, cy, r;      // normalized center and scale (half extent bound)
    std::uint64_t jitter;  // lobe layout for blobs

    int row_bucket() const { return cy < 0.5 ? 0 : 1; }
    int col_bucket() const { return cx < 1.0 / 3 ? 0 : (cx < 2.0 / 3 ? 1 : 2); }
};

const char* kind_word(Kind k) {
    switch (k) {
        case Kind::SQUARE: return "square";
        case Kind::CIRCLE: return "circle";
        case Kind::TRIANGLE: return "triangle";
        default: return "blob";
    }
}
const char* row_word(int r) { return r == 0 ? "upper" : "lower"; }
const char* col_word(int c) { return c == 0 ? "left" : (c == 1 ? "central" : "right"); }

double unit_from(std::uint64_t h) {
    return static_cast<double>(h >> 11) * 0x1.0p-53;
}

// Blob lobes are derived from the jitter seed alone so membership tests are
// reproducible without carrying extra state.
std::array<std::array<double, 3>, 3> blob_lobes(const Shape& s) {
    std::array<std::array<double, 3>, 3> lobes{};
    for (int k = 0; k < 3; ++k) {
        const double dx = (unit_from(splitmix64(s.jitter + 2 * k)) - 0.5) * 0.7 * s.r;
        const double dy = (unit_from(splitmix64(s.jitter + 2 * k + 1)) - 0.5) * 0.7 * s.r;
        lobes[k] = {s.cx + dx, s.cy + dy, 0.55 * s.r};
    }
    return lobes;
}

bool shape_contains(const Shape& s, double px, double py) {
    const double dx = px - s.cx, dy = py - s.cy;
    switch (s.kind) {
        case Kind::SQUARE:
            return std::abs(dx) <= s.r && std::abs(dy) <= s.r;
        case Kind::CIRCLE:
            return dx * dx + dy * dy <= s.r * s.r;
        case Kind::TRIANGLE: {
            const double ax = s.cx, ay = s.cy - s.r;
            const double bx = s.cx - 0.95 * s.r, by = s.cy + 0.75 * s.r;
            const double cx2 = s.cx + 0.95 * s.r, cy2 = s.cy + 0.75 * s.r;
            auto side = [&](double x0, double y0, double x1, double y1) {
                return (x1 - x0) * (py - y0) - (y1 - y0) * (px - x0);
            };
            const double d1 = side(ax, ay, bx, by);
            const double d2 = side(bx, by, cx2, cy2);
            const double d3 = side(cx2, cy2, ax, ay);
            const bool neg = d1 < 0 || d2 < 0 || d3 < 0;
            const bool pos = d1 > 0 || d2 > 0 || d3 > 0;
            return !(neg && pos);
        }
        default: {
            for (const auto& l : blob_lobes(s)) {
                const double ddx = px - l[0], ddy = py - l[1];
                if (ddx * ddx + ddy * ddy <= l[2] * l[2]) return true;
            }
            return false;
        }
    }
}

std::vector<std::uint8_t> rasterize(const Shape& s, int size) {
    std::vector<std::uint8_t> mask(static_cast<size_t>(size) * size, 0);
    const int x0 = std::max(0, static_cast<int>(std::floor((s.cx - s.r) * size)) - 1);
    const int x1 = std::min(size - 1, static_cast<int>(std::ceil((s.cx + s.r) * size)) + 1);
    const int y0 = std::max(0, static_cast<int>(std::floor((s.cy - s.r) * size)) - 1);
    const int y1 = std::min(size - 1, static_cast<int>(std::ceil((s.cy + s.r) * size)) + 1);
    for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x)
            if (shape_contains(s, (x + 0.5) / size, (y + 0.5) / size))
                mask[static_cast<size_t>(y) * size + x] = 1;
    return mask;
}

struct PhraseAttrs {
    bool size = false, intensity = false, texture = false;
};

bool matches(const Shape& cand, const Shape& target, const PhraseAttrs& a) {
    if (cand.kind != target.kind) return false;
    if (a.size && cand.large != target.large) return false;
    if (a.intensity && cand.bright != target.bright) return false;
    if (a.texture && cand.speckled != target.speckled) return false;
    return cand.row_bucket() == target.row_bucket() && cand.col_bucket() == target.col_bucket();
}

bool is_unique(const std::vector<Shape>& shapes, size_t target, const PhraseAttrs& a) {
    int n = 0;
    for (const auto& s : shapes)
        if (matches(s, shapes[target], a)) ++n;
    return n == 1;
}

std::string build_phrase(const Shape& t, const PhraseAttrs& a) {
    std::string p;
    if (a.size) p += t.large ? "large " : "small ";
    if (a.intensity) p += t.bright ? "bright " : "dim ";
    if (a.texture) p += t.speckled ? "speckled " : "smooth ";
    p += kind_word(t.kind);
    p += " in the ";
    p += row_word(t.row_bucket());
    p += " ";
    p += col_word(t.col_bucket());
    return p;
}

}  // namespace

void SyntheticConfig::validate() const {
    if (image_size < 16) throw ConfigError("synthetic image_size must be >= 16");
    if (n_samples < 1) throw ConfigError("synthetic n_samples must be >= 1");
    if (shapes_min < 1 || shapes_max < shapes_min)
        throw ConfigError("synthetic shape counts must satisfy 1 <= min <= max");
    if (noise < 0) throw ConfigError("synthetic noise must be >= 0");
    if (patient_block < 1) throw ConfigError("synthetic patient_block must be >= 1");
}

SyntheticDataset generate_synthetic(const SyntheticConfig& cfg) {
    cfg.validate();
    const int S = cfg.image_size;
    const double margin = 2.0 / S;
    const double gap = 3.0 / S;

    SyntheticDataset out;
    out.samples.reserve(static_cast<size_t>(cfg.n_samples));

    for (int i = 0; i < cfg.n_samples; ++i) {
        std::mt19937_64 rng(mix_seed(cfg.seed, static_cast<std::uint64_t>(i)));
        std::uniform_real_distribution<double> uni(0.0, 1.0);

        std::vector<Shape> shapes;
        size_t target = 0;
        PhraseAttrs attrs;
        bool scene_ok = false;

        for (int attempt = 0; attempt < 200 && !scene_ok; ++attempt) {
            shapes.clear();
            const int n = cfg.shapes_min +
                          static_cast<int>(uni(rng) * (cfg.shapes_max - cfg.shapes_min + 1));
            bool placed_all = true;
            for (int k = 0; k < n && placed_all; ++k) {
                bool placed = false;
                for (int t = 0; t < 60 && !placed; ++t) {
                    Shape s;
                    s.kind = static_cast<Kind>(static_cast<int>(uni(rng) * 4) % 4);
                    s.large = uni(rng) < 0.5;
                    s.bright = uni(rng) < 0.5;
                    s.speckled = uni(rng) < 0.5;
                    s.r = s.large ? 0.20 + 0.06 * uni(rng) : 0.12 + 0.04 * uni(rng);
                    s.cx = s.r + margin + (1.0 - 2 * (s.r + margin)) * uni(rng);
                    s.cy = s.r + margin + (1.0 - 2 * (s.r + margin)) * uni(rng);
                    s.jitter = rng();
                    bool clear = true;
                    for (const auto& o : shapes)
                        if (std::abs(s.cx - o.cx) < s.r + o.r + gap &&
                            std::abs(s.cy - o.cy) < s.r + o.r + gap)
                            clear = false;
                    if (clear) {
                        shapes.push_back(s);
                        placed = true;
                    }
                }
                placed_all = placed;
            }
            if (!placed_all) continue;

            target = static_cast<size_t>(uni(rng) * static_cast<double>(shapes.size())) %
                     shapes.size();
            attrs.size = uni(rng) < 0.5;
            attrs.intensity = uni(rng) < 0.5;
            attrs.texture = uni(rng) < 0.5;

            if (!is_unique(shapes, target, attrs)) {
                // Escalate one attribute at a time before re-rolling the scene.
                for (bool* flag : {&attrs.size, &attrs.intensity, &attrs.texture}) {
                    if (*flag) continue;
                    *flag = true;
                    if (is_unique(shapes, target, attrs)) break;
                }
            }
            scene_ok = is_unique(shapes, target, attrs);
        }
        if (!scene_ok)
            throw SamplingError("synthetic sample " + std::to_string(i) +
                                ": attribute vocabulary cannot disambiguate the target");

        // Render: low-contrast gradient background + pixel noise, then shapes.
        Image img;
        img.width = S;
        img.height = S;
        img.channels = 1;
        img.px.resize(static_cast<size_t>(S) * S);
        const double gx = (uni(rng) - 0.5) * 0.24;
        const double gy = (uni(rng) - 0.5) * 0.24;
        std::normal_distribution<double> gauss(0.0, cfg.noise);
        for (int y = 0; y < S; ++y)
            for (int x = 0; x < S; ++x) {
                const double px = (x + 0.5) / S, py = (y + 0.5) / S;
                img.at(y, x) = 0.32 + gx * (px - 0.5) + gy * (py - 0.5) +
                               (cfg.noise > 0 ? gauss(rng) : 0.0);
            }

        std::array<double, 4> bbox{0, 0, 0, 0};
        for (size_t k = 0; k < shapes.size(); ++k) {
            const Shape& s = shapes[k];
            const double level = 0.32 + ((s.bright ? 0.85 : 0.58) - 0.32) * cfg.contrast;
            const auto mask = rasterize(s, S);
            int mnx = S, mny = S, mxx = -1, mxy = -1;
            for (int y = 0; y < S; ++y)
                for (int x = 0; x < S; ++x) {
                    if (!mask[static_cast<size_t>(y) * S + x]) continue;
                    img.at(y, x) = level + (s.speckled ? (uni(rng) - 0.5) * 0.22 : 0.0);
                    mnx = std::min(mnx, x);
                    mny = std::min(mny, y);
                    mxx = std::max(mxx, x);
                    mxy = std::max(mxy, y);
                }
            if (mxx < 0) throw Error("synthetic shape rasterized to nothing");
            if (k == target)
                bbox = {static_cast<double>(mnx), static_cast<double>(mny),
                        static_cast<double>(mxx - mnx + 1), static_cast<double>(mxy - mny + 1)};
        }
        for (double& v : img.px) v = std::clamp(v, 0.0, 1.0);

        char idbuf[32];
        std::snprintf(idbuf, sizeof(idbuf), "synth-%05d", i);
        char pbuf[32];
        std::snprintf(pbuf, sizeof(pbuf), "P%04d", i / cfg.patient_block);

        GroundingSample sample{
            .id = idbuf,
            .image = std::move(img),
            .phrase = build_phrase(shapes[target], attrs),
            .gt_box = BoundingBox::xywh_topleft(bbox[0], bbox[1], bbox[2], bbox[3],
                                                Frame::pixel(S, S)),
            .patient_id = pbuf};
        out.samples.push_back(std::move(sample));

        nlohmann::json scene;
        scene["target"] = target;
        auto& arr = scene["shapes"] = nlohmann::json::array();
        for (const auto& s : shapes)
            arr.push_back({{"kind", kind_word(s.kind)},
                           {"large", s.large},
                           {"bright", s.bright},
                           {"speckled", s.speckled},
                           {"cx", s.cx},
                           {"cy", s.cy},
                           {"r", s.r},
                           {"jitter", s.jitter},
                           {"row", row_word(s.row_bucket())},
                           {"col", col_word(s.col_bucket())}});
        out.scenes.push_back(std::move(scene));
    }

    // Normalization statistics over the training split of the default
    // patient-wise partition (falls back to all samples when the dataset is
    // too small to split).
    NormStats st;
    SplitSpec def;
    def.seed = cfg.seed;
    std::set<std::string> patients;
    for (const auto& s : out.samples) patients.insert(s.patient_id);
    if (patients.size() >= 3)
        st = compute_norm_stats(split_by_patient(out.samples, def).train);
    else
        st = compute_norm_stats(out.samples);

    out.manifest = {
        {"format", "grounder-dataset-v1"},
        {"generator",
         {{"image_size", cfg.image_size},
          {"n_samples", cfg.n_samples},
          {"shapes_min", cfg.shapes_min},
          {"shapes_max", cfg.shapes_max},
          {"noise", cfg.noise},
          {"contrast", cfg.contrast},
          {"seed", cfg.seed},
          {"patient_block", cfg.patient_block}}},
        {"norm",
         {{"mean", st.mean},
          {"stddev", st.stddev},
          {"basis", patients.size() >= 3 ? "train-split" : "all-samples"},
          {"split", {{"train", def.train}, {"val", def.val}, {"test", def.test}, {"seed", def.seed}}}}},
    };
    return out;
}

nlohmann::json write_dataset(const std::string& dir, const SyntheticDataset& data) {
    fs::create_directories(fs::path(dir) / "images");

    std::ofstream ann(fs::path(dir) / "annotations.jsonl");
    if (!ann) throw DataError("cannot write annotations in " + dir);

    nlohmann::json manifest = data.manifest;
    auto& images = manifest["images"] = nlohmann::json::array();

    for (const auto& s : data.samples) {
        const auto png = encode_png(s.image);
        const std::string rel = "images/" + s.id + ".png";
        std::ofstream img(fs::path(dir) / rel, std::ios::binary);
        img.write(reinterpret_cast<const char*>(png.data()),
                  static_cast<std::streamsize>(png.size()));
        if (!img) throw DataError("cannot write image " + rel + " in " + dir);

        const auto& c = s.gt_box.coords();
        nlohmann::json rec{{"id", s.id},
                           {"image", rel},
                           {"width", s.image.width},
                           {"height", s.image.height},
                           {"patient_id", s.patient_id},
                           {"phrase", s.phrase},
                           {"bbox",
                            {static_cast<long>(std::llround(c[0])), static_cast<long>(std::llround(c[1])),
                             static_cast<long>(std::llround(c[2])), static_cast<long>(std::llround(c[3]))}}};
        ann << rec.dump() << "\n";

        char hash[24];
        std::snprintf(hash, sizeof(hash), "%016llx",
                      static_cast<unsigned long long>(fnv1a(png.data(), png.size())));
        images.push_back({{"id", s.id}, {"file", rel}, {"hash", hash}});
    }
    ann.close();

    std::ofstream mf(fs::path(dir) / "manifest.json");
    if (!mf) throw DataError("cannot write manifest in " + dir);
    mf << manifest.dump(2) << "\n";
    return manifest;
}

std::vector<GroundingSample> load_dataset(const std::string& dir) {
    return load_annotations((fs::path(dir) / "annotations.jsonl").string());
}

nlohmann::json load_manifest(const std::string& dir) {
    std::ifstream f(fs::path(dir) / "manifest.json");
    if (!f) throw DataError("cannot open manifest in " + dir);
    try {
        return nlohmann::json::parse(f);
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("manifest is not valid: ") + e.what());
    }
}

}  // namespace grounder

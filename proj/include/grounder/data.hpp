#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "grounder/geometry.hpp"
#include "grounder/nn.hpp"

#include <nlohmann/json.hpp>

namespace grounder {

// Raw image: row-major, channel-interleaved, intensities in [0, 1].
struct Image {
    int width = 0, height = 0, channels = 1;
    std::vector<double> px;

    double at(int y, int x, int c = 0) const {
        return px[static_cast<size_t>((y * width + x) * channels + c)];
    }
    double& at(int y, int x, int c = 0) {
        return px[static_cast<size_t>((y * width + x) * channels + c)];
    }
};

// One grounding record: image + phrase + target box + patient identity.
struct GroundingSample {
    std::string id;
    Image image;
    std::string phrase;
    BoundingBox gt_box;  // XYWH_TOPLEFT in the image's pixel frame
    std::string patient_id;
};

// Reads line-delimited annotation records; image paths resolve relative to
// the annotation file. Failures carry the line number and offending field.
std::vector<GroundingSample> load_annotations(const std::string& path);

// Reads a single 8/16-bit gray or color image into [0, 1].
Image load_image(const std::string& path);

struct SplitSpec {
    double train = 0.7, val = 0.1, test = 0.2;
    std::uint64_t seed = 0;
    void validate() const;
};

struct Splits {
    std::vector<GroundingSample> train, val, test;
};

// Partitions whole patients, never individual samples. Patients are shuffled
// by the split seed, then counted out by largest remainder.
Splits split_by_patient(const std::vector<GroundingSample>& samples, const SplitSpec& spec);

struct NormStats {
    double mean = 0.0;
    double stddev = 1.0;
};

// Pixel statistics over a sample list (normally the training split).
NormStats compute_norm_stats(const std::vector<GroundingSample>& samples);

// Aspect-preserving square resize: scale by out/max(w,h), center, pad.
struct LetterboxMap {
    double scale = 1.0;
    double pad_x = 0.0, pad_y = 0.0;
    int out_size = 0;

    Corners apply(const Corners& src) const {
        return {src.x0 * scale + pad_x, src.y0 * scale + pad_y, src.x1 * scale + pad_x,
                src.y1 * scale + pad_y};
    }
    Corners invert(const Corners& dst) const {
        return {(dst.x0 - pad_x) / scale, (dst.y0 - pad_y) / scale, (dst.x1 - pad_x) / scale,
                (dst.y1 - pad_y) / scale};
    }
};

LetterboxMap letterbox_map(int src_w, int src_h, int out_size);

struct Preprocessed {
    ImageTensor input;       // standardized letterboxed pixels
    BoundingBox gt;          // CXCYWH, NORMALIZED
    LetterboxMap map;
};

// Letterboxes to out_size, standardizes with the dataset statistics (padding
// sits at the mean, i.e. zero after standardization), and maps the target box
// through the same transform.
Preprocessed preprocess(const GroundingSample& sample, int out_size, const NormStats& stats);

struct SyntheticConfig {
    int image_size = 64;
    int n_samples = 128;
    int shapes_min = 2;
    int shapes_max = 5;
    double noise = 0.04;
    double contrast = 1.0;  // scales shape/background separation
    std::uint64_t seed = 0;
    int patient_block = 5;  // consecutive samples sharing a patient id
    void validate() const;
};

struct SyntheticDataset {
    std::vector<GroundingSample> samples;
    nlohmann::json manifest;  // config echo, seed, norm stats; hashes added on write
    // Per-sample scene descriptions (target index, shape attributes and
    // geometry). Test scaffolding; not part of the on-disk dataset.
    std::vector<nlohmann::json> scenes;
};

// Deterministic scene generator: 2..5 separated shapes on a noisy background,
// a phrase that uniquely picks out the target, and its tight pixel box.
SyntheticDataset generate_synthetic(const SyntheticConfig& cfg);

// Writes images/<id>.png, annotations.jsonl and manifest.json (with per-image
// content hashes) under dir. Returns the manifest actually written.
nlohmann::json write_dataset(const std::string& dir, const SyntheticDataset& data);

// Round-trip loader for a directory produced by write_dataset.
std::vector<GroundingSample> load_dataset(const std::string& dir);
nlohmann::json load_manifest(const std::string& dir);

// FNV-1a, used for the manifest's content hashes.
std::uint64_t fnv1a(const void* data, size_t len);

}  // namespace grounder

#pragma once

#include "grounder/tensor.hpp"

#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace grounder {

enum class ParamGroup { VISION = 0, TEXT = 1, VLT = 2 };
constexpr int kNumParamGroups = 3;

using ParamId = int;

enum class InitKind { ZERO, ONE, XAVIER, NORMAL_SCALED, EMBEDDING };

// Owns every learnable tensor plus its optimizer state. Forward passes read
// parameters through a per-step tape of leaf tensors so gradients accumulate
// over the samples of a batch.
class ParamStore {
public:
    struct Entry {
        std::string name;
        Mat value;
        Mat m, v;  // AdamW moments
        ParamGroup group;
        InitKind init;
        double init_scale;
    };

    int add(std::string name, Eigen::Index rows, Eigen::Index cols, ParamGroup group,
            InitKind init, double init_scale = 1.0);

    // Deterministic init: parameters filled in registration order from one
    // generator seeded here.
    void init_all(std::uint64_t seed);

    void begin_tape(bool training);
    const Tensor& leaf(int id) const;
    bool training() const { return training_; }

    size_t size() const { return entries_.size(); }
    Entry& entry(int id) { return entries_[static_cast<size_t>(id)]; }
    const Entry& entry(int id) const { return entries_[static_cast<size_t>(id)]; }
    std::int64_t parameter_count() const;

private:
    std::vector<Entry> entries_;
    std::vector<Tensor> tape_;
    bool training_ = false;
};

// Per-forward context: the active tape plus the dropout stream.
struct RunCtx {
    ParamStore* store = nullptr;
    bool training = false;
    double dropout = 0.0;
    std::mt19937_64* dropout_rng = nullptr;

    Tensor p(int id) const { return store->leaf(id); }
    Tensor maybe_dropout(const Tensor& t) const {
        if (!training || dropout <= 0.0) return t;
        return grounder::dropout(t, dropout, *dropout_rng);
    }
};

struct Linear {
    int W = -1, b = -1;
    int in = 0, out = 0;

    Linear() = default;
    Linear(ParamStore& s, const std::string& name, int in_dim, int out_dim, ParamGroup group,
           InitKind init = InitKind::XAVIER);
    Tensor operator()(const RunCtx& ctx, const Tensor& x) const;  // x: N x in
};

struct LayerNorm {
    int gamma = -1, beta = -1;
    double eps = 1e-5;

    LayerNorm() = default;
    LayerNorm(ParamStore& s, const std::string& name, int dim, ParamGroup group);
    Tensor operator()(const RunCtx& ctx, const Tensor& x) const;
};

struct MultiHeadAttention {
    Linear q, k, v, o;
    int heads = 1;
    int width = 0;

    MultiHeadAttention() = default;
    MultiHeadAttention(ParamStore& s, const std::string& name, int width, int heads,
                       ParamGroup group);

    // key_mask[j] == true means position j may be attended to. If attn_out is
    // non-null it receives the head-averaged post-softmax attention (N x N).
    Tensor operator()(const RunCtx& ctx, const Tensor& x, const std::vector<bool>& key_mask,
                      Tensor* attn_out = nullptr) const;
};

// Post-norm transformer encoder layer (attention -> add&norm -> FFN -> add&norm).
struct EncoderLayer {
    MultiHeadAttention mha;
    Linear ff1, ff2;
    LayerNorm ln1, ln2;

    EncoderLayer() = default;
    EncoderLayer(ParamStore& s, const std::string& name, int width, int heads, int ffn_dim,
                 ParamGroup group);
    Tensor operator()(const RunCtx& ctx, const Tensor& x, const std::vector<bool>& key_mask,
                      Tensor* attn_out = nullptr) const;
};

// Feature map carried as (H*W) x C with row-major spatial order.
struct SpatialTensor {
    Tensor t;
    int h = 0, w = 0, c = 0;
};

// Model-ready image: standardized pixels, (H*W) x C row-major.
struct ImageTensor {
    Mat px;
    int h = 0, w = 0, c = 0;
};

struct Conv2d {
    int W = -1, b = -1;
    int in_c = 0, out_c = 0, kernel = 3, stride = 1, pad = 1;

    Conv2d() = default;
    Conv2d(ParamStore& s, const std::string& name, int in_c, int out_c, int kernel, int stride,
           int pad);
    SpatialTensor operator()(const RunCtx& ctx, const SpatialTensor& x) const;
};

// Residual block: conv3x3(stride) -> norm -> relu -> conv3x3 -> norm, with a
// 1x1 strided projection on the skip when shape changes; relu after the sum.
struct ResidualBlock {
    Conv2d conv1, conv2;
    Conv2d skip;  // used iff project
    LayerNorm norm1, norm2;
    bool project = false;

    ResidualBlock() = default;
    ResidualBlock(ParamStore& s, const std::string& name, int in_c, int out_c, int stride);
    SpatialTensor operator()(const RunCtx& ctx, const SpatialTensor& x) const;
};

}  // namespace grounder

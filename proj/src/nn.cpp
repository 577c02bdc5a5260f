#include "grounder/nn.hpp"

#include <cmath>

namespace grounder {

int ParamStore::add(std::string name, Eigen::Index rows, Eigen::Index cols, ParamGroup group,
                    InitKind init, double init_scale) {
    Entry e;
    e.name = std::move(name);
    e.value = Mat::Zero(rows, cols);
    e.m = Mat::Zero(rows, cols);
    e.v = Mat::Zero(rows, cols);
    e.group = group;
    e.init = init;
    e.init_scale = init_scale;
    entries_.push_back(std::move(e));
    return static_cast<int>(entries_.size()) - 1;
}

void ParamStore::init_all(std::uint64_t seed) {
    std::mt19937_64 rng(splitmix64(seed ^ 0x706172616d736565ULL));
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_real_distribution<double> uni(-1.0, 1.0);
    for (auto& e : entries_) {
        switch (e.init) {
            case InitKind::ZERO:
                e.value.setZero();
                break;
            case InitKind::ONE:
                e.value.setOnes();
                break;
            case InitKind::XAVIER: {
                const double bound =
                    e.init_scale * std::sqrt(6.0 / static_cast<double>(e.value.rows() + e.value.cols()));
                for (Eigen::Index i = 0; i < e.value.rows(); ++i)
                    for (Eigen::Index j = 0; j < e.value.cols(); ++j)
                        e.value(i, j) = bound * uni(rng);
                break;
            }
            case InitKind::NORMAL_SCALED:
            case InitKind::EMBEDDING: {
                const double s = e.init == InitKind::EMBEDDING ? 0.02 * e.init_scale
                                                               : e.init_scale;
                for (Eigen::Index i = 0; i < e.value.rows(); ++i)
                    for (Eigen::Index j = 0; j < e.value.cols(); ++j)
                        e.value(i, j) = s * normal(rng);
                break;
            }
        }
        e.m.setZero();
        e.v.setZero();
    }
}

void ParamStore::begin_tape(bool training) {
    training_ = training;
    tape_.clear();
    tape_.reserve(entries_.size());
    for (auto& e : entries_)
        tape_.push_back(training ? Tensor::leaf(e.value) : Tensor::constant(e.value));
}

const Tensor& ParamStore::leaf(int id) const {
    if (id < 0 || static_cast<size_t>(id) >= tape_.size())
        throw ShapeError("ParamStore::leaf: no active tape for parameter id " + std::to_string(id));
    return tape_[static_cast<size_t>(id)];
}

std::int64_t ParamStore::parameter_count() const {
    std::int64_t n = 0;
    for (const auto& e : entries_) n += static_cast<std::int64_t>(e.value.size());
    return n;
}

Linear::Linear(ParamStore& s, const std::string& name, int in_dim, int out_dim,
               ParamGroup group, InitKind init)
    : in(in_dim), out(out_dim) {
    W = s.add(name + ".W", in_dim, out_dim, group, init);
    b = s.add(name + ".b", 1, out_dim, group, InitKind::ZERO);
}

Tensor Linear::operator()(const RunCtx& ctx, const Tensor& x) const {
    if (x.cols() != in)
        throw ShapeError("Linear: expected input width " + std::to_string(in) + ", got " +
                         std::to_string(x.cols()));
    return add_rowvec(matmul(x, ctx.p(W)), ctx.p(b));
}

LayerNorm::LayerNorm(ParamStore& s, const std::string& name, int dim, ParamGroup group) {
    gamma = s.add(name + ".gamma", 1, dim, group, InitKind::ONE);
    beta = s.add(name + ".beta", 1, dim, group, InitKind::ZERO);
}

Tensor LayerNorm::operator()(const RunCtx& ctx, const Tensor& x) const {
    return layer_norm_rows(x, ctx.p(gamma), ctx.p(beta), eps);
}

MultiHeadAttention::MultiHeadAttention(ParamStore& s, const std::string& name, int width_,
                                       int heads_, ParamGroup group)
    : q(s, name + ".q", width_, width_, group),
      k(s, name + ".k", width_, width_, group),
      v(s, name + ".v", width_, width_, group),
      o(s, name + ".o", width_, width_, group),
      heads(heads_),
      width(width_) {
    if (width_ % heads_ != 0) throw ConfigError("attention width must be divisible by heads");
}

Tensor MultiHeadAttention::operator()(const RunCtx& ctx, const Tensor& x,
                                      const std::vector<bool>& key_mask, Tensor* attn_out) const {
    const int d = width / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(d));
    Tensor Q = q(ctx, x), K = k(ctx, x), V = v(ctx, x);

    std::vector<Tensor> head_outs;
    head_outs.reserve(static_cast<size_t>(heads));
    Tensor attn_sum;
    for (int h = 0; h < heads; ++h) {
        Tensor Qh = block(Q, 0, static_cast<Eigen::Index>(h) * d, Q.rows(), d);
        Tensor Kh = block(K, 0, static_cast<Eigen::Index>(h) * d, K.rows(), d);
        Tensor Vh = block(V, 0, static_cast<Eigen::Index>(h) * d, V.rows(), d);
        Tensor scores = scale * matmul(Qh, transpose(Kh));
        Tensor probs = softmax_rows_masked(scores, key_mask);
        attn_sum = attn_sum.defined() ? attn_sum + probs : probs;
        head_outs.push_back(matmul(probs, Vh));
    }
    if (attn_out) *attn_out = (1.0 / static_cast<double>(heads)) * attn_sum;
    Tensor cat = heads == 1 ? head_outs[0] : concat_cols(head_outs);
    return o(ctx, cat);
}

EncoderLayer::EncoderLayer(ParamStore& s, const std::string& name, int width, int heads,
                           int ffn_dim, ParamGroup group)
    : mha(s, name + ".mha", width, heads, group),
      ff1(s, name + ".ff1", width, ffn_dim, group),
      ff2(s, name + ".ff2", ffn_dim, width, group),
      ln1(s, name + ".ln1", width, group),
      ln2(s, name + ".ln2", width, group) {}

Tensor EncoderLayer::operator()(const RunCtx& ctx, const Tensor& x,
                                const std::vector<bool>& key_mask, Tensor* attn_out) const {
    Tensor a = mha(ctx, x, key_mask, attn_out);
    Tensor h = ln1(ctx, x + ctx.maybe_dropout(a));
    Tensor f = ff2(ctx, ctx.maybe_dropout(relu(ff1(ctx, h))));
    return ln2(ctx, h + ctx.maybe_dropout(f));
}

Conv2d::Conv2d(ParamStore& s, const std::string& name, int in_c_, int out_c_, int kernel_,
               int stride_, int pad_)
    : in_c(in_c_), out_c(out_c_), kernel(kernel_), stride(stride_), pad(pad_) {
    const int fan = kernel_ * kernel_ * in_c_;
    W = s.add(name + ".W", static_cast<Eigen::Index>(kernel_) * kernel_ * in_c_, out_c_,
              ParamGroup::VISION, InitKind::NORMAL_SCALED, std::sqrt(2.0 / fan));
    b = s.add(name + ".b", 1, out_c_, ParamGroup::VISION, InitKind::ZERO);
}

SpatialTensor Conv2d::operator()(const RunCtx& ctx, const SpatialTensor& x) const {
    if (x.c != in_c)
        throw ShapeError("Conv2d: expected " + std::to_string(in_c) + " channels, got " +
                         std::to_string(x.c));
    Tensor cols = im2col(x.t, x.h, x.w, kernel, stride, pad);
    Tensor y = add_rowvec(matmul(cols, ctx.p(W)), ctx.p(b));
    return {y, conv_out_dim(x.h, kernel, stride, pad), conv_out_dim(x.w, kernel, stride, pad),
            out_c};
}

ResidualBlock::ResidualBlock(ParamStore& s, const std::string& name, int in_c, int out_c,
                             int stride)
    : conv1(s, name + ".conv1", in_c, out_c, 3, stride, 1),
      conv2(s, name + ".conv2", out_c, out_c, 3, 1, 1),
      norm1(s, name + ".norm1", out_c, ParamGroup::VISION),
      norm2(s, name + ".norm2", out_c, ParamGroup::VISION),
      project(stride != 1 || in_c != out_c) {
    if (project) skip = Conv2d(s, name + ".skip", in_c, out_c, 1, stride, 0);
}

SpatialTensor ResidualBlock::operator()(const RunCtx& ctx, const SpatialTensor& x) const {
    SpatialTensor h = conv1(ctx, x);
    h.t = relu(norm1(ctx, h.t));
    h = conv2(ctx, h);
    h.t = norm2(ctx, h.t);
    Tensor s = project ? skip(ctx, x).t : x.t;
    h.t = relu(h.t + s);
    return h;
}

}  // namespace grounder

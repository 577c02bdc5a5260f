#pragma once

// Reverse-mode autodiff over dense double matrices. Graphs are built per
// forward pass and discarded after backward(); parameter leaves are plain
// leaf tensors whose grads the training loop reads out.

#include "grounder/common.hpp"

#include <functional>
#include <memory>
#include <random>
#include <vector>

namespace grounder {

namespace detail {

struct Node {
    Mat value;
    Mat grad;  // lazily allocated, zero-initialised
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backfn;  // scatters this->grad into parents

    void ensure_grad() {
        if (grad.rows() != value.rows() || grad.cols() != value.cols())
            grad = Mat::Zero(value.rows(), value.cols());
    }
};

}  // namespace detail

class Tensor {
public:
    Tensor() = default;

    static Tensor constant(Mat v);
    static Tensor leaf(Mat v);  // requires_grad = true

    bool defined() const { return node_ != nullptr; }
    const Mat& value() const { return node_->value; }
    const Mat& grad() const { return node_->grad; }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    Eigen::Index rows() const { return node_->value.rows(); }
    Eigen::Index cols() const { return node_->value.cols(); }

    // Scalar convenience for 1x1 tensors.
    double item() const;

    // Runs reverse accumulation from this (must be 1x1) with seed gradient 1.
    void backward() const;

    std::shared_ptr<detail::Node> node() const { return node_; }

private:
    explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}
    std::shared_ptr<detail::Node> node_;

    friend Tensor make_op(Mat value, std::vector<Tensor> parents,
                          std::function<void(detail::Node&)> backfn);
};

Tensor make_op(Mat value, std::vector<Tensor> parents,
               std::function<void(detail::Node&)> backfn);

// --- arithmetic ---
Tensor operator+(const Tensor& a, const Tensor& b);
Tensor operator-(const Tensor& a, const Tensor& b);
Tensor operator-(const Tensor& a);
Tensor operator*(double s, const Tensor& a);
inline Tensor operator*(const Tensor& a, double s) { return s * a; }
Tensor add_scalar(const Tensor& a, double s);
Tensor cmul(const Tensor& a, const Tensor& b);  // elementwise
Tensor cdiv(const Tensor& a, const Tensor& b);  // elementwise
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor add_rowvec(const Tensor& x, const Tensor& b);  // x: N x C, b: 1 x C

// --- nonlinearities / pointwise ---
Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor exp_t(const Tensor& a);
Tensor log_t(const Tensor& a);
Tensor sqrt_t(const Tensor& a);
Tensor square(const Tensor& a);
Tensor abs_t(const Tensor& a);
Tensor emin(const Tensor& a, const Tensor& b);  // elementwise min
Tensor emax(const Tensor& a, const Tensor& b);  // elementwise max

// --- reductions / shape ---
Tensor sum_all(const Tensor& a);
Tensor mean_all(const Tensor& a);
Tensor row(const Tensor& a, Eigen::Index i);
Tensor block(const Tensor& a, Eigen::Index i, Eigen::Index j, Eigen::Index p, Eigen::Index q);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor rows_mean(const Tensor& a, std::vector<int> idx);  // 1 x C mean of selected rows
Tensor rows_select(const Tensor& a, std::vector<int> idx); // len(idx) x C gather, repeats allowed
Tensor detach(const Tensor& a);

// Row-wise softmax over unmasked key columns; masked columns are exactly 0.
// key_mask[j] == true means column j participates.
Tensor softmax_rows_masked(const Tensor& a, const std::vector<bool>& key_mask);

// Per-row layer norm with affine parameters gamma/beta (1 x C).
Tensor layer_norm_rows(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                       double eps = 1e-5);

// L2-normalises a 1 x N vector; if the norm is below `tiny`, returns a zero
// vector (constant) and bumps the "zero_joint_attention" counter.
Tensor l2_normalize_row(const Tensor& v, double tiny = 1e-30);

// Inverted dropout; identity when p == 0. Mask drawn from rng.
Tensor dropout(const Tensor& a, double p, std::mt19937_64& rng);

// Patch extraction for convolution. x is (H*W) x C row-major spatial; the
// result is (H_out*W_out) x (k*k*C) with columns grouped by patch offset.
Tensor im2col(const Tensor& x, int height, int width, int kernel, int stride, int pad);

inline int conv_out_dim(int in, int kernel, int stride, int pad) {
    return (in + 2 * pad - kernel) / stride + 1;
}

}  // namespace grounder

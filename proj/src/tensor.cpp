#include "grounder/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <unordered_set>

namespace grounder {

using detail::Node;

Tensor Tensor::constant(Mat v) {
    auto n = std::make_shared<Node>();
    n->value = std::move(v);
    n->requires_grad = false;
    return Tensor(std::move(n));
}

Tensor Tensor::leaf(Mat v) {
    auto n = std::make_shared<Node>();
    n->value = std::move(v);
    n->requires_grad = true;
    return Tensor(std::move(n));
}

double Tensor::item() const {
    if (rows() != 1 || cols() != 1)
        throw ShapeError("Tensor::item on non-scalar tensor");
    return node_->value(0, 0);
}

Tensor make_op(Mat value, std::vector<Tensor> parents,
               std::function<void(Node&)> backfn) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    bool needs = false;
    for (const auto& p : parents) needs = needs || p.requires_grad();
    n->requires_grad = needs;
    if (needs) {
        n->parents.reserve(parents.size());
        for (auto& p : parents) n->parents.push_back(p.node());
        n->backfn = std::move(backfn);
    }
    return Tensor(std::move(n));
}

void Tensor::backward() const {
    if (!node_) throw ShapeError("backward on empty tensor");
    if (rows() != 1 || cols() != 1)
        throw ShapeError("backward must start from a scalar (1x1) tensor");

    // Iterative post-order DFS to get a topological order.
    std::vector<Node*> topo;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, size_t>> stack;
    stack.emplace_back(node_.get(), 0);
    seen.insert(node_.get());
    while (!stack.empty()) {
        auto& [n, next] = stack.back();
        if (next < n->parents.size()) {
            Node* p = n->parents[next++].get();
            if (p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            topo.push_back(n);
            stack.pop_back();
        }
    }

    node_->ensure_grad();
    node_->grad(0, 0) = 1.0;
    for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
        Node* n = *it;
        if (n->backfn) n->backfn(*n);
    }
}

namespace {

void acc(const std::shared_ptr<Node>& p, const Mat& g) {
    if (!p->requires_grad) return;
    p->ensure_grad();
    p->grad.noalias() += g;
}

template <typename Expr>
void acc_expr(const std::shared_ptr<Node>& p, const Expr& g) {
    if (!p->requires_grad) return;
    p->ensure_grad();
    p->grad += g;
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw ShapeError(std::string(op) + ": shape mismatch (" + std::to_string(a.rows()) + "x" +
                         std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                         std::to_string(b.cols()) + ")");
}

}  // namespace

Tensor operator+(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    return make_op(a.value() + b.value(), {a, b}, [](Node& n) {
        acc(n.parents[0], n.grad);
        acc(n.parents[1], n.grad);
    });
}

Tensor operator-(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "sub");
    return make_op(a.value() - b.value(), {a, b}, [](Node& n) {
        acc(n.parents[0], n.grad);
        acc_expr(n.parents[1], -n.grad);
    });
}

Tensor operator-(const Tensor& a) {
    return make_op(-a.value(), {a}, [](Node& n) { acc_expr(n.parents[0], -n.grad); });
}

Tensor operator*(double s, const Tensor& a) {
    return make_op(s * a.value(), {a}, [s](Node& n) { acc_expr(n.parents[0], s * n.grad); });
}

Tensor add_scalar(const Tensor& a, double s) {
    return make_op(a.value().array() + s, {a}, [](Node& n) { acc(n.parents[0], n.grad); });
}

Tensor cmul(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "cmul");
    return make_op(a.value().cwiseProduct(b.value()), {a, b}, [](Node& n) {
        acc_expr(n.parents[0], n.grad.cwiseProduct(n.parents[1]->value));
        acc_expr(n.parents[1], n.grad.cwiseProduct(n.parents[0]->value));
    });
}

Tensor cdiv(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "cdiv");
    return make_op(a.value().cwiseQuotient(b.value()), {a, b}, [](Node& n) {
        const Mat& bv = n.parents[1]->value;
        acc_expr(n.parents[0], n.grad.cwiseQuotient(bv));
        acc_expr(n.parents[1], -n.grad.cwiseProduct(n.value).cwiseQuotient(bv));
    });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.cols() != b.rows())
        throw ShapeError("matmul: inner dimensions differ (" + std::to_string(a.cols()) + " vs " +
                         std::to_string(b.rows()) + ")");
    return make_op(a.value() * b.value(), {a, b}, [](Node& n) {
        const Mat& av = n.parents[0]->value;
        const Mat& bv = n.parents[1]->value;
        if (n.parents[0]->requires_grad) {
            n.parents[0]->ensure_grad();
            n.parents[0]->grad.noalias() += n.grad * bv.transpose();
        }
        if (n.parents[1]->requires_grad) {
            n.parents[1]->ensure_grad();
            n.parents[1]->grad.noalias() += av.transpose() * n.grad;
        }
    });
}

Tensor transpose(const Tensor& a) {
    return make_op(a.value().transpose(), {a},
                   [](Node& n) { acc_expr(n.parents[0], n.grad.transpose()); });
}

Tensor add_rowvec(const Tensor& x, const Tensor& b) {
    if (b.rows() != 1 || b.cols() != x.cols())
        throw ShapeError("add_rowvec: bias must be 1x" + std::to_string(x.cols()));
    return make_op(x.value().rowwise() + b.value().row(0), {x, b}, [](Node& n) {
        acc(n.parents[0], n.grad);
        acc_expr(n.parents[1], n.grad.colwise().sum());
    });
}

Tensor relu(const Tensor& a) {
    return make_op(a.value().cwiseMax(0.0), {a}, [](Node& n) {
        const Mat mask = (n.parents[0]->value.array() > 0.0).cast<double>();
        acc_expr(n.parents[0], n.grad.cwiseProduct(mask));
    });
}

Tensor sigmoid(const Tensor& a) {
    Mat y = (1.0 / (1.0 + (-a.value().array()).exp())).matrix();
    return make_op(std::move(y), {a}, [](Node& n) {
        const auto y = n.value.array();
        acc_expr(n.parents[0], (n.grad.array() * y * (1.0 - y)).matrix());
    });
}

Tensor exp_t(const Tensor& a) {
    return make_op(a.value().array().exp().matrix(), {a}, [](Node& n) {
        acc_expr(n.parents[0], n.grad.cwiseProduct(n.value));
    });
}

Tensor log_t(const Tensor& a) {
    return make_op(a.value().array().log().matrix(), {a}, [](Node& n) {
        acc_expr(n.parents[0], n.grad.cwiseQuotient(n.parents[0]->value));
    });
}

Tensor sqrt_t(const Tensor& a) {
    return make_op(a.value().array().sqrt().matrix(), {a}, [](Node& n) {
        acc_expr(n.parents[0], (n.grad.array() * 0.5 / n.value.array()).matrix());
    });
}

Tensor square(const Tensor& a) {
    return make_op(a.value().array().square().matrix(), {a}, [](Node& n) {
        acc_expr(n.parents[0], (n.grad.array() * 2.0 * n.parents[0]->value.array()).matrix());
    });
}

Tensor abs_t(const Tensor& a) {
    return make_op(a.value().cwiseAbs(), {a}, [](Node& n) {
        const Mat sign = n.parents[0]->value.array().sign().matrix();
        acc_expr(n.parents[0], n.grad.cwiseProduct(sign));
    });
}

Tensor emin(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "emin");
    return make_op(a.value().cwiseMin(b.value()), {a, b}, [](Node& n) {
        // Ties route to the first argument.
        const Mat take_a =
            (n.parents[0]->value.array() <= n.parents[1]->value.array()).cast<double>();
        acc_expr(n.parents[0], n.grad.cwiseProduct(take_a));
        acc_expr(n.parents[1], n.grad.cwiseProduct(Mat(1.0 - take_a.array())));
    });
}

Tensor emax(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "emax");
    return make_op(a.value().cwiseMax(b.value()), {a, b}, [](Node& n) {
        const Mat take_a =
            (n.parents[0]->value.array() >= n.parents[1]->value.array()).cast<double>();
        acc_expr(n.parents[0], n.grad.cwiseProduct(take_a));
        acc_expr(n.parents[1], n.grad.cwiseProduct(Mat(1.0 - take_a.array())));
    });
}

Tensor sum_all(const Tensor& a) {
    Mat s(1, 1);
    s(0, 0) = a.value().sum();
    return make_op(std::move(s), {a}, [](Node& n) {
        acc_expr(n.parents[0], Mat::Constant(n.parents[0]->value.rows(),
                                             n.parents[0]->value.cols(), n.grad(0, 0)));
    });
}

Tensor mean_all(const Tensor& a) {
    const double inv = 1.0 / static_cast<double>(a.rows() * a.cols());
    Mat s(1, 1);
    s(0, 0) = a.value().sum() * inv;
    return make_op(std::move(s), {a}, [inv](Node& n) {
        acc_expr(n.parents[0], Mat::Constant(n.parents[0]->value.rows(),
                                             n.parents[0]->value.cols(), n.grad(0, 0) * inv));
    });
}

Tensor row(const Tensor& a, Eigen::Index i) { return block(a, i, 0, 1, a.cols()); }

Tensor block(const Tensor& a, Eigen::Index i, Eigen::Index j, Eigen::Index p, Eigen::Index q) {
    if (i < 0 || j < 0 || i + p > a.rows() || j + q > a.cols())
        throw ShapeError("block: out of range");
    return make_op(a.value().block(i, j, p, q), {a}, [i, j, p, q](Node& n) {
        auto& par = n.parents[0];
        if (!par->requires_grad) return;
        par->ensure_grad();
        par->grad.block(i, j, p, q) += n.grad;
    });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ShapeError("concat_rows: empty");
    Eigen::Index total = 0;
    const Eigen::Index c = parts[0].cols();
    for (const auto& p : parts) {
        if (p.cols() != c) throw ShapeError("concat_rows: column mismatch");
        total += p.rows();
    }
    Mat v(total, c);
    std::vector<Eigen::Index> offsets(parts.size());
    Eigen::Index at = 0;
    for (size_t k = 0; k < parts.size(); ++k) {
        offsets[k] = at;
        v.middleRows(at, parts[k].rows()) = parts[k].value();
        at += parts[k].rows();
    }
    return make_op(std::move(v), parts, [offsets](Node& n) {
        for (size_t k = 0; k < n.parents.size(); ++k) {
            auto& par = n.parents[k];
            if (!par->requires_grad) continue;
            par->ensure_grad();
            par->grad += n.grad.middleRows(offsets[k], par->value.rows());
        }
    });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols: empty");
    Eigen::Index total = 0;
    const Eigen::Index r = parts[0].rows();
    for (const auto& p : parts) {
        if (p.rows() != r) throw ShapeError("concat_cols: row mismatch");
        total += p.cols();
    }
    Mat v(r, total);
    std::vector<Eigen::Index> offsets(parts.size());
    Eigen::Index at = 0;
    for (size_t k = 0; k < parts.size(); ++k) {
        offsets[k] = at;
        v.middleCols(at, parts[k].cols()) = parts[k].value();
        at += parts[k].cols();
    }
    return make_op(std::move(v), parts, [offsets](Node& n) {
        for (size_t k = 0; k < n.parents.size(); ++k) {
            auto& par = n.parents[k];
            if (!par->requires_grad) continue;
            par->ensure_grad();
            par->grad += n.grad.middleCols(offsets[k], par->value.cols());
        }
    });
}

Tensor rows_mean(const Tensor& a, std::vector<int> idx) {
    if (idx.empty()) throw ShapeError("rows_mean: empty index set");
    Mat v = Mat::Zero(1, a.cols());
    for (int i : idx) {
        if (i < 0 || i >= a.rows()) throw ShapeError("rows_mean: index out of range");
        v += a.value().row(i);
    }
    const double inv = 1.0 / static_cast<double>(idx.size());
    v *= inv;
    return make_op(std::move(v), {a}, [idx = std::move(idx), inv](Node& n) {
        auto& par = n.parents[0];
        if (!par->requires_grad) return;
        par->ensure_grad();
        for (int i : idx) par->grad.row(i) += inv * n.grad.row(0);
    });
}

Tensor rows_select(const Tensor& a, std::vector<int> idx) {
    if (idx.empty()) throw ShapeError("rows_select: empty index set");
    Mat v(static_cast<Eigen::Index>(idx.size()), a.cols());
    for (size_t k = 0; k < idx.size(); ++k) {
        if (idx[k] < 0 || idx[k] >= a.rows()) throw ShapeError("rows_select: index out of range");
        v.row(static_cast<Eigen::Index>(k)) = a.value().row(idx[k]);
    }
    return make_op(std::move(v), {a}, [idx = std::move(idx)](Node& n) {
        auto& par = n.parents[0];
        if (!par->requires_grad) return;
        par->ensure_grad();
        for (size_t k = 0; k < idx.size(); ++k)
            par->grad.row(idx[k]) += n.grad.row(static_cast<Eigen::Index>(k));
    });
}

Tensor detach(const Tensor& a) { return Tensor::constant(a.value()); }

Tensor softmax_rows_masked(const Tensor& a, const std::vector<bool>& key_mask) {
    if (static_cast<Eigen::Index>(key_mask.size()) != a.cols())
        throw ShapeError("softmax_rows_masked: mask length != cols");
    bool any = false;
    for (bool m : key_mask) any = any || m;
    if (!any) throw ShapeError("softmax_rows_masked: all keys masked");

    const Eigen::Index R = a.rows(), C = a.cols();
    Mat p = Mat::Zero(R, C);
    for (Eigen::Index i = 0; i < R; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (Eigen::Index j = 0; j < C; ++j)
            if (key_mask[j]) mx = std::max(mx, a.value()(i, j));
        double z = 0.0;
        for (Eigen::Index j = 0; j < C; ++j) {
            if (!key_mask[j]) continue;
            const double e = std::exp(a.value()(i, j) - mx);
            p(i, j) = e;
            z += e;
        }
        p.row(i) /= z;
    }
    return make_op(std::move(p), {a}, [](Node& n) {
        // dL/da_ij = p_ij * (g_ij - sum_k g_ik p_ik); masked entries have p == 0.
        auto& par = n.parents[0];
        if (!par->requires_grad) return;
        par->ensure_grad();
        const Mat& p = n.value;
        const Eigen::VectorXd dot = (n.grad.cwiseProduct(p)).rowwise().sum();
        par->grad += p.cwiseProduct(n.grad - dot.replicate(1, p.cols()));
    });
}

Tensor layer_norm_rows(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    const Eigen::Index R = x.rows(), C = x.cols();
    if (gamma.rows() != 1 || gamma.cols() != C || beta.rows() != 1 || beta.cols() != C)
        throw ShapeError("layer_norm_rows: affine params must be 1xC");

    Mat xhat(R, C);
    Eigen::VectorXd inv_std(R);
    for (Eigen::Index i = 0; i < R; ++i) {
        const double mu = x.value().row(i).mean();
        const double var = (x.value().row(i).array() - mu).square().mean();
        const double is = 1.0 / std::sqrt(var + eps);
        inv_std(i) = is;
        xhat.row(i) = ((x.value().row(i).array() - mu) * is).matrix();
    }
    Mat y = (xhat.array().rowwise() * gamma.value().row(0).array()).matrix();
    y.rowwise() += beta.value().row(0);

    return make_op(std::move(y), {x, gamma, beta},
                   [xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& n) {
        auto& px = n.parents[0];
        auto& pg = n.parents[1];
        auto& pb = n.parents[2];
        const Eigen::Index C = xhat.cols();
        const Mat dxhat = (n.grad.array().rowwise() * pg->value.row(0).array()).matrix();
        if (pg->requires_grad)
            acc_expr(pg, (n.grad.cwiseProduct(xhat)).colwise().sum());
        if (pb->requires_grad) acc_expr(pb, n.grad.colwise().sum());
        if (px->requires_grad) {
            px->ensure_grad();
            for (Eigen::Index i = 0; i < xhat.rows(); ++i) {
                const double m1 = dxhat.row(i).mean();
                const double m2 = dxhat.row(i).cwiseProduct(xhat.row(i)).mean();
                px->grad.row(i) +=
                    inv_std(i) * (dxhat.row(i).array() - m1 - xhat.row(i).array() * m2).matrix();
            }
            (void)C;
        }
    });
}

Tensor l2_normalize_row(const Tensor& v, double tiny) {
    if (v.rows() != 1) throw ShapeError("l2_normalize_row expects a row vector");
    const double nrm = v.value().norm();
    if (nrm < tiny) {
        WarnCounters::instance().bump("zero_joint_attention");
        return Tensor::constant(Mat::Zero(1, v.cols()));
    }
    Tensor n2 = sum_all(square(v));                 // 1x1
    Tensor inv = cdiv(Tensor::constant(Mat::Ones(1, 1)), sqrt_t(n2));
    // scale rows by a 1x1 tensor
    Tensor invrep = matmul(inv, Tensor::constant(Mat::Ones(1, v.cols())));
    return cmul(v, invrep);
}

Tensor dropout(const Tensor& a, double p, std::mt19937_64& rng) {
    if (p <= 0.0) return a;
    if (p >= 1.0) throw ConfigError("dropout probability must be < 1");
    std::bernoulli_distribution keep(1.0 - p);
    Mat mask(a.rows(), a.cols());
    const double scale = 1.0 / (1.0 - p);
    for (Eigen::Index i = 0; i < a.rows(); ++i)
        for (Eigen::Index j = 0; j < a.cols(); ++j) mask(i, j) = keep(rng) ? scale : 0.0;
    return cmul(a, Tensor::constant(std::move(mask)));
}

Tensor im2col(const Tensor& x, int height, int width, int kernel, int stride, int pad) {
    if (x.rows() != static_cast<Eigen::Index>(height) * width)
        throw ShapeError("im2col: rows != H*W");
    const int C = static_cast<int>(x.cols());
    const int ho = conv_out_dim(height, kernel, stride, pad);
    const int wo = conv_out_dim(width, kernel, stride, pad);
    if (ho <= 0 || wo <= 0) throw ShapeError("im2col: empty output");

    const int taps = kernel * kernel;
    std::vector<int> src(static_cast<size_t>(ho) * wo * taps, -1);
    for (int oy = 0; oy < ho; ++oy) {
        for (int ox = 0; ox < wo; ++ox) {
            const int patch = oy * wo + ox;
            for (int ky = 0; ky < kernel; ++ky) {
                for (int kx = 0; kx < kernel; ++kx) {
                    const int iy = oy * stride + ky - pad;
                    const int ix = ox * stride + kx - pad;
                    if (iy < 0 || iy >= height || ix < 0 || ix >= width) continue;
                    src[static_cast<size_t>(patch) * taps + ky * kernel + kx] = iy * width + ix;
                }
            }
        }
    }

    Mat v = Mat::Zero(static_cast<Eigen::Index>(ho) * wo, static_cast<Eigen::Index>(taps) * C);
    for (int patch = 0; patch < ho * wo; ++patch) {
        for (int t = 0; t < taps; ++t) {
            const int s = src[static_cast<size_t>(patch) * taps + t];
            if (s >= 0) v.block(patch, static_cast<Eigen::Index>(t) * C, 1, C) = x.value().row(s);
        }
    }
    return make_op(std::move(v), {x}, [src = std::move(src), taps, C](Node& n) {
        auto& par = n.parents[0];
        if (!par->requires_grad) return;
        par->ensure_grad();
        const Eigen::Index patches = n.value.rows();
        for (Eigen::Index patch = 0; patch < patches; ++patch) {
            for (int t = 0; t < taps; ++t) {
                const int s = src[static_cast<size_t>(patch) * taps + t];
                if (s >= 0)
                    par->grad.row(s) += n.grad.block(patch, static_cast<Eigen::Index>(t) * C, 1, C);
            }
        }
    });
}

}  // namespace grounder

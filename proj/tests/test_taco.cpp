#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "grounder/taco.hpp"
#include "oracles.hpp"

using namespace grounder;

namespace {

BoundingBox nbox(double x, double y, double w, double h) {
    return BoundingBox::xywh_topleft(x, y, w, h, Frame::normalized());
}

// Hand-built fusion output over a 2x2 grid with 3 text tokens (8 positions).
// Values come from the given matrices; attention rows are made stochastic.
FusedOutput fake_fused(const Tensor& tokens, const Tensor& attn) {
    FusedOutput f;
    f.tokens = tokens;
    f.attn = attn;
    f.n_visual = 4;
    f.n_text = 3;
    f.grid_rows = 2;
    f.grid_cols = 2;
    f.key_mask.assign(8, true);
    return f;
}

Mat row_stochastic(int n, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> d(0.05, 1.0);
    Mat a(n, n);
    for (int i = 0; i < n; ++i) {
        double s = 0;
        for (int j = 0; j < n; ++j) {
            a(i, j) = d(rng);
            s += a(i, j);
        }
        for (int j = 0; j < n; ++j) a(i, j) /= s;
    }
    return a;
}

Mat randm(int r, int c, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> d(-1.0, 1.0);
    Mat m(r, c);
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = d(rng);
    return m;
}

}  // namespace

TEST_CASE("cell membership by center-inside test") {
    const GridShape g{4, 4};

    // Left half: the two left columns on every row.
    auto left = cells_in_box(g, nbox(0.0, 0.0, 0.5, 1.0));
    CHECK(left == std::vector<int>{0, 1, 4, 5, 8, 9, 12, 13});

    // One cell: a box around center (0.375, 0.375).
    auto one = cells_in_box(g, nbox(0.3, 0.3, 0.16, 0.16));
    CHECK(one == std::vector<int>{5});

    // Full frame covers everything.
    CHECK(cells_in_box(g, nbox(0.0, 0.0, 1.0, 1.0)).size() == 16);

    // Pixel-frame boxes are a caller bug.
    CHECK_THROWS_AS(cells_in_box(g, BoundingBox::xywh_topleft(1, 1, 5, 5, Frame::pixel(16, 16))),
                    ConfigError);
}

TEST_CASE("empty selection snaps to the nearest cell") {
    WarnCounters::instance().reset();
    const GridShape g{4, 4};
    auto cells = cells_in_box(g, nbox(0.29, 0.29, 0.02, 0.02));  // covers no center
    CHECK(cells == std::vector<int>{5});                         // nearest is (0.375, 0.375)
    CHECK(WarnCounters::instance().count("pool_empty_selection") == 1);
    WarnCounters::instance().reset();
}

TEST_CASE("region pooling means the selected rows") {
    const Mat tok = randm(8, 6, 1);
    const Mat att = row_stochastic(8, 2);
    FusedOutput f = fake_fused(Tensor::constant(tok), Tensor::constant(att));

    RegionContext r = make_region(f, nbox(0.0, 0.0, 0.5, 1.0));  // grid cells 0 and 2
    CHECK(r.cells == std::vector<int>{0, 2});
    const Mat want_h = 0.5 * (tok.row(0) + tok.row(2));
    const Mat want_a = 0.5 * (att.row(0) + att.row(2));
    CHECK(r.h_box.value().isApprox(want_h, 1e-14));
    CHECK(r.a_box.value().isApprox(want_a, 1e-14));
}

TEST_CASE("context pooling weights tokens by the joint attention") {
    const Mat tok = randm(8, 6, 3);
    const Mat att = row_stochastic(8, 4);
    Tensor a_cls = Tensor::constant(Mat(att.row(4)));
    Tensor a_reg = Tensor::constant(Mat(att.row(7)));
    Tensor a_box = Tensor::constant(Mat(att.row(0)));

    Tensor c = context_pooling(a_cls, a_reg, a_box, Tensor::constant(tok));

    Eigen::RowVectorXd joint = att.row(4).cwiseProduct(att.row(7)).cwiseProduct(att.row(0));
    joint /= joint.norm();
    const Mat want = joint * tok;
    CHECK(c.value().isApprox(want, 1e-12));
}

TEST_CASE("alignment loss prefers the positive region") {
    const double tau = 0.25;
    Mat tok = Mat::Zero(8, 4);
    tok.row(4) << 1.0, 0.0, 0.0, 0.0;  // phrase feature ([CLS] position)
    tok.row(0) << 1.0, 0.0, 0.0, 0.0;  // cell 0 matches the phrase
    tok.row(1) << -1.0, 0.0, 0.0, 0.0; // cell 1 opposes it
    FusedOutput f = fake_fused(Tensor::constant(tok), Tensor::constant(row_stochastic(8, 5)));

    // Positive on the matching cell: logits favor index 0.
    std::vector<RegionContext> good
        = {make_region(f, nbox(0.01, 0.01, 0.47, 0.47)),   // cell 0
           make_region(f, nbox(0.51, 0.01, 0.47, 0.47))};  // cell 1
    std::vector<RegionContext> bad = {good[1], good[0]};

    const double l_good = feature_alignment_loss(f.h_cls(), good, tau).item();
    const double l_bad = feature_alignment_loss(f.h_cls(), bad, tau).item();
    CHECK(l_good < l_bad);

    // Hand-computed value: z = (<h,h0>, <h,h1>)/tau.
    const double z0 = 1.0 / tau, z1 = -1.0 / tau;
    const double want = -std::log(std::exp(z0) / (std::exp(z0) + std::exp(z1)));
    CHECK(l_good == doctest::Approx(want).epsilon(1e-12));

    CHECK_THROWS_AS(feature_alignment_loss(f.h_cls(), good, 0.0), ConfigError);
    CHECK_THROWS_AS(feature_alignment_loss(f.h_cls(), {}, 0.25), ConfigError);
}

TEST_CASE("contrastive objective value matches a direct computation") {
    const double tau = 0.3;
    const Mat tok = randm(8, 5, 7);
    const Mat att = row_stochastic(8, 8);
    FusedOutput f = fake_fused(Tensor::constant(tok), Tensor::constant(att));

    const BoundingBox gt = nbox(0.0, 0.0, 0.5, 1.0);            // cells 0, 2
    NegativeBoxSet negs{{nbox(0.51, 0.01, 0.47, 0.47)}, 0.1, gt};  // cell 1

    TacoTerms terms = taco_loss(f, gt, negs, tau);

    // Reference computation with plain Eigen.
    auto region_rows = [&](std::vector<int> cells) {
        Eigen::RowVectorXd h = Eigen::RowVectorXd::Zero(5);
        Eigen::RowVectorXd a = Eigen::RowVectorXd::Zero(8);
        for (int c : cells) {
            h += tok.row(c);
            a += att.row(c);
        }
        h /= double(cells.size());
        a /= double(cells.size());
        return std::make_pair(h, a);
    };
    const Eigen::RowVectorXd h_cls = tok.row(4);
    const Eigen::RowVectorXd a_cls = att.row(4);
    const Eigen::RowVectorXd a_reg = att.row(7);

    auto logit = [&](std::vector<int> cells) {
        auto [h_box, a_box] = region_rows(cells);
        Eigen::RowVectorXd t = a_cls.cwiseProduct(a_reg).cwiseProduct(a_box);
        t /= t.norm();
        const Eigen::RowVectorXd c = t * tok;
        return (h_cls + c).dot(h_box + c) / tau;
    };
    const double zp = logit({0, 2});
    const double zn = logit({1});
    const double m = std::max(zp, zn);
    const double want = -(zp - m) + std::log(std::exp(zp - m) + std::exp(zn - m));
    CHECK(terms.taco.item() == doctest::Approx(want).epsilon(1e-12));

    // Diagnostic term equals plain InfoNCE on the un-augmented features.
    auto plain_logit = [&](std::vector<int> cells) {
        return h_cls.dot(region_rows(cells).first) / tau;
    };
    const double pzp = plain_logit({0, 2});
    const double pzn = plain_logit({1});
    const double pm = std::max(pzp, pzn);
    const double want_fea = -(pzp - pm) + std::log(std::exp(pzp - pm) + std::exp(pzn - pm));
    CHECK(terms.fea.item() == doctest::Approx(want_fea).epsilon(1e-12));

    // Dropping the context reduces the objective to the diagnostic term.
    TacoTerms zeroed = taco_loss(f, gt, negs, tau, TacoOptions{true});
    CHECK(zeroed.taco.item() == doctest::Approx(want_fea).epsilon(1e-12));
}

TEST_CASE("gradients flow through tokens and attention") {
    const Mat tok = randm(8, 5, 9);
    const Mat att = row_stochastic(8, 10);
    const BoundingBox gt = nbox(0.0, 0.0, 0.5, 1.0);
    NegativeBoxSet negs{{nbox(0.51, 0.01, 0.47, 0.47), nbox(0.51, 0.51, 0.45, 0.45)}, 0.1, gt};

    const double err = oracle::max_grad_err({tok, att}, [&](const std::vector<Tensor>& in) {
        FusedOutput f = fake_fused(in[0], in[1]);
        return taco_loss(f, gt, negs, 0.3).taco;
    });
    CHECK(err < 1e-6);

    // And explicitly: the attention matrix accumulates a nonzero gradient.
    Tensor t_tok = Tensor::leaf(tok);
    Tensor t_att = Tensor::leaf(att);
    FusedOutput f = fake_fused(t_tok, t_att);
    taco_loss(f, gt, negs, 0.3).taco.backward();
    CHECK(t_att.grad().cwiseAbs().maxCoeff() > 0.0);
    CHECK(t_tok.grad().cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("total objective composition") {
    Tensor box = Tensor::constant(Mat::Constant(1, 1, 0.8));
    Tensor taco = Tensor::constant(Mat::Constant(1, 1, 2.5));
    CHECK(total_loss(box, taco, 0.05).item() == doctest::Approx(0.8 + 0.05 * 2.5).epsilon(1e-15));
    // mu == 0 returns the box objective itself, not a copy.
    CHECK(total_loss(box, taco, 0.0).node() == box.node());
}

TEST_CASE("temperature must be positive") {
    const Mat tok = randm(8, 5, 11);
    FusedOutput f = fake_fused(Tensor::constant(tok), Tensor::constant(row_stochastic(8, 12)));
    const BoundingBox gt = nbox(0.1, 0.1, 0.4, 0.4);
    NegativeBoxSet negs{{nbox(0.6, 0.6, 0.3, 0.3)}, 0.1, gt};
    CHECK_THROWS_AS(taco_loss(f, gt, negs, 0.0), ConfigError);
    CHECK_THROWS_AS(taco_loss(f, gt, negs, -1.0), ConfigError);
}

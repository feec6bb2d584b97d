#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "ttm/layers.hpp"

#include <functional>

using namespace ttm;

// Central finite differences against the analytic backward for every layer
// primitive, double precision.

namespace {

constexpr double kStep = 1e-6;
constexpr double kTol = 1e-6;

double rel_err(const Mat<double>& a, const Mat<double>& b) {
    double denom = std::max(1e-12, std::max(a.norm(), b.norm()));
    return (a - b).norm() / denom;
}

Mat<double> numeric_grad(const std::function<double()>& f, Mat<double>& param) {
    Mat<double> g(param.rows(), param.cols());
    for (Eigen::Index j = 0; j < param.cols(); ++j) {
        for (Eigen::Index i = 0; i < param.rows(); ++i) {
            double orig = param(i, j);
            param(i, j) = orig + kStep;
            double fp = f();
            param(i, j) = orig - kStep;
            double fm = f();
            param(i, j) = orig;
            g(i, j) = (fp - fm) / (2 * kStep);
        }
    }
    return g;
}

}  // namespace

TEST_CASE("conv2d gradients match finite differences") {
    for (auto [k, stride] : {std::pair{3, 1}, std::pair{3, 2}, std::pair{1, 1}}) {
        Rng rng(100 + k * 10 + stride);
        Tensor3<double> x = rng.gaussian_tensor<double>(3, 4, 4);
        Mat<double> w(2, 3 * k * k);
        rng.fill_gaussian(w);
        Mat<double> b(2, 1);
        rng.fill_gaussian(b);
        int ho = 0, wo = 0;
        nn::im2col(x, k, stride, ho, wo);
        Mat<double> r(2, ho * wo);
        rng.fill_gaussian(r);

        auto loss = [&]() {
            auto y = nn::conv2d(x, w, b, k, stride, (nn::ConvCache<double>*)nullptr);
            return (y.m.array() * r.array()).sum();
        };

        nn::ConvCache<double> cache;
        auto y = nn::conv2d(x, w, b, k, stride, &cache);
        Tensor3<double> dy = y;
        dy.m = r;
        Mat<double> dw = Mat<double>::Zero(w.rows(), w.cols());
        Mat<double> db = Mat<double>::Zero(2, 1);
        auto dx = nn::conv2d_backward(cache, w, dy, dw, db);

        CHECK(rel_err(dw, numeric_grad(loss, w)) < kTol);
        CHECK(rel_err(db, numeric_grad(loss, b)) < kTol);
        CHECK(rel_err(dx.m, numeric_grad(loss, x.m)) < kTol);
    }
}

TEST_CASE("group_norm gradients match finite differences") {
    Rng rng(7);
    Tensor3<double> x = rng.gaussian_tensor<double>(6, 3, 3);
    Mat<double> r(6, 9);
    rng.fill_gaussian(r);
    auto loss = [&]() {
        auto y = nn::group_norm(x, 3, (nn::GroupNormCache<double>*)nullptr);
        return (y.m.array() * r.array()).sum();
    };
    nn::GroupNormCache<double> cache;
    auto y = nn::group_norm(x, 3, &cache);
    Tensor3<double> dy = y;
    dy.m = r;
    auto dx = nn::group_norm_backward(cache, dy);
    CHECK(rel_err(dx.m, numeric_grad(loss, x.m)) < kTol);
}

TEST_CASE("layer_norm gradients match finite differences") {
    Rng rng(8);
    Mat<double> x(5, 7);
    rng.fill_gaussian(x);
    Mat<double> gamma(5, 1), beta(5, 1), r(5, 7);
    rng.fill_gaussian(gamma, 0.5);
    gamma.array() += 1.0;
    rng.fill_gaussian(beta, 0.3);
    rng.fill_gaussian(r);
    auto loss = [&]() {
        auto y = nn::layer_norm(x, gamma, beta, (nn::LayerNormCache<double>*)nullptr);
        return (y.array() * r.array()).sum();
    };
    nn::LayerNormCache<double> cache;
    nn::layer_norm(x, gamma, beta, &cache);
    Mat<double> dgamma = Mat<double>::Zero(5, 1), dbeta = Mat<double>::Zero(5, 1);
    auto dx = nn::layer_norm_backward(cache, gamma, r, dgamma, dbeta);
    CHECK(rel_err(dx, numeric_grad(loss, x)) < kTol);
    CHECK(rel_err(dgamma, numeric_grad(loss, gamma)) < kTol);
    CHECK(rel_err(dbeta, numeric_grad(loss, beta)) < kTol);
}

TEST_CASE("silu gradient matches finite differences") {
    Rng rng(9);
    Mat<double> x(4, 6), r(4, 6);
    rng.fill_gaussian(x, 2.0);
    rng.fill_gaussian(r);
    auto loss = [&]() { return (nn::silu(x).array() * r.array()).sum(); };
    auto dx = nn::silu_backward(x, r);
    CHECK(rel_err(dx, numeric_grad(loss, x)) < kTol);
}

TEST_CASE("film gradients match finite differences") {
    Rng rng(10);
    Mat<double> x(4, 5), r(4, 5);
    rng.fill_gaussian(x);
    rng.fill_gaussian(r);
    Mat<double> dg(4, 1), be(4, 1);
    rng.fill_gaussian(dg, 0.2);
    rng.fill_gaussian(be, 0.2);
    auto loss = [&]() {
        Vec<double> dgv = dg.col(0), bev = be.col(0);
        return (nn::film(x, dgv, bev).array() * r.array()).sum();
    };
    Vec<double> ddg = Vec<double>::Zero(4), dbe = Vec<double>::Zero(4);
    Vec<double> dgv = dg.col(0);
    auto dx = nn::film_backward(x, dgv, r, ddg, dbe);
    CHECK(rel_err(dx, numeric_grad(loss, x)) < kTol);
    CHECK(rel_err(Mat<double>(ddg), numeric_grad(loss, dg)) < kTol);
    CHECK(rel_err(Mat<double>(dbe), numeric_grad(loss, be)) < kTol);
}

TEST_CASE("film with zero params is the identity") {
    Rng rng(11);
    Mat<double> x(3, 4);
    rng.fill_gaussian(x);
    Vec<double> z = Vec<double>::Zero(3);
    CHECK(nn::film(x, z, z) == x);
}

TEST_CASE("attention gradients match finite differences (with mask, multi-head)") {
    Rng rng(12);
    const int c = 6, n = 5, m = 4, d_f = 3, heads = 2, head_dim = 2;
    const int inner = heads * head_dim;
    Mat<double> x(c, n);
    rng.fill_gaussian(x);
    LocalEmbeddings<double> f;
    f.f.resize(m, d_f);
    rng.fill_gaussian(f.f);
    f.mask = {1, 0, 1, 1};
    Mat<double> wq(inner, c), wk(inner, d_f), wv(inner, d_f), wproj(c, inner), bproj(c, 1);
    rng.fill_gaussian(wq);
    rng.fill_gaussian(wk);
    rng.fill_gaussian(wv);
    rng.fill_gaussian(wproj);
    rng.fill_gaussian(bproj);
    Mat<double> r(c, n);
    rng.fill_gaussian(r);

    nn::AttnWeightsRef<double> ar{&wq, &wk, &wv, &wproj, &bproj};
    auto loss = [&]() {
        auto y = nn::attention(x, f, ar, heads, head_dim, (nn::AttnCache<double>*)nullptr);
        return (y.array() * r.array()).sum();
    };

    nn::AttnCache<double> cache;
    nn::attention(x, f, ar, heads, head_dim, &cache);
    Mat<double> dwq = Mat<double>::Zero(inner, c), dwk = Mat<double>::Zero(inner, d_f),
                dwv = Mat<double>::Zero(inner, d_f), dwproj = Mat<double>::Zero(c, inner),
                dbproj = Mat<double>::Zero(c, 1), dfe = Mat<double>::Zero(m, d_f);
    auto dx = nn::attention_backward(cache, ar, r, dwq, dwk, dwv, dwproj, dbproj, dfe);

    CHECK(rel_err(dx, numeric_grad(loss, x)) < kTol);
    CHECK(rel_err(dwq, numeric_grad(loss, wq)) < kTol);
    CHECK(rel_err(dwk, numeric_grad(loss, wk)) < kTol);
    CHECK(rel_err(dwv, numeric_grad(loss, wv)) < kTol);
    CHECK(rel_err(dwproj, numeric_grad(loss, wproj)) < kTol);
    CHECK(rel_err(dbproj, numeric_grad(loss, bproj)) < kTol);
    CHECK(rel_err(dfe, numeric_grad(loss, f.f)) < kTol);
    // masked token receives no gradient
    CHECK(dfe.row(1).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("attention softmax rows sum to one") {
    Rng rng(13);
    const int c = 4, n = 6, m = 5, heads = 2, head_dim = 2;
    Mat<double> x(c, n);
    rng.fill_gaussian(x);
    LocalEmbeddings<double> f;
    f.f.resize(m, 3);
    rng.fill_gaussian(f.f);
    f.mask = {1, 1, 0, 1, 1};
    Mat<double> wq(4, c), wk(4, 3), wv(4, 3), wproj(c, 4), bproj(c, 1);
    rng.fill_gaussian(wq);
    rng.fill_gaussian(wk);
    rng.fill_gaussian(wv);
    rng.fill_gaussian(wproj);
    bproj.setZero();
    nn::AttnWeightsRef<double> ar{&wq, &wk, &wv, &wproj, &bproj};
    Vec<double> row_sums;
    nn::attention(x, f, ar, heads, head_dim, (nn::AttnCache<double>*)nullptr, &row_sums);
    REQUIRE(row_sums.size() == heads * n);
    for (Eigen::Index i = 0; i < row_sums.size(); ++i)
        CHECK(row_sums[i] == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("attention rejects an all-masked token set") {
    Mat<double> x(2, 3);
    x.setZero();
    LocalEmbeddings<double> f;
    f.f = Mat<double>::Zero(2, 2);
    f.mask = {0, 0};
    Mat<double> wq(2, 2), wk(2, 2), wv(2, 2), wproj(2, 2), bproj(2, 1);
    wq.setZero();
    wk.setZero();
    wv.setZero();
    wproj.setZero();
    bproj.setZero();
    nn::AttnWeightsRef<double> ar{&wq, &wk, &wv, &wproj, &bproj};
    CHECK_THROWS(nn::attention(x, f, ar, 1, 2, (nn::AttnCache<double>*)nullptr));
}

TEST_CASE("upsample_nearest2x and its backward are adjoint") {
    Rng rng(14);
    Tensor3<double> x = rng.gaussian_tensor<double>(2, 3, 4);
    auto y = nn::upsample_nearest2x(x);
    CHECK(y.h == 6);
    CHECK(y.w == 8);
    for (int c = 0; c < 2; ++c)
        for (int yy = 0; yy < 6; ++yy)
            for (int xx = 0; xx < 8; ++xx)
                CHECK(y.at(c, yy, xx) == x.at(c, yy / 2, xx / 2));

    // adjoint identity: <up(x), r> == <x, up_backward(r)>
    Tensor3<double> r = rng.gaussian_tensor<double>(2, 6, 8);
    auto dx = nn::upsample_nearest2x_backward(r, 3, 4);
    double lhs = (y.m.array() * r.m.array()).sum();
    double rhs = (x.m.array() * dx.m.array()).sum();
    CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
}

TEST_CASE("im2col/col2im are adjoint") {
    Rng rng(15);
    Tensor3<double> x = rng.gaussian_tensor<double>(3, 5, 4);
    for (auto [k, stride] : {std::pair{3, 1}, std::pair{3, 2}, std::pair{1, 1}}) {
        int ho = 0, wo = 0;
        Mat<double> cols = nn::im2col(x, k, stride, ho, wo);
        Mat<double> r(cols.rows(), cols.cols());
        rng.fill_gaussian(r);
        Tensor3<double> back(3, 5, 4);
        nn::col2im_add(r, 3, 5, 4, k, stride, back);
        double lhs = (cols.array() * r.array()).sum();
        double rhs = (x.m.array() * back.m.array()).sum();
        CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
    }
}

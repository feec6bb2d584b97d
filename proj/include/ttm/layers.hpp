#pragma once

#include "ttm/conditioning.hpp"
#include "ttm/core.hpp"

#include <vector>

namespace ttm::nn {

// Differentiable building blocks. Every forward can record a cache; the
// matching backward consumes it, accumulates parameter gradients (+=) and
// returns the gradient w.r.t. the input. Layout everywhere: feature maps are
// channels x positions, token matrices are tokens x dim.

// ---------------------------------------------------------------- conv2d ---

template <typename S>
struct ConvCache {
    Mat<S> cols;  // (c_in*k*k) x (h_out*w_out)
    int in_c = 0, in_h = 0, in_w = 0;
    int k = 1, stride = 1;
};

template <typename S>
Mat<S> im2col(const Tensor3<S>& x, int k, int stride, int& h_out, int& w_out) {
    const int pad = k / 2;
    h_out = (x.h + 2 * pad - k) / stride + 1;
    w_out = (x.w + 2 * pad - k) / stride + 1;
    Mat<S> cols = Mat<S>::Zero((Eigen::Index)x.c * k * k, (Eigen::Index)h_out * w_out);
    for (int yo = 0; yo < h_out; ++yo) {
        for (int xo = 0; xo < w_out; ++xo) {
            const Eigen::Index col = (Eigen::Index)yo * w_out + xo;
            for (int dy = 0; dy < k; ++dy) {
                const int yi = yo * stride + dy - pad;
                if (yi < 0 || yi >= x.h) continue;
                for (int dx = 0; dx < k; ++dx) {
                    const int xi = xo * stride + dx - pad;
                    if (xi < 0 || xi >= x.w) continue;
                    const Eigen::Index src = (Eigen::Index)yi * x.w + xi;
                    for (int ci = 0; ci < x.c; ++ci)
                        cols((Eigen::Index)(ci * k + dy) * k + dx, col) = x.m(ci, src);
                }
            }
        }
    }
    return cols;
}

template <typename S>
void col2im_add(const Mat<S>& dcols, int c, int h, int w, int k, int stride, Tensor3<S>& dx) {
    const int pad = k / 2;
    const int h_out = (h + 2 * pad - k) / stride + 1;
    const int w_out = (w + 2 * pad - k) / stride + 1;
    for (int yo = 0; yo < h_out; ++yo) {
        for (int xo = 0; xo < w_out; ++xo) {
            const Eigen::Index col = (Eigen::Index)yo * w_out + xo;
            for (int dy = 0; dy < k; ++dy) {
                const int yi = yo * stride + dy - pad;
                if (yi < 0 || yi >= h) continue;
                for (int dxk = 0; dxk < k; ++dxk) {
                    const int xi = xo * stride + dxk - pad;
                    if (xi < 0 || xi >= w) continue;
                    const Eigen::Index dst = (Eigen::Index)yi * w + xi;
                    for (int ci = 0; ci < c; ++ci)
                        dx.m(ci, dst) += dcols((Eigen::Index)(ci * k + dy) * k + dxk, col);
                }
            }
        }
    }
}

/// 2-D convolution, zero padding k/2. weight is (c_out) x (c_in*k*k), bias a
/// (c_out) x 1 column.
template <typename S>
Tensor3<S> conv2d(const Tensor3<S>& x, const Mat<S>& weight, const Mat<S>& bias, int k,
                  int stride, ConvCache<S>* cache) {
    require(weight.cols() == (Eigen::Index)x.c * k * k, "conv2d: weight/input channel mismatch");
    require(weight.rows() == bias.rows() && bias.cols() == 1, "conv2d: weight/bias mismatch");
    int ho = 0, wo = 0;
    Mat<S> cols = im2col(x, k, stride, ho, wo);
    Tensor3<S> y((int)weight.rows(), ho, wo);
    y.m.noalias() = weight * cols;
    y.m.colwise() += bias.col(0);
    if (cache) {
        cache->cols = std::move(cols);
        cache->in_c = x.c;
        cache->in_h = x.h;
        cache->in_w = x.w;
        cache->k = k;
        cache->stride = stride;
    }
    return y;
}

template <typename S>
Tensor3<S> conv2d_backward(const ConvCache<S>& cache, const Mat<S>& weight,
                           const Tensor3<S>& dy, Mat<S>& dweight, Mat<S>& dbias) {
    dweight.noalias() += dy.m * cache.cols.transpose();
    dbias.col(0) += dy.m.rowwise().sum();
    Mat<S> dcols = weight.transpose() * dy.m;
    Tensor3<S> dx(cache.in_c, cache.in_h, cache.in_w);
    col2im_add(dcols, cache.in_c, cache.in_h, cache.in_w, cache.k, cache.stride, dx);
    return dx;
}

// ------------------------------------------------------------- group norm ---

inline constexpr double kNormEps = 1e-5;

template <typename S>
struct GroupNormCache {
    Mat<S> xhat;      // c x n
    Vec<S> inv_std;   // one per group
    int groups = 1;
};

/// Group normalization without learned affine (FiLM supplies scale/shift).
template <typename S>
Tensor3<S> group_norm(const Tensor3<S>& x, int groups, GroupNormCache<S>* cache) {
    require(groups >= 1 && x.c % groups == 0, "group_norm: groups must divide channels");
    const int cg = x.c / groups;
    const Eigen::Index n = x.m.cols();
    Tensor3<S> y(x.c, x.h, x.w);
    Vec<S> inv_std(groups);
    for (int g = 0; g < groups; ++g) {
        auto xb = x.m.middleRows((Eigen::Index)g * cg, cg);
        const S mean = xb.mean();
        const S var = (xb.array() - mean).square().sum() / S(cg * n);
        const S is = S(1) / std::sqrt(var + S(kNormEps));
        inv_std[g] = is;
        y.m.middleRows((Eigen::Index)g * cg, cg) = (xb.array() - mean) * is;
    }
    if (cache) {
        cache->xhat = y.m;
        cache->inv_std = std::move(inv_std);
        cache->groups = groups;
    }
    return y;
}

template <typename S>
Tensor3<S> group_norm_backward(const GroupNormCache<S>& cache, const Tensor3<S>& dy) {
    const int c = (int)cache.xhat.rows();
    const int cg = c / cache.groups;
    const Eigen::Index n = cache.xhat.cols();
    Tensor3<S> dx(dy.c, dy.h, dy.w);
    for (int g = 0; g < cache.groups; ++g) {
        auto dyb = dy.m.middleRows((Eigen::Index)g * cg, cg);
        auto xh = cache.xhat.middleRows((Eigen::Index)g * cg, cg);
        const S m = S(cg * n);
        const S mean_dy = dyb.sum() / m;
        const S mean_dy_xh = (dyb.array() * xh.array()).sum() / m;
        dx.m.middleRows((Eigen::Index)g * cg, cg) =
            cache.inv_std[g] * (dyb.array() - mean_dy - xh.array() * mean_dy_xh);
    }
    return dx;
}

// ------------------------------------------------------------- layer norm ---

template <typename S>
struct LayerNormCache {
    Mat<S> xhat;     // c x n
    Vec<S> inv_std;  // one per column (position)
};

/// Per-position layer norm over channels with learned (gamma, beta), both
/// stored as (c) x 1 columns.
template <typename S>
Mat<S> layer_norm(const Mat<S>& x, const Mat<S>& gamma, const Mat<S>& beta,
                  LayerNormCache<S>* cache) {
    require(gamma.rows() == x.rows() && beta.rows() == x.rows(), "layer_norm: affine size");
    const Eigen::Index c = x.rows(), n = x.cols();
    Mat<S> xhat(c, n);
    Vec<S> inv_std(n);
    for (Eigen::Index j = 0; j < n; ++j) {
        const S mean = x.col(j).mean();
        const S var = (x.col(j).array() - mean).square().sum() / S(c);
        const S is = S(1) / std::sqrt(var + S(kNormEps));
        inv_std[j] = is;
        xhat.col(j) = (x.col(j).array() - mean) * is;
    }
    Mat<S> y = gamma.col(0).asDiagonal() * xhat;
    y.colwise() += beta.col(0);
    if (cache) {
        cache->xhat = std::move(xhat);
        cache->inv_std = std::move(inv_std);
    }
    return y;
}

template <typename S>
Mat<S> layer_norm_backward(const LayerNormCache<S>& cache, const Mat<S>& gamma,
                           const Mat<S>& dy, Mat<S>& dgamma, Mat<S>& dbeta) {
    const Eigen::Index c = cache.xhat.rows(), n = cache.xhat.cols();
    dgamma.col(0) += (dy.array() * cache.xhat.array()).rowwise().sum().matrix();
    dbeta.col(0) += dy.rowwise().sum();
    Mat<S> dxh = gamma.col(0).asDiagonal() * dy;
    Mat<S> dx(c, n);
    for (Eigen::Index j = 0; j < n; ++j) {
        const S mean_d = dxh.col(j).mean();
        const S mean_dx = (dxh.col(j).array() * cache.xhat.col(j).array()).mean();
        dx.col(j) = cache.inv_std[j] *
                    (dxh.col(j).array() - mean_d - cache.xhat.col(j).array() * mean_dx);
    }
    return dx;
}

// ------------------------------------------------------------------- silu ---

template <typename S>
Mat<S> silu(const Mat<S>& x) {
    return x.array() / (S(1) + (-x.array()).exp());
}

template <typename S>
Mat<S> silu_backward(const Mat<S>& x, const Mat<S>& dy) {
    auto sig = (S(1) / (S(1) + (-x.array()).exp())).eval();
    return (dy.array() * sig * (S(1) + x.array() * (S(1) - sig))).matrix();
}

// ------------------------------------------------------------------- film ---

/// Per-channel affine y = x * (1 + dgamma) + beta; identity at zero params.
template <typename S>
Mat<S> film(const Mat<S>& x, const Vec<S>& dgamma, const Vec<S>& beta) {
    require(dgamma.size() == x.rows() && beta.size() == x.rows(), "film: size mismatch");
    Mat<S> y = (Vec<S>::Ones(x.rows()) + dgamma).asDiagonal() * x;
    y.colwise() += beta;
    return y;
}

template <typename S>
Mat<S> film_backward(const Mat<S>& x, const Vec<S>& dgamma, const Mat<S>& dy,
                     Vec<S>& ddgamma, Vec<S>& dbeta) {
    ddgamma += (dy.array() * x.array()).rowwise().sum().matrix();
    dbeta += dy.rowwise().sum();
    return (Vec<S>::Ones(x.rows()) + dgamma).asDiagonal() * dy;
}

// -------------------------------------------------------- cross-attention ---

template <typename S>
struct AttnWeightsRef {
    const Mat<S>* wq;    // inner x c
    const Mat<S>* wk;    // inner x d_f
    const Mat<S>* wv;    // inner x d_f
    const Mat<S>* wproj; // c x inner
    const Mat<S>* bproj; // c x 1
};

template <typename S>
struct AttnCache {
    Mat<S> xt;               // n x c
    Mat<S> q, k, v;          // n x inner, m x inner, m x inner
    std::vector<Mat<S>> a;   // per head: n x m softmax rows
    Mat<S> o;                // n x inner
    Mat<S> f;                // m x d_f (token values)
    std::vector<uint8_t> mask;
    int heads = 1, head_dim = 1;
};

/// Scaled dot-product attention of spatial positions (queries) over token
/// embeddings (keys/values); masked tokens receive -inf logits. No residual.
/// If probe_row_sums is non-null it receives the per-query softmax row sums
/// (heads*n entries), which are 1 by construction up to rounding.
template <typename S>
Mat<S> attention(const Mat<S>& x /*c x n*/, const LocalEmbeddings<S>& f,
                 const AttnWeightsRef<S>& w, int heads, int head_dim, AttnCache<S>* cache,
                 Vec<S>* probe_row_sums = nullptr) {
    require(f.valid_count() >= 1, "attention: mask has zero valid tokens");
    require(w.wq->cols() == x.rows(), "attention: query projection width mismatch");
    require(w.wk->cols() == f.dim() && w.wv->cols() == f.dim(),
            "attention: key/value projection width mismatch");
    const int inner = heads * head_dim;
    require(w.wq->rows() == inner && w.wk->rows() == inner && w.wv->rows() == inner,
            "attention: projection height mismatch");
    const Eigen::Index n = x.cols();
    const Eigen::Index m = f.tokens();
    const S scale = S(1) / std::sqrt(S(head_dim));

    Mat<S> xt = x.transpose();
    Mat<S> q = xt * w.wq->transpose();
    Mat<S> k = f.f * w.wk->transpose();
    Mat<S> v = f.f * w.wv->transpose();

    Mat<S> o(n, inner);
    std::vector<Mat<S>> a(heads);
    if (probe_row_sums) probe_row_sums->resize((Eigen::Index)heads * n);
    for (int h = 0; h < heads; ++h) {
        auto qh = q.middleCols((Eigen::Index)h * head_dim, head_dim);
        auto kh = k.middleCols((Eigen::Index)h * head_dim, head_dim);
        auto vh = v.middleCols((Eigen::Index)h * head_dim, head_dim);
        Mat<S> s = (qh * kh.transpose()) * scale;  // n x m
        for (Eigen::Index j = 0; j < m; ++j)
            if (!f.mask[j]) s.col(j).setConstant(-std::numeric_limits<S>::infinity());
        Mat<S>& ah = a[h];
        ah.resize(n, m);
        for (Eigen::Index i = 0; i < n; ++i) {
            const S mx = s.row(i).maxCoeff();
            ah.row(i) = (s.row(i).array() - mx).exp();
            const S z = ah.row(i).sum();
            ah.row(i) /= z;
            if (probe_row_sums) (*probe_row_sums)[(Eigen::Index)h * n + i] = ah.row(i).sum();
        }
        o.middleCols((Eigen::Index)h * head_dim, head_dim).noalias() = ah * vh;
    }
    Mat<S> yt = o * w.wproj->transpose();
    yt.rowwise() += w.bproj->col(0).transpose();
    if (cache) {
        cache->xt = std::move(xt);
        cache->q = std::move(q);
        cache->k = std::move(k);
        cache->v = std::move(v);
        cache->a = std::move(a);
        cache->o = std::move(o);
        cache->f = f.f;
        cache->mask = f.mask;
        cache->heads = heads;
        cache->head_dim = head_dim;
    }
    return yt.transpose();
}

/// Backward of attention(); returns dx (c x n) and accumulates dF into dfe.
template <typename S>
Mat<S> attention_backward(const AttnCache<S>& cache, const AttnWeightsRef<S>& w,
                          const Mat<S>& dout /*c x n*/, Mat<S>& dwq, Mat<S>& dwk, Mat<S>& dwv,
                          Mat<S>& dwproj, Mat<S>& dbproj, Mat<S>& dfe) {
    const int heads = cache.heads, head_dim = cache.head_dim;
    const S scale = S(1) / std::sqrt(S(head_dim));
    const Eigen::Index n = cache.xt.rows();
    const Eigen::Index inner = (Eigen::Index)heads * head_dim;

    Mat<S> dyt = dout.transpose();          // n x c
    dbproj.col(0) += dyt.colwise().sum().transpose();
    dwproj.noalias() += dyt.transpose() * cache.o;
    Mat<S> do_ = dyt * (*w.wproj);          // n x inner

    Mat<S> dq = Mat<S>::Zero(n, inner);
    Mat<S> dk = Mat<S>::Zero(cache.f.rows(), inner);
    Mat<S> dv = Mat<S>::Zero(cache.f.rows(), inner);
    for (int h = 0; h < heads; ++h) {
        auto qh = cache.q.middleCols((Eigen::Index)h * head_dim, head_dim);
        auto kh = cache.k.middleCols((Eigen::Index)h * head_dim, head_dim);
        auto vh = cache.v.middleCols((Eigen::Index)h * head_dim, head_dim);
        auto doh = do_.middleCols((Eigen::Index)h * head_dim, head_dim);
        const Mat<S>& ah = cache.a[h];
        Mat<S> da = doh * vh.transpose();   // n x m
        dv.middleCols((Eigen::Index)h * head_dim, head_dim).noalias() += ah.transpose() * doh;
        Vec<S> row_dot = (da.array() * ah.array()).rowwise().sum();
        Mat<S> ds = (ah.array() * (da.array().colwise() - row_dot.array())).matrix();
        dq.middleCols((Eigen::Index)h * head_dim, head_dim).noalias() += ds * kh * scale;
        dk.middleCols((Eigen::Index)h * head_dim, head_dim).noalias() +=
            ds.transpose() * qh * scale;
    }
    dwq.noalias() += dq.transpose() * cache.xt;
    dwk.noalias() += dk.transpose() * cache.f;
    dwv.noalias() += dv.transpose() * cache.f;
    dfe.noalias() += dk * (*w.wk) + dv * (*w.wv);
    Mat<S> dxt = dq * (*w.wq);  // n x c
    return dxt.transpose();
}

// ------------------------------------------------------- nearest upsample ---

template <typename S>
Tensor3<S> upsample_nearest2x(const Tensor3<S>& x) {
    Tensor3<S> y(x.c, x.h * 2, x.w * 2);
    for (int yy = 0; yy < y.h; ++yy)
        for (int xx = 0; xx < y.w; ++xx)
            y.m.col((Eigen::Index)yy * y.w + xx) = x.m.col((Eigen::Index)(yy / 2) * x.w + xx / 2);
    return y;
}

template <typename S>
Tensor3<S> upsample_nearest2x_backward(const Tensor3<S>& dy, int in_h, int in_w) {
    Tensor3<S> dx(dy.c, in_h, in_w);
    for (int yy = 0; yy < dy.h; ++yy)
        for (int xx = 0; xx < dy.w; ++xx)
            dx.m.col((Eigen::Index)(yy / 2) * in_w + xx / 2) +=
                dy.m.col((Eigen::Index)yy * dy.w + xx);
    return dx;
}

}  // namespace ttm::nn

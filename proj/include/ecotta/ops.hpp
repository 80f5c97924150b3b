#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <vector>

#include "ecotta/tensor.hpp"

namespace ecotta {

namespace detail {

template <typename S>
using MatRM = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using MatCM = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::ColMajor>;

template <typename S>
Eigen::Map<const MatRM<S>> as_matrix(const Buffer<S>& b, std::int64_t rows, std::int64_t cols) {
    return Eigen::Map<const MatRM<S>>(b.data(), rows, cols);
}

template <typename S>
Eigen::Map<const Buffer<S>> as_flat(const MatRM<S>& m) {
    return Eigen::Map<const Buffer<S>>(m.data(), m.size());
}

}  // namespace detail

//==========================================================================
// linear: y = x W + b        x [B,I], W [I,O], b [O]
//==========================================================================

template <typename S>
Tensor<S> linear(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b) {
    if (x.rank() != 2 || w.rank() != 2 || b.rank() != 1 || x.dim(1) != w.dim(0) || w.dim(1) != b.dim(0))
        throw DimensionError("linear: incompatible shapes x" + shape_str(x.shape()) + " w" +
                             shape_str(w.shape()) + " b" + shape_str(b.shape()));
    const std::int64_t batch = x.dim(0), in = x.dim(1), out_dim = w.dim(1);

    Buffer<S> out(batch * out_dim);
    {
        auto X = detail::as_matrix(x.data(), batch, in);
        auto W = detail::as_matrix(w.data(), in, out_dim);
        Eigen::Map<detail::MatRM<S>> Y(out.data(), batch, out_dim);
        Y.noalias() = X * W;
        Y.rowwise() += Eigen::Map<const Eigen::Matrix<S, 1, Eigen::Dynamic>>(b.data().data(), out_dim);
    }

    std::shared_ptr<detail::Node<S>> node;
    Tensor<S> y = detail::op_output({batch, out_dim}, std::move(out), "linear", {x, w, b}, &node);
    if (node) {
        const bool save_x = w.requires_grad();
        if (save_x) {
            node->saved.push_back(x);
            ledger().record(w.impl(), "linear", static_cast<std::size_t>(x.numel()) * sizeof(S));
        }
        node->backward = [x, w, b, batch, in, out_dim](const Buffer<S>& g) {
            auto G = detail::as_matrix(g, batch, out_dim);
            if (x.requires_grad()) {
                detail::MatRM<S> dX = G * detail::as_matrix(w.data(), in, out_dim).transpose();
                detail::accumulate(x, detail::as_flat(dX));
            }
            if (w.requires_grad()) {
                detail::MatRM<S> dW = detail::as_matrix(x.data(), batch, in).transpose() * G;
                detail::accumulate(w, detail::as_flat(dW));
            }
            if (b.requires_grad()) {
                detail::MatRM<S> dB = G.colwise().sum();
                detail::accumulate(b, detail::as_flat(dB));
            }
        };
    }
    return y;
}

//==========================================================================
// conv2d: bias-free cross-correlation, kernel 1 (pad 0) or 3 (pad 1)
//==========================================================================

namespace detail {

// Receptive fields unrolled row-major: row (c,ki,kj) of `cols` holds that
// tap across all output pixels, so the 3x3 stride-1 case reduces to shifted
// row copies. 1x1 stride-1 skips the unroll entirely (the input plane
// already is the matrix).
template <typename S>
void im2col(const S* img, std::int64_t ch, std::int64_t h, std::int64_t w, std::int64_t k,
            std::int64_t stride, std::int64_t pad, std::int64_t oh, std::int64_t ow, MatRM<S>& cols) {
    if (k == 3 && stride == 1 && pad == 1) {
        for (std::int64_t c = 0; c < ch; ++c) {
            const S* plane = img + c * h * w;
            for (std::int64_t ki = 0; ki < 3; ++ki)
                for (std::int64_t kj = 0; kj < 3; ++kj) {
                    S* row = cols.data() + ((c * 3 + ki) * 3 + kj) * oh * ow;
                    for (std::int64_t y = 0; y < oh; ++y) {
                        const std::int64_t iy = y + ki - 1;
                        S* dst = row + y * ow;
                        if (iy < 0 || iy >= h) {
                            std::fill(dst, dst + ow, S(0));
                            continue;
                        }
                        const S* src = plane + iy * w;
                        if (kj == 0) {
                            dst[0] = S(0);
                            std::copy(src, src + ow - 1, dst + 1);
                        } else if (kj == 1) {
                            std::copy(src, src + ow, dst);
                        } else {
                            std::copy(src + 1, src + ow, dst);
                            dst[ow - 1] = S(0);
                        }
                    }
                }
        }
        return;
    }
    for (std::int64_t c = 0; c < ch; ++c) {
        const S* plane = img + c * h * w;
        for (std::int64_t ki = 0; ki < k; ++ki)
            for (std::int64_t kj = 0; kj < k; ++kj) {
                S* row = cols.data() + ((c * k + ki) * k + kj) * oh * ow;
                for (std::int64_t y = 0; y < oh; ++y) {
                    const std::int64_t iy = y * stride - pad + ki;
                    for (std::int64_t x = 0; x < ow; ++x) {
                        const std::int64_t ix = x * stride - pad + kj;
                        row[y * ow + x] =
                            (iy >= 0 && iy < h && ix >= 0 && ix < w) ? plane[iy * w + ix] : S(0);
                    }
                }
            }
    }
}

template <typename S>
void col2im_add(const MatRM<S>& cols, std::int64_t ch, std::int64_t h, std::int64_t w, std::int64_t k,
                std::int64_t stride, std::int64_t pad, std::int64_t oh, std::int64_t ow, S* img) {
    if (k == 3 && stride == 1 && pad == 1) {
        for (std::int64_t c = 0; c < ch; ++c) {
            S* plane = img + c * h * w;
            for (std::int64_t ki = 0; ki < 3; ++ki)
                for (std::int64_t kj = 0; kj < 3; ++kj) {
                    const S* row = cols.data() + ((c * 3 + ki) * 3 + kj) * oh * ow;
                    for (std::int64_t y = 0; y < oh; ++y) {
                        const std::int64_t iy = y + ki - 1;
                        if (iy < 0 || iy >= h) continue;
                        S* dst = plane + iy * w;
                        const S* src = row + y * ow;
                        if (kj == 0) {
                            for (std::int64_t x = 1; x < ow; ++x) dst[x - 1] += src[x];
                        } else if (kj == 1) {
                            for (std::int64_t x = 0; x < ow; ++x) dst[x] += src[x];
                        } else {
                            for (std::int64_t x = 0; x < ow - 1; ++x) dst[x + 1] += src[x];
                        }
                    }
                }
        }
        return;
    }
    for (std::int64_t c = 0; c < ch; ++c) {
        S* plane = img + c * h * w;
        for (std::int64_t ki = 0; ki < k; ++ki)
            for (std::int64_t kj = 0; kj < k; ++kj) {
                const S* row = cols.data() + ((c * k + ki) * k + kj) * oh * ow;
                for (std::int64_t y = 0; y < oh; ++y) {
                    const std::int64_t iy = y * stride - pad + ki;
                    if (iy < 0 || iy >= h) continue;
                    for (std::int64_t x = 0; x < ow; ++x) {
                        const std::int64_t ix = x * stride - pad + kj;
                        if (ix >= 0 && ix < w) plane[iy * w + ix] += row[y * ow + x];
                    }
                }
            }
    }
}

}  // namespace detail

template <typename S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& w, std::int64_t stride, std::int64_t padding) {
    if (x.rank() != 4 || w.rank() != 4)
        throw DimensionError("conv2d: expected 4-d input and kernel, got x" + shape_str(x.shape()) +
                             " w" + shape_str(w.shape()));
    const std::int64_t batch = x.dim(0), ch = x.dim(1), h = x.dim(2), wd = x.dim(3);
    const std::int64_t oc = w.dim(0), k = w.dim(2);
    if (w.dim(1) != ch || w.dim(3) != k)
        throw DimensionError("conv2d: kernel " + shape_str(w.shape()) + " does not match input channels " +
                             std::to_string(ch));
    if (!((k == 1 && padding == 0) || (k == 3 && padding == 1)))
        throw ConfigError("conv2d: unsupported kernel size " + std::to_string(k) + " with padding " +
                          std::to_string(padding) + " (supported: k=1 pad=0, k=3 pad=1)");
    if (stride < 1) throw ConfigError("conv2d: stride must be >= 1");
    const std::int64_t oh = (h + 2 * padding - k) / stride + 1;
    const std::int64_t ow = (wd + 2 * padding - k) / stride + 1;
    if (oh < 1 || ow < 1)
        throw DimensionError("conv2d: empty output for input " + shape_str(x.shape()));

    const std::int64_t ckk = ch * k * k, pixels = oh * ow;
    const bool pointwise = (k == 1 && stride == 1);
    Buffer<S> out(batch * oc * pixels);
    {
        auto W = detail::as_matrix(w.data(), oc, ckk);
        detail::MatRM<S> cols;
        if (!pointwise) cols.resize(ckk, pixels);
        for (std::int64_t b = 0; b < batch; ++b) {
            Eigen::Map<detail::MatRM<S>> Y(out.data() + b * oc * pixels, oc, pixels);
            if (pointwise) {
                auto X = Eigen::Map<const detail::MatRM<S>>(x.data().data() + b * ch * h * wd, ch, pixels);
                Y.noalias() = W * X;
            } else {
                detail::im2col(x.data().data() + b * ch * h * wd, ch, h, wd, k, stride, padding, oh, ow,
                               cols);
                Y.noalias() = W * cols;
            }
        }
    }

    std::shared_ptr<detail::Node<S>> node;
    Tensor<S> y = detail::op_output({batch, oc, oh, ow}, std::move(out), "conv2d", {x, w}, &node);
    if (node) {
        const bool save_x = w.requires_grad();
        if (save_x) {
            node->saved.push_back(x);
            ledger().record(w.impl(), "conv2d", static_cast<std::size_t>(x.numel()) * sizeof(S));
        }
        node->backward = [x, w, save_x, batch, ch, h, wd, k, stride, padding, oh, ow, oc, ckk,
                          pixels](const Buffer<S>& g) {
            detail::MatRM<S> dW;
            Buffer<S> dX;
            const bool need_dx = x.requires_grad();
            if (save_x) dW = detail::MatRM<S>::Zero(oc, ckk);
            if (need_dx) dX = Buffer<S>::Zero(x.numel());
            const bool pointwise = (k == 1 && stride == 1);
            detail::MatRM<S> cols, dcols;
            if (!pointwise) {
                if (save_x) cols.resize(ckk, pixels);
                if (need_dx) dcols.resize(ckk, pixels);
            }
            auto W = detail::as_matrix(w.data(), oc, ckk);
            for (std::int64_t b = 0; b < batch; ++b) {
                auto G = Eigen::Map<const detail::MatRM<S>>(g.data() + b * oc * pixels, oc, pixels);
                if (pointwise) {
                    auto X = Eigen::Map<const detail::MatRM<S>>(x.data().data() + b * ch * h * wd, ch,
                                                                pixels);
                    if (save_x) dW.noalias() += G * X.transpose();
                    if (need_dx) {
                        Eigen::Map<detail::MatRM<S>> dXm(dX.data() + b * ch * h * wd, ch, pixels);
                        dXm.noalias() += W.transpose() * G;
                    }
                    continue;
                }
                if (save_x) {
                    detail::im2col(x.data().data() + b * ch * h * wd, ch, h, wd, k, stride, padding, oh,
                                   ow, cols);
                    dW.noalias() += G * cols.transpose();
                }
                if (need_dx) {
                    dcols.noalias() = W.transpose() * G;
                    detail::col2im_add(dcols, ch, h, wd, k, stride, padding, oh, ow,
                                       dX.data() + b * ch * h * wd);
                }
            }
            if (save_x && w.requires_grad()) detail::accumulate(w, detail::as_flat(dW));
            if (need_dx) detail::accumulate(x, dX);
        };
    }
    return y;
}

//==========================================================================
// batch normalization
//==========================================================================

struct BnMode {
    enum class Kind { Train, Eval, BatchStats, AdaptBn };
    Kind kind = Kind::Eval;
    int adaptbn_n = 8;

    static BnMode train() { return {Kind::Train, 0}; }
    static BnMode eval() { return {Kind::Eval, 0}; }
    static BnMode batch_stats() { return {Kind::BatchStats, 0}; }
    static BnMode adaptbn(int n) { return {Kind::AdaptBn, n}; }
};

// Convex mixing of source running statistics with current-batch statistics,
// weighted by pseudo-count n against batch size b. The variance uses the
// same weights as the mean.
template <typename S>
void mix_statistics(const Buffer<S>& source_mean, const Buffer<S>& source_var,
                    const Buffer<S>& batch_mean, const Buffer<S>& batch_var, std::int64_t n,
                    std::int64_t b, Buffer<S>& mixed_mean, Buffer<S>& mixed_var) {
    if (n < 0) throw ConfigError("adaptbn: N must be >= 0");
    if (n + b == 0) throw ConfigError("adaptbn: N + B must be positive");
    const S wn = static_cast<S>(n) / static_cast<S>(n + b);
    const S wb = static_cast<S>(b) / static_cast<S>(n + b);
    mixed_mean = wn * source_mean + wb * batch_mean;
    mixed_var = wn * source_var + wb * batch_var;
}

template <typename S>
Tensor<S> batchnorm(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta,
                    Buffer<S>& running_mean, Buffer<S>& running_var, const BnMode& mode,
                    S eps = static_cast<S>(1e-5), S momentum = static_cast<S>(0.1)) {
    if (x.rank() != 2 && x.rank() != 4)
        throw DimensionError("batchnorm: expected 2-d or 4-d input, got " + shape_str(x.shape()));
    const std::int64_t batch = x.dim(0), ch = x.dim(1);
    const std::int64_t plane = (x.rank() == 4) ? x.dim(2) * x.dim(3) : 1;
    if (gamma.numel() != ch || beta.numel() != ch || running_mean.size() != ch || running_var.size() != ch)
        throw DimensionError("batchnorm: parameter size does not match " + std::to_string(ch) +
                             " channels");

    const std::int64_t count = batch * plane;
    const bool uses_batch_stats =
        mode.kind == BnMode::Kind::Train || mode.kind == BnMode::Kind::BatchStats;
    if (uses_batch_stats && count < 2)
        throw StatisticsError("batchnorm: batch statistics need at least 2 values per channel, got " +
                              std::to_string(count));

    // Per-channel statistics used for normalization.
    Buffer<S> mean(ch), var(ch);
    if (mode.kind == BnMode::Kind::Eval) {
        mean = running_mean;
        var = running_var;
    } else {
        Buffer<S> bm = Buffer<S>::Zero(ch), bv = Buffer<S>::Zero(ch);
        for (std::int64_t b = 0; b < batch; ++b)
            for (std::int64_t c = 0; c < ch; ++c)
                bm[c] += Eigen::Map<const Buffer<S>>(x.data().data() + (b * ch + c) * plane, plane).sum();
        bm /= static_cast<S>(count);
        for (std::int64_t b = 0; b < batch; ++b)
            for (std::int64_t c = 0; c < ch; ++c) {
                auto seg = Eigen::Map<const Buffer<S>>(x.data().data() + (b * ch + c) * plane, plane);
                bv[c] += (seg - bm[c]).square().sum();
            }
        bv /= static_cast<S>(count);  // biased variance

        if (mode.kind == BnMode::Kind::AdaptBn) {
            mix_statistics(running_mean, running_var, bm, bv, mode.adaptbn_n, batch, mean, var);
        } else {
            mean = bm;
            var = bv;
            if (mode.kind == BnMode::Kind::Train) {
                running_mean = (S(1) - momentum) * running_mean + momentum * bm;
                running_var = (S(1) - momentum) * running_var + momentum * bv;
            }
        }
    }

    // Fused per-channel affine. scale = gamma / sqrt(var + eps), so an
    // identity-initialized layer (gamma equal to that same sqrt) maps x to
    // exactly x.
    Buffer<S> invstd(ch), scale(ch), shift(ch);
    for (std::int64_t c = 0; c < ch; ++c) {
        invstd[c] = S(1) / std::sqrt(var[c] + eps);
        scale[c] = gamma.data()[c] / std::sqrt(var[c] + eps);
        shift[c] = beta.data()[c] - mean[c] * scale[c];
    }

    Buffer<S> out(x.numel());
    for (std::int64_t b = 0; b < batch; ++b)
        for (std::int64_t c = 0; c < ch; ++c) {
            auto seg = Eigen::Map<const Buffer<S>>(x.data().data() + (b * ch + c) * plane, plane);
            Eigen::Map<Buffer<S>>(out.data() + (b * ch + c) * plane, plane) = seg * scale[c] + shift[c];
        }

    std::shared_ptr<detail::Node<S>> node;
    Tensor<S> y =
        detail::op_output(x.shape(), std::move(out), "batchnorm", {x, gamma, beta}, &node);
    if (node) {
        const bool affine_trainable = gamma.requires_grad() || beta.requires_grad();
        if (affine_trainable) {
            node->saved.push_back(x);
            ledger().record(gamma.impl(), "batchnorm", static_cast<std::size_t>(x.numel()) * sizeof(S));
        }
        // In batch-stats regimes the input gradient couples through the
        // statistics; mixed/eval statistics are constants of the op.
        const bool stats_from_batch = uses_batch_stats;
        node->backward = [x, gamma, beta, mean, invstd, scale, stats_from_batch, batch, ch, plane,
                          count](const Buffer<S>& g) {
            const bool need_dx = x.requires_grad();
            const bool need_dg = gamma.requires_grad();
            const bool need_db = beta.requires_grad();
            Buffer<S> dgamma, dbeta, dx;
            if (need_dg) dgamma = Buffer<S>::Zero(ch);
            if (need_db) dbeta = Buffer<S>::Zero(ch);
            if (need_dx) dx = Buffer<S>(x.numel());

            for (std::int64_t c = 0; c < ch; ++c) {
                // Gather per-channel sums across the batch.
                S sum_g = 0, sum_gx = 0;
                for (std::int64_t b = 0; b < batch; ++b) {
                    auto gs = Eigen::Map<const Buffer<S>>(g.data() + (b * ch + c) * plane, plane);
                    auto xs = Eigen::Map<const Buffer<S>>(x.data().data() + (b * ch + c) * plane, plane);
                    sum_g += gs.sum();
                    sum_gx += (gs * (xs - mean[c]) * invstd[c]).sum();
                }
                if (need_dg) dgamma[c] = sum_gx;
                if (need_db) dbeta[c] = sum_g;
                if (need_dx) {
                    if (stats_from_batch) {
                        const S mg = sum_g / static_cast<S>(count);
                        const S mgx = sum_gx / static_cast<S>(count);
                        for (std::int64_t b = 0; b < batch; ++b) {
                            auto gs = Eigen::Map<const Buffer<S>>(g.data() + (b * ch + c) * plane, plane);
                            auto xs =
                                Eigen::Map<const Buffer<S>>(x.data().data() + (b * ch + c) * plane, plane);
                            Eigen::Map<Buffer<S>>(dx.data() + (b * ch + c) * plane, plane) =
                                scale[c] * (gs - mg - (xs - mean[c]) * invstd[c] * mgx);
                        }
                    } else {
                        for (std::int64_t b = 0; b < batch; ++b) {
                            auto gs = Eigen::Map<const Buffer<S>>(g.data() + (b * ch + c) * plane, plane);
                            Eigen::Map<Buffer<S>>(dx.data() + (b * ch + c) * plane, plane) = gs * scale[c];
                        }
                    }
                }
            }
            if (need_dx) detail::accumulate(x, dx);
            if (need_dg) detail::accumulate(gamma, dgamma);
            if (need_db) detail::accumulate(beta, dbeta);
        };
    }
    return y;
}

//==========================================================================
// elementwise / pooling
//==========================================================================

template <typename S>
Tensor<S> relu(const Tensor<S>& x) {
    Buffer<S> out = x.data().max(S(0));
    std::shared_ptr<detail::Node<S>> node;
    Tensor<S> y = detail::op_output(x.shape(), std::move(out), "relu", {x}, &node);
    if (node) {
        std::weak_ptr<detail::TensorImpl<S>> wout = y.impl_ptr();
        node->backward = [x, wout](const Buffer<S>& g) {
            auto out_impl = wout.lock();
            if (!out_impl) return;
            detail::accumulate(x, (out_impl->data > S(0)).template cast<S>() * g);
        };
    }
    return y;
}

template <typename S>
Tensor<S> residual_add(const Tensor<S>& a, const Tensor<S>& b) {
    if (a.shape() != b.shape())
        throw DimensionError("residual_add: shape mismatch " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    Buffer<S> out = a.data() + b.data();
    std::shared_ptr<detail::Node<S>> node;
    Tensor<S> y = detail::op_output(a.shape(), std::move(out), "residual_add", {a, b}, &node);
    if (node)
        node->backward = [a, b](const Buffer<S>& g) {
            detail::accumulate(a, g);
            detail::accumulate(b, g);
        };
    return y;
}

template <typename S>
Tensor<S> global_avg_pool(const Tensor<S>& x) {
    if (x.rank() != 4) throw DimensionError("global_avg_pool: expected 4-d input, got " + shape_str(x.shape()));
    const std::int64_t batch = x.dim(0), ch = x.dim(1), plane = x.dim(2) * x.dim(3);
    Buffer<S> out(batch * ch);
    for (std::int64_t i = 0; i < batch * ch; ++i)
        out[i] = Eigen::Map<const Buffer<S>>(x.data().data() + i * plane, plane).mean();
    std::shared_ptr<detail::Node<S>> node;
    Tensor<S> y = detail::op_output({batch, ch}, std::move(out), "global_avg_pool", {x}, &node);
    if (node)
        node->backward = [x, batch, ch, plane](const Buffer<S>& g) {
            Buffer<S> dx(x.numel());
            for (std::int64_t i = 0; i < batch * ch; ++i)
                Eigen::Map<Buffer<S>>(dx.data() + i * plane, plane).setConstant(g[i] / static_cast<S>(plane));
            detail::accumulate(x, dx);
        };
    return y;
}

template <typename S>
Tensor<S> scale(const Tensor<S>& a, S c) {
    Buffer<S> out = a.data() * c;
    std::shared_ptr<detail::Node<S>> node;
    Tensor<S> y = detail::op_output(a.shape(), std::move(out), "scale", {a}, &node);
    if (node) node->backward = [a, c](const Buffer<S>& g) { detail::accumulate(a, g * c); };
    return y;
}

// Dot product with a constant weight vector, reducing to a scalar.
template <typename S>
Tensor<S> weighted_sum(const Tensor<S>& x, const Buffer<S>& weights) {
    if (weights.size() != x.numel())
        throw DimensionError("weighted_sum: " + std::to_string(weights.size()) + " weights for " +
                             std::to_string(x.numel()) + " elements");
    Buffer<S> out(1);
    out[0] = (x.data() * weights).sum();
    std::shared_ptr<detail::Node<S>> node;
    Tensor<S> y = detail::op_output({}, std::move(out), "weighted_sum", {x}, &node);
    if (node) node->backward = [x, weights](const Buffer<S>& g) { detail::accumulate(x, weights * g[0]); };
    return y;
}

template <typename S>
Tensor<S> mean_elems(const Tensor<S>& x) {
    const std::int64_t n = x.numel();
    Buffer<S> out(1);
    out[0] = x.data().mean();
    std::shared_ptr<detail::Node<S>> node;
    Tensor<S> y = detail::op_output({}, std::move(out), "mean", {x}, &node);
    if (node)
        node->backward = [x, n](const Buffer<S>& g) {
            detail::accumulate(x, Buffer<S>::Constant(n, g[0] / static_cast<S>(n)));
        };
    return y;
}

//==========================================================================
// softmax-derived losses
//==========================================================================

namespace detail {

// Row-stable softmax; fills probs and log-probs, returns per-row entropy.
template <typename S>
Buffer<S> softmax_rows(const Buffer<S>& logits, std::int64_t batch, std::int64_t classes,
                       Buffer<S>& probs, Buffer<S>& logp) {
    probs.resize(batch * classes);
    logp.resize(batch * classes);
    Buffer<S> entropy(batch);
    for (std::int64_t i = 0; i < batch; ++i) {
        auto z = Eigen::Map<const Buffer<S>>(logits.data() + i * classes, classes);
        const S m = z.maxCoeff();
        const S lse = m + std::log((z - m).exp().sum());
        auto lp = Eigen::Map<Buffer<S>>(logp.data() + i * classes, classes);
        auto p = Eigen::Map<Buffer<S>>(probs.data() + i * classes, classes);
        lp = z - lse;
        p = lp.exp();
        entropy[i] = -(p * lp).sum();
    }
    return entropy;
}

template <typename S>
void check_logits(const Tensor<S>& logits, const char* op) {
    if (logits.rank() != 2 || logits.dim(1) < 2)
        throw DimensionError(std::string(op) + ": expected logits [B,C] with C >= 2, got " +
                             shape_str(logits.shape()));
    if (!logits.data().isFinite().all()) throw NumericError(std::string(op) + ": non-finite logits");
}

}  // namespace detail

// Per-sample Shannon entropy of softmax(logits), natural log.
template <typename S>
Tensor<S> entropy(const Tensor<S>& logits) {
    detail::check_logits(logits, "entropy");
    const std::int64_t batch = logits.dim(0), classes = logits.dim(1);
    Buffer<S> probs, logp;
    Buffer<S> ent = detail::softmax_rows(logits.data(), batch, classes, probs, logp);

    std::shared_ptr<detail::Node<S>> node;
    Tensor<S> y = detail::op_output({batch}, std::move(ent), "entropy", {logits}, &node);
    if (node) {
        std::weak_ptr<detail::TensorImpl<S>> wout = y.impl_ptr();
        node->backward = [logits, probs, logp, batch, classes, wout](const Buffer<S>& g) {
            auto out_impl = wout.lock();
            if (!out_impl) return;
            Buffer<S> dz(batch * classes);
            for (std::int64_t i = 0; i < batch; ++i) {
                auto p = Eigen::Map<const Buffer<S>>(probs.data() + i * classes, classes);
                auto lp = Eigen::Map<const Buffer<S>>(logp.data() + i * classes, classes);
                Eigen::Map<Buffer<S>>(dz.data() + i * classes, classes) =
                    -g[i] * p * (lp + out_impl->data[i]);
            }
            detail::accumulate(logits, dz);
        };
    }
    return y;
}

// Mean negative log softmax probability of the true class.
template <typename S>
Tensor<S> cross_entropy(const Tensor<S>& logits, const std::vector<std::int64_t>& labels) {
    detail::check_logits(logits, "cross_entropy");
    const std::int64_t batch = logits.dim(0), classes = logits.dim(1);
    if (static_cast<std::int64_t>(labels.size()) != batch)
        throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for batch " +
                             std::to_string(batch));
    for (std::int64_t lbl : labels)
        if (lbl < 0 || lbl >= classes)
            throw IndexError("cross_entropy: label " + std::to_string(lbl) + " out of range [0," +
                             std::to_string(classes) + ")");
    Buffer<S> probs, logp;
    detail::softmax_rows(logits.data(), batch, classes, probs, logp);
    Buffer<S> out(1);
    S acc = 0;
    for (std::int64_t i = 0; i < batch; ++i) acc -= logp[i * classes + labels[static_cast<std::size_t>(i)]];
    out[0] = acc / static_cast<S>(batch);

    std::shared_ptr<detail::Node<S>> node;
    Tensor<S> y = detail::op_output({}, std::move(out), "cross_entropy", {logits}, &node);
    if (node)
        node->backward = [logits, probs, labels, batch, classes](const Buffer<S>& g) {
            Buffer<S> dz = probs;
            for (std::int64_t i = 0; i < batch; ++i) dz[i * classes + labels[static_cast<std::size_t>(i)]] -= S(1);
            detail::accumulate(logits, dz * (g[0] / static_cast<S>(batch)));
        };
    return y;
}

template <typename S>
struct FilteredLoss {
    Tensor<S> loss;
    std::int64_t n_kept = 0;
};

// Entropy minimization gated by a hard threshold: mean over the full batch
// of 1[H_i < h0] * H_i. Samples at or above the threshold contribute zero
// value and exactly zero gradient (the indicator is held fixed).
template <typename S>
FilteredLoss<S> entropy_filtered_mean(const Tensor<S>& logits, S h0) {
    detail::check_logits(logits, "entropy_filtered_mean");
    if (!(h0 > S(0))) throw ConfigError("entropy_filtered_mean: threshold must be positive");
    const std::int64_t batch = logits.dim(0), classes = logits.dim(1);
    Buffer<S> probs, logp;
    Buffer<S> ent = detail::softmax_rows(logits.data(), batch, classes, probs, logp);
    Buffer<S> mask(batch);
    std::int64_t kept = 0;
    S acc = 0;
    for (std::int64_t i = 0; i < batch; ++i) {
        mask[i] = ent[i] < h0 ? S(1) : S(0);
        if (mask[i] > S(0)) {
            acc += ent[i];
            ++kept;
        }
    }
    Buffer<S> out(1);
    out[0] = acc / static_cast<S>(batch);

    std::shared_ptr<detail::Node<S>> node;
    Tensor<S> loss = detail::op_output({}, std::move(out), "entropy_filtered_mean", {logits}, &node);
    if (node)
        node->backward = [logits, probs, logp, ent, mask, batch, classes](const Buffer<S>& g) {
            Buffer<S> dz(batch * classes);
            const S gscale = g[0] / static_cast<S>(batch);
            for (std::int64_t i = 0; i < batch; ++i) {
                auto p = Eigen::Map<const Buffer<S>>(probs.data() + i * classes, classes);
                auto lp = Eigen::Map<const Buffer<S>>(logp.data() + i * classes, classes);
                Eigen::Map<Buffer<S>>(dz.data() + i * classes, classes) =
                    -gscale * mask[i] * p * (lp + ent[i]);
            }
            detail::accumulate(logits, dz);
        };
    return {loss, kept};
}

// Entropy of the batch-mean softmax distribution.
template <typename S>
Tensor<S> batch_mean_softmax_entropy(const Tensor<S>& logits) {
    detail::check_logits(logits, "batch_mean_softmax_entropy");
    const std::int64_t batch = logits.dim(0), classes = logits.dim(1);
    Buffer<S> probs, logp;
    detail::softmax_rows(logits.data(), batch, classes, probs, logp);
    Buffer<S> ybar = Buffer<S>::Zero(classes);
    for (std::int64_t i = 0; i < batch; ++i)
        ybar += Eigen::Map<const Buffer<S>>(probs.data() + i * classes, classes);
    ybar /= static_cast<S>(batch);
    Buffer<S> log_ybar = ybar.max(std::numeric_limits<S>::min()).log();
    Buffer<S> out(1);
    out[0] = -(ybar * log_ybar).sum();

    std::shared_ptr<detail::Node<S>> node;
    Tensor<S> y = detail::op_output({}, std::move(out), "batch_mean_softmax_entropy", {logits}, &node);
    if (node)
        node->backward = [logits, probs, log_ybar, batch, classes](const Buffer<S>& g) {
            Buffer<S> dz(batch * classes);
            const S gscale = -g[0] / static_cast<S>(batch);
            for (std::int64_t i = 0; i < batch; ++i) {
                auto p = Eigen::Map<const Buffer<S>>(probs.data() + i * classes, classes);
                const S dot = (p * log_ybar).sum();
                Eigen::Map<Buffer<S>>(dz.data() + i * classes, classes) = gscale * p * (log_ybar - dot);
            }
            detail::accumulate(logits, dz);
        };
    return y;
}

//==========================================================================
// regression losses against a constant target
//==========================================================================

// Mean absolute error. The target is a constant: no gradient flows into it
// regardless of its requires_grad flag.
template <typename S>
Tensor<S> l1_loss(const Tensor<S>& pred, const Tensor<S>& target) {
    if (pred.shape() != target.shape())
        throw DimensionError("l1_loss: shape mismatch " + shape_str(pred.shape()) + " vs " +
                             shape_str(target.shape()));
    const std::int64_t n = pred.numel();
    Buffer<S> diff = pred.data() - target.data();
    Buffer<S> out(1);
    out[0] = diff.abs().mean();

    std::shared_ptr<detail::Node<S>> node;
    Tensor<S> y = detail::op_output({}, std::move(out), "l1_loss", {pred}, &node);
    if (node)
        node->backward = [pred, diff, n](const Buffer<S>& g) {
            detail::accumulate(pred, diff.sign() * (g[0] / static_cast<S>(n)));
        };
    return y;
}

template <typename S>
Tensor<S> mse_loss(const Tensor<S>& pred, const Tensor<S>& target) {
    if (pred.shape() != target.shape())
        throw DimensionError("mse_loss: shape mismatch " + shape_str(pred.shape()) + " vs " +
                             shape_str(target.shape()));
    const std::int64_t n = pred.numel();
    Buffer<S> diff = pred.data() - target.data();
    Buffer<S> out(1);
    out[0] = diff.square().mean();

    std::shared_ptr<detail::Node<S>> node;
    Tensor<S> y = detail::op_output({}, std::move(out), "mse_loss", {pred}, &node);
    if (node)
        node->backward = [pred, diff, n](const Buffer<S>& g) {
            detail::accumulate(pred, diff * (S(2) * g[0] / static_cast<S>(n)));
        };
    return y;
}

//==========================================================================
// non-differentiable helpers
//==========================================================================

template <typename S>
std::vector<std::int64_t> argmax_rows(const Tensor<S>& logits) {
    const std::int64_t batch = logits.dim(0), classes = logits.dim(1);
    std::vector<std::int64_t> idx(static_cast<std::size_t>(batch));
    for (std::int64_t i = 0; i < batch; ++i) {
        Eigen::Index best;
        Eigen::Map<const Buffer<S>>(logits.data().data() + i * classes, classes).maxCoeff(&best);
        idx[static_cast<std::size_t>(i)] = static_cast<std::int64_t>(best);
    }
    return idx;
}

}  // namespace ecotta

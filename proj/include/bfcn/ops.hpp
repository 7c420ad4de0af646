#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include <Eigen/Core>

#include "bfcn/bitconv.hpp"
#include "bfcn/error.hpp"
#include "bfcn/tensor.hpp"

// Dense training kernels. conv2d here is the im2col + GEMM route used on
// dequantized tensors; conv2d_reference in bitconv.hpp is its oracle.
namespace bfcn::ops {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRow = Eigen::Map<RowMatrix>;
using ConstMapRow = Eigen::Map<const RowMatrix>;

namespace detail {

/// Row-major (taps x locations) patch matrix of one batch item.
inline void im2col(const double* x, const Shape4& in, const ConvGeom& g, std::size_t oh, std::size_t ow,
                   double* cols) {
    const std::size_t P = oh * ow;
    for (std::size_t c = 0; c < g.in_ch; ++c)
        for (std::size_t ky = 0; ky < g.kh; ++ky)
            for (std::size_t kx = 0; kx < g.kw; ++kx) {
                double* row = cols + ((c * g.kh + ky) * g.kw + kx) * P;
                for (std::size_t oy = 0; oy < oh; ++oy) {
                    const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
                    double* dst = row + oy * ow;
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(in.h)) {
                        std::fill(dst, dst + ow, 0.0);
                        continue;
                    }
                    const double* src = x + (c * in.h + static_cast<std::size_t>(iy)) * in.w;
                    for (std::size_t ox = 0; ox < ow; ++ox) {
                        const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
                        dst[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(in.w)) ? 0.0 : src[ix];
                    }
                }
            }
}

inline void col2im(const double* cols, const Shape4& in, const ConvGeom& g, std::size_t oh, std::size_t ow,
                   double* dx) {
    const std::size_t P = oh * ow;
    for (std::size_t c = 0; c < g.in_ch; ++c)
        for (std::size_t ky = 0; ky < g.kh; ++ky)
            for (std::size_t kx = 0; kx < g.kw; ++kx) {
                const double* row = cols + ((c * g.kh + ky) * g.kw + kx) * P;
                for (std::size_t oy = 0; oy < oh; ++oy) {
                    const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(in.h)) continue;
                    double* dst = dx + (c * in.h + static_cast<std::size_t>(iy)) * in.w;
                    for (std::size_t ox = 0; ox < ow; ++ox) {
                        const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
                        if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(in.w)) dst[ix] += row[oy * ow + ox];
                    }
                }
            }
}

} // namespace detail

inline RealTensor conv2d(const RealTensor& x, const RealTensor& w, const ConvGeom& g) {
    g.validate();
    require(x.shape().c == g.in_ch, ErrorKind::shape_mismatch, "conv2d: input channels " + x.shape().str());
    require(w.shape() == g.weight_shape(), ErrorKind::shape_mismatch, "conv2d: weight shape " + w.shape().str());
    const Shape4 in = x.shape(), out = g.out_shape(in);
    const std::size_t K = g.taps(), P = out.h * out.w;
    RealTensor y(out);
    std::vector<double> cols(K * P);
    const ConstMapRow W(w.data(), static_cast<Eigen::Index>(g.out_ch), static_cast<Eigen::Index>(K));
    for (std::size_t n = 0; n < in.n; ++n) {
        detail::im2col(x.data() + n * in.c * in.h * in.w, in, g, out.h, out.w, cols.data());
        const ConstMapRow C(cols.data(), static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(P));
        MapRow Y(y.data() + n * out.c * P, static_cast<Eigen::Index>(out.c), static_cast<Eigen::Index>(P));
        Y.noalias() = W * C;
    }
    return y;
}

/// Gradients of conv2d. dx is skipped when null.
inline void conv2d_backward(const RealTensor& x, const RealTensor& w, const RealTensor& dy, const ConvGeom& g,
                            RealTensor* dx, RealTensor& dw) {
    const Shape4 in = x.shape(), out = g.out_shape(in);
    require_same_shape(dy.shape(), out, "conv2d_backward dy");
    const std::size_t K = g.taps(), P = out.h * out.w;
    dw = RealTensor(w.shape(), 0.0);
    if (dx) *dx = RealTensor(in, 0.0);
    std::vector<double> cols(K * P), dcols(K * P);
    const ConstMapRow W(w.data(), static_cast<Eigen::Index>(g.out_ch), static_cast<Eigen::Index>(K));
    MapRow DW(dw.data(), static_cast<Eigen::Index>(g.out_ch), static_cast<Eigen::Index>(K));
    for (std::size_t n = 0; n < in.n; ++n) {
        detail::im2col(x.data() + n * in.c * in.h * in.w, in, g, out.h, out.w, cols.data());
        const ConstMapRow C(cols.data(), static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(P));
        const ConstMapRow DY(dy.data() + n * out.c * P, static_cast<Eigen::Index>(out.c), static_cast<Eigen::Index>(P));
        DW.noalias() += DY * C.transpose();
        if (dx) {
            MapRow DC(dcols.data(), static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(P));
            DC.noalias() = W.transpose() * DY;
            detail::col2im(dcols.data(), in, g, out.h, out.w, dx->data() + n * in.c * in.h * in.w);
        }
    }
}

inline void add_channel_bias(RealTensor& y, const RealTensor& bias) {
    const Shape4 s = y.shape();
    for (std::size_t n = 0; n < s.n; ++n)
        for (std::size_t c = 0; c < s.c; ++c) {
            double* p = y.data() + (n * s.c + c) * s.plane();
            for (std::size_t i = 0; i < s.plane(); ++i) p[i] += bias[c];
        }
}

inline RealTensor channel_sum(const RealTensor& dy) {
    const Shape4 s = dy.shape();
    RealTensor out({s.c, 1, 1, 1}, 0.0);
    for (std::size_t n = 0; n < s.n; ++n)
        for (std::size_t c = 0; c < s.c; ++c) {
            const double* p = dy.data() + (n * s.c + c) * s.plane();
            double acc = 0;
            for (std::size_t i = 0; i < s.plane(); ++i) acc += p[i];
            out[c] += acc;
        }
    return out;
}

// --- batch normalization ---------------------------------------------------

inline constexpr double bn_eps = 1e-5;
inline constexpr double bn_momentum = 0.1;

struct BatchNormCache {
    RealTensor xhat;
    std::vector<double> inv_std;
};

/// Training-mode batch norm over (N, H, W) per channel. Updates running
/// statistics when both pointers are non-null.
inline RealTensor batch_norm_train(const RealTensor& x, const RealTensor& gamma, const RealTensor& beta,
                                   RealTensor* running_mean, RealTensor* running_var, BatchNormCache& cache) {
    const Shape4 s = x.shape();
    const double m = static_cast<double>(s.n * s.plane());
    RealTensor y(s);
    cache.xhat = RealTensor(s);
    cache.inv_std.assign(s.c, 0.0);
    for (std::size_t c = 0; c < s.c; ++c) {
        double mean = 0;
        for (std::size_t n = 0; n < s.n; ++n) {
            const double* p = x.data() + (n * s.c + c) * s.plane();
            for (std::size_t i = 0; i < s.plane(); ++i) mean += p[i];
        }
        mean /= m;
        double var = 0;
        for (std::size_t n = 0; n < s.n; ++n) {
            const double* p = x.data() + (n * s.c + c) * s.plane();
            for (std::size_t i = 0; i < s.plane(); ++i) var += (p[i] - mean) * (p[i] - mean);
        }
        var /= m;
        const double inv = 1.0 / std::sqrt(var + bn_eps);
        cache.inv_std[c] = inv;
        for (std::size_t n = 0; n < s.n; ++n) {
            const std::size_t off = (n * s.c + c) * s.plane();
            for (std::size_t i = 0; i < s.plane(); ++i) {
                const double xh = (x[off + i] - mean) * inv;
                cache.xhat[off + i] = xh;
                y[off + i] = gamma[c] * xh + beta[c];
            }
        }
        if (running_mean && running_var) {
            const double unbiased = m > 1 ? var * m / (m - 1) : var;
            (*running_mean)[c] = (1 - bn_momentum) * (*running_mean)[c] + bn_momentum * mean;
            (*running_var)[c] = (1 - bn_momentum) * (*running_var)[c] + bn_momentum * unbiased;
        }
    }
    return y;
}

inline RealTensor batch_norm_eval(const RealTensor& x, const RealTensor& gamma, const RealTensor& beta,
                                  const RealTensor& running_mean, const RealTensor& running_var) {
    const Shape4 s = x.shape();
    RealTensor y(s);
    for (std::size_t c = 0; c < s.c; ++c) {
        const double scale = gamma[c] / std::sqrt(running_var[c] + bn_eps);
        const double shift = beta[c] - running_mean[c] * scale;
        for (std::size_t n = 0; n < s.n; ++n) {
            const std::size_t off = (n * s.c + c) * s.plane();
            for (std::size_t i = 0; i < s.plane(); ++i) y[off + i] = x[off + i] * scale + shift;
        }
    }
    return y;
}

/// Backward of batch_norm_train; writes dgamma, dbeta, returns dx.
inline RealTensor batch_norm_backward(const RealTensor& dy, const RealTensor& gamma, const BatchNormCache& cache,
                                      RealTensor& dgamma, RealTensor& dbeta) {
    const Shape4 s = dy.shape();
    const double m = static_cast<double>(s.n * s.plane());
    RealTensor dx(s);
    dgamma = RealTensor({s.c, 1, 1, 1}, 0.0);
    dbeta = RealTensor({s.c, 1, 1, 1}, 0.0);
    for (std::size_t c = 0; c < s.c; ++c) {
        double sum_dy = 0, sum_dy_xhat = 0;
        for (std::size_t n = 0; n < s.n; ++n) {
            const std::size_t off = (n * s.c + c) * s.plane();
            for (std::size_t i = 0; i < s.plane(); ++i) {
                sum_dy += dy[off + i];
                sum_dy_xhat += dy[off + i] * cache.xhat[off + i];
            }
        }
        dgamma[c] = sum_dy_xhat;
        dbeta[c] = sum_dy;
        const double k = gamma[c] * cache.inv_std[c] / m;
        for (std::size_t n = 0; n < s.n; ++n) {
            const std::size_t off = (n * s.c + c) * s.plane();
            for (std::size_t i = 0; i < s.plane(); ++i)
                dx[off + i] = k * (m * dy[off + i] - sum_dy - cache.xhat[off + i] * sum_dy_xhat);
        }
    }
    return dx;
}

// --- elementwise -----------------------------------------------------------

inline RealTensor clamp01(const RealTensor& x) {
    RealTensor y(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = std::clamp(x[i], 0.0, 1.0);
    return y;
}

inline RealTensor add(const RealTensor& a, const RealTensor& b) {
    require_same_shape(a.shape(), b.shape(), "add");
    RealTensor y(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) y[i] = a[i] + b[i];
    return y;
}

inline void accumulate(RealTensor& into, const RealTensor& g) {
    if (into.empty()) {
        into = g;
        return;
    }
    require_same_shape(into.shape(), g.shape(), "accumulate");
    for (std::size_t i = 0; i < g.size(); ++i) into[i] += g[i];
}

// --- resampling ------------------------------------------------------------

inline RealTensor upsample2x(const RealTensor& x) {
    const Shape4 s = x.shape();
    RealTensor y({s.n, s.c, s.h * 2, s.w * 2});
    for (std::size_t nc = 0; nc < s.n * s.c; ++nc)
        for (std::size_t yy = 0; yy < s.h * 2; ++yy)
            for (std::size_t xx = 0; xx < s.w * 2; ++xx)
                y[(nc * s.h * 2 + yy) * s.w * 2 + xx] = x[(nc * s.h + yy / 2) * s.w + xx / 2];
    return y;
}

inline RealTensor upsample2x_backward(const RealTensor& dy) {
    const Shape4 s = dy.shape();
    RealTensor dx({s.n, s.c, s.h / 2, s.w / 2}, 0.0);
    for (std::size_t nc = 0; nc < s.n * s.c; ++nc)
        for (std::size_t yy = 0; yy < s.h; ++yy)
            for (std::size_t xx = 0; xx < s.w; ++xx)
                dx[(nc * (s.h / 2) + yy / 2) * (s.w / 2) + xx / 2] += dy[(nc * s.h + yy) * s.w + xx];
    return dx;
}

/// Bilinear resize with half-pixel centers (edge-clamped), used to bring the
/// finest logits to label resolution at prediction time.
inline RealTensor resize_bilinear(const RealTensor& x, std::size_t oh, std::size_t ow) {
    const Shape4 s = x.shape();
    RealTensor y({s.n, s.c, oh, ow});
    const double sy = static_cast<double>(s.h) / static_cast<double>(oh);
    const double sx = static_cast<double>(s.w) / static_cast<double>(ow);
    for (std::size_t yy = 0; yy < oh; ++yy) {
        const double fy = std::clamp((static_cast<double>(yy) + 0.5) * sy - 0.5, 0.0, static_cast<double>(s.h - 1));
        const auto y0 = static_cast<std::size_t>(fy);
        const std::size_t y1 = std::min(y0 + 1, s.h - 1);
        const double wy = fy - static_cast<double>(y0);
        for (std::size_t xx = 0; xx < ow; ++xx) {
            const double fx = std::clamp((static_cast<double>(xx) + 0.5) * sx - 0.5, 0.0, static_cast<double>(s.w - 1));
            const auto x0 = static_cast<std::size_t>(fx);
            const std::size_t x1 = std::min(x0 + 1, s.w - 1);
            const double wx = fx - static_cast<double>(x0);
            for (std::size_t nc = 0; nc < s.n * s.c; ++nc) {
                const double* p = x.data() + nc * s.h * s.w;
                const double top = p[y0 * s.w + x0] * (1 - wx) + p[y0 * s.w + x1] * wx;
                const double bot = p[y1 * s.w + x0] * (1 - wx) + p[y1 * s.w + x1] * wx;
                y[(nc * oh + yy) * ow + xx] = top * (1 - wy) + bot * wy;
            }
        }
    }
    return y;
}

/// Nearest downsampling of a label map by an integer factor, sampling the
/// centre pixel of each block.
inline LabelMap downsample_labels(const LabelMap& labels, std::size_t factor) {
    const Shape4 s = labels.shape();
    require(s.h % factor == 0 && s.w % factor == 0, ErrorKind::non_divisible_input,
            "label map not divisible by " + std::to_string(factor));
    LabelMap out({s.n, s.c, s.h / factor, s.w / factor});
    const std::size_t off = factor / 2;
    for (std::size_t n = 0; n < s.n; ++n)
        for (std::size_t c = 0; c < s.c; ++c)
            for (std::size_t y = 0; y < s.h / factor; ++y)
                for (std::size_t x = 0; x < s.w / factor; ++x)
                    out.at(n, c, y, x) = labels.at(n, c, y * factor + off, x * factor + off);
    return out;
}

/// Per-pixel argmax over channels.
inline LabelMap argmax_channels(const RealTensor& logits) {
    const Shape4 s = logits.shape();
    LabelMap out({s.n, 1, s.h, s.w});
    for (std::size_t n = 0; n < s.n; ++n)
        for (std::size_t p = 0; p < s.plane(); ++p) {
            std::size_t best = 0;
            double bv = logits.at(n, 0, 0, p);
            for (std::size_t c = 1; c < s.c; ++c) {
                const double v = logits.at(n, c, 0, p);
                if (v > bv) {
                    bv = v;
                    best = c;
                }
            }
            out.at(n, 0, 0, p) = static_cast<std::uint8_t>(best);
        }
    return out;
}

} // namespace bfcn::ops

#pragma once

#include <cmath>
#include <cstdint>

#include "bfcn/bitconv.hpp"

namespace testutil {

/// Integer convolution of unsigned codes, the oracle for the bit kernels.
inline bfcn::IntAccumulatorMap int_conv(const bfcn::CodeTensor& a, const bfcn::CodeTensor& w, const bfcn::ConvGeom& g) {
    const auto in = a.shape();
    const auto out = g.out_shape(in);
    bfcn::IntAccumulatorMap y(out, 0);
    for (std::size_t n = 0; n < out.n; ++n)
        for (std::size_t o = 0; o < out.c; ++o)
            for (std::size_t oy = 0; oy < out.h; ++oy)
                for (std::size_t ox = 0; ox < out.w; ++ox) {
                    std::int64_t s = 0;
                    for (std::size_t c = 0; c < g.in_ch; ++c)
                        for (std::size_t ky = 0; ky < g.kh; ++ky)
                            for (std::size_t kx = 0; kx < g.kw; ++kx) {
                                const long iy = long(oy * g.stride + ky) - long(g.pad);
                                const long ix = long(ox * g.stride + kx) - long(g.pad);
                                if (iy < 0 || ix < 0 || iy >= long(in.h) || ix >= long(in.w)) continue;
                                s += std::int64_t(a.at(n, c, std::size_t(iy), std::size_t(ix))) * w.at(o, c, ky, kx);
                            }
                    y.at(n, o, oy, ox) = s;
                }
    return y;
}

/// Σ |a·w| over each output's receptive field, the magnitude that bounds the
/// rounding error of any summation order of the window products.
template <class T>
bfcn::Tensor<T> abs_window_mass(const bfcn::Tensor<T>& a, const bfcn::Tensor<T>& w, const bfcn::ConvGeom& g) {
    bfcn::Tensor<T> aa = a, ww = w;
    for (auto& v : aa) v = std::abs(v);
    for (auto& v : ww) v = std::abs(v);
    return bfcn::conv2d_reference(aa, ww, g);
}

/// Distance |x - y| in units of the ulp of `scale` (at least the smallest normal).
template <class T>
double ulps_relative_to(T x, T y, T scale) {
    const T s = std::max(std::abs(scale), std::numeric_limits<T>::min());
    const T ulp = std::nextafter(s, std::numeric_limits<T>::infinity()) - s;
    return static_cast<double>(std::abs(x - y) / ulp);
}

} // namespace testutil

#pragma once

#include <algorithm>
#include <atomic>
#include <bit>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "bfcn/bitpack.hpp"
#include "bfcn/error.hpp"
#include "bfcn/quantize.hpp"
#include "bfcn/tensor.hpp"

namespace bfcn {

struct ConvGeom {
    std::size_t in_ch = 1, out_ch = 1;
    std::size_t kh = 1, kw = 1;
    std::size_t stride = 1;
    std::size_t pad = 0;

    std::size_t taps() const noexcept { return in_ch * kh * kw; }
    std::size_t out_h(std::size_t h) const noexcept { return (h + 2 * pad - kh) / stride + 1; }
    std::size_t out_w(std::size_t w) const noexcept { return (w + 2 * pad - kw) / stride + 1; }
    Shape4 weight_shape() const noexcept { return {out_ch, in_ch, kh, kw}; }
    Shape4 out_shape(const Shape4& in) const noexcept { return {in.n, out_ch, out_h(in.h), out_w(in.w)}; }

    void validate() const {
        require(in_ch > 0 && out_ch > 0 && kh > 0 && kw > 0 && stride > 0, ErrorKind::shape_mismatch,
                "conv geometry extents must be positive");
        require(pad < std::max(kh, kw), ErrorKind::shape_mismatch, "conv padding must be below kernel extent");
    }

    friend bool operator==(const ConvGeom&, const ConvGeom&) = default;
};

using IntAccumulatorMap = Tensor<std::int64_t>;

/// Number of 1-bit x 1-bit convolution passes an m-bit x n-bit convolution needs.
inline int kernel_count(int k_w, int k_a) {
    require_bit_width(k_w);
    require_bit_width(k_a);
    return k_w * k_a;
}

/// Process-wide instrumentation of the bit kernels.
struct KernelCounters {
    std::atomic<std::uint64_t> binary_passes{0};
    std::atomic<std::uint64_t> bit_dots{0};

    void reset() noexcept {
        binary_passes = 0;
        bit_dots = 0;
    }
};

inline KernelCounters& kernel_counters() {
    static KernelCounters counters;
    return counters;
}

namespace detail {

inline std::uint64_t low_bits(std::size_t count) noexcept {
    return count >= word_bits ? ~std::uint64_t{0} : (std::uint64_t{1} << count) - 1;
}

/// Read `count` (<= 64) bits starting at bit `pos`.
inline std::uint64_t read_bits(std::span<const std::uint64_t> src, std::size_t pos, std::size_t count) noexcept {
    const std::size_t w = pos / word_bits, off = pos % word_bits;
    std::uint64_t v = src[w] >> off;
    if (off != 0 && off + count > word_bits) v |= src[w + 1] << (word_bits - off);
    return v & low_bits(count);
}

/// OR `count` (<= 64) bits of v into dst at bit `pos`.
inline void or_bits(std::uint64_t* dst, std::size_t pos, std::uint64_t v, std::size_t count) noexcept {
    const std::size_t w = pos / word_bits, off = pos % word_bits;
    dst[w] |= v << off;
    if (off != 0 && off + count > word_bits) dst[w + 1] |= v >> (word_bits - off);
}

inline void copy_bit_range(std::span<const std::uint64_t> src, std::size_t src_pos, std::uint64_t* dst,
                           std::size_t dst_pos, std::size_t count) noexcept {
    while (count > 0) {
        const std::size_t n = std::min(count, word_bits);
        or_bits(dst, dst_pos, read_bits(src, src_pos, n), n);
        src_pos += n;
        dst_pos += n;
        count -= n;
    }
}

/// Word layout of one receptive field. Narrow inputs pack the taps densely
/// in (c, ky, kx) order. Inputs with at least 32 channels give every (ky, kx)
/// tap its own ceil(C/64) words with bit c for channel c, so a window row is
/// a concatenation of whole pixel words.
struct WindowLayout {
    bool channel_words = false;
    std::size_t pixel_words = 0;
    std::size_t row_words = 0;

    static WindowLayout of(const ConvGeom& g) {
        WindowLayout l;
        l.channel_words = g.in_ch >= 32;
        l.pixel_words = words_for(g.in_ch);
        l.row_words = l.channel_words ? g.kh * g.kw * l.pixel_words : words_for(g.taps());
        return l;
    }
};

/// Receptive-field windows of one activation plane, one word-aligned row
/// per output location (n, oy, ox), laid out as WindowLayout::of(g).
struct WindowMatrix {
    std::size_t locations = 0;
    std::size_t row_words = 0;
    std::vector<std::uint64_t> words;

    std::span<const std::uint64_t> row(std::size_t loc) const noexcept {
        return {words.data() + loc * row_words, row_words};
    }
};

/// (n, y, x) -> pixel_words words holding bit c of every channel.
inline std::vector<std::uint64_t> channel_major(const BitPlane& plane, const Shape4& in, std::size_t pixel_words) {
    std::vector<std::uint64_t> pix(in.n * in.h * in.w * pixel_words, 0);
    const auto src = plane.words();
    const std::size_t hw = in.h * in.w;
    for (std::size_t n = 0; n < in.n; ++n)
        for (std::size_t c = 0; c < in.c; ++c) {
            const std::size_t base = (n * in.c + c) * hw;
            const std::uint64_t bit = std::uint64_t{1} << (c % word_bits);
            const std::size_t word = c / word_bits;
            for (std::size_t p = 0; p < hw;) {
                const std::size_t pos = base + p;
                const std::size_t n_bits = std::min(word_bits - pos % word_bits, hw - p);
                std::uint64_t v = (src[pos / word_bits] >> (pos % word_bits)) & low_bits(n_bits);
                while (v != 0) {
                    const auto b = static_cast<std::size_t>(std::countr_zero(v));
                    pix[(n * hw + p + b) * pixel_words + word] |= bit;
                    v &= v - 1;
                }
                p += n_bits;
            }
        }
    return pix;
}

inline WindowMatrix extract_windows(const BitPlane& plane, const Shape4& in, const ConvGeom& g) {
    const auto layout = WindowLayout::of(g);
    const std::size_t oh = g.out_h(in.h), ow = g.out_w(in.w);
    WindowMatrix m;
    m.locations = in.n * oh * ow;
    m.row_words = layout.row_words;
    m.words.assign(m.locations * m.row_words, 0);
    const auto ih = static_cast<std::ptrdiff_t>(in.h), iw = static_cast<std::ptrdiff_t>(in.w);
    std::vector<std::uint64_t> pix;
    if (layout.channel_words) pix = channel_major(plane, in, layout.pixel_words);
    const auto src = plane.words();
    std::size_t loc = 0;
    for (std::size_t n = 0; n < in.n; ++n)
        for (std::size_t oy = 0; oy < oh; ++oy)
            for (std::size_t ox = 0; ox < ow; ++ox, ++loc) {
                std::uint64_t* dst = m.words.data() + loc * m.row_words;
                const auto x0 = static_cast<std::ptrdiff_t>(ox * g.stride) - static_cast<std::ptrdiff_t>(g.pad);
                const std::ptrdiff_t kx_lo = std::max<std::ptrdiff_t>(0, -x0);
                const std::ptrdiff_t kx_hi = std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(g.kw), iw - x0);
                if (kx_hi <= kx_lo) continue;
                for (std::size_t ky = 0; ky < g.kh; ++ky) {
                    const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
                    if (iy < 0 || iy >= ih) continue;
                    const std::size_t row_pos = (n * in.h + static_cast<std::size_t>(iy)) * in.w;
                    if (layout.channel_words) {
                        const std::size_t count = static_cast<std::size_t>(kx_hi - kx_lo) * layout.pixel_words;
                        const std::uint64_t* from =
                            pix.data() + (row_pos + static_cast<std::size_t>(x0 + kx_lo)) * layout.pixel_words;
                        std::copy(from, from + count,
                                  dst + (ky * g.kw + static_cast<std::size_t>(kx_lo)) * layout.pixel_words);
                        continue;
                    }
                    for (std::size_t c = 0; c < g.in_ch; ++c) {
                        const std::size_t src_pos =
                            ((n * in.c + c) * in.h + static_cast<std::size_t>(iy)) * in.w +
                            static_cast<std::size_t>(x0 + kx_lo);
                        const std::size_t dst_pos = (c * g.kh + ky) * g.kw + static_cast<std::size_t>(kx_lo);
                        copy_bit_range(src, src_pos, dst, dst_pos, static_cast<std::size_t>(kx_hi - kx_lo));
                    }
                }
            }
    return m;
}

/// Filters of one weight plane in the same layout, one row per output channel.
inline WindowMatrix extract_filters(const BitPlane& plane, const ConvGeom& g) {
    const auto layout = WindowLayout::of(g);
    WindowMatrix m;
    m.locations = g.out_ch;
    m.row_words = layout.row_words;
    m.words.assign(m.locations * m.row_words, 0);
    if (layout.channel_words) {
        // The (out, in, kh, kw) weight layout is an NCHW tensor with one
        // "image" per filter, so the pixel-word transpose yields the rows.
        m.words = channel_major(plane, {g.out_ch, g.in_ch, g.kh, g.kw}, layout.pixel_words);
        return m;
    }
    for (std::size_t o = 0; o < g.out_ch; ++o)
        copy_bit_range(plane.words(), o * g.taps(), m.words.data() + o * m.row_words, 0, g.taps());
    return m;
}

inline void check_bitconv_inputs(const BitPlaneTensor& acts, const BitPlaneTensor& weights, const ConvGeom& g) {
    g.validate();
    require(acts.shape().c == g.in_ch, ErrorKind::shape_mismatch, "activation channels do not match geometry");
    require(weights.shape() == g.weight_shape(), ErrorKind::shape_mismatch,
            "weight shape " + weights.shape().str() + " does not match geometry " + g.weight_shape().str());
    require(acts.shape().h + 2 * g.pad >= g.kh && acts.shape().w + 2 * g.pad >= g.kw, ErrorKind::shape_mismatch,
            "kernel larger than padded input");
    const long double bound = static_cast<long double>(g.taps()) * code_levels(acts.k()) * code_levels(weights.k());
    require(bound <= 0x1p62L, ErrorKind::accumulator_overflow_risk,
            "accumulator bound exceeds 2^62 for " + std::to_string(g.taps()) + " taps");
}

inline constexpr std::size_t location_tile = 32;

/// Transpose a [location][out_ch] buffer into an (N, out_ch, H', W') map.
inline IntAccumulatorMap to_nchw(const std::vector<std::int64_t>& lo, const Shape4& out) {
    IntAccumulatorMap acc(out);
    const std::size_t hw = out.h * out.w;
    std::int64_t* dst = acc.data();
    for (std::size_t n = 0; n < out.n; ++n) {
        const std::int64_t* src = lo.data() + n * hw * out.c;
        std::int64_t* plane = dst + n * out.c * hw;
        constexpr std::size_t block = 16;
        for (std::size_t p0 = 0; p0 < hw; p0 += block)
            for (std::size_t o0 = 0; o0 < out.c; o0 += block) {
                const std::size_t p1 = std::min(hw, p0 + block), o1 = std::min(out.c, o0 + block);
                for (std::size_t o = o0; o < o1; ++o)
                    for (std::size_t p = p0; p < p1; ++p) plane[o * hw + p] = src[p * out.c + o];
            }
    }
    return acc;
}

} // namespace detail

/// m-bit x n-bit convolution of unsigned codes as a sum of 2^(i+j)-weighted
/// binary passes: acc = Σ_i Σ_j 2^(i+j) · popcount(act_plane_i window & weight_plane_j filter).
/// Padding taps carry activation code 0.
inline IntAccumulatorMap bitconv2d(const BitPlaneTensor& acts, const BitPlaneTensor& weights, const ConvGeom& g) {
    detail::check_bitconv_inputs(acts, weights, g);
    const Shape4 out = g.out_shape(acts.shape());
    const std::size_t locs = out.n * out.h * out.w;

    std::vector<detail::WindowMatrix> windows;
    windows.reserve(static_cast<std::size_t>(acts.k()));
    for (const auto& p : acts.planes()) windows.push_back(detail::extract_windows(p, acts.shape(), g));
    std::vector<detail::WindowMatrix> filters;
    filters.reserve(static_cast<std::size_t>(weights.k()));
    for (const auto& p : weights.planes()) filters.push_back(detail::extract_filters(p, g));

    // Every (i, j) pass runs over one tile of locations before the next tile,
    // so the tile's accumulators stay in cache.
    std::vector<std::int64_t> lo(locs * g.out_ch, 0);
    for (std::size_t t0 = 0; t0 < locs; t0 += detail::location_tile) {
        const std::size_t t1 = std::min(locs, t0 + detail::location_tile);
        for (int i = 0; i < acts.k(); ++i)
            for (int j = 0; j < weights.k(); ++j) {
                const auto& win = windows[static_cast<std::size_t>(i)];
                const auto& filt = filters[static_cast<std::size_t>(j)];
                const int shift = i + j;
                for (std::size_t loc = t0; loc < t1; ++loc) {
                    const auto a = win.row(loc);
                    std::int64_t* dst = lo.data() + loc * g.out_ch;
                    for (std::size_t o = 0; o < g.out_ch; ++o) dst[o] += popcount_and(a, filt.row(o)) << shift;
                }
            }
    }
    auto& counters = kernel_counters();
    const auto passes = static_cast<std::uint64_t>(acts.k()) * static_cast<std::uint64_t>(weights.k());
    counters.binary_passes.fetch_add(passes, std::memory_order_relaxed);
    counters.bit_dots.fetch_add(passes * locs * g.out_ch, std::memory_order_relaxed);
    return detail::to_nchw(lo, out);
}

/// 1-bit weight path: weight bit 1 is +1 and 0 is -1. Returns Σ a·s over
/// the window, with each activation plane reduced through the signed
/// xor-popcount identity: Σ a_t s_t = (bit_dot_signed(a, s) + Σ s_t) / 2.
inline IntAccumulatorMap bitconv2d_signed(const BitPlaneTensor& acts, const BitPlaneTensor& weights,
                                          const ConvGeom& g) {
    require(weights.k() == 1, ErrorKind::bit_width_mismatch, "signed path requires 1-bit weights");
    detail::check_bitconv_inputs(acts, weights, g);
    const Shape4 out = g.out_shape(acts.shape());
    const std::size_t locs = out.n * out.h * out.w;
    const auto n = static_cast<std::int64_t>(g.taps());

    const auto filt = detail::extract_filters(weights.plane(0), g);
    std::vector<std::int64_t> sign_sums(g.out_ch);
    for (std::size_t o = 0; o < g.out_ch; ++o) sign_sums[o] = 2 * popcount_words(filt.row(o)) - n;

    std::vector<std::int64_t> lo(locs * g.out_ch, 0);
    auto& counters = kernel_counters();
    for (int i = 0; i < acts.k(); ++i) {
        const auto win = detail::extract_windows(acts.plane(i), acts.shape(), g);
        for (std::size_t loc = 0; loc < locs; ++loc) {
            const auto a = win.row(loc);
            std::int64_t* dst = lo.data() + loc * g.out_ch;
            for (std::size_t o = 0; o < g.out_ch; ++o) {
                const std::int64_t signed_dot = n - 2 * popcount_xor(a, filt.row(o));
                dst[o] += ((signed_dot + sign_sums[o]) / 2) << i;
            }
        }
        counters.binary_passes.fetch_add(1, std::memory_order_relaxed);
        counters.bit_dots.fetch_add(locs * g.out_ch, std::memory_order_relaxed);
    }
    return detail::to_nchw(lo, out);
}

/// Σ of activation codes over each receptive field, shape (N, 1, H', W').
inline IntAccumulatorMap act_window_sums(const BitPlaneTensor& acts, const ConvGeom& g) {
    g.validate();
    const Shape4 out = g.out_shape(acts.shape());
    IntAccumulatorMap sums({out.n, 1, out.h, out.w}, 0);
    for (int i = 0; i < acts.k(); ++i) {
        const auto win = detail::extract_windows(acts.plane(i), acts.shape(), g);
        for (std::size_t loc = 0; loc < win.locations; ++loc) sums[loc] += popcount_words(win.row(loc)) << i;
    }
    return sums;
}

/// Σ of weight codes per filter, shape (out_ch, 1, 1, 1).
inline IntAccumulatorMap weight_code_sums(const BitPlaneTensor& weights, const ConvGeom& g) {
    IntAccumulatorMap sums({g.out_ch, 1, 1, 1}, 0);
    for (int j = 0; j < weights.k(); ++j) {
        const auto filt = detail::extract_filters(weights.plane(j), g);
        for (std::size_t o = 0; o < g.out_ch; ++o) sums[o] += popcount_words(filt.row(o)) << j;
    }
    return sums;
}

/// Map the integer code accumulator back to reals:
/// a_scale · (w_scale · acc - Σ_window act_codes). The weight zero point
/// (2^k_w - 1)/2 folds into the activation window sum because a_zero = 0.
/// Evaluated through the exact integer numerator 2·acc - (2^k_w - 1)·S over
/// (2^k_a - 1)(2^k_w - 1), so each output is rounded once.
template <class T>
Tensor<T> dequantize_conv(const IntAccumulatorMap& acc, const QuantSpec& spec, const IntAccumulatorMap& act_sums,
                          const IntAccumulatorMap& w_sums, std::size_t n_taps) {
    require(spec.weights_quantized() && spec.acts_quantized(), ErrorKind::bit_width_mismatch,
            "dequantize_conv needs quantized weights and activations");
    const Shape4 s = acc.shape();
    require(act_sums.shape() == Shape4{s.n, 1, s.h, s.w}, ErrorKind::shape_mismatch, "activation window sums shape");
    require(w_sums.shape() == Shape4{s.c, 1, 1, 1}, ErrorKind::shape_mismatch, "weight code sums shape");
    const std::int64_t lw = code_levels(spec.k_w), la = code_levels(spec.k_a);
    for (std::size_t o = 0; o < s.c; ++o)
        require(w_sums[o] >= 0 && w_sums[o] <= static_cast<std::int64_t>(n_taps) * lw, ErrorKind::shape_mismatch,
                "weight code sum out of range for n_taps");
    const long double denom = static_cast<long double>(la * lw);
    Tensor<T> out(s);
    const std::size_t hw = s.h * s.w;
    for (std::size_t n = 0; n < s.n; ++n)
        for (std::size_t o = 0; o < s.c; ++o)
            for (std::size_t p = 0; p < hw; ++p) {
                const std::int64_t numer = 2 * acc.at(n, o, 0, p) - lw * act_sums.at(n, 0, 0, p);
                out.at(n, o, 0, p) = static_cast<T>(static_cast<long double>(numer) / denom);
            }
    return out;
}

/// Direct convolution: for each (n, o, y, x) sum over (c, ky, kx). Zero
/// padding. Accumulates in long double.
template <class T>
Tensor<T> conv2d_reference(const Tensor<T>& acts, const Tensor<T>& weights, const ConvGeom& g) {
    g.validate();
    const Shape4 in = acts.shape();
    require(in.c == g.in_ch, ErrorKind::shape_mismatch, "activation channels do not match geometry");
    require(weights.shape() == g.weight_shape(), ErrorKind::shape_mismatch, "weight shape does not match geometry");
    const Shape4 out = g.out_shape(in);
    Tensor<T> y(out);
    for (std::size_t n = 0; n < out.n; ++n)
        for (std::size_t o = 0; o < out.c; ++o)
            for (std::size_t oy = 0; oy < out.h; ++oy)
                for (std::size_t ox = 0; ox < out.w; ++ox) {
                    long double sum = 0;
                    for (std::size_t c = 0; c < g.in_ch; ++c)
                        for (std::size_t ky = 0; ky < g.kh; ++ky)
                            for (std::size_t kx = 0; kx < g.kw; ++kx) {
                                const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                                                static_cast<std::ptrdiff_t>(g.pad);
                                const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                                                static_cast<std::ptrdiff_t>(g.pad);
                                if (iy < 0 || ix < 0 || iy >= static_cast<std::ptrdiff_t>(in.h) ||
                                    ix >= static_cast<std::ptrdiff_t>(in.w))
                                    continue;
                                sum += static_cast<long double>(acts.at(n, c, static_cast<std::size_t>(iy),
                                                                        static_cast<std::size_t>(ix))) *
                                       static_cast<long double>(weights.at(o, c, ky, kx));
                            }
                    y.at(n, o, oy, ox) = static_cast<T>(sum);
                }
    return y;
}

/// quantize -> pack -> bitconv2d -> dequantize for real-valued inputs.
/// Activations are clamped to [0,1], weights to [-1,1].
template <class T>
Tensor<T> bit_quantized_conv(const Tensor<T>& acts, const Tensor<T>& weights, const QuantSpec& spec,
                             const ConvGeom& g) {
    const auto qa = quantize_activations(acts, spec.k_a);
    const auto qw = quantize_weights(weights, spec.k_w);
    const auto pa = pack(qa.codes, spec.k_a);
    const auto pw = pack(qw.codes, spec.k_w);
    return dequantize_conv<T>(bitconv2d(pa, pw, g), spec, act_window_sums(pa, g), weight_code_sums(pw, g), g.taps());
}

} // namespace bfcn

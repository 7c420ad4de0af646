#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>

#include "bfcn/bitpack.hpp"
#include "bfcn/error.hpp"
#include "bfcn/tensor.hpp"

namespace bfcn {

/// Bit-width value meaning "not quantized".
inline constexpr int full_precision = 32;

constexpr bool is_full_precision(int k) noexcept { return k == full_precision; }

/// Number of quantization steps for a k-bit code, 2^k - 1.
constexpr int code_levels(int k) noexcept { return (1 << k) - 1; }

inline void require_layer_bit_width(int k) {
    require((k >= 1 && k <= 8) || k == full_precision, ErrorKind::bad_bit_width,
            "bit-width " + std::to_string(k) + " must be in [1,8] or 32");
}

/// Per-layer quantization parameters. Weights dequantize as
/// code * w_scale - 1 = w_scale * (code - w_zero); activations as code * a_scale.
struct QuantSpec {
    int k_w = full_precision;
    int k_a = full_precision;
    double w_scale = 1.0;
    double w_zero = 0.0;
    double a_scale = 1.0;
    int a_zero = 0;

    static QuantSpec make(int k_w, int k_a) {
        require_layer_bit_width(k_w);
        require_layer_bit_width(k_a);
        QuantSpec q;
        q.k_w = k_w;
        q.k_a = k_a;
        if (!is_full_precision(k_w)) {
            q.w_scale = 2.0 / code_levels(k_w);
            q.w_zero = code_levels(k_w) / 2.0;
        }
        if (!is_full_precision(k_a)) q.a_scale = 1.0 / code_levels(k_a);
        return q;
    }

    bool weights_quantized() const noexcept { return !is_full_precision(k_w); }
    bool acts_quantized() const noexcept { return !is_full_precision(k_a); }

    friend bool operator==(const QuantSpec&, const QuantSpec&) = default;
};

template <class T>
struct Quantized {
    std::uint8_t code;
    T value;
};

/// Uniform k-bit quantizer on [0,1]: code = round((2^k-1)·clamp(x)), ties away
/// from zero.
template <class T>
Quantized<T> quantize_unit(T x, int k) {
    require_bit_width(k);
    const int levels = code_levels(k);
    const T clamped = std::clamp(x, T(0), T(1));
    const auto code = static_cast<std::uint8_t>(std::round(clamped * static_cast<T>(levels)));
    return {code, static_cast<T>(code) / static_cast<T>(levels)};
}

template <class T>
T dequantize_act_code(unsigned code, int k) {
    return static_cast<T>(code) / static_cast<T>(code_levels(k));
}

/// code * (2 / (2^k-1)) - 1, evaluated as one correctly rounded division.
template <class T>
T dequantize_weight_code(unsigned code, int k) {
    const int levels = code_levels(k);
    return static_cast<T>(2 * static_cast<int>(code) - levels) / static_cast<T>(levels);
}

template <class T>
struct QuantizedTensor {
    CodeTensor codes;
    Tensor<T> values;
    int k = 1;
};

/// Weights: clamp to [-1,1], map to [0,1], quantize. k = 1 yields {-1,+1}.
template <class T>
QuantizedTensor<T> quantize_weights(const Tensor<T>& w, int k) {
    require_bit_width(k);
    QuantizedTensor<T> out{CodeTensor(w.shape()), Tensor<T>(w.shape()), k};
    for (std::size_t i = 0; i < w.size(); ++i) {
        const T u = (std::clamp(w[i], T(-1), T(1)) + T(1)) / T(2);
        const auto q = quantize_unit(u, k);
        out.codes[i] = q.code;
        out.values[i] = dequantize_weight_code<T>(q.code, k);
    }
    return out;
}

/// Activations: clamp to [0,1] (the clamp is the layer nonlinearity), quantize.
template <class T>
QuantizedTensor<T> quantize_activations(const Tensor<T>& a, int k) {
    require_bit_width(k);
    QuantizedTensor<T> out{CodeTensor(a.shape()), Tensor<T>(a.shape()), k};
    for (std::size_t i = 0; i < a.size(); ++i) {
        const auto q = quantize_unit(a[i], k);
        out.codes[i] = q.code;
        out.values[i] = q.value;
    }
    return out;
}

/// Straight-through estimator: pass the upstream gradient where the input was
/// inside [lo, hi], zero elsewhere.
template <class T>
Tensor<T> ste_grad(const Tensor<T>& upstream, const Tensor<T>& preclamp_input, T lo, T hi) {
    require_same_shape(upstream.shape(), preclamp_input.shape(), "ste_grad");
    Tensor<T> out(upstream.shape());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const T x = preclamp_input[i];
        out[i] = (x >= lo && x <= hi) ? upstream[i] : T(0);
    }
    return out;
}

/// Error model used for bit-width allocation analysis: 1 / 2^k.
inline double quantization_error_bound(int k) {
    require(k >= 1, ErrorKind::bad_bit_width, "bit-width must be >= 1");
    return std::ldexp(1.0, -k);
}

/// Worst-case rounding error of quantize_unit: 1 / (2 (2^k - 1)).
inline double quantizer_max_error(int k) {
    require_bit_width(k);
    return 0.5 / code_levels(k);
}

} // namespace bfcn

#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "bfcn/tensor.hpp"

namespace testutil {

// Test-side randomness uses the standard distributions on purpose: the
// library's own Rng should not generate the data it is checked against.
inline bfcn::CodeTensor random_codes(bfcn::Shape4 s, int k, std::mt19937& g) {
    std::uniform_int_distribution<int> d(0, (1 << k) - 1);
    bfcn::CodeTensor t(s);
    for (auto& v : t) v = static_cast<std::uint8_t>(d(g));
    return t;
}

inline bfcn::RealTensor random_real(bfcn::Shape4 s, double lo, double hi, std::mt19937& g) {
    std::uniform_real_distribution<double> d(lo, hi);
    bfcn::RealTensor t(s);
    for (auto& v : t) v = d(g);
    return t;
}

inline std::vector<bool> random_bits(std::size_t n, std::mt19937& g) {
    std::bernoulli_distribution d(0.5);
    std::vector<bool> b(n);
    for (std::size_t i = 0; i < n; ++i) b[i] = d(g);
    return b;
}

} // namespace testutil

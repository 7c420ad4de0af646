#include <gtest/gtest.h>

#include <sstream>

#include "bfcn/bitpack.hpp"
#include "helpers.hpp"

using namespace bfcn;

namespace {

std::int64_t signed_dot(const std::vector<bool>& x, const std::vector<bool>& y) {
    std::int64_t s = 0;
    for (std::size_t i = 0; i < x.size(); ++i) s += (x[i] ? 1 : -1) * (y[i] ? 1 : -1);
    return s;
}

std::int64_t unsigned_dot(const std::vector<bool>& x, const std::vector<bool>& y) {
    std::int64_t s = 0;
    for (std::size_t i = 0; i < x.size(); ++i) s += x[i] && y[i];
    return s;
}

} // namespace

TEST(Pack, ZeroCodesGiveZeroPlanes) {
    auto t = pack(CodeTensor({1, 1, 1, 4}, 0), 2);
    ASSERT_EQ(t.k(), 2);
    EXPECT_EQ(plane_popcount(t.plane(0)), 0);
    EXPECT_EQ(plane_popcount(t.plane(1)), 0);
}

TEST(Pack, ThreeSetsBothPlanes) {
    auto t = pack(CodeTensor({1, 1, 1, 1}, 3), 2);
    EXPECT_TRUE(t.plane(0).get(0));
    EXPECT_TRUE(t.plane(1).get(0));
}

TEST(Pack, ExhaustiveFourBitRoundTrip) {
    CodeTensor c({1, 1, 1, 16});
    for (int i = 0; i < 16; ++i) c[i] = static_cast<std::uint8_t>(i);
    EXPECT_EQ(unpack(pack(c, 4)), c);
}

TEST(Pack, ExhaustiveSmallTensorsAllWidths) {
    // every code tensor of length 3 for k <= 3, plus all length-2 tensors at k = 4
    for (int k = 1; k <= 4; ++k) {
        const int levels = 1 << k;
        const int len = k <= 3 ? 3 : 2;
        int total = 1;
        for (int i = 0; i < len; ++i) total *= levels;
        for (int v = 0; v < total; ++v) {
            CodeTensor c({1, 1, 1, static_cast<std::size_t>(len)});
            int r = v;
            for (int i = 0; i < len; ++i, r /= levels) c[i] = static_cast<std::uint8_t>(r % levels);
            ASSERT_EQ(unpack(pack(c, k)), c);
        }
    }
}

TEST(Pack, PlaneBitsMatchCodeBits) {
    std::mt19937 g(7);
    auto c = testutil::random_codes({2, 3, 5, 7}, 5, g);
    auto t = pack(c, 5);
    for (int i = 0; i < 5; ++i)
        for (std::size_t p = 0; p < c.size(); ++p) ASSERT_EQ(t.plane(i).get(p), ((c[p] >> i) & 1) != 0);
}

TEST(Pack, RandomEightBitRoundTrip) {
    std::mt19937 g(11);
    for (int k = 1; k <= 8; ++k) {
        auto c = testutil::random_codes({1, 1, 1, 1000}, k, g);
        auto u = unpack(pack(c, k));
        for (std::size_t p = 0; p < c.size(); ++p) {
            unsigned direct = 0;
            for (int i = 0; i < k; ++i) direct |= ((c[p] >> i) & 1U) << i;
            ASSERT_EQ(u[p], direct);
        }
    }
}

TEST(Pack, RejectsOverflowAndBadWidth) {
    try {
        pack(CodeTensor({1, 1, 1, 1}, 4), 2);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::code_overflow);
    }
    try {
        pack(CodeTensor({1, 1, 1, 1}, 0), 9);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::bad_bit_width);
    }
    EXPECT_THROW(pack(CodeTensor({1, 1, 1, 1}, 0), 0), Error);
}

TEST(Unpack, DefinitionExample) {
    BitPlaneTensor t({1, 1, 1, 2}, 2);
    t.plane(0).set(0, true);
    t.plane(1).set(1, true);
    auto c = unpack(t);
    EXPECT_EQ(c[0], 1);
    EXPECT_EQ(c[1], 2);
    EXPECT_EQ(unpack(BitPlaneTensor({1, 1, 2, 2}, 3)), CodeTensor({1, 1, 2, 2}, 0));
}

TEST(BitDot, SignedIdentical) {
    std::mt19937 g(1);
    auto x = BitPlane::from_bits(testutil::random_bits(64, g));
    EXPECT_EQ(bit_dot_signed(x, x), 64);
    EXPECT_EQ(bit_dot_signed(x, x.complement()), -64);
}

TEST(BitDot, SignedSmallExample) {
    auto x = BitPlane::from_bits(std::vector<bool>{true, true, false});
    auto y = BitPlane::from_bits(std::vector<bool>{true, false, false});
    EXPECT_EQ(bit_dot_signed(x, y), 1);
}

TEST(BitDot, RandomAgainstElementLoop) {
    std::mt19937 g(3);
    for (std::size_t n : {1u, 63u, 64u, 65u, 777u, 1000u}) {
        auto a = testutil::random_bits(n, g), b = testutil::random_bits(n, g);
        auto x = BitPlane::from_bits(a), y = BitPlane::from_bits(b);
        EXPECT_EQ(bit_dot_signed(x, y), signed_dot(a, b)) << n;
        EXPECT_EQ(bit_dot_unsigned(x, y), unsigned_dot(a, b)) << n;
        // xnor form of the signed identity
        EXPECT_EQ(bit_dot_signed(x, y), 2 * bit_dot_unsigned(xnor_planes(x, y), BitPlane::ones(n)) - std::int64_t(n));
        EXPECT_EQ(bit_dot_signed(x, x.complement()), -std::int64_t(n));
    }
}

TEST(BitDot, UnsignedTrivial) {
    EXPECT_EQ(bit_dot_unsigned(BitPlane::ones(100), BitPlane::ones(100)), 100);
    std::mt19937 g(5);
    EXPECT_EQ(bit_dot_unsigned(BitPlane(100), BitPlane::from_bits(testutil::random_bits(100, g))), 0);
}

TEST(BitDot, LengthMismatch) {
    try {
        bit_dot_signed(BitPlane(3), BitPlane(4));
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::length_mismatch);
    }
    EXPECT_THROW(bit_dot_unsigned(BitPlane(3), BitPlane(4)), Error);
}

TEST(Popcount, Examples) {
    EXPECT_EQ(plane_popcount(BitPlane(64)), 0);
    std::vector<bool> alt(64);
    for (std::size_t i = 0; i < 64; ++i) alt[i] = i % 2;
    EXPECT_EQ(plane_popcount(BitPlane::from_bits(alt)), 32);
    std::mt19937 g(9);
    auto b = testutil::random_bits(1000, g);
    std::int64_t n = 0;
    for (bool v : b) n += v;
    EXPECT_EQ(plane_popcount(BitPlane::from_bits(b)), n);
}

TEST(BitPlaneInvariants, TailBitsStayZero) {
    for (std::size_t n : {1u, 5u, 64u, 100u, 129u}) {
        auto ones = BitPlane::ones(n);
        EXPECT_EQ(plane_popcount(ones), std::int64_t(n));
        EXPECT_EQ(plane_popcount(BitPlane(n).complement()), std::int64_t(n));
        // construction from raw words masks the tail
        BitPlane raw(n, std::vector<std::uint64_t>(words_for(n), ~std::uint64_t{0}));
        EXPECT_EQ(plane_popcount(raw), std::int64_t(n));
        EXPECT_EQ(raw.words().back() & ~tail_mask(n), 0u);
    }
}

TEST(Btsr, RoundTripAndHeader) {
    std::mt19937 g(13);
    auto c = testutil::random_codes({2, 3, 4, 5}, 3, g);
    auto t = pack(c, 3);
    std::stringstream ss;
    write_btsr(ss, t);
    const std::string bytes = ss.str();
    ASSERT_EQ(bytes.substr(0, 4), "BTSR");
    EXPECT_EQ(static_cast<unsigned char>(bytes[4]), 1);
    EXPECT_EQ(static_cast<unsigned char>(bytes[5]), 3);
    EXPECT_EQ(static_cast<unsigned char>(bytes[6]), 2); // N, little-endian u32
    EXPECT_EQ(bytes.size(), 4 + 1 + 1 + 16 + 3 * words_for(120) * 8);
    EXPECT_EQ(read_btsr(ss), t);
}

TEST(Btsr, FloatPayloadRoundTrip) {
    RealTensor t({1, 2, 2, 2});
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = 0.25 * static_cast<double>(i) - 1.0;
    std::stringstream ss;
    write_btsr_float(ss, t);
    EXPECT_EQ(read_btsr_float(ss), t);
}

TEST(Btsr, RejectsGarbage) {
    std::stringstream bad("NOPE");
    try {
        read_btsr(bad);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::format_error);
    }
    std::stringstream truncated;
    write_btsr(truncated, pack(CodeTensor({1, 1, 1, 70}, 1), 1));
    std::string s = truncated.str();
    std::stringstream cut(s.substr(0, s.size() - 3));
    EXPECT_THROW(read_btsr(cut), Error);
}

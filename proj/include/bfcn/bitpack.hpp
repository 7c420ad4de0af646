#pragma once

#include <bit>
#include <cstdint>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "bfcn/error.hpp"
#include "bfcn/tensor.hpp"

namespace bfcn {

inline constexpr std::size_t word_bits = 64;

constexpr std::size_t words_for(std::size_t bits) noexcept { return (bits + word_bits - 1) / word_bits; }

/// Mask selecting the valid bits of the last word of a `len`-bit sequence.
constexpr std::uint64_t tail_mask(std::size_t len) noexcept {
    const std::size_t rem = len % word_bits;
    return rem == 0 ? ~std::uint64_t{0} : (std::uint64_t{1} << rem) - 1;
}

inline void require_bit_width(int k) {
    require(k >= 1 && k <= 8, ErrorKind::bad_bit_width, "bit-width " + std::to_string(k) + " not in [1,8]");
}

/// A packed bit vector: bit p lives in words[p / 64] at position p % 64.
/// Bits at positions >= len are always zero.
class BitPlane {
public:
    BitPlane() = default;
    explicit BitPlane(std::size_t len) : len_(len), words_(words_for(len), 0) {}
    BitPlane(std::size_t len, std::vector<std::uint64_t> words) : len_(len), words_(std::move(words)) {
        require(words_.size() == words_for(len_), ErrorKind::length_mismatch, "word count does not match length");
        if (!words_.empty()) words_.back() &= tail_mask(len_);
    }

    static BitPlane ones(std::size_t len) {
        BitPlane p(len);
        std::fill(p.words_.begin(), p.words_.end(), ~std::uint64_t{0});
        if (!p.words_.empty()) p.words_.back() &= tail_mask(len);
        return p;
    }

    template <class Range>
    static BitPlane from_bits(const Range& bits) {
        BitPlane p(std::size(bits));
        std::size_t i = 0;
        for (auto b : bits) p.set(i++, static_cast<bool>(b));
        return p;
    }

    std::size_t len() const noexcept { return len_; }
    std::span<const std::uint64_t> words() const noexcept { return words_; }

    bool get(std::size_t p) const noexcept { return (words_[p / word_bits] >> (p % word_bits)) & 1U; }
    void set(std::size_t p, bool v) noexcept {
        const std::uint64_t bit = std::uint64_t{1} << (p % word_bits);
        if (v)
            words_[p / word_bits] |= bit;
        else
            words_[p / word_bits] &= ~bit;
    }

    BitPlane complement() const {
        BitPlane out(len_);
        for (std::size_t i = 0; i < words_.size(); ++i) out.words_[i] = ~words_[i];
        if (!out.words_.empty()) out.words_.back() &= tail_mask(len_);
        return out;
    }

    friend bool operator==(const BitPlane&, const BitPlane&) = default;

private:
    std::size_t len_ = 0;
    std::vector<std::uint64_t> words_;
};

inline std::int64_t popcount_words(std::span<const std::uint64_t> a) noexcept {
    std::int64_t n = 0;
    for (auto w : a) n += std::popcount(w);
    return n;
}

inline std::int64_t popcount_and(std::span<const std::uint64_t> a, std::span<const std::uint64_t> b) noexcept {
    std::int64_t n = 0;
    for (std::size_t i = 0; i < a.size(); ++i) n += std::popcount(a[i] & b[i]);
    return n;
}

inline std::int64_t popcount_xor(std::span<const std::uint64_t> a, std::span<const std::uint64_t> b) noexcept {
    std::int64_t n = 0;
    for (std::size_t i = 0; i < a.size(); ++i) n += std::popcount(a[i] ^ b[i]);
    return n;
}

inline std::int64_t plane_popcount(const BitPlane& x) noexcept { return popcount_words(x.words()); }

/// Σ x_i·y_i over {0,1} values.
inline std::int64_t bit_dot_unsigned(const BitPlane& x, const BitPlane& y) {
    require(x.len() == y.len(), ErrorKind::length_mismatch, "bit_dot_unsigned: plane lengths differ");
    return popcount_and(x.words(), y.words());
}

/// Σ x_i·y_i where a set bit encodes +1 and a clear bit -1:
/// n - 2·popcount(x xor y). Tail bits are zero in both operands so they never
/// contribute to the xor.
inline std::int64_t bit_dot_signed(const BitPlane& x, const BitPlane& y) {
    require(x.len() == y.len(), ErrorKind::length_mismatch, "bit_dot_signed: plane lengths differ");
    return static_cast<std::int64_t>(x.len()) - 2 * popcount_xor(x.words(), y.words());
}

/// Bitwise xnor restricted to the first len positions.
inline BitPlane xnor_planes(const BitPlane& x, const BitPlane& y) {
    require(x.len() == y.len(), ErrorKind::length_mismatch, "xnor_planes: plane lengths differ");
    std::vector<std::uint64_t> w(x.words().size());
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = ~(x.words()[i] ^ y.words()[i]);
    return BitPlane(x.len(), std::move(w));
}

/// k-bit unsigned codes stored as k bit planes; plane i holds bit i of every
/// element in row-major NCHW order.
class BitPlaneTensor {
public:
    BitPlaneTensor() = default;
    BitPlaneTensor(Shape4 shape, int k) : shape_(shape), k_(k) {
        require_bit_width(k);
        planes_.assign(static_cast<std::size_t>(k), BitPlane(shape.count()));
    }
    BitPlaneTensor(Shape4 shape, int k, std::vector<BitPlane> planes)
        : shape_(shape), k_(k), planes_(std::move(planes)) {
        require_bit_width(k);
        require(planes_.size() == static_cast<std::size_t>(k), ErrorKind::length_mismatch,
                "plane count does not match bit-width");
        for (const auto& p : planes_)
            require(p.len() == shape.count(), ErrorKind::length_mismatch, "plane length does not match shape");
    }

    const Shape4& shape() const noexcept { return shape_; }
    int k() const noexcept { return k_; }
    const BitPlane& plane(int i) const { return planes_.at(static_cast<std::size_t>(i)); }
    BitPlane& plane(int i) { return planes_.at(static_cast<std::size_t>(i)); }
    std::span<const BitPlane> planes() const noexcept { return planes_; }

    friend bool operator==(const BitPlaneTensor&, const BitPlaneTensor&) = default;

private:
    Shape4 shape_{};
    int k_ = 1;
    std::vector<BitPlane> planes_;
};

inline BitPlaneTensor pack(const CodeTensor& codes, int k) {
    require_bit_width(k);
    const std::size_t len = codes.size();
    const unsigned limit = 1U << k;
    std::vector<std::vector<std::uint64_t>> words(static_cast<std::size_t>(k),
                                                  std::vector<std::uint64_t>(words_for(len), 0));
    for (std::size_t p = 0; p < len; ++p) {
        const unsigned code = codes[p];
        require(code < limit, ErrorKind::code_overflow,
                "code " + std::to_string(code) + " at " + std::to_string(p) + " needs more than " +
                    std::to_string(k) + " bits");
        const std::uint64_t bit = std::uint64_t{1} << (p % word_bits);
        for (int i = 0; i < k; ++i)
            if ((code >> i) & 1U) words[static_cast<std::size_t>(i)][p / word_bits] |= bit;
    }
    std::vector<BitPlane> planes;
    planes.reserve(words.size());
    for (auto& w : words) planes.emplace_back(len, std::move(w));
    return BitPlaneTensor(codes.shape(), k, std::move(planes));
}

inline CodeTensor unpack(const BitPlaneTensor& t) {
    CodeTensor codes(t.shape());
    for (int i = 0; i < t.k(); ++i) {
        const auto words = t.plane(i).words();
        for (std::size_t p = 0; p < codes.size(); ++p)
            codes[p] = static_cast<std::uint8_t>(codes[p] | (((words[p / word_bits] >> (p % word_bits)) & 1U) << i));
    }
    return codes;
}

// ---------------------------------------------------------------------------
// BTSR container: "BTSR", u8 version, u8 k, u32 x4 shape, then k planes of
// ceil(count/64) little-endian u64 words. k = 255 marks a raw little-endian
// float32 payload of `count` values instead of planes.

inline constexpr std::uint8_t btsr_version = 1;
inline constexpr std::uint8_t btsr_float_k = 255;

namespace io {

template <class U>
void write_le(std::ostream& os, U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) os.put(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xFF));
}

template <class U>
U read_le(std::istream& is) {
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) {
        const int ch = is.get();
        require(ch != std::char_traits<char>::eof(), ErrorKind::format_error, "unexpected end of stream");
        v |= static_cast<std::uint64_t>(static_cast<unsigned char>(ch)) << (8 * i);
    }
    return static_cast<U>(v);
}

inline void write_string(std::ostream& os, const std::string& s) {
    write_le<std::uint16_t>(os, static_cast<std::uint16_t>(s.size()));
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string(std::istream& is) {
    const auto n = read_le<std::uint16_t>(is);
    std::string s(n, '\0');
    is.read(s.data(), n);
    require(is.gcount() == n, ErrorKind::format_error, "truncated string");
    return s;
}

inline void write_magic(std::ostream& os, std::string_view magic) { os.write(magic.data(), static_cast<std::streamsize>(magic.size())); }

inline void expect_magic(std::istream& is, std::string_view magic) {
    std::string got(magic.size(), '\0');
    is.read(got.data(), static_cast<std::streamsize>(magic.size()));
    require(is.gcount() == static_cast<std::streamsize>(magic.size()) && got == magic, ErrorKind::format_error,
            "bad magic, expected " + std::string(magic));
}

} // namespace io

struct BtsrHeader {
    std::uint8_t k = 0;
    Shape4 shape{};
};

inline void write_btsr_header(std::ostream& os, std::uint8_t k, const Shape4& s) {
    io::write_magic(os, "BTSR");
    io::write_le<std::uint8_t>(os, btsr_version);
    io::write_le<std::uint8_t>(os, k);
    for (std::size_t d : {s.n, s.c, s.h, s.w}) io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(d));
}

inline BtsrHeader read_btsr_header(std::istream& is) {
    io::expect_magic(is, "BTSR");
    const auto version = io::read_le<std::uint8_t>(is);
    require(version == btsr_version, ErrorKind::format_error, "unsupported BTSR version " + std::to_string(version));
    BtsrHeader h;
    h.k = io::read_le<std::uint8_t>(is);
    h.shape.n = io::read_le<std::uint32_t>(is);
    h.shape.c = io::read_le<std::uint32_t>(is);
    h.shape.h = io::read_le<std::uint32_t>(is);
    h.shape.w = io::read_le<std::uint32_t>(is);
    return h;
}

inline void write_btsr(std::ostream& os, const BitPlaneTensor& t) {
    write_btsr_header(os, static_cast<std::uint8_t>(t.k()), t.shape());
    for (const auto& p : t.planes())
        for (auto w : p.words()) io::write_le<std::uint64_t>(os, w);
}

inline BitPlaneTensor read_btsr_planes(std::istream& is, const BtsrHeader& h) {
    require(h.k >= 1 && h.k <= 8, ErrorKind::format_error, "BTSR bit-width " + std::to_string(h.k) + " invalid");
    const std::size_t len = h.shape.count();
    std::vector<BitPlane> planes;
    for (int i = 0; i < h.k; ++i) {
        std::vector<std::uint64_t> words(words_for(len));
        for (auto& w : words) w = io::read_le<std::uint64_t>(is);
        require(words.empty() || (words.back() & ~tail_mask(len)) == 0, ErrorKind::format_error,
                "BTSR plane has bits set beyond its length");
        planes.emplace_back(len, std::move(words));
    }
    return BitPlaneTensor(h.shape, h.k, std::move(planes));
}

inline BitPlaneTensor read_btsr(std::istream& is) { return read_btsr_planes(is, read_btsr_header(is)); }

inline void write_btsr_float(std::ostream& os, const RealTensor& t) {
    write_btsr_header(os, btsr_float_k, t.shape());
    for (double v : t) io::write_le<std::uint32_t>(os, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
}

inline RealTensor read_btsr_float_payload(std::istream& is, const BtsrHeader& h) {
    require(h.k == btsr_float_k, ErrorKind::format_error, "expected a float32 BTSR block");
    RealTensor t(h.shape);
    for (auto& v : t) v = static_cast<double>(std::bit_cast<float>(io::read_le<std::uint32_t>(is)));
    return t;
}

inline RealTensor read_btsr_float(std::istream& is) { return read_btsr_float_payload(is, read_btsr_header(is)); }

} // namespace bfcn

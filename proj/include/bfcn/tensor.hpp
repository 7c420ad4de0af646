#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "bfcn/error.hpp"

namespace bfcn {

/// NCHW extent. All tensors in the library are 4-D; lower-rank data uses
/// unit dimensions.
struct Shape4 {
    std::size_t n = 0, c = 0, h = 0, w = 0;

    constexpr std::size_t count() const noexcept { return n * c * h * w; }
    constexpr std::size_t plane() const noexcept { return h * w; }
    friend constexpr bool operator==(const Shape4&, const Shape4&) = default;

    std::string str() const {
        return "(" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(h) + "," +
               std::to_string(w) + ")";
    }
};

template <class T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;
    explicit Tensor(Shape4 shape, T fill = T{}) : shape_(shape), data_(shape.count(), fill) {}
    Tensor(Shape4 shape, std::vector<T> data) : shape_(shape), data_(std::move(data)) {
        require(data_.size() == shape_.count(), ErrorKind::shape_mismatch,
                "tensor data size does not match shape " + shape_.str());
    }

    const Shape4& shape() const noexcept { return shape_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    T* data() noexcept { return data_.data(); }
    const T* data() const noexcept { return data_.data(); }
    std::vector<T>& values() noexcept { return data_; }
    const std::vector<T>& values() const noexcept { return data_; }

    T& operator[](std::size_t i) noexcept { return data_[i]; }
    const T& operator[](std::size_t i) const noexcept { return data_[i]; }

    std::size_t index(std::size_t n, std::size_t c, std::size_t y, std::size_t x) const noexcept {
        return ((n * shape_.c + c) * shape_.h + y) * shape_.w + x;
    }
    T& at(std::size_t n, std::size_t c, std::size_t y, std::size_t x) noexcept {
        return data_[index(n, c, y, x)];
    }
    const T& at(std::size_t n, std::size_t c, std::size_t y, std::size_t x) const noexcept {
        return data_[index(n, c, y, x)];
    }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    auto begin() noexcept { return data_.begin(); }
    auto end() noexcept { return data_.end(); }
    auto begin() const noexcept { return data_.begin(); }
    auto end() const noexcept { return data_.end(); }

    friend bool operator==(const Tensor&, const Tensor&) = default;

private:
    Shape4 shape_{};
    std::vector<T> data_;
};

using RealTensor = Tensor<double>;
using CodeTensor = Tensor<std::uint8_t>;
using LabelMap = Tensor<std::uint8_t>;

inline constexpr std::uint8_t ignore_label = 255;

inline void require_same_shape(const Shape4& a, const Shape4& b, const char* what) {
    require(a == b, ErrorKind::shape_mismatch, std::string(what) + ": " + a.str() + " vs " + b.str());
}

/// Slice batch item `n` out of a tensor (keeps a unit batch dimension).
template <class T>
Tensor<T> batch_item(const Tensor<T>& t, std::size_t n) {
    const Shape4 s = t.shape();
    Tensor<T> out({1, s.c, s.h, s.w});
    const std::size_t stride = s.c * s.h * s.w;
    std::copy_n(t.data() + n * stride, stride, out.data());
    return out;
}

/// Stack equally shaped single-item tensors along the batch axis.
template <class T>
Tensor<T> stack_batch(const std::vector<const Tensor<T>*>& items) {
    require(!items.empty(), ErrorKind::shape_mismatch, "stack_batch: no items");
    const Shape4 s = items.front()->shape();
    Tensor<T> out({items.size() * s.n, s.c, s.h, s.w});
    std::size_t off = 0;
    for (const auto* item : items) {
        require_same_shape(item->shape(), s, "stack_batch");
        std::copy(item->begin(), item->end(), out.data() + off);
        off += item->size();
    }
    return out;
}

} // namespace bfcn

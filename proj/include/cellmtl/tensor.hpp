#pragma once

#include <cstddef>
#include <initializer_list>
#include <new>
#include <span>
#include <string>
#include <vector>

namespace cellmtl {

using Shape = std::vector<std::size_t>;

/// 64-byte aligned allocation. Vectorized reductions peel unaligned heads, so without a fixed
/// alignment the summation order (and the last bits of results) would depend on the heap address.
template <typename T>
struct AlignedAllocator {
    using value_type = T;
    static constexpr std::align_val_t alignment{64};

    AlignedAllocator() = default;
    template <typename U>
    AlignedAllocator(const AlignedAllocator<U>&) noexcept { }

    T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), alignment)); }
    void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, alignment); }

    template <typename U>
    bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

template <typename T>
using Storage = std::vector<T, AlignedAllocator<T>>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Dense row-major n-dimensional array. Value type; copies are deep.
template <typename T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;
    explicit Tensor(Shape shape, T fill = T(0));
    Tensor(Shape shape, Storage<T> data);
    Tensor(Shape shape, const std::vector<T>& data) : Tensor(std::move(shape), Storage<T>(data.begin(), data.end())) { }
    Tensor(Shape shape, std::initializer_list<T> data) : Tensor(std::move(shape), Storage<T>(data)) { }

    static Tensor scalar(T v) { return Tensor(Shape{1}, Storage<T>{v}); }

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    /// Size of axis `axis`; negative values count from the back.
    std::size_t dim(int axis) const;
    std::size_t numel() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    std::span<T> span() { return data_; }
    std::span<const T> span() const { return data_; }
    Storage<T>& storage() { return data_; }
    const Storage<T>& storage() const { return data_; }

    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }

    /// Multi-index access (bounds-checked); intended for tests and small setup code.
    T& at(std::initializer_list<std::size_t> idx);
    const T& at(std::initializer_list<std::size_t> idx) const;

    Tensor reshaped(Shape shape) const;
    void fill(T v);
    bool all_finite() const;

    template <typename U>
    Tensor<U> cast() const
    {
        Storage<U> out(data_.begin(), data_.end());
        return Tensor<U>(shape_, std::move(out));
    }

private:
    std::size_t offset(std::initializer_list<std::size_t> idx) const;

    Shape shape_;
    Storage<T> data_;
};

extern template class Tensor<float>;
extern template class Tensor<double>;

} // namespace cellmtl

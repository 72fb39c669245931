#include "cellmtl/tensor.hpp"

#include "cellmtl/errors.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace cellmtl {

std::size_t shape_numel(const Shape& shape)
{
    std::size_t n = 1;
    for (auto d : shape)
        n *= d;
    return n;
}

std::string shape_str(const Shape& shape)
{
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i)
        os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill)
  : shape_(std::move(shape)), data_(shape_numel(shape_), fill)
{ }

template <typename T>
Tensor<T>::Tensor(Shape shape, Storage<T> data)
  : shape_(std::move(shape)), data_(std::move(data))
{
    if (data_.size() != shape_numel(shape_))
        throw DimensionError("tensor data has " + std::to_string(data_.size()) +
                             " elements, shape " + shape_str(shape_) + " needs " +
                             std::to_string(shape_numel(shape_)));
}

template <typename T>
std::size_t Tensor<T>::dim(int axis) const
{
    const int r = static_cast<int>(shape_.size());
    const int a = axis < 0 ? axis + r : axis;
    if (a < 0 || a >= r)
        throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(shape_));
    return shape_[a];
}

template <typename T>
std::size_t Tensor<T>::offset(std::initializer_list<std::size_t> idx) const
{
    if (idx.size() != shape_.size())
        throw DimensionError("index rank " + std::to_string(idx.size()) + " != tensor rank " +
                             std::to_string(shape_.size()));
    std::size_t off = 0;
    std::size_t a = 0;
    for (auto i : idx) {
        if (i >= shape_[a])
            throw DimensionError("index " + std::to_string(i) + " out of range on axis " + std::to_string(a));
        off = off * shape_[a] + i;
        ++a;
    }
    return off;
}

template <typename T>
T& Tensor<T>::at(std::initializer_list<std::size_t> idx)
{
    return data_[offset(idx)];
}

template <typename T>
const T& Tensor<T>::at(std::initializer_list<std::size_t> idx) const
{
    return data_[offset(idx)];
}

template <typename T>
Tensor<T> Tensor<T>::reshaped(Shape shape) const
{
    if (shape_numel(shape) != numel())
        throw DimensionError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    return Tensor(std::move(shape), data_);
}

template <typename T>
void Tensor<T>::fill(T v)
{
    std::fill(data_.begin(), data_.end(), v);
}

template <typename T>
bool Tensor<T>::all_finite() const
{
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
}

template class Tensor<float>;
template class Tensor<double>;

} // namespace cellmtl

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "dmbp/errors.hpp"

namespace dmbp {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape)
{
    if (shape.empty()) return 0;
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape)
{
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

// Dense row-major tensor. A default-constructed tensor is "absent" (no
// shape, no data); every other tensor has positive extents.
template <typename T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;

    explicit Tensor(Shape shape, T fill = T{0})
      : m_shape(std::move(shape))
    {
        validate_shape();
        m_data.assign(shape_size(m_shape), fill);
    }

    Tensor(Shape shape, std::vector<T> data)
      : m_shape(std::move(shape))
      , m_data(std::move(data))
    {
        validate_shape();
        if (m_data.size() != shape_size(m_shape))
            throw DimensionError("tensor data length " + std::to_string(m_data.size())
                                 + " does not match shape " + shape_str(m_shape));
    }

    Tensor(Shape shape, std::initializer_list<T> data)
      : Tensor(std::move(shape), std::vector<T>(data))
    { }

    static Tensor vector(std::initializer_list<T> data)
    {
        return Tensor({data.size()}, std::vector<T>(data));
    }

    const Shape& shape() const { return m_shape; }
    std::size_t rank() const { return m_shape.size(); }
    std::size_t extent(std::size_t axis) const { return m_shape.at(axis); }
    std::size_t size() const { return m_data.size(); }
    bool empty() const { return m_data.empty(); }

    T* data() { return m_data.data(); }
    const T* data() const { return m_data.data(); }
    std::span<T> values() { return m_data; }
    std::span<const T> values() const { return m_data; }
    std::vector<T>& storage() { return m_data; }
    const std::vector<T>& storage() const { return m_data; }

    T& operator[](std::size_t i) { return m_data[i]; }
    const T& operator[](std::size_t i) const { return m_data[i]; }

    T& operator()(std::size_t i, std::size_t j) { return m_data[i * m_shape[1] + j]; }
    const T& operator()(std::size_t i, std::size_t j) const { return m_data[i * m_shape[1] + j]; }

    T& operator()(std::size_t c, std::size_t i, std::size_t j)
    { return m_data[(c * m_shape[1] + i) * m_shape[2] + j]; }
    const T& operator()(std::size_t c, std::size_t i, std::size_t j) const
    { return m_data[(c * m_shape[1] + i) * m_shape[2] + j]; }

    T& operator()(std::size_t o, std::size_t c, std::size_t i, std::size_t j)
    { return m_data[((o * m_shape[1] + c) * m_shape[2] + i) * m_shape[3] + j]; }
    const T& operator()(std::size_t o, std::size_t c, std::size_t i, std::size_t j) const
    { return m_data[((o * m_shape[1] + c) * m_shape[2] + i) * m_shape[3] + j]; }

    // Same data, new shape of equal element count.
    Tensor reshaped(Shape shape) const
    {
        if (shape_size(shape) != size())
            throw DimensionError("cannot reshape " + shape_str(m_shape) + " to " + shape_str(shape));
        return Tensor(std::move(shape), m_data);
    }

    template <typename U>
    Tensor<U> cast() const
    {
        if (empty()) return {};
        std::vector<U> out(m_data.begin(), m_data.end());
        return Tensor<U>(m_shape, std::move(out));
    }

    bool all_finite() const
    {
        return std::all_of(m_data.begin(), m_data.end(), [](T v) { return std::isfinite(v); });
    }

    // Boundary check used by loaders and public entry points.
    void require_finite(const std::string& what) const
    {
        if (!all_finite()) throw NumericError(what + " contains non-finite values");
    }

    Tensor& operator+=(const Tensor& other)
    {
        require_same_shape(other, "+=");
        for (std::size_t i = 0; i < m_data.size(); ++i) m_data[i] += other.m_data[i];
        return *this;
    }

    Tensor& operator-=(const Tensor& other)
    {
        require_same_shape(other, "-=");
        for (std::size_t i = 0; i < m_data.size(); ++i) m_data[i] -= other.m_data[i];
        return *this;
    }

    // Elementwise (Hadamard) product in place.
    Tensor& operator*=(const Tensor& other)
    {
        require_same_shape(other, "*=");
        for (std::size_t i = 0; i < m_data.size(); ++i) m_data[i] *= other.m_data[i];
        return *this;
    }

    Tensor& operator*=(T scale)
    {
        for (auto& v : m_data) v *= scale;
        return *this;
    }

    void require_same_shape(const Tensor& other, const char* op) const
    {
        if (m_shape != other.m_shape)
            throw DimensionError(std::string("shape mismatch in ") + op + ": " + shape_str(m_shape)
                                 + " vs " + shape_str(other.m_shape));
    }

    friend bool operator==(const Tensor& a, const Tensor& b) = default;

private:
    void validate_shape() const
    {
        if (m_shape.empty()) throw DimensionError("tensor shape must have at least one axis");
        for (auto e : m_shape)
            if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(m_shape));
    }

    Shape m_shape;
    std::vector<T> m_data;
};

template <typename T>
Tensor<T> operator+(Tensor<T> a, const Tensor<T>& b) { return a += b; }

template <typename T>
Tensor<T> operator-(Tensor<T> a, const Tensor<T>& b) { return a -= b; }

template <typename T>
Tensor<T> hadamard(Tensor<T> a, const Tensor<T>& b) { return a *= b; }

// Sum of elementwise products, accumulated in double.
template <typename T>
double dot(const Tensor<T>& a, const Tensor<T>& b)
{
    if (a.size() != b.size())
        throw DimensionError("dot: size mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += static_cast<double>(a[i]) * static_cast<double>(b[i]);
    return acc;
}

template <typename T>
double sum(const Tensor<T>& a)
{
    double acc = 0.0;
    for (auto v : a.values()) acc += static_cast<double>(v);
    return acc;
}

template <typename T>
T max_abs(const Tensor<T>& a)
{
    T m{0};
    for (auto v : a.values()) m = std::max(m, static_cast<T>(std::abs(v)));
    return m;
}

} // namespace dmbp

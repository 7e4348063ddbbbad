#pragma once

#include <algorithm>
#include <cstddef>
#include <limits>
#include <type_traits>
#include <vector>

#include "dmbp/tensor.hpp"

namespace dmbp {

// Accumulator for reductions: 32-bit storage sums in double.
template <typename T>
using accum_t = std::conditional_t<(sizeof(T) < sizeof(double)), double, T>;

struct Conv2dGeometry {
    std::size_t stride_h = 1;
    std::size_t stride_w = 1;
    std::size_t pad_h = 0;
    std::size_t pad_w = 0;
};

// Output extent of a strided, padded window. Convolutions require the
// window placement to tile the padded input exactly.
inline std::size_t conv_output_extent(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t pad)
{
    if (stride == 0) throw DimensionError("stride must be positive");
    if (in + 2 * pad < kernel)
        throw DimensionError("kernel extent " + std::to_string(kernel) + " exceeds padded input "
                             + std::to_string(in + 2 * pad));
    const std::size_t span = in + 2 * pad - kernel;
    if (span % stride != 0)
        throw DimensionError("non-integral output extent: (" + std::to_string(in) + " + 2*" + std::to_string(pad)
                             + " - " + std::to_string(kernel) + ") / " + std::to_string(stride));
    return span / stride + 1;
}

inline std::size_t pool_output_extent(std::size_t in, std::size_t kernel, std::size_t stride)
{
    if (kernel == 0 || stride == 0) throw DimensionError("pool kernel and stride must be positive");
    if (in < kernel)
        throw DimensionError("pool window " + std::to_string(kernel) + " does not fit extent " + std::to_string(in));
    return (in - kernel) / stride + 1;
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b)
{
    if (a.rank() != 2 || b.rank() != 2)
        throw DimensionError("matmul expects rank-2 operands, got " + shape_str(a.shape()) + " and "
                             + shape_str(b.shape()));
    const std::size_t m = a.extent(0), k = a.extent(1), n = b.extent(1);
    if (b.extent(0) != k)
        throw DimensionError("matmul inner extents differ: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    Tensor<T> out({m, n});
    std::vector<accum_t<T>> row(n);
    for (std::size_t i = 0; i < m; ++i) {
        std::fill(row.begin(), row.end(), accum_t<T>{0});
        for (std::size_t p = 0; p < k; ++p) {
            const accum_t<T> aip = a(i, p);
            if (aip == 0) continue;
            const T* brow = b.data() + p * n;
            for (std::size_t j = 0; j < n; ++j) row[j] += aip * brow[j];
        }
        for (std::size_t j = 0; j < n; ++j) out(i, j) = static_cast<T>(row[j]);
    }
    return out;
}

// y = W x (+ b). W is [out x in], x is a flat vector of length in.
template <typename T>
Tensor<T> dense_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias)
{
    if (w.rank() != 2 || x.size() != w.extent(1))
        throw DimensionError("dense: input " + shape_str(x.shape()) + " incompatible with weight "
                             + shape_str(w.shape()));
    const std::size_t out_features = w.extent(0), in_features = w.extent(1);
    if (!bias.empty() && bias.size() != out_features) throw DimensionError("dense: bias length mismatch");
    Tensor<T> y({out_features});
    for (std::size_t o = 0; o < out_features; ++o) {
        const T* row = w.data() + o * in_features;
        accum_t<T> acc = bias.empty() ? accum_t<T>{0} : static_cast<accum_t<T>>(bias[o]);
        for (std::size_t i = 0; i < in_features; ++i) acc += static_cast<accum_t<T>>(row[i]) * x[i];
        y[o] = static_cast<T>(acc);
    }
    return y;
}

// Input gradient of a dense layer: W^T g.
template <typename T>
Tensor<T> dense_backward(const Tensor<T>& grad_out, const Tensor<T>& w, const Shape& x_shape)
{
    if (w.rank() != 2 || grad_out.size() != w.extent(0) || shape_size(x_shape) != w.extent(1))
        throw DimensionError("dense backward: grad " + shape_str(grad_out.shape()) + " incompatible with weight "
                             + shape_str(w.shape()));
    const std::size_t out_features = w.extent(0), in_features = w.extent(1);
    std::vector<accum_t<T>> acc(in_features, accum_t<T>{0});
    for (std::size_t o = 0; o < out_features; ++o) {
        const accum_t<T> g = grad_out[o];
        if (g == 0) continue;
        const T* row = w.data() + o * in_features;
        for (std::size_t i = 0; i < in_features; ++i) acc[i] += row[i] * g;
    }
    Tensor<T> gx(x_shape);
    for (std::size_t i = 0; i < in_features; ++i) gx[i] = static_cast<T>(acc[i]);
    return gx;
}

// Cross-correlation with zero padding. x is [C_in x H x W], w is
// [C_out x C_in x kh x kw]; an absent bias means no bias.
template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias, const Conv2dGeometry& g)
{
    if (x.rank() != 3 || w.rank() != 4 || w.extent(1) != x.extent(0))
        throw DimensionError("conv2d: input " + shape_str(x.shape()) + " incompatible with kernel "
                             + shape_str(w.shape()));
    const std::size_t cin = x.extent(0), h = x.extent(1), wd = x.extent(2);
    const std::size_t cout = w.extent(0), kh = w.extent(2), kw = w.extent(3);
    const std::size_t oh = conv_output_extent(h, kh, g.stride_h, g.pad_h);
    const std::size_t ow = conv_output_extent(wd, kw, g.stride_w, g.pad_w);
    if (!bias.empty() && bias.size() != cout) throw DimensionError("conv2d: bias length mismatch");

    Tensor<T> y({cout, oh, ow});
    std::vector<accum_t<T>> plane(oh * ow);
    for (std::size_t o = 0; o < cout; ++o) {
        accum_t<T>* yo = plane.data();
        std::fill(plane.begin(), plane.end(), bias.empty() ? accum_t<T>{0} : static_cast<accum_t<T>>(bias[o]));
        for (std::size_t c = 0; c < cin; ++c) {
            const T* xc = x.data() + c * h * wd;
            for (std::size_t ki = 0; ki < kh; ++ki) {
                for (std::size_t kj = 0; kj < kw; ++kj) {
                    const accum_t<T> wv = w(o, c, ki, kj);
                    if (wv == 0) continue;
                    for (std::size_t i = 0; i < oh; ++i) {
                        const std::ptrdiff_t ii = static_cast<std::ptrdiff_t>(i * g.stride_h + ki)
                                                  - static_cast<std::ptrdiff_t>(g.pad_h);
                        if (ii < 0 || ii >= static_cast<std::ptrdiff_t>(h)) continue;
                        const T* xrow = xc + static_cast<std::size_t>(ii) * wd;
                        accum_t<T>* yrow = yo + i * ow;
                        for (std::size_t j = 0; j < ow; ++j) {
                            const std::ptrdiff_t jj = static_cast<std::ptrdiff_t>(j * g.stride_w + kj)
                                                      - static_cast<std::ptrdiff_t>(g.pad_w);
                            if (jj < 0 || jj >= static_cast<std::ptrdiff_t>(wd)) continue;
                            yrow[j] += wv * xrow[jj];
                        }
                    }
                }
            }
        }
        std::transform(plane.begin(), plane.end(), y.data() + o * oh * ow, [](accum_t<T> v) { return static_cast<T>(v); });
    }
    return y;
}

template <typename T>
struct Conv2dGrads {
    Tensor<T> input;
    Tensor<T> bias;
};

// Transpose of conv2d_forward with respect to its input, plus the bias
// gradient (per-channel sum of grad_out).
template <typename T>
Conv2dGrads<T> conv2d_backward(const Tensor<T>& grad_out, const Tensor<T>& w, const Shape& x_shape,
                               const Conv2dGeometry& g)
{
    if (x_shape.size() != 3 || w.rank() != 4 || w.extent(1) != x_shape[0])
        throw DimensionError("conv2d backward: input shape " + shape_str(x_shape) + " incompatible with kernel "
                             + shape_str(w.shape()));
    const std::size_t cin = x_shape[0], h = x_shape[1], wd = x_shape[2];
    const std::size_t cout = w.extent(0), kh = w.extent(2), kw = w.extent(3);
    const std::size_t oh = conv_output_extent(h, kh, g.stride_h, g.pad_h);
    const std::size_t ow = conv_output_extent(wd, kw, g.stride_w, g.pad_w);
    if (grad_out.shape() != Shape{cout, oh, ow})
        throw DimensionError("conv2d backward: grad_out " + shape_str(grad_out.shape()) + " expected "
                             + shape_str({cout, oh, ow}));

    Conv2dGrads<T> out{Tensor<T>(x_shape), Tensor<T>({cout})};
    std::vector<accum_t<T>> gin(cin * h * wd, accum_t<T>{0});
    for (std::size_t o = 0; o < cout; ++o) {
        const T* go = grad_out.data() + o * oh * ow;
        accum_t<T> acc{0};
        for (std::size_t p = 0; p < oh * ow; ++p) acc += go[p];
        out.bias[o] = static_cast<T>(acc);
        for (std::size_t c = 0; c < cin; ++c) {
            accum_t<T>* gx = gin.data() + c * h * wd;
            for (std::size_t ki = 0; ki < kh; ++ki) {
                for (std::size_t kj = 0; kj < kw; ++kj) {
                    const accum_t<T> wv = w(o, c, ki, kj);
                    if (wv == 0) continue;
                    for (std::size_t i = 0; i < oh; ++i) {
                        const std::ptrdiff_t ii = static_cast<std::ptrdiff_t>(i * g.stride_h + ki)
                                                  - static_cast<std::ptrdiff_t>(g.pad_h);
                        if (ii < 0 || ii >= static_cast<std::ptrdiff_t>(h)) continue;
                        accum_t<T>* gxrow = gx + static_cast<std::size_t>(ii) * wd;
                        const T* grow = go + i * ow;
                        for (std::size_t j = 0; j < ow; ++j) {
                            const std::ptrdiff_t jj = static_cast<std::ptrdiff_t>(j * g.stride_w + kj)
                                                      - static_cast<std::ptrdiff_t>(g.pad_w);
                            if (jj < 0 || jj >= static_cast<std::ptrdiff_t>(wd)) continue;
                            gxrow[jj] += wv * grow[j];
                        }
                    }
                }
            }
        }
    }
    std::transform(gin.begin(), gin.end(), out.input.data(), [](accum_t<T> v) { return static_cast<T>(v); });
    return out;
}

template <typename T>
struct ReluResult {
    Tensor<T> output;
    Tensor<T> mask; // Heaviside of the input, H(0) = 0
};

template <typename T>
ReluResult<T> relu_forward(const Tensor<T>& x)
{
    ReluResult<T> r{Tensor<T>(x.shape()), Tensor<T>(x.shape())};
    for (std::size_t i = 0; i < x.size(); ++i) {
        const bool on = x[i] > T{0};
        r.mask[i] = on ? T{1} : T{0};
        r.output[i] = on ? x[i] : T{0};
    }
    return r;
}

template <typename T>
struct MaxPoolResult {
    Tensor<T> output;
    std::vector<std::size_t> argmax; // flat input index per output element
};

// Square window over each channel of [C x H x W]; ties go to the first
// row-major position inside the window.
template <typename T>
MaxPoolResult<T> maxpool_forward(const Tensor<T>& x, std::size_t k, std::size_t stride)
{
    if (x.rank() != 3) throw DimensionError("maxpool expects [C x H x W], got " + shape_str(x.shape()));
    const std::size_t c = x.extent(0), h = x.extent(1), w = x.extent(2);
    const std::size_t oh = pool_output_extent(h, k, stride), ow = pool_output_extent(w, k, stride);
    MaxPoolResult<T> r{Tensor<T>({c, oh, ow}), std::vector<std::size_t>(c * oh * ow)};
    std::size_t out_idx = 0;
    for (std::size_t ch = 0; ch < c; ++ch) {
        for (std::size_t i = 0; i < oh; ++i) {
            for (std::size_t j = 0; j < ow; ++j, ++out_idx) {
                std::size_t best = (ch * h + i * stride) * w + j * stride;
                T best_v = x[best];
                for (std::size_t di = 0; di < k; ++di) {
                    for (std::size_t dj = 0; dj < k; ++dj) {
                        const std::size_t idx = (ch * h + i * stride + di) * w + j * stride + dj;
                        if (x[idx] > best_v) {
                            best_v = x[idx];
                            best = idx;
                        }
                    }
                }
                r.output[out_idx] = best_v;
                r.argmax[out_idx] = best;
            }
        }
    }
    return r;
}

template <typename T>
Tensor<T> maxpool_backward(const Tensor<T>& grad_out, const std::vector<std::size_t>& argmax, const Shape& x_shape)
{
    if (grad_out.size() != argmax.size())
        throw DimensionError("maxpool backward: grad_out " + shape_str(grad_out.shape()) + " vs "
                             + std::to_string(argmax.size()) + " recorded indices");
    Tensor<T> gx(x_shape);
    for (std::size_t i = 0; i < argmax.size(); ++i) {
        if (argmax[i] >= gx.size()) throw DimensionError("maxpool backward: index outside input shape");
        gx[argmax[i]] += grad_out[i];
    }
    return gx;
}

template <typename T>
Tensor<T> avgpool_forward(const Tensor<T>& x, std::size_t k, std::size_t stride)
{
    if (x.rank() != 3) throw DimensionError("avgpool expects [C x H x W], got " + shape_str(x.shape()));
    const std::size_t c = x.extent(0), h = x.extent(1), w = x.extent(2);
    const std::size_t oh = pool_output_extent(h, k, stride), ow = pool_output_extent(w, k, stride);
    Tensor<T> y({c, oh, ow});
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t i = 0; i < oh; ++i)
            for (std::size_t j = 0; j < ow; ++j) {
                accum_t<T> acc{0};
                for (std::size_t di = 0; di < k; ++di)
                    for (std::size_t dj = 0; dj < k; ++dj) acc += x(ch, i * stride + di, j * stride + dj);
                y(ch, i, j) = static_cast<T>(acc / static_cast<accum_t<T>>(k * k));
            }
    return y;
}

template <typename T>
Tensor<T> avgpool_backward(const Tensor<T>& grad_out, std::size_t k, std::size_t stride, const Shape& x_shape)
{
    if (x_shape.size() != 3) throw DimensionError("avgpool backward expects a [C x H x W] input shape");
    const std::size_t c = x_shape[0], h = x_shape[1], w = x_shape[2];
    const std::size_t oh = pool_output_extent(h, k, stride), ow = pool_output_extent(w, k, stride);
    if (grad_out.shape() != Shape{c, oh, ow})
        throw DimensionError("avgpool backward: grad_out " + shape_str(grad_out.shape()) + " expected "
                             + shape_str({c, oh, ow}));
    const T scale = T{1} / static_cast<T>(k * k);
    Tensor<T> gx(x_shape);
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t i = 0; i < oh; ++i)
            for (std::size_t j = 0; j < ow; ++j) {
                const T g = grad_out(ch, i, j) * scale;
                for (std::size_t di = 0; di < k; ++di)
                    for (std::size_t dj = 0; dj < k; ++dj) gx(ch, i * stride + di, j * stride + dj) += g;
            }
    return gx;
}

// [C x H x W] -> [C], mean over each channel.
template <typename T>
Tensor<T> global_avgpool_forward(const Tensor<T>& x)
{
    if (x.rank() != 3) throw DimensionError("global_avgpool expects [C x H x W], got " + shape_str(x.shape()));
    const std::size_t c = x.extent(0), hw = x.extent(1) * x.extent(2);
    Tensor<T> y({c});
    for (std::size_t ch = 0; ch < c; ++ch) {
        accum_t<T> acc{0};
        for (std::size_t p = 0; p < hw; ++p) acc += x[ch * hw + p];
        y[ch] = static_cast<T>(acc / static_cast<accum_t<T>>(hw));
    }
    return y;
}

template <typename T>
Tensor<T> global_avgpool_backward(const Tensor<T>& grad_out, const Shape& x_shape)
{
    if (x_shape.size() != 3 || grad_out.size() != x_shape[0])
        throw DimensionError("global_avgpool backward: grad_out " + shape_str(grad_out.shape())
                             + " incompatible with input " + shape_str(x_shape));
    const std::size_t c = x_shape[0], hw = x_shape[1] * x_shape[2];
    Tensor<T> gx(x_shape);
    for (std::size_t ch = 0; ch < c; ++ch) {
        const T g = grad_out[ch] / static_cast<T>(hw);
        for (std::size_t p = 0; p < hw; ++p) gx[ch * hw + p] = g;
    }
    return gx;
}

} // namespace dmbp

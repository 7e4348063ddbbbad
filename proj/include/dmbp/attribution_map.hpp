#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "dmbp/tensor.hpp"

namespace dmbp {

// Signed per-pixel contribution scores for one (image, target, method).
struct AttributionMap {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<float> values; // row-major, height * width

    int target = -1;
    std::string method;
    std::string model_id;
    std::string extra; // free-form provenance, e.g. "seed=3"

    float at(std::size_t i, std::size_t j) const { return values[i * width + j]; }

    bool all_finite() const
    {
        for (float v : values)
            if (!std::isfinite(v)) return false;
        return true;
    }
};

// Collapses a [C x H x W] attribution tensor to one scalar per pixel by
// summing channels. Rank-1 inputs become a 1 x N map.
template <typename T>
AttributionMap channel_sum(const Tensor<T>& a)
{
    AttributionMap m;
    if (a.rank() == 3) {
        const std::size_t c = a.extent(0), h = a.extent(1), w = a.extent(2);
        m.height = h;
        m.width = w;
        std::vector<double> acc(h * w, 0.0);
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t p = 0; p < h * w; ++p) acc[p] += static_cast<double>(a[ch * h * w + p]);
        m.values.assign(acc.begin(), acc.end());
    } else if (a.rank() == 1) {
        m.height = 1;
        m.width = a.size();
        m.values.assign(a.values().begin(), a.values().end());
    } else {
        throw DimensionError("channel_sum expects a rank-1 or [C x H x W] tensor, got " + shape_str(a.shape()));
    }
    if (!m.all_finite()) throw NumericError("attribution map contains non-finite values");
    return m;
}

} // namespace dmbp

#pragma once

#include <algorithm>
#include <cstdint>
#include <random>

#include "dmbp/linearize.hpp"

namespace dmbp {

struct BaselineConfig {
    std::size_t ig_steps = 50;
    std::size_t sg_samples = 25;
    double sg_noise_fraction = 0.15; // noise std as a fraction of the input's value range
    std::uint64_t seed = 0;

    void validate() const
    {
        if (ig_steps < 1) throw ArgumentError("ig_steps must be >= 1");
        if (sg_samples < 1) throw ArgumentError("sg_samples must be >= 1");
        if (!(sg_noise_fraction >= 0.0)) throw ArgumentError("noise std must be non-negative");
    }
};

// (x - ref) (.) mean_k grad F(ref + (k - 1/2)/steps * (x - ref)), k = 1..steps.
// An absent reference means the zero image.
template <typename T>
AttributionMap integrated_gradients(const NetworkDef<T>& net, const Tensor<T>& x, std::size_t target,
                                    const BaselineConfig& cfg, const Tensor<T>& reference = {})
{
    cfg.validate();
    const Tensor<T> ref = reference.empty() ? Tensor<T>(x.shape()) : reference;
    ref.require_same_shape(x, "integrated_gradients");
    const Tensor<T> delta = x - ref;
    Tensor<double> acc(x.shape());
    for (std::size_t k = 1; k <= cfg.ig_steps; ++k) {
        const T alpha = static_cast<T>((static_cast<double>(k) - 0.5) / static_cast<double>(cfg.ig_steps));
        Tensor<T> point = ref;
        for (std::size_t i = 0; i < point.size(); ++i) point[i] += alpha * delta[i];
        const auto g = input_gradient(net, point, target);
        for (std::size_t i = 0; i < g.size(); ++i) acc[i] += static_cast<double>(g[i]);
    }
    Tensor<T> attr(x.shape());
    for (std::size_t i = 0; i < attr.size(); ++i)
        attr[i] = static_cast<T>(acc[i] / static_cast<double>(cfg.ig_steps)) * delta[i];
    auto map = channel_sum(attr);
    map.target = static_cast<int>(target);
    map.method = "ig";
    map.model_id = net.model_id;
    return map;
}

// Gradient averaged over Gaussian-perturbed copies of x, times x. Noise
// draws come from a seeded mt19937_64 in a fixed order.
template <typename T>
AttributionMap smoothgrad(const NetworkDef<T>& net, const Tensor<T>& x, std::size_t target, const BaselineConfig& cfg)
{
    cfg.validate();
    const auto [lo, hi] = std::minmax_element(x.values().begin(), x.values().end());
    const double noise_std = cfg.sg_noise_fraction * static_cast<double>(*hi - *lo);
    std::mt19937_64 rng(cfg.seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    Tensor<double> acc(x.shape());
    for (std::size_t s = 0; s < cfg.sg_samples; ++s) {
        Tensor<T> noisy = x;
        if (noise_std > 0.0)
            for (auto& v : noisy.values()) v += static_cast<T>(noise_std * normal(rng));
        const auto g = input_gradient(net, noisy, target);
        for (std::size_t i = 0; i < g.size(); ++i) acc[i] += static_cast<double>(g[i]);
    }
    Tensor<T> attr(x.shape());
    for (std::size_t i = 0; i < attr.size(); ++i)
        attr[i] = static_cast<T>(acc[i] / static_cast<double>(cfg.sg_samples)) * x[i];
    auto map = channel_sum(attr);
    map.target = static_cast<int>(target);
    map.method = "sg";
    map.model_id = net.model_id;
    return map;
}

} // namespace dmbp

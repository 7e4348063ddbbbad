#pragma once

// Exact input-dependent linearization of a ReLU network.
//
// Once the Heaviside masks and pool selections of a forward pass are fixed,
// the network is an affine map of (x, b_1 .. b_L). The reverse sweeps below
// compute its coefficients, optionally scaling the gradient at every ReLU
// site by an extra per-element mask in [0, 1].

#include <cstddef>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "dmbp/attribution_map.hpp"
#include "dmbp/network.hpp"

namespace dmbp {

template <typename T>
struct BackwardResult {
    Tensor<T> input_grad;
    std::vector<Tensor<T>> bias_grads; // one per biased hidden layer (NetworkDef::bias_shapes)
    T head_bias_grad = T{0};           // gradient of the classifier's own bias entry
};

// Whether the classifier's bias for the target class belongs to a pass.
// It reaches the output without crossing any ReLU site, so no mask can
// scale it; a masked pass states explicitly whether it carries that term.
enum class HeadBias { include, exclude };

// All bias values of a network in slot order, plus the target's head bias.
template <typename T>
struct BiasSet {
    std::vector<Tensor<T>> hidden;
    T head = T{0};
};

namespace detail {

template <typename T>
void collect_bias_values(const std::vector<LayerSpec<T>>& layers, std::vector<Tensor<T>>& out)
{
    for (const auto& l : layers) {
        if (l.bias_slot >= 0) out[l.bias_slot] = l.bias;
        collect_bias_values(l.main, out);
        collect_bias_values(l.projection, out);
    }
}

// Several gradient streams walked backwards through the same fixed linear
// region in lockstep. At each ReLU site the hook receives the gradients
// arriving at the site output (one per stream) and must apply whatever
// gating it wants in place.
template <typename T, typename SiteHook>
class ReverseSweep {
public:
    ReverseSweep(const NetworkDef<T>& net, const ActivationTrace<T>& trace, std::size_t streams, SiteHook& hook)
      : m_net(net)
      , m_trace(trace)
      , m_hook(hook)
      , m_bias(streams, std::vector<Tensor<T>>(net.bias_shapes.size()))
    {
        for (auto& per_stream : m_bias)
            for (std::size_t s = 0; s < net.bias_shapes.size(); ++s) per_stream[s] = Tensor<T>(net.bias_shapes[s]);
    }

    // grads: gradients with respect to the classifier input, one per stream.
    std::vector<Tensor<T>> run(std::vector<Tensor<T>> grads)
    {
        const auto& layers = m_net.layers;
        sweep(std::span<const LayerSpec<T>>(layers.data(), layers.size() - 1), grads);
        return grads;
    }

    std::vector<std::vector<Tensor<T>>>& bias_grads() { return m_bias; }

private:
    void sweep(std::span<const LayerSpec<T>> layers, std::vector<Tensor<T>>& grads)
    {
        for (auto it = layers.rbegin(); it != layers.rend(); ++it) step(*it, grads);
    }

    void step(const LayerSpec<T>& l, std::vector<Tensor<T>>& grads)
    {
        switch (l.kind) {
        case LayerKind::dense:
            for (std::size_t s = 0; s < grads.size(); ++s) {
                if (l.bias_slot >= 0) m_bias[s][l.bias_slot] += grads[s];
                grads[s] = dense_backward(grads[s], l.weight, l.in_shape);
            }
            break;
        case LayerKind::conv2d:
            for (std::size_t s = 0; s < grads.size(); ++s) {
                auto g = conv2d_backward(grads[s], l.weight, l.in_shape, l.conv);
                if (l.bias_slot >= 0) m_bias[s][l.bias_slot] += g.bias;
                grads[s] = std::move(g.input);
            }
            break;
        case LayerKind::relu:
            m_hook(l.site, std::span<Tensor<T>>(grads));
            break;
        case LayerKind::maxpool:
            for (auto& g : grads) g = maxpool_backward(g, m_trace.argmax.at(l.pool_slot), l.in_shape);
            break;
        case LayerKind::avgpool:
            for (auto& g : grads) g = avgpool_backward(g, l.pool_kernel, l.pool_stride, l.in_shape);
            break;
        case LayerKind::global_avgpool:
            for (auto& g : grads) g = global_avgpool_backward(g, l.in_shape);
            break;
        case LayerKind::flatten:
            for (auto& g : grads) g = g.reshaped(l.in_shape);
            break;
        case LayerKind::residual_block: {
            if (l.post_relu) m_hook(l.site, std::span<Tensor<T>>(grads));
            // The skip path carries gradients unmasked.
            std::vector<Tensor<T>> skip = grads;
            if (!l.projection.empty()) sweep(l.projection, skip);
            sweep(l.main, grads);
            for (std::size_t s = 0; s < grads.size(); ++s) grads[s] += skip[s];
            break;
        }
        case LayerKind::batchnorm:
            throw ArgumentError("network contains an unfused batchnorm");
        }
    }

    const NetworkDef<T>& m_net;
    const ActivationTrace<T>& m_trace;
    SiteHook& m_hook;
    std::vector<std::vector<Tensor<T>>> m_bias;
};

template <typename T>
void check_trace(const NetworkDef<T>& net, const ActivationTrace<T>& trace)
{
    if (trace.masks.size() != net.site_count() || trace.argmax.size() != net.pool_count
        || trace.logits.size() != net.class_count)
        throw ArgumentError("activation trace was not produced by this network");
    for (std::size_t s = 0; s < net.site_count(); ++s)
        if (trace.masks[s].shape() != net.site_shapes[s])
            throw ArgumentError("activation trace was not produced by this network (site " + std::to_string(s)
                                + ")");
}

template <typename T>
void check_masks(const NetworkDef<T>& net, const std::vector<Tensor<T>>& masks)
{
    if (masks.size() != net.site_count())
        throw ArgumentError("expected " + std::to_string(net.site_count()) + " site masks, got "
                            + std::to_string(masks.size()));
    for (std::size_t s = 0; s < masks.size(); ++s) {
        if (masks[s].shape() != net.site_shapes[s])
            throw ArgumentError("mask for site " + std::to_string(s) + " has shape " + shape_str(masks[s].shape())
                                + ", expected " + shape_str(net.site_shapes[s]));
        for (auto v : masks[s].values())
            if (!(v >= T{0} && v <= T{1}))
                throw ArgumentError("mask values must lie in [0, 1] (site " + std::to_string(s) + ")");
    }
}

template <typename T>
Tensor<T> classifier_row(const NetworkDef<T>& net, std::size_t target)
{
    const auto filter = select_target(net, target);
    return Tensor<T>(net.classifier().in_shape, std::vector<T>(filter.weights.begin(), filter.weights.end()));
}

} // namespace detail

template <typename T>
BiasSet<T> collect_biases(const NetworkDef<T>& net, std::size_t target)
{
    BiasSet<T> b;
    b.hidden.resize(net.bias_shapes.size());
    detail::collect_bias_values(net.layers, b.hidden);
    b.head = select_target(net, target).bias;
    return b;
}

// Reverse pass for the target logit. At each ReLU site the incoming gradient
// is multiplied by the Heaviside mask and then, if given, by masks[site].
// Bias gradients are read off after all masking above the layer. When
// site_grads is given it receives, per site, the gradient arriving at the
// site output before that site's own masking.
template <typename T>
BackwardResult<T> masked_backward(const NetworkDef<T>& net, const ActivationTrace<T>& trace, std::size_t target,
                                  const std::vector<Tensor<T>>* masks = nullptr,
                                  HeadBias head = HeadBias::include,
                                  std::vector<Tensor<T>>* site_grads = nullptr)
{
    detail::check_trace(net, trace);
    if (masks) detail::check_masks(net, *masks);
    if (site_grads) site_grads->assign(net.site_count(), Tensor<T>());
    auto hook = [&](int site, std::span<Tensor<T>> grads) {
        if (site_grads) (*site_grads)[site] = grads[0];
        grads[0] *= trace.masks[site];
        if (masks) grads[0] *= (*masks)[site];
    };
    detail::ReverseSweep<T, decltype(hook)> sweep(net, trace, 1, hook);
    auto out = sweep.run({detail::classifier_row(net, target)});
    BackwardResult<T> r;
    r.input_grad = std::move(out[0]);
    r.bias_grads = std::move(sweep.bias_grads()[0]);
    r.head_bias_grad = head == HeadBias::include ? T{1} : T{0};
    return r;
}

// input_grad . x + sum_l bias_grad_l . b_l (+ head term)
template <typename T>
double reconstruct_output(const Tensor<T>& x, const BiasSet<T>& biases, const BackwardResult<T>& result)
{
    if (x.shape() != result.input_grad.shape())
        throw DimensionError("reconstruct_output: input " + shape_str(x.shape()) + " vs gradient "
                             + shape_str(result.input_grad.shape()));
    if (biases.hidden.size() != result.bias_grads.size())
        throw DimensionError("reconstruct_output: bias count mismatch");
    double y = dot(result.input_grad, x);
    for (std::size_t l = 0; l < biases.hidden.size(); ++l) {
        if (biases.hidden[l].shape() != result.bias_grads[l].shape())
            throw DimensionError("reconstruct_output: bias " + std::to_string(l) + " shape mismatch");
        y += dot(result.bias_grads[l], biases.hidden[l]);
    }
    y += static_cast<double>(result.head_bias_grad) * static_cast<double>(biases.head);
    return y;
}

// Records the value entering every ReLU site during a gated linear replay.
template <typename T>
struct SiteTape {
    std::vector<Tensor<T>> inputs;
};

namespace detail {

template <typename T>
Tensor<T> replay_list(const std::vector<LayerSpec<T>>& layers, std::size_t count, Tensor<T> z,
                      const ActivationTrace<T>& trace, const std::vector<Tensor<T>>& gates, bool with_bias,
                      SiteTape<T>* tape)
{
    static const Tensor<T> no_bias;
    auto gate = [&](int site, Tensor<T> v) {
        if (tape) tape->inputs[site] = v;
        v *= gates[site];
        return v;
    };
    for (std::size_t i = 0; i < count; ++i) {
        const auto& l = layers[i];
        const Tensor<T>& b = with_bias ? l.bias : no_bias;
        switch (l.kind) {
        case LayerKind::dense:
            z = dense_forward(z, l.weight, b);
            break;
        case LayerKind::conv2d:
            z = conv2d_forward(z, l.weight, b, l.conv);
            break;
        case LayerKind::relu:
            z = gate(l.site, std::move(z));
            break;
        case LayerKind::maxpool: {
            const auto& idx = trace.argmax.at(l.pool_slot);
            Tensor<T> out(l.out_shape);
            for (std::size_t k = 0; k < idx.size(); ++k) out[k] = z[idx[k]];
            z = std::move(out);
            break;
        }
        case LayerKind::avgpool:
            z = avgpool_forward(z, l.pool_kernel, l.pool_stride);
            break;
        case LayerKind::global_avgpool:
            z = global_avgpool_forward(z);
            break;
        case LayerKind::flatten:
            z = z.reshaped({z.size()});
            break;
        case LayerKind::residual_block: {
            Tensor<T> skip = l.projection.empty()
                                 ? z
                                 : replay_list(l.projection, l.projection.size(), z, trace, gates, with_bias, tape);
            Tensor<T> main = replay_list(l.main, l.main.size(), std::move(z), trace, gates, with_bias, tape);
            main += skip;
            z = l.post_relu ? gate(l.site, std::move(main)) : std::move(main);
            break;
        }
        case LayerKind::batchnorm:
            throw ArgumentError("network contains an unfused batchnorm");
        }
    }
    return z;
}

} // namespace detail

// Forward evaluation of the fixed linear region with each ReLU replaced by
// elementwise multiplication with gates[site] (the Heaviside mask times any
// extra mask). Returns the classifier input; with gates = trace.masks and
// biases on, this reproduces the hidden features of the real forward pass.
template <typename T>
Tensor<T> replay_features(const NetworkDef<T>& net, const ActivationTrace<T>& trace, const Tensor<T>& x,
                          const std::vector<Tensor<T>>& gates, bool with_bias = true, SiteTape<T>* tape = nullptr)
{
    detail::check_trace(net, trace);
    if (gates.size() != net.site_count()) throw ArgumentError("gate count does not match ReLU sites");
    if (x.shape() != net.input_shape) throw DimensionError("replay input shape mismatch");
    if (tape) tape->inputs.assign(net.site_count(), Tensor<T>());
    return detail::replay_list(net.layers, net.layers.size() - 1, x, trace, gates, with_bias, tape);
}

// Logits from the gated replay (classifier applied, its bias included).
template <typename T>
Tensor<T> replay_logits(const NetworkDef<T>& net, const ActivationTrace<T>& trace, const Tensor<T>& x,
                        const std::vector<Tensor<T>>& gates)
{
    const auto features = replay_features(net, trace, x, gates, true);
    return dense_forward(features, net.classifier().weight, net.classifier().bias);
}

// grad (.) x, keeping the input's shape.
template <typename T>
Tensor<T> gradient_times_input(const Tensor<T>& grad, const Tensor<T>& x)
{
    return hadamard(grad, x);
}

// Plain input gradient of the target logit.
template <typename T>
Tensor<T> input_gradient(const NetworkDef<T>& net, const Tensor<T>& x, std::size_t target)
{
    const auto trace = forward(net, x);
    return masked_backward(net, trace, target).input_grad;
}

// Gradient (.) input, summed over channels.
template <typename T>
AttributionMap vanilla_attribution(const NetworkDef<T>& net, const Tensor<T>& x, std::size_t target)
{
    auto map = channel_sum(gradient_times_input(input_gradient(net, x, target), x));
    map.target = static_cast<int>(target);
    map.method = "grad";
    map.model_id = net.model_id;
    return map;
}

} // namespace dmbp

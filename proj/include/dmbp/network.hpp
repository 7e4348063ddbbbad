#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dmbp/ops.hpp"
#include "dmbp/tensor.hpp"

namespace dmbp {

enum class LayerKind {
    dense,
    conv2d,
    relu,
    maxpool,
    avgpool,
    global_avgpool,
    flatten,
    batchnorm,
    residual_block,
};

inline const char* to_string(LayerKind k)
{
    switch (k) {
    case LayerKind::dense: return "dense";
    case LayerKind::conv2d: return "conv2d";
    case LayerKind::relu: return "relu";
    case LayerKind::maxpool: return "maxpool";
    case LayerKind::avgpool: return "avgpool";
    case LayerKind::global_avgpool: return "global_avgpool";
    case LayerKind::flatten: return "flatten";
    case LayerKind::batchnorm: return "batchnorm";
    case LayerKind::residual_block: return "residual_block";
    }
    return "?";
}

struct PreprocessSpec {
    std::size_t height = 0;
    std::size_t width = 0;
    std::array<double, 3> mean{0.0, 0.0, 0.0};
    std::array<double, 3> std{1.0, 1.0, 1.0};
    std::string resize = "bilinear";

    void validate() const
    {
        for (double s : std)
            if (!(s > 0.0)) throw ArgumentError("preprocess std must be strictly positive");
        if (resize != "bilinear") throw ArgumentError("unsupported resize mode '" + resize + "'");
    }
};

// One node of the sequential-plus-residual graph. Parametric fields are
// only meaningful for the kinds that use them.
template <typename T>
struct LayerSpec {
    LayerKind kind = LayerKind::relu;

    Tensor<T> weight; // dense: [out x in]; conv2d: [C_out x C_in x kh x kw]
    Tensor<T> bias;   // absent when the layer has no bias

    Conv2dGeometry conv;
    std::size_t pool_kernel = 0;
    std::size_t pool_stride = 0;

    // batchnorm statistics; consumed by fusion
    Tensor<T> gamma, beta, running_mean, running_var;
    T eps = T{0};

    // residual_block
    std::vector<LayerSpec> main;
    std::vector<LayerSpec> projection; // empty (identity skip) or one conv2d, optionally + batchnorm
    bool post_relu = false;

    // Assigned by finalize().
    Shape in_shape, out_shape;
    int site = -1;      // ReLU site index (relu, or residual post-addition ReLU)
    int pool_slot = -1; // maxpool argmax slot
    int bias_slot = -1; // index into BackwardResult::bias_grads
    int source_index = -1;

    bool has_bias() const { return !bias.empty(); }

    std::size_t parameter_count() const
    {
        std::size_t n = weight.size() + bias.size();
        for (const auto& l : main) n += l.parameter_count();
        for (const auto& l : projection) n += l.parameter_count();
        return n;
    }
};

template <typename T>
LayerSpec<T> make_dense(Tensor<T> w, Tensor<T> b = {})
{
    LayerSpec<T> l;
    l.kind = LayerKind::dense;
    l.weight = std::move(w);
    l.bias = std::move(b);
    return l;
}

template <typename T>
LayerSpec<T> make_conv(Tensor<T> w, Tensor<T> b = {}, std::size_t stride = 1, std::size_t pad = 0)
{
    LayerSpec<T> l;
    l.kind = LayerKind::conv2d;
    l.weight = std::move(w);
    l.bias = std::move(b);
    l.conv = {stride, stride, pad, pad};
    return l;
}

template <typename T>
LayerSpec<T> make_layer(LayerKind kind)
{
    LayerSpec<T> l;
    l.kind = kind;
    return l;
}

template <typename T>
LayerSpec<T> make_pool(LayerKind kind, std::size_t k, std::size_t stride)
{
    LayerSpec<T> l;
    l.kind = kind;
    l.pool_kernel = k;
    l.pool_stride = stride;
    return l;
}

template <typename T>
LayerSpec<T> make_batchnorm(Tensor<T> gamma, Tensor<T> beta, Tensor<T> mean, Tensor<T> var, T eps)
{
    LayerSpec<T> l;
    l.kind = LayerKind::batchnorm;
    l.gamma = std::move(gamma);
    l.beta = std::move(beta);
    l.running_mean = std::move(mean);
    l.running_var = std::move(var);
    l.eps = eps;
    return l;
}

template <typename T>
LayerSpec<T> make_residual(std::vector<LayerSpec<T>> main, std::vector<LayerSpec<T>> projection, bool post_relu)
{
    LayerSpec<T> l;
    l.kind = LayerKind::residual_block;
    l.main = std::move(main);
    l.projection = std::move(projection);
    l.post_relu = post_relu;
    return l;
}

template <typename T>
struct FusedParams {
    Tensor<T> weight;
    Tensor<T> bias;
};

// Folds y = gamma * (W x + b - mean) / sqrt(var + eps) + beta into a single
// affine layer. The leading axis of the weight indexes output channels.
template <typename T>
FusedParams<T> fuse_batchnorm(const Tensor<T>& weight, const Tensor<T>& bias, const Tensor<T>& gamma,
                              const Tensor<T>& beta, const Tensor<T>& mean, const Tensor<T>& var, T eps)
{
    const std::size_t channels = weight.extent(0);
    for (const auto* t : {&gamma, &beta, &mean, &var})
        if (t->size() != channels)
            throw DimensionError("batchnorm parameter length " + std::to_string(t->size()) + " != channels "
                                 + std::to_string(channels));
    if (!bias.empty() && bias.size() != channels) throw DimensionError("bias length mismatch in fusion");

    FusedParams<T> out{weight, Tensor<T>({channels})};
    const std::size_t per_channel = weight.size() / channels;
    for (std::size_t c = 0; c < channels; ++c) {
        const T denom_sq = var[c] + eps;
        if (!(denom_sq > T{0}))
            throw NumericError("batchnorm var + eps must be positive (channel " + std::to_string(c) + ")");
        const T scale = gamma[c] / std::sqrt(denom_sq);
        for (std::size_t i = 0; i < per_channel; ++i) out.weight[c * per_channel + i] *= scale;
        const T b = bias.empty() ? T{0} : bias[c];
        out.bias[c] = scale * (b - mean[c]) + beta[c];
    }
    return out;
}

// Immutable after make_network(): batch-norm fused, shapes inferred, ReLU
// sites / pool slots / bias slots numbered in forward order. The last layer
// is the dense classifier whose rows are the per-class filters.
template <typename T>
struct NetworkDef {
    std::vector<LayerSpec<T>> layers;
    Shape input_shape;
    std::size_t class_count = 0;
    PreprocessSpec preprocess;
    std::string model_id;

    std::vector<Shape> site_shapes;
    std::vector<Shape> bias_shapes;
    std::size_t pool_count = 0;

    const LayerSpec<T>& classifier() const { return layers.back(); }
    std::size_t site_count() const { return site_shapes.size(); }

    std::size_t parameter_count() const
    {
        std::size_t n = 0;
        for (const auto& l : layers) n += l.parameter_count();
        return n;
    }

    template <typename U>
    NetworkDef<U> cast() const;
};

namespace detail {

template <typename T>
void fuse_list(std::vector<LayerSpec<T>>& layers, const std::string& where)
{
    std::vector<LayerSpec<T>> out;
    out.reserve(layers.size());
    for (std::size_t i = 0; i < layers.size(); ++i) {
        auto& l = layers[i];
        const int idx = l.source_index >= 0 ? l.source_index : static_cast<int>(i);
        if (l.kind == LayerKind::batchnorm) {
            if (out.empty() || (out.back().kind != LayerKind::conv2d && out.back().kind != LayerKind::dense))
                throw LoadError("batchnorm must directly follow a conv2d or dense layer" + where, idx);
            auto& prev = out.back();
            try {
                auto fused = fuse_batchnorm(prev.weight, prev.bias, l.gamma, l.beta, l.running_mean,
                                            l.running_var, l.eps);
                prev.weight = std::move(fused.weight);
                prev.bias = std::move(fused.bias);
            } catch (const Error& e) {
                throw LoadError(std::string("cannot fuse batchnorm: ") + e.what(), idx);
            }
            continue;
        }
        if (l.kind == LayerKind::residual_block) {
            fuse_list(l.main, where + " (residual main branch)");
            fuse_list(l.projection, where + " (residual projection)");
        }
        out.push_back(std::move(l));
    }
    layers = std::move(out);
}

struct Counters {
    int sites = 0;
    int pools = 0;
    int biases = 0;
};

template <typename T>
Shape infer_list(std::vector<LayerSpec<T>>& layers, Shape shape, Counters& ctr, NetworkDef<T>& net,
                 bool skip_last_bias)
{
    for (std::size_t i = 0; i < layers.size(); ++i) {
        auto& l = layers[i];
        const int idx = l.source_index >= 0 ? l.source_index : static_cast<int>(i);
        l.in_shape = shape;
        try {
            switch (l.kind) {
            case LayerKind::dense: {
                if (l.weight.rank() != 2) throw LoadError("dense weight must be rank 2", idx);
                if (shape_size(shape) != l.weight.extent(1))
                    throw LoadError("dense expects " + std::to_string(l.weight.extent(1)) + " inputs, got "
                                        + shape_str(shape),
                                    idx);
                if (l.has_bias() && l.bias.size() != l.weight.extent(0))
                    throw LoadError("dense bias length mismatch", idx);
                shape = {l.weight.extent(0)};
                break;
            }
            case LayerKind::conv2d: {
                if (l.weight.rank() != 4) throw LoadError("conv2d weight must be rank 4", idx);
                if (shape.size() != 3 || shape[0] != l.weight.extent(1))
                    throw LoadError("conv2d expects " + std::to_string(l.weight.extent(1)) + " input channels, got "
                                        + shape_str(shape),
                                    idx);
                if (l.has_bias() && l.bias.size() != l.weight.extent(0))
                    throw LoadError("conv2d bias length mismatch", idx);
                shape = {l.weight.extent(0),
                         conv_output_extent(shape[1], l.weight.extent(2), l.conv.stride_h, l.conv.pad_h),
                         conv_output_extent(shape[2], l.weight.extent(3), l.conv.stride_w, l.conv.pad_w)};
                break;
            }
            case LayerKind::relu:
                l.site = ctr.sites++;
                net.site_shapes.push_back(shape);
                break;
            case LayerKind::maxpool:
            case LayerKind::avgpool:
                if (shape.size() != 3) throw LoadError("pooling expects a [C x H x W] input", idx);
                shape = {shape[0], pool_output_extent(shape[1], l.pool_kernel, l.pool_stride),
                         pool_output_extent(shape[2], l.pool_kernel, l.pool_stride)};
                if (l.kind == LayerKind::maxpool) l.pool_slot = ctr.pools++;
                break;
            case LayerKind::global_avgpool:
                if (shape.size() != 3) throw LoadError("global_avgpool expects a [C x H x W] input", idx);
                shape = {shape[0]};
                break;
            case LayerKind::flatten:
                shape = {shape_size(shape)};
                break;
            case LayerKind::batchnorm:
                throw LoadError("unfused batchnorm", idx);
            case LayerKind::residual_block: {
                if (l.main.empty()) throw LoadError("residual block needs a main branch", idx);
                const Shape main_out = infer_list(l.main, shape, ctr, net, false);
                Shape skip_out = shape;
                if (!l.projection.empty()) {
                    if (l.projection.size() != 1 || l.projection[0].kind != LayerKind::conv2d)
                        throw LoadError("residual projection must be a single conv2d (+ batchnorm)", idx);
                    skip_out = infer_list(l.projection, shape, ctr, net, false);
                }
                if (main_out != skip_out)
                    throw LoadError("residual branches disagree: main " + shape_str(main_out) + " vs skip "
                                        + shape_str(skip_out),
                                    idx);
                shape = main_out;
                if (l.post_relu) {
                    l.site = ctr.sites++;
                    net.site_shapes.push_back(shape);
                }
                break;
            }
            }
        } catch (const LoadError&) {
            throw;
        } catch (const Error& e) {
            throw LoadError(e.what(), idx);
        }
        const bool is_last = skip_last_bias && i + 1 == layers.size();
        if ((l.kind == LayerKind::dense || l.kind == LayerKind::conv2d) && l.has_bias() && !is_last) {
            l.bias_slot = ctr.biases++;
            net.bias_shapes.push_back(l.bias.shape());
        }
        l.out_shape = shape;
    }
    return shape;
}

template <typename T>
void require_finite_params(const std::vector<LayerSpec<T>>& layers)
{
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const auto& l = layers[i];
        const int idx = l.source_index >= 0 ? l.source_index : static_cast<int>(i);
        for (const auto* t : {&l.weight, &l.bias, &l.gamma, &l.beta, &l.running_mean, &l.running_var})
            if (!t->all_finite()) throw LoadError("non-finite parameter values", idx);
        require_finite_params(l.main);
        require_finite_params(l.projection);
    }
}

} // namespace detail

// Fuses batch-norm, validates the graph end to end and numbers the ReLU
// sites, pool slots and bias slots.
template <typename T>
NetworkDef<T> make_network(Shape input_shape, std::vector<LayerSpec<T>> layers, PreprocessSpec preprocess = {},
                           std::string model_id = "model")
{
    NetworkDef<T> net;
    net.input_shape = std::move(input_shape);
    net.preprocess = std::move(preprocess);
    net.model_id = std::move(model_id);
    if (shape_size(net.input_shape) == 0) throw LoadError("input shape must be non-empty");
    if (layers.empty()) throw LoadError("network has no layers");
    detail::require_finite_params(layers);
    detail::fuse_list(layers, "");
    if (layers.back().kind != LayerKind::dense)
        throw LoadError("final layer must be a dense classifier", layers.back().source_index);
    net.layers = std::move(layers);
    detail::Counters ctr;
    const Shape out = detail::infer_list(net.layers, net.input_shape, ctr, net, true);
    net.pool_count = static_cast<std::size_t>(ctr.pools);
    net.class_count = out.at(0);
    return net;
}

template <typename T>
template <typename U>
NetworkDef<U> NetworkDef<T>::cast() const
{
    auto cast_list = [](auto& self, const std::vector<LayerSpec<T>>& in) -> std::vector<LayerSpec<U>> {
        std::vector<LayerSpec<U>> out;
        for (const auto& l : in) {
            LayerSpec<U> c;
            c.kind = l.kind;
            c.weight = l.weight.template cast<U>();
            c.bias = l.bias.template cast<U>();
            c.conv = l.conv;
            c.pool_kernel = l.pool_kernel;
            c.pool_stride = l.pool_stride;
            c.post_relu = l.post_relu;
            c.main = self(self, l.main);
            c.projection = self(self, l.projection);
            c.in_shape = l.in_shape;
            c.out_shape = l.out_shape;
            c.site = l.site;
            c.pool_slot = l.pool_slot;
            c.bias_slot = l.bias_slot;
            c.source_index = l.source_index;
            out.push_back(std::move(c));
        }
        return out;
    };
    NetworkDef<U> n;
    n.layers = cast_list(cast_list, layers);
    n.input_shape = input_shape;
    n.class_count = class_count;
    n.preprocess = preprocess;
    n.model_id = model_id;
    n.site_shapes = site_shapes;
    n.bias_shapes = bias_shapes;
    n.pool_count = pool_count;
    return n;
}

// Per-input record fixing the local linear region.
template <typename T>
struct ActivationTrace {
    std::vector<Tensor<T>> masks;       // Heaviside per ReLU site
    std::vector<Tensor<T>> site_inputs; // pre-activation per ReLU site
    std::vector<std::vector<std::size_t>> argmax; // per maxpool slot
    std::vector<Tensor<T>> activations; // input, then each top-level layer output
    Tensor<T> logits;

    // Smallest |pre-activation| over all sites; distance to the nearest
    // linear-region boundary along any single unit.
    T min_abs_preactivation() const
    {
        T m = std::numeric_limits<T>::infinity();
        for (const auto& s : site_inputs)
            for (auto v : s.values()) m = std::min(m, static_cast<T>(std::abs(v)));
        return m;
    }
};

namespace detail {

template <typename T>
Tensor<T> run_relu_site(const LayerSpec<T>& l, const Tensor<T>& h, ActivationTrace<T>& trace)
{
    auto r = relu_forward(h);
    trace.site_inputs[l.site] = h;
    trace.masks[l.site] = std::move(r.mask);
    return std::move(r.output);
}

template <typename T>
Tensor<T> run_list(const std::vector<LayerSpec<T>>& layers, Tensor<T> h, ActivationTrace<T>& trace, bool top)
{
    for (const auto& l : layers) {
        switch (l.kind) {
        case LayerKind::dense:
            h = dense_forward(h, l.weight, l.bias);
            break;
        case LayerKind::conv2d:
            h = conv2d_forward(h, l.weight, l.bias, l.conv);
            break;
        case LayerKind::relu:
            h = run_relu_site(l, h, trace);
            break;
        case LayerKind::maxpool: {
            auto r = maxpool_forward(h, l.pool_kernel, l.pool_stride);
            trace.argmax[l.pool_slot] = std::move(r.argmax);
            h = std::move(r.output);
            break;
        }
        case LayerKind::avgpool:
            h = avgpool_forward(h, l.pool_kernel, l.pool_stride);
            break;
        case LayerKind::global_avgpool:
            h = global_avgpool_forward(h);
            break;
        case LayerKind::flatten:
            h = h.reshaped({h.size()});
            break;
        case LayerKind::residual_block: {
            Tensor<T> skip = l.projection.empty() ? h : run_list(l.projection, h, trace, false);
            Tensor<T> main = run_list(l.main, std::move(h), trace, false);
            main += skip;
            h = l.post_relu ? run_relu_site(l, main, trace) : std::move(main);
            break;
        }
        case LayerKind::batchnorm:
            throw ArgumentError("network contains an unfused batchnorm");
        }
        if (top) trace.activations.push_back(h);
    }
    return h;
}

} // namespace detail

template <typename T>
ActivationTrace<T> forward(const NetworkDef<T>& net, const Tensor<T>& x)
{
    if (x.shape() != net.input_shape)
        throw DimensionError("input shape " + shape_str(x.shape()) + " does not match network input "
                             + shape_str(net.input_shape));
    x.require_finite("network input");
    ActivationTrace<T> trace;
    trace.masks.resize(net.site_count());
    trace.site_inputs.resize(net.site_count());
    trace.argmax.resize(net.pool_count);
    trace.activations.push_back(x);
    trace.logits = detail::run_list(net.layers, x, trace, true);
    trace.logits.require_finite("logits");
    return trace;
}

template <typename T>
struct TargetFilter {
    std::span<const T> weights; // row of the classifier
    T bias;
};

// The attributed function for class_index is its pre-softmax logit.
template <typename T>
TargetFilter<T> select_target(const NetworkDef<T>& net, std::size_t class_index)
{
    if (class_index >= net.class_count)
        throw ArgumentError("target class " + std::to_string(class_index) + " out of range [0, "
                            + std::to_string(net.class_count) + ")");
    const auto& cls = net.classifier();
    const std::size_t in = cls.weight.extent(1);
    return {std::span<const T>(cls.weight.data() + class_index * in, in),
            cls.has_bias() ? cls.bias[class_index] : T{0}};
}

template <typename T>
T target_logit(const NetworkDef<T>& net, const ActivationTrace<T>& trace, std::size_t class_index)
{
    select_target(net, class_index);
    return trace.logits[class_index];
}

} // namespace dmbp

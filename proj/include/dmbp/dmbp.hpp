#pragma once

// Disentangled masked backpropagation.
//
// Every ReLU site carries a learnable logit per element; sigma(logit) gates
// the positive reverse pass and 1 - sigma(logit) the negative one. The logit
// y splits as y_pos + y_neg + y_nui where y_nui is the residual, and the
// logits are fitted with RMSProp on  y_neg - y_pos + |y_nui|.

#include <cmath>
#include <cstddef>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "dmbp/linearize.hpp"

namespace dmbp {

template <typename T>
T sigmoid(T v)
{
    if (v >= T{0}) return T{1} / (T{1} + std::exp(-v));
    const T e = std::exp(v);
    return e / (T{1} + e);
}

// Logit used wherever a mask has to be numerically "fully on".
inline constexpr double kSaturatedLogit = 40.0;

template <typename T>
struct MaskLogits {
    std::vector<Tensor<T>> sites;

    static MaskLogits filled(const NetworkDef<T>& net, T value)
    {
        MaskLogits m;
        for (const auto& s : net.site_shapes) m.sites.emplace_back(s, value);
        return m;
    }

    // Sigma masks, strictly inside (0, 1).
    std::vector<Tensor<T>> positive() const
    {
        std::vector<Tensor<T>> out = sites;
        for (auto& t : out)
            for (auto& v : t.values()) v = sigmoid(v);
        return out;
    }

    // I - Sigma, formed as sigmoid(-logit) to keep precision near saturation.
    std::vector<Tensor<T>> negative() const
    {
        std::vector<Tensor<T>> out = sites;
        for (auto& t : out)
            for (auto& v : t.values()) v = sigmoid(-v);
        return out;
    }
};

struct DmbpConfig {
    std::size_t iterations = 200;
    double learning_rate = 0.01;
    double decay = 0.99;
    double epsilon = 1e-8;
    bool log_convergence = false;

    void validate() const
    {
        if (iterations < 1) throw ArgumentError("iterations must be >= 1");
        if (!(learning_rate > 0.0)) throw ArgumentError("learning rate must be positive");
        if (!(decay >= 0.0 && decay < 1.0)) throw ArgumentError("RMSProp decay must lie in [0, 1)");
        if (!(epsilon >= 0.0)) throw ArgumentError("RMSProp epsilon must be non-negative");
    }
};

template <typename T>
struct DecomposedOutput {
    double y_pos = 0.0;
    double y_neg = 0.0;
    double y_nui = 0.0;
    double logit = 0.0;
    BackwardResult<T> pos_result;
    BackwardResult<T> neg_result;
};

// Sign convention for |y_nui| at zero: the subgradient is 0.
inline double nuisance_sign(double y_nui)
{
    return y_nui > 0.0 ? 1.0 : (y_nui < 0.0 ? -1.0 : 0.0);
}

template <typename T>
double dmbp_loss(const DecomposedOutput<T>& d)
{
    return d.y_neg - d.y_pos + std::abs(d.y_nui);
}

// Initial logit for one element from the positive- and negative-stream
// gradients reaching it: +2 if both are positive, -2 if both are negative,
// 0 otherwise.
template <typename T>
T init_logit(T grad_pos, T grad_neg)
{
    if (grad_pos > T{0} && grad_neg > T{0}) return T{2};
    if (grad_pos < T{0} && grad_neg < T{0}) return T{-2};
    return T{0};
}

// Top-down initialization. Two reverse sweeps run in lockstep, one gated by
// Sigma and one by I - Sigma; each site is decided from the gradients that
// reach it (already shaped by the sites above) and its masks are applied
// before the sweeps continue downward.
template <typename T>
MaskLogits<T> init_masks(const NetworkDef<T>& net, const ActivationTrace<T>& trace, std::size_t target)
{
    detail::check_trace(net, trace);
    MaskLogits<T> logits;
    logits.sites.resize(net.site_count());
    auto hook = [&](int site, std::span<Tensor<T>> g) {
        const auto& heaviside = trace.masks[site];
        Tensor<T> l(net.site_shapes[site]);
        for (std::size_t i = 0; i < l.size(); ++i) {
            l[i] = init_logit(g[0][i], g[1][i]);
            g[0][i] *= heaviside[i] * sigmoid(l[i]);
            g[1][i] *= heaviside[i] * sigmoid(-l[i]);
        }
        logits.sites[site] = std::move(l);
    };
    detail::ReverseSweep<T, decltype(hook)> sweep(net, trace, 2, hook);
    const auto row = detail::classifier_row(net, target);
    sweep.run({row, row});
    return logits;
}

template <typename T>
struct LossEvaluation {
    DecomposedOutput<T> decomposed;
    double loss = 0.0;
    std::vector<Tensor<T>> logit_grads; // d loss / d logit, per site; empty unless requested
};

namespace detail {

template <typename T>
void check_logits(const NetworkDef<T>& net, const MaskLogits<T>& logits)
{
    if (logits.sites.size() != net.site_count())
        throw ArgumentError("mask logits do not match the network's ReLU sites");
    for (std::size_t s = 0; s < logits.sites.size(); ++s) {
        if (logits.sites[s].shape() != net.site_shapes[s])
            throw ArgumentError("mask logits for site " + std::to_string(s) + " have the wrong shape");
        logits.sites[s].require_finite("mask logits");
    }
}

} // namespace detail

// Runs both masked passes and, when asked, the exact gradient of the loss
// with respect to every logit. y_pos and y_neg are each multilinear in the
// per-site gates, so d y / d gate = (gradient arriving at the site output)
// (.) (value entering the site in the gated forward replay).
template <typename T>
LossEvaluation<T> evaluate_loss(const NetworkDef<T>& net, const ActivationTrace<T>& trace, std::size_t target,
                                const MaskLogits<T>& logits, bool with_gradient)
{
    detail::check_trace(net, trace);
    detail::check_logits(net, logits);
    const auto& x = trace.activations.front();
    const auto pos_masks = logits.positive();
    const auto neg_masks = logits.negative();
    const auto biases = collect_biases(net, target);

    LossEvaluation<T> ev;
    auto& d = ev.decomposed;
    std::vector<Tensor<T>> pos_up, neg_up;
    d.pos_result = masked_backward(net, trace, target, &pos_masks, HeadBias::include, with_gradient ? &pos_up : nullptr);
    d.neg_result = masked_backward(net, trace, target, &neg_masks, HeadBias::exclude, with_gradient ? &neg_up : nullptr);
    d.logit = static_cast<double>(trace.logits[target]);
    d.y_pos = reconstruct_output(x, biases, d.pos_result);
    d.y_neg = reconstruct_output(x, biases, d.neg_result);
    d.y_nui = d.logit - d.y_pos - d.y_neg;
    ev.loss = dmbp_loss(d);
    if (!with_gradient) return ev;

    auto gates = [&](const std::vector<Tensor<T>>& masks) {
        std::vector<Tensor<T>> g = masks;
        for (std::size_t s = 0; s < g.size(); ++s) g[s] *= trace.masks[s];
        return g;
    };
    SiteTape<T> pos_tape, neg_tape;
    replay_features(net, trace, x, gates(pos_masks), true, &pos_tape);
    replay_features(net, trace, x, gates(neg_masks), true, &neg_tape);

    const double s = nuisance_sign(d.y_nui);
    const T d_pos = static_cast<T>(-1.0 - s); // d loss / d y_pos
    const T d_neg = static_cast<T>(1.0 - s);  // d loss / d y_neg
    ev.logit_grads.resize(net.site_count());
    for (std::size_t site = 0; site < net.site_count(); ++site) {
        const auto& h = trace.masks[site];
        const auto& sigma = pos_masks[site];
        Tensor<T> g(net.site_shapes[site]);
        for (std::size_t i = 0; i < g.size(); ++i) {
            if (h[i] == T{0}) continue;
            // d y_pos / d sigma = g+ a+ ;  d y_neg / d sigma = -(g- a-)
            const T dpos = pos_up[site][i] * pos_tape.inputs[site][i];
            const T dneg = -neg_up[site][i] * neg_tape.inputs[site][i];
            const T dsigma = d_pos * dpos + d_neg * dneg;
            g[i] = dsigma * sigma[i] * neg_masks[site][i];
        }
        ev.logit_grads[site] = std::move(g);
    }
    return ev;
}

template <typename T>
DecomposedOutput<T> decompose(const NetworkDef<T>& net, const ActivationTrace<T>& trace, std::size_t target,
                              const MaskLogits<T>& logits)
{
    return evaluate_loss(net, trace, target, logits, false).decomposed;
}

template <typename T>
struct RMSPropState {
    std::vector<Tensor<T>> accumulators;
};

// acc <- decay*acc + (1-decay)*g^2 ; logit <- logit - lr*g/(sqrt(acc)+eps).
// No weight decay.
template <typename T>
void rmsprop_step(MaskLogits<T>& logits, const std::vector<Tensor<T>>& grads, RMSPropState<T>& state,
                  const DmbpConfig& cfg)
{
    if (grads.size() != logits.sites.size()) throw DimensionError("rmsprop: gradient count mismatch");
    if (state.accumulators.empty())
        for (const auto& t : logits.sites) state.accumulators.emplace_back(t.shape());
    const T decay = static_cast<T>(cfg.decay);
    const T lr = static_cast<T>(cfg.learning_rate);
    const T eps = static_cast<T>(cfg.epsilon);
    for (std::size_t s = 0; s < grads.size(); ++s) {
        auto& p = logits.sites[s];
        auto& acc = state.accumulators[s];
        const auto& g = grads[s];
        p.require_same_shape(g, "rmsprop");
        p.require_same_shape(acc, "rmsprop");
        for (std::size_t i = 0; i < p.size(); ++i) {
            acc[i] = decay * acc[i] + (T{1} - decay) * g[i] * g[i];
            p[i] -= lr * g[i] / (std::sqrt(acc[i]) + eps);
        }
    }
}

struct LossRecord {
    std::size_t iteration = 0;
    double y_pos = 0.0;
    double y_neg = 0.0;
    double y_nui = 0.0;
    double loss = 0.0;
};

template <typename T>
struct DmbpResult {
    MaskLogits<T> logits;
    DecomposedOutput<T> decomposed; // after the final update
    std::vector<LossRecord> loss_trace; // one entry per iteration, before its update
    double initial_loss = 0.0;
    double final_loss = 0.0;
};

// |y_pos + y_neg + y_nui - logit| must vanish up to rounding of the three
// additions that define the residual.
template <typename T>
bool partition_holds(const DecomposedOutput<T>& d)
{
    const double scale = std::abs(d.y_pos) + std::abs(d.y_neg) + std::abs(d.y_nui) + std::abs(d.logit);
    return std::abs(d.y_pos + d.y_neg + d.y_nui - d.logit) <= 8.0 * 2.220446049250313e-16 * std::max(1.0, scale);
}

template <typename T>
DmbpResult<T> optimize(const NetworkDef<T>& net, const Tensor<T>& x, std::size_t target, const DmbpConfig& cfg,
                       std::ostream* log = nullptr)
{
    cfg.validate();
    const auto trace = forward(net, x);
    DmbpResult<T> r;
    r.logits = init_masks(net, trace, target);
    RMSPropState<T> state;
    r.loss_trace.reserve(cfg.iterations);
    for (std::size_t it = 0; it < cfg.iterations; ++it) {
        auto ev = evaluate_loss(net, trace, target, r.logits, true);
        const auto& d = ev.decomposed;
        if (!std::isfinite(ev.loss))
            throw NumericError("non-finite DMBP loss at iteration " + std::to_string(it));
        if (!partition_holds(d))
            throw NumericError("decomposition no longer sums to the logit at iteration " + std::to_string(it));
        r.loss_trace.push_back({it, d.y_pos, d.y_neg, d.y_nui, ev.loss});
        if (log && cfg.log_convergence)
            *log << "iter " << it << " loss " << ev.loss << " y+ " << d.y_pos << " y- " << d.y_neg << " y~ "
                 << d.y_nui << '\n';
        rmsprop_step(r.logits, ev.logit_grads, state, cfg);
    }
    r.decomposed = decompose(net, trace, target, r.logits);
    r.initial_loss = r.loss_trace.front().loss;
    r.final_loss = dmbp_loss(r.decomposed);
    if (!std::isfinite(r.final_loss)) throw NumericError("non-finite DMBP loss after the final update");
    return r;
}

template <typename T>
struct DmbpAttribution {
    AttributionMap map;      // (grad+ + grad-) (.) x, channel-summed
    AttributionMap positive; // grad+ (.) x, channel-summed
    AttributionMap negative; // grad- (.) x, channel-summed
    Tensor<T> contributions; // (grad+ + grad-) (.) x before the channel sum
};

template <typename T>
DmbpAttribution<T> attribution_map(const Tensor<T>& x, const DecomposedOutput<T>& d)
{
    DmbpAttribution<T> a;
    const auto pos = gradient_times_input(d.pos_result.input_grad, x);
    const auto neg = gradient_times_input(d.neg_result.input_grad, x);
    a.contributions = pos + neg;
    a.map = channel_sum(a.contributions);
    a.positive = channel_sum(pos);
    a.negative = channel_sum(neg);
    for (auto* m : {&a.map, &a.positive, &a.negative}) m->method = "dmbp";
    return a;
}

inline void write_loss_trace(std::ostream& out, const std::vector<LossRecord>& records)
{
    out << "iteration,y_pos,y_neg,y_nui,loss\n";
    char line[256];
    for (const auto& r : records) {
        std::snprintf(line, sizeof line, "%zu,%.9g,%.9g,%.9g,%.9g\n", r.iteration, r.y_pos, r.y_neg, r.y_nui, r.loss);
        out << line;
    }
}

inline void write_loss_trace(const std::filesystem::path& path, const std::vector<LossRecord>& records)
{
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    write_loss_trace(out, records);
}

} // namespace dmbp

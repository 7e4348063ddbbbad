#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <vector>

#include "dmbp/imaging.hpp"
#include "dmbp/methods.hpp"

namespace dmbp {

struct InsertionCurve {
    std::vector<double> fractions;     // 0, 1/steps, ..., 1
    std::vector<double> probabilities; // one per fraction
    double auc = 0.0;
};

struct MetricConfig {
    std::size_t steps = 100;
    double blur_sigma = 5.0;
    std::size_t blur_half_width = 0; // 0 selects round(2 * sigma)
    std::uint64_t seed = 0;          // tie-break shuffle

    void validate() const
    {
        if (steps < 1) throw ArgumentError("metric steps must be >= 1");
        if (!(blur_sigma > 0.0)) throw ArgumentError("blur sigma must be positive");
    }

    std::size_t half_width() const
    {
        return blur_half_width ? blur_half_width : static_cast<std::size_t>(std::lround(2.0 * blur_sigma));
    }
};

// Normalized discrete Gaussian, 2 * half_width + 1 taps.
inline std::vector<double> gaussian_kernel(double sigma, std::size_t half_width)
{
    if (!(sigma > 0.0)) throw ArgumentError("blur sigma must be positive");
    std::vector<double> k(2 * half_width + 1);
    double total = 0.0;
    for (std::size_t i = 0; i < k.size(); ++i) {
        const double d = static_cast<double>(i) - static_cast<double>(half_width);
        k[i] = std::exp(-d * d / (2.0 * sigma * sigma));
        total += k[i];
    }
    for (auto& v : k) v /= total;
    return k;
}

// Separable blur of a [C x H x W] raw-pixel image, clamping at the borders.
inline Tensor<float> blur_baseline(const Tensor<float>& image, const MetricConfig& cfg)
{
    cfg.validate();
    if (image.rank() != 3) throw DimensionError("blur expects [C x H x W]");
    const auto kernel = gaussian_kernel(cfg.blur_sigma, cfg.half_width());
    const auto r = static_cast<std::ptrdiff_t>(cfg.half_width());
    const std::size_t c = image.extent(0), h = image.extent(1), w = image.extent(2);
    auto clamp_idx = [](std::ptrdiff_t i, std::size_t n) {
        return static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(i, 0, static_cast<std::ptrdiff_t>(n) - 1));
    };
    Tensor<float> rows(image.shape()), out(image.shape());
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t i = 0; i < h; ++i)
            for (std::size_t j = 0; j < w; ++j) {
                double acc = 0.0;
                for (std::ptrdiff_t t = -r; t <= r; ++t)
                    acc += kernel[t + r] * image(ch, i, clamp_idx(static_cast<std::ptrdiff_t>(j) + t, w));
                rows(ch, i, j) = static_cast<float>(acc);
            }
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t i = 0; i < h; ++i)
            for (std::size_t j = 0; j < w; ++j) {
                double acc = 0.0;
                for (std::ptrdiff_t t = -r; t <= r; ++t)
                    acc += kernel[t + r] * rows(ch, clamp_idx(static_cast<std::ptrdiff_t>(i) + t, h), j);
                out(ch, i, j) = static_cast<float>(acc);
            }
    return out;
}

inline std::vector<double> softmax(const std::vector<double>& logits)
{
    const double peak = *std::max_element(logits.begin(), logits.end());
    std::vector<double> p(logits.size());
    double total = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) total += p[i] = std::exp(logits[i] - peak);
    for (auto& v : p) v /= total;
    return p;
}

inline double trapezoid_auc(const std::vector<double>& xs, const std::vector<double>& ys)
{
    double auc = 0.0;
    for (std::size_t i = 1; i < xs.size(); ++i) auc += 0.5 * (xs[i] - xs[i - 1]) * (ys[i] + ys[i - 1]);
    return auc;
}

enum class InsertionOrder { descending, ascending };

// Pixel indices sorted by attribution. A seeded shuffle precedes a stable
// sort so equal scores land in a reproducible pseudo-random order.
inline std::vector<std::size_t> insertion_order(const AttributionMap& map, InsertionOrder order, std::uint64_t seed)
{
    std::vector<std::size_t> idx(map.values.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::mt19937_64 rng(seed);
    std::shuffle(idx.begin(), idx.end(), rng);
    const auto& v = map.values;
    if (order == InsertionOrder::descending)
        std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] > v[b]; });
    else
        std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    return idx;
}

// Shared machinery of IM and cIM, starting from an explicit baseline.
// `image` and `baseline` are raw [0, 1] images at the network's input
// extent; composites are normalized with the network's preprocess spec
// before each forward pass. The probability at each step is the mean
// softmax probability over `labels`.
template <typename T>
InsertionCurve insertion_curve(const NetworkDef<T>& net, const Tensor<float>& image, const Tensor<float>& baseline,
                               const AttributionMap& map, InsertionOrder order, const std::vector<std::size_t>& labels,
                               const MetricConfig& cfg)
{
    cfg.validate();
    if (image.rank() != 3 || image.extent(0) != 3) throw ArgumentError("insertion metric expects a [3 x H x W] image");
    if (baseline.shape() != image.shape()) throw ArgumentError("baseline and image shapes differ");
    if (map.height != image.extent(1) || map.width != image.extent(2) || map.values.size() != map.height * map.width)
        throw ArgumentError("attribution map " + std::to_string(map.height) + "x" + std::to_string(map.width)
                            + " does not match image " + shape_str(image.shape()));
    if (labels.empty()) throw ArgumentError("insertion metric needs at least one label");
    for (auto l : labels)
        if (l >= net.class_count) throw ArgumentError("label " + std::to_string(l) + " is out of range");

    const std::size_t pixels = map.values.size();
    const auto ranked = insertion_order(map, order, cfg.seed);
    Tensor<float> composite = baseline;

    auto probe = [&] {
        const auto trace = forward(net, normalize<T>(composite, net.preprocess));
        std::vector<double> logits(trace.logits.size());
        for (std::size_t i = 0; i < logits.size(); ++i) logits[i] = static_cast<double>(trace.logits[i]);
        const auto p = softmax(logits);
        double acc = 0.0;
        for (auto l : labels) acc += p[l];
        return acc / static_cast<double>(labels.size());
    };

    InsertionCurve curve;
    std::size_t inserted = 0;
    for (std::size_t k = 0; k <= cfg.steps; ++k) {
        const std::size_t target = k * pixels / cfg.steps;
        for (; inserted < target; ++inserted) {
            const std::size_t p = ranked[inserted];
            for (std::size_t c = 0; c < 3; ++c) composite[c * pixels + p] = image[c * pixels + p];
        }
        curve.fractions.push_back(static_cast<double>(k) / static_cast<double>(cfg.steps));
        curve.probabilities.push_back(probe());
    }
    curve.auc = trapezoid_auc(curve.fractions, curve.probabilities);
    return curve;
}

// Same, with the blurred image as the baseline.
template <typename T>
InsertionCurve insertion_curve(const NetworkDef<T>& net, const Tensor<float>& image, const AttributionMap& map,
                               InsertionOrder order, const std::vector<std::size_t>& labels, const MetricConfig& cfg)
{
    if (image.rank() != 3 || image.extent(0) != 3) throw ArgumentError("insertion metric expects a [3 x H x W] image");
    return insertion_curve(net, image, blur_baseline(image, cfg), map, order, labels, cfg);
}

template <typename T>
InsertionCurve insertion_metric(const NetworkDef<T>& net, const Tensor<float>& image, const AttributionMap& map,
                                std::size_t target, const MetricConfig& cfg = {})
{
    return insertion_curve(net, image, map, InsertionOrder::descending, {target}, cfg);
}

template <typename T>
InsertionCurve complementary_insertion_metric(const NetworkDef<T>& net, const Tensor<float>& image,
                                              const AttributionMap& map, std::size_t target,
                                              const std::vector<std::size_t>& other_labels,
                                              const MetricConfig& cfg = {})
{
    if (other_labels.empty()) throw ArgumentError("complementary insertion metric needs other labels");
    if (std::find(other_labels.begin(), other_labels.end(), target) != other_labels.end())
        throw ArgumentError("other labels must not contain the target");
    return insertion_curve(net, image, map, InsertionOrder::ascending, other_labels, cfg);
}

// Average ranks (1-based) with ties sharing the mean of their positions.
inline std::vector<double> average_ranks(const std::vector<double>& v)
{
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> ranks(v.size());
    for (std::size_t i = 0; i < idx.size();) {
        std::size_t j = i;
        while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
        const double r = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k) ranks[idx[k]] = r;
        i = j + 1;
    }
    return ranks;
}

inline double pearson(const std::vector<double>& a, const std::vector<double>& b)
{
    if (a.size() != b.size()) throw DimensionError("correlation inputs differ in length");
    if (a.size() < 2) throw ArgumentError("correlation needs at least two values");
    const double n = static_cast<double>(a.size());
    const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
    const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
    double sab = 0.0, saa = 0.0, sbb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        sab += (a[i] - ma) * (b[i] - mb);
        saa += (a[i] - ma) * (a[i] - ma);
        sbb += (b[i] - mb) * (b[i] - mb);
    }
    // A constant input carries no ranking information; report no correlation.
    if (saa == 0.0 || sbb == 0.0) return 0.0;
    return sab / std::sqrt(saa * sbb);
}

template <typename A, typename B>
double spearman(const std::vector<A>& a, const std::vector<B>& b)
{
    return pearson(average_ranks(std::vector<double>(a.begin(), a.end())),
                   average_ranks(std::vector<double>(b.begin(), b.end())));
}

// Copy of `net` whose classifier weights are redrawn from N(0, std(W)) and
// bias from N(0, std(b)) (population std over the original values).
template <typename T>
NetworkDef<T> reinitialize_classifier(const NetworkDef<T>& net, std::uint64_t seed)
{
    NetworkDef<T> copy = net;
    auto& cls = copy.layers.back();
    std::mt19937_64 rng(seed);
    auto redraw = [&rng](Tensor<T>& t) {
        if (t.empty()) return;
        const double n = static_cast<double>(t.size());
        const double mean = sum(t) / n;
        double var = 0.0;
        for (T v : t.values()) var += (static_cast<double>(v) - mean) * (static_cast<double>(v) - mean);
        const double sd = std::sqrt(var / n);
        std::normal_distribution<double> normal(0.0, 1.0);
        for (auto& v : t.values()) v = static_cast<T>(sd * normal(rng));
    };
    redraw(cls.weight);
    redraw(cls.bias);
    return copy;
}

struct SanityResult {
    double correlation = 0.0;
    AttributionMap original;
    AttributionMap reinitialized;
};

// Spearman correlation of signed per-pixel values between the map of the
// original network and that of a classifier-reinitialized copy.
template <typename T>
SanityResult reinit_sanity_check(const NetworkDef<T>& net, const Tensor<T>& x, std::size_t target, Method method,
                                 std::uint64_t seed, const MethodConfig& cfg = {})
{
    SanityResult r;
    r.original = compute_attribution(net, x, target, method, cfg).map;
    const auto other = reinitialize_classifier(net, seed);
    r.reinitialized = compute_attribution(other, x, target, method, cfg).map;
    r.correlation = spearman(r.original.values, r.reinitialized.values);
    return r;
}

} // namespace dmbp

#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <vector>

#include "dmbp/network.hpp"

namespace testing_support {

using dmbp::LayerKind;
using dmbp::LayerSpec;
using dmbp::NetworkDef;
using dmbp::Shape;
using dmbp::Tensor;
using Rng = std::mt19937_64;

inline std::filesystem::path fixture(const std::string& rel)
{
    return std::filesystem::path(FIXTURE_DIR) / rel;
}

template <typename T = double>
Tensor<T> random_tensor(Rng& rng, const Shape& shape, double scale = 1.0)
{
    std::normal_distribution<double> n(0.0, scale);
    Tensor<T> t(shape);
    for (auto& v : t.values()) v = static_cast<T>(n(rng));
    return t;
}

template <typename T = double>
Tensor<T> uniform_tensor(Rng& rng, const Shape& shape, double lo, double hi)
{
    std::uniform_real_distribution<double> u(lo, hi);
    Tensor<T> t(shape);
    for (auto& v : t.values()) v = static_cast<T>(u(rng));
    return t;
}

inline std::size_t pick(Rng& rng, std::size_t lo, std::size_t hi)
{
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

inline bool coin(Rng& rng, double p = 0.5) { return std::bernoulli_distribution(p)(rng); }

// He-style scaling keeps activations O(1) through a few layers.
inline LayerSpec<double> random_dense(Rng& rng, std::size_t in, std::size_t out, bool bias)
{
    return dmbp::make_dense(random_tensor(rng, {out, in}, std::sqrt(2.0 / static_cast<double>(in))),
                            bias ? random_tensor(rng, {out}, 0.3) : Tensor<double>{});
}

inline LayerSpec<double> random_conv(Rng& rng, std::size_t cin, std::size_t cout, std::size_t k, bool bias,
                                     std::size_t stride = 1, std::size_t pad = 1)
{
    return dmbp::make_conv(random_tensor(rng, {cout, cin, k, k}, std::sqrt(2.0 / static_cast<double>(cin * k * k))),
                           bias ? random_tensor(rng, {cout}, 0.3) : Tensor<double>{}, stride, pad);
}

inline LayerSpec<double> random_batchnorm(Rng& rng, std::size_t channels)
{
    return dmbp::make_batchnorm(uniform_tensor(rng, {channels}, 0.5, 1.5), random_tensor(rng, {channels}, 0.3),
                                random_tensor(rng, {channels}, 0.3), uniform_tensor(rng, {channels}, 0.5, 2.0),
                                1e-5);
}

inline LayerSpec<double> relu() { return dmbp::make_layer<double>(LayerKind::relu); }

inline NetworkDef<double> random_mlp(Rng& rng, bool bias = true, std::size_t max_hidden = 3)
{
    const std::size_t in = pick(rng, 3, 8);
    std::vector<LayerSpec<double>> layers;
    std::size_t width = in;
    const std::size_t hidden = pick(rng, 1, max_hidden);
    for (std::size_t h = 0; h < hidden; ++h) {
        const std::size_t out = pick(rng, 3, 10);
        layers.push_back(random_dense(rng, width, out, bias));
        layers.push_back(relu());
        width = out;
    }
    layers.push_back(random_dense(rng, width, pick(rng, 2, 4), bias));
    return dmbp::make_network<double>({in}, std::move(layers), {}, "random-mlp");
}

// Small CNN mixing every supported layer kind: conv (+batchnorm), maxpool,
// a residual block with or without projection, average pooling, flatten or
// global pooling, and a dense head. Without biases there is no batch-norm
// either, since fusion turns it into a bias.
inline NetworkDef<double> random_cnn(Rng& rng, bool bias = true)
{
    const std::size_t cin = pick(rng, 1, 3);
    const std::size_t hw = 8;
    const std::size_t c1 = pick(rng, 2, 4);
    std::vector<LayerSpec<double>> layers;
    layers.push_back(random_conv(rng, cin, c1, 3, bias));
    if (bias && coin(rng)) layers.push_back(random_batchnorm(rng, c1));
    layers.push_back(relu());
    std::size_t spatial = hw;
    if (coin(rng)) {
        layers.push_back(dmbp::make_pool<double>(LayerKind::maxpool, 2, 2));
        spatial /= 2;
    }
    std::size_t channels = c1;
    if (coin(rng, 0.7)) {
        const bool project = coin(rng);
        const std::size_t c2 = project ? pick(rng, 2, 4) : channels;
        std::vector<LayerSpec<double>> main;
        main.push_back(random_conv(rng, channels, c2, 3, bias));
        if (bias && coin(rng)) main.push_back(random_batchnorm(rng, c2));
        main.push_back(relu());
        main.push_back(random_conv(rng, c2, c2, 3, bias));
        std::vector<LayerSpec<double>> proj;
        if (project) {
            proj.push_back(random_conv(rng, channels, c2, 1, bias, 1, 0));
            if (bias && coin(rng)) proj.push_back(random_batchnorm(rng, c2));
        }
        layers.push_back(dmbp::make_residual(std::move(main), std::move(proj), coin(rng, 0.8)));
        channels = c2;
    }
    std::size_t features = 0;
    if (coin(rng)) {
        layers.push_back(dmbp::make_layer<double>(LayerKind::global_avgpool));
        features = channels;
    } else {
        if (coin(rng)) {
            layers.push_back(dmbp::make_pool<double>(LayerKind::avgpool, 2, 2));
            spatial /= 2;
        }
        layers.push_back(dmbp::make_layer<double>(LayerKind::flatten));
        features = channels * spatial * spatial;
    }
    if (coin(rng)) {
        const std::size_t h = pick(rng, 4, 8);
        layers.push_back(random_dense(rng, features, h, bias));
        layers.push_back(relu());
        features = h;
    }
    layers.push_back(random_dense(rng, features, pick(rng, 2, 4), bias));
    return dmbp::make_network<double>({cin, hw, hw}, std::move(layers), {}, "random-cnn");
}

// Draws inputs until every pre-activation is at least `margin` from zero.
template <typename T>
Tensor<T> nudged_input(Rng& rng, const NetworkDef<T>& net, double margin, double scale = 1.0, int attempts = 2000)
{
    for (int a = 0; a < attempts; ++a) {
        auto x = random_tensor<T>(rng, net.input_shape, scale);
        const auto trace = dmbp::forward(net, x);
        if (static_cast<double>(trace.min_abs_preactivation()) >= margin) return x;
    }
    throw std::runtime_error("could not find an input away from ReLU boundaries");
}

// Central difference of a scalar function along each coordinate of x.
inline Tensor<double> central_difference(const std::function<double(const Tensor<double>&)>& f,
                                         const Tensor<double>& x, double h = 1e-5)
{
    Tensor<double> g(x.shape());
    Tensor<double> probe = x;
    for (std::size_t i = 0; i < x.size(); ++i) {
        probe[i] = x[i] + h;
        const double up = f(probe);
        probe[i] = x[i] - h;
        const double down = f(probe);
        probe[i] = x[i];
        g[i] = (up - down) / (2.0 * h);
    }
    return g;
}

inline double relative_error(double a, double b, double floor = 1.0)
{
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

inline double max_relative_error(const Tensor<double>& a, const Tensor<double>& b, double floor = 1.0)
{
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, relative_error(a[i], b[i], floor));
    return worst;
}

// Three hidden ReLU layers, biases on the first two only, bias-free
// classifier:  y = w^T relu(W3 relu(W2 relu(W1 x + b1) + b2)).
struct ThreeLayerExample {
    using Matrix = std::vector<std::vector<double>>;
    Matrix W1{{1, -2, 0.5, 1}, {0.5, 1, -1, 2}, {-1, 0.5, 1, -0.5}};
    std::vector<double> b1{0.2, -0.3, 0.1};
    Matrix W2{{1, -1, 0.5}, {0.3, 0.8, -1.2}, {-0.7, 0.4, 1.1}};
    std::vector<double> b2{0.1, 0.2, -0.4};
    Matrix W3{{0.9, -0.6, 0.4}, {-0.5, 1.2, 0.7}};
    Matrix head{{1.5, -0.8}, {0.6, 1.1}};
    std::vector<double> x{1, 0.5, -1, 2};

    static Tensor<double> tensor(const Matrix& m)
    {
        Tensor<double> t({m.size(), m[0].size()});
        for (std::size_t i = 0; i < m.size(); ++i)
            for (std::size_t j = 0; j < m[0].size(); ++j) t(i, j) = m[i][j];
        return t;
    }

    NetworkDef<double> network() const
    {
        std::vector<LayerSpec<double>> layers;
        layers.push_back(dmbp::make_dense(tensor(W1), Tensor<double>({3}, b1)));
        layers.push_back(relu());
        layers.push_back(dmbp::make_dense(tensor(W2), Tensor<double>({3}, b2)));
        layers.push_back(relu());
        layers.push_back(dmbp::make_dense(tensor(W3)));
        layers.push_back(relu());
        layers.push_back(dmbp::make_dense(tensor(head)));
        return dmbp::make_network<double>({4}, std::move(layers), {}, "three-layer");
    }

    Tensor<double> input() const { return Tensor<double>({4}, x); }

    // Hand expansion with explicit masked matrices:
    //   W^_l = W_l diag(H(h_{l-1} + b_{l-1})),  w^ = w diag(H(h_3))
    //   y = w^ W^3 W^2 W1 x + w^ W^3 W^2 b1 + w^ W^3 b2
    double expanded_output(std::size_t target) const
    {
        auto mv = [](const Matrix& m, const std::vector<double>& v) {
            std::vector<double> out(m.size(), 0.0);
            for (std::size_t i = 0; i < m.size(); ++i)
                for (std::size_t j = 0; j < v.size(); ++j) out[i] += m[i][j] * v[j];
            return out;
        };
        auto add = [](std::vector<double> a, const std::vector<double>& b) {
            for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
            return a;
        };
        auto heaviside = [](const std::vector<double>& v) {
            std::vector<double> h(v.size());
            for (std::size_t i = 0; i < v.size(); ++i) h[i] = v[i] > 0.0 ? 1.0 : 0.0;
            return h;
        };
        auto masked = [](Matrix m, const std::vector<double>& h) {
            for (auto& row : m)
                for (std::size_t j = 0; j < row.size(); ++j) row[j] *= h[j];
            return m;
        };
        const auto h1 = mv(W1, x);
        const auto H1 = heaviside(add(h1, b1));
        const auto W2h = masked(W2, H1);
        const auto h2 = add(mv(W2h, h1), mv(W2h, b1));
        const auto H2 = heaviside(add(h2, b2));
        const auto W3h = masked(W3, H2);
        const auto h3 = add(mv(W3h, mv(W2h, h1)), add(mv(W3h, mv(W2h, b1)), mv(W3h, b2)));
        const auto H3 = heaviside(h3);
        const Matrix w_hat = masked(Matrix{head[target]}, H3);
        const double input_term = mv(w_hat, mv(W3h, mv(W2h, mv(W1, x))))[0];
        const double b1_term = mv(w_hat, mv(W3h, mv(W2h, b1)))[0];
        const double b2_term = mv(w_hat, mv(W3h, b2))[0];
        return input_term + b1_term + b2_term;
    }
};

} // namespace testing_support

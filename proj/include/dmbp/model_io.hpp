#pragma once

// DMBPW001 weight files and JSON architecture files.
//
// Weight file layout (little-endian):
//   "DMBPW001" | u32 tensor count | per tensor: u16 name length, UTF-8 name,
//   u8 rank, rank x u32 extents, product(extents) x f32 row-major.
//
// Tensor names are "layer{i}.weight", "layer{i}.bias" and, for batch-norm,
// "layer{i}.{gamma|beta|mean|var|eps}". Layers nested in a residual block at
// top-level index i are prefixed "layer{i}.main{j}." and "layer{i}.proj{j}.".

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "dmbp/network.hpp"

namespace dmbp {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

inline constexpr char kWeightMagic[8] = {'D', 'M', 'B', 'P', 'W', '0', '0', '1'};

using NamedTensors = std::vector<std::pair<std::string, Tensor<float>>>;

namespace detail {

inline std::vector<char> read_file_bytes(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    return std::vector<char>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

class ByteReader {
public:
    explicit ByteReader(const std::vector<char>& bytes)
      : m_bytes(bytes)
    { }

    template <typename U>
    U read(const char* what)
    {
        U v;
        take(&v, sizeof(U), what);
        return v;
    }

    void take(void* dst, std::size_t n, const char* what)
    {
        if (m_pos + n > m_bytes.size())
            throw FormatError(std::string("truncated file while reading ") + what);
        std::memcpy(dst, m_bytes.data() + m_pos, n);
        m_pos += n;
    }

    std::size_t remaining() const { return m_bytes.size() - m_pos; }

private:
    const std::vector<char>& m_bytes;
    std::size_t m_pos = 0;
};

template <typename U>
void put(std::ostream& out, U v)
{
    out.write(reinterpret_cast<const char*>(&v), sizeof(U));
}

} // namespace detail

inline NamedTensors read_weights(const std::filesystem::path& path)
{
    const auto bytes = detail::read_file_bytes(path);
    detail::ByteReader r(bytes);
    char magic[8];
    try {
        r.take(magic, 8, "magic");
    } catch (const FormatError&) {
        throw LoadError("bad magic");
    }
    if (std::memcmp(magic, kWeightMagic, 8) != 0) throw LoadError("bad magic");

    NamedTensors out;
    try {
        const auto count = r.read<std::uint32_t>("tensor count");
        for (std::uint32_t t = 0; t < count; ++t) {
            const auto name_len = r.read<std::uint16_t>("name length");
            std::string name(name_len, '\0');
            r.take(name.data(), name_len, "tensor name");
            const auto rank = r.read<std::uint8_t>("rank");
            if (rank == 0) throw LoadError("tensor '" + name + "' has rank 0");
            Shape shape(rank);
            for (auto& e : shape) e = r.read<std::uint32_t>("extent");
            const std::size_t n = shape_size(shape);
            if (n * sizeof(float) > r.remaining())
                throw LoadError("truncated file: tensor '" + name + "' declares " + std::to_string(n)
                                + " floats but only " + std::to_string(r.remaining()) + " bytes remain");
            std::vector<float> data(n);
            r.take(data.data(), n * sizeof(float), "tensor data");
            out.emplace_back(std::move(name), Tensor<float>(std::move(shape), std::move(data)));
        }
    } catch (const FormatError& e) {
        throw LoadError(e.what());
    } catch (const DimensionError& e) {
        throw LoadError(e.what());
    }
    if (r.remaining() != 0)
        throw LoadError("file length does not match declared tensors (" + std::to_string(r.remaining())
                        + " trailing bytes)");
    return out;
}

inline void write_weights(const std::filesystem::path& path, const NamedTensors& tensors)
{
    std::ostringstream buf;
    buf.write(kWeightMagic, 8);
    detail::put<std::uint32_t>(buf, static_cast<std::uint32_t>(tensors.size()));
    for (const auto& [name, t] : tensors) {
        detail::put<std::uint16_t>(buf, static_cast<std::uint16_t>(name.size()));
        buf.write(name.data(), static_cast<std::streamsize>(name.size()));
        detail::put<std::uint8_t>(buf, static_cast<std::uint8_t>(t.rank()));
        for (auto e : t.shape()) detail::put<std::uint32_t>(buf, static_cast<std::uint32_t>(e));
        buf.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(float)));
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    const auto s = buf.str();
    out.write(s.data(), static_cast<std::streamsize>(s.size()));
    if (!out) throw IoError("write failed for " + path.string());
}

namespace detail {

using nlohmann::json;

class TensorPool {
public:
    explicit TensorPool(NamedTensors tensors)
    {
        for (auto& [name, t] : tensors) {
            if (m_tensors.count(name)) throw LoadError("duplicate tensor '" + name + "'");
            m_tensors.emplace(name, std::move(t));
        }
    }

    template <typename T>
    Tensor<T> take(const std::string& name, const Shape& expected, int layer)
    {
        auto it = m_tensors.find(name);
        if (it == m_tensors.end()) throw LoadError("missing tensor '" + name + "'", layer);
        if (it->second.shape() != expected)
            throw LoadError("tensor '" + name + "' has shape " + shape_str(it->second.shape()) + ", expected "
                                + shape_str(expected),
                            layer);
        auto t = it->second.template cast<T>();
        m_tensors.erase(it);
        return t;
    }

    bool contains(const std::string& name) const { return m_tensors.count(name) != 0; }

    void require_consumed() const
    {
        if (!m_tensors.empty()) throw LoadError("unused tensor '" + m_tensors.begin()->first + "' in weight file");
    }

private:
    std::map<std::string, Tensor<float>> m_tensors;
};

inline std::pair<std::size_t, std::size_t> pair_param(const json& j, const char* key, std::size_t fallback,
                                                      int layer)
{
    if (!j.contains(key)) return {fallback, fallback};
    const auto& v = j.at(key);
    if (v.is_number_integer()) {
        const auto x = v.get<long long>();
        if (x < 0) throw LoadError(std::string("negative '") + key + "'", layer);
        return {static_cast<std::size_t>(x), static_cast<std::size_t>(x)};
    }
    if (v.is_array() && v.size() == 2) return {v[0].get<std::size_t>(), v[1].get<std::size_t>()};
    throw LoadError(std::string("'") + key + "' must be an integer or a pair", layer);
}

inline LayerKind parse_kind(const std::string& s, int layer)
{
    static const std::map<std::string, LayerKind> kinds = {
        {"dense", LayerKind::dense},
        {"conv2d", LayerKind::conv2d},
        {"relu", LayerKind::relu},
        {"maxpool", LayerKind::maxpool},
        {"avgpool", LayerKind::avgpool},
        {"global_avgpool", LayerKind::global_avgpool},
        {"flatten", LayerKind::flatten},
        {"batchnorm", LayerKind::batchnorm},
        {"residual_block", LayerKind::residual_block},
    };
    auto it = kinds.find(s);
    if (it == kinds.end()) throw LoadError("unsupported layer kind '" + s + "'", layer);
    return it->second;
}

template <typename T>
std::vector<LayerSpec<T>> parse_layers(const json& arr, const std::string& prefix, TensorPool& pool, int top_index,
                                       bool nested);

template <typename T>
LayerSpec<T> parse_layer(const json& j, const std::string& name, TensorPool& pool, int index)
{
    if (!j.is_object() || !j.contains("kind")) throw LoadError("layer entry needs a 'kind'", index);
    LayerSpec<T> l;
    l.kind = parse_kind(j.at("kind").get<std::string>(), index);
    l.source_index = index;
    const bool bias = j.value("bias", true);
    switch (l.kind) {
    case LayerKind::dense: {
        const auto in = j.at("in_features").get<std::size_t>();
        const auto out = j.at("out_features").get<std::size_t>();
        l.weight = pool.take<T>(name + ".weight", {out, in}, index);
        if (bias) l.bias = pool.take<T>(name + ".bias", {out}, index);
        break;
    }
    case LayerKind::conv2d: {
        const auto cin = j.at("in_channels").get<std::size_t>();
        const auto cout = j.at("out_channels").get<std::size_t>();
        const auto [kh, kw] = pair_param(j, "kernel", 0, index);
        const auto [sh, sw] = pair_param(j, "stride", 1, index);
        const auto [ph, pw] = pair_param(j, "padding", 0, index);
        l.conv = {sh, sw, ph, pw};
        l.weight = pool.take<T>(name + ".weight", {cout, cin, kh, kw}, index);
        if (bias) l.bias = pool.take<T>(name + ".bias", {cout}, index);
        break;
    }
    case LayerKind::maxpool:
    case LayerKind::avgpool: {
        l.pool_kernel = j.at("kernel").get<std::size_t>();
        l.pool_stride = j.value("stride", l.pool_kernel);
        break;
    }
    case LayerKind::batchnorm: {
        const auto c = j.at("channels").get<std::size_t>();
        l.gamma = pool.take<T>(name + ".gamma", {c}, index);
        l.beta = pool.take<T>(name + ".beta", {c}, index);
        l.running_mean = pool.take<T>(name + ".mean", {c}, index);
        l.running_var = pool.take<T>(name + ".var", {c}, index);
        if (pool.contains(name + ".eps"))
            l.eps = pool.take<T>(name + ".eps", {1}, index)[0];
        else
            l.eps = static_cast<T>(j.value("eps", 1e-5));
        break;
    }
    case LayerKind::residual_block: {
        if (!j.contains("main")) throw LoadError("residual_block needs a 'main' list", index);
        l.main = parse_layers<T>(j.at("main"), name + ".main", pool, index, true);
        if (j.contains("projection"))
            l.projection = parse_layers<T>(j.at("projection"), name + ".proj", pool, index, true);
        l.post_relu = j.value("post_relu", true);
        break;
    }
    case LayerKind::relu:
    case LayerKind::global_avgpool:
    case LayerKind::flatten:
        break;
    }
    return l;
}

template <typename T>
std::vector<LayerSpec<T>> parse_layers(const json& arr, const std::string& prefix, TensorPool& pool, int top_index,
                                       bool nested)
{
    if (!arr.is_array()) throw LoadError("layer list must be an array", top_index);
    std::vector<LayerSpec<T>> layers;
    for (std::size_t i = 0; i < arr.size(); ++i) {
        const int index = nested ? top_index : static_cast<int>(i);
        const std::string name = prefix + std::to_string(i);
        auto l = parse_layer<T>(arr[i], name, pool, index);
        if (nested && l.kind == LayerKind::residual_block)
            throw LoadError("nested residual blocks are not supported", index);
        layers.push_back(std::move(l));
    }
    return layers;
}

inline PreprocessSpec parse_preprocess(const json& j)
{
    PreprocessSpec p;
    p.height = j.value("height", std::size_t{0});
    p.width = j.value("width", std::size_t{0});
    if (j.contains("mean")) {
        const auto m = j.at("mean").get<std::vector<double>>();
        if (m.size() != 3) throw LoadError("preprocess mean needs 3 entries");
        std::copy(m.begin(), m.end(), p.mean.begin());
    }
    if (j.contains("std")) {
        const auto s = j.at("std").get<std::vector<double>>();
        if (s.size() != 3) throw LoadError("preprocess std needs 3 entries");
        std::copy(s.begin(), s.end(), p.std.begin());
    }
    p.resize = j.value("resize", std::string("bilinear"));
    try {
        p.validate();
    } catch (const ArgumentError& e) {
        throw LoadError(e.what());
    }
    return p;
}

template <typename T>
void collect_tensors(const std::vector<LayerSpec<T>>& layers, const std::string& prefix, NamedTensors& out)
{
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const auto& l = layers[i];
        const std::string name = prefix + std::to_string(i);
        if (!l.weight.empty()) out.emplace_back(name + ".weight", l.weight.template cast<float>());
        if (!l.bias.empty()) out.emplace_back(name + ".bias", l.bias.template cast<float>());
        if (l.kind == LayerKind::residual_block) {
            collect_tensors(l.main, name + ".main", out);
            collect_tensors(l.projection, name + ".proj", out);
        }
    }
}

template <typename T>
json describe_layers(const std::vector<LayerSpec<T>>& layers)
{
    json arr = json::array();
    for (const auto& l : layers) {
        json j;
        j["kind"] = to_string(l.kind);
        switch (l.kind) {
        case LayerKind::dense:
            j["in_features"] = l.weight.extent(1);
            j["out_features"] = l.weight.extent(0);
            j["bias"] = l.has_bias();
            break;
        case LayerKind::conv2d:
            j["in_channels"] = l.weight.extent(1);
            j["out_channels"] = l.weight.extent(0);
            j["kernel"] = {l.weight.extent(2), l.weight.extent(3)};
            j["stride"] = {l.conv.stride_h, l.conv.stride_w};
            j["padding"] = {l.conv.pad_h, l.conv.pad_w};
            j["bias"] = l.has_bias();
            break;
        case LayerKind::maxpool:
        case LayerKind::avgpool:
            j["kernel"] = l.pool_kernel;
            j["stride"] = l.pool_stride;
            break;
        case LayerKind::residual_block:
            j["main"] = describe_layers(l.main);
            if (!l.projection.empty()) j["projection"] = describe_layers(l.projection);
            j["post_relu"] = l.post_relu;
            break;
        default:
            break;
        }
        arr.push_back(std::move(j));
    }
    return arr;
}

} // namespace detail

template <typename T = float>
NetworkDef<T> load_network(const std::filesystem::path& weights_path, const std::filesystem::path& arch_path)
{
    detail::json arch;
    {
        std::ifstream in(arch_path);
        if (!in) throw LoadError("cannot open architecture file " + arch_path.string());
        try {
            arch = detail::json::parse(in);
        } catch (const detail::json::exception& e) {
            throw LoadError(std::string("architecture file does not parse: ") + e.what());
        }
    }
    NamedTensors tensors;
    try {
        tensors = read_weights(weights_path);
    } catch (const IoError& e) {
        throw LoadError(e.what());
    }
    try {
        detail::TensorPool pool(std::move(tensors));
        auto layers = detail::parse_layers<T>(arch.at("layers"), "layer", pool, -1, false);
        pool.require_consumed();
        auto net = make_network<T>(arch.at("input_shape").get<Shape>(), std::move(layers),
                                   detail::parse_preprocess(arch.value("preprocess", detail::json::object())),
                                   arch.value("model_id", weights_path.stem().string()));
        const auto declared = arch.value("class_count", net.class_count);
        if (declared != net.class_count)
            throw LoadError("class_count " + std::to_string(declared) + " does not match classifier output "
                            + std::to_string(net.class_count));
        return net;
    } catch (const detail::json::exception& e) {
        throw LoadError(std::string("architecture file is malformed: ") + e.what());
    } catch (const LoadError&) {
        throw;
    } catch (const Error& e) {
        throw LoadError(e.what());
    }
}

// Writes an already-fused network back out (batch-norm folded into the
// preceding layer's weight and bias).
template <typename T>
void save_network(const NetworkDef<T>& net, const std::filesystem::path& weights_path,
                  const std::filesystem::path& arch_path)
{
    NamedTensors tensors;
    detail::collect_tensors(net.layers, "layer", tensors);
    write_weights(weights_path, tensors);

    detail::json arch;
    arch["model_id"] = net.model_id;
    arch["input_shape"] = net.input_shape;
    arch["class_count"] = net.class_count;
    arch["preprocess"] = {{"height", net.preprocess.height},
                          {"width", net.preprocess.width},
                          {"mean", net.preprocess.mean},
                          {"std", net.preprocess.std},
                          {"resize", net.preprocess.resize}};
    arch["layers"] = detail::describe_layers(net.layers);
    std::ofstream out(arch_path);
    if (!out) throw IoError("cannot write " + arch_path.string());
    out << arch.dump(2) << '\n';
}

} // namespace dmbp

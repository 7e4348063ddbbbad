#pragma once

#include <png.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "dmbp/attribution_map.hpp"
#include "dmbp/network.hpp"

namespace dmbp {

// 8-bit interleaved RGB.
struct Rgb8Image {
    std::size_t width = 0;
    std::size_t height = 0;
    std::vector<std::uint8_t> pixels; // height * width * 3

    std::uint8_t at(std::size_t i, std::size_t j, std::size_t c) const { return pixels[(i * width + j) * 3 + c]; }
};

namespace detail {

inline std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void write_bytes_atomic(const std::filesystem::path& path, const void* data, std::size_t n)
{
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw IoError("cannot write " + tmp.string());
        out.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
        if (!out) throw IoError("write failed for " + tmp.string());
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw IoError("cannot move " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

inline Rgb8Image decode_ppm(const std::vector<std::uint8_t>& bytes)
{
    std::size_t pos = 0;
    auto skip_space = [&] {
        while (pos < bytes.size()) {
            if (bytes[pos] == '#') {
                while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
            } else if (std::isspace(bytes[pos])) {
                ++pos;
            } else {
                break;
            }
        }
    };
    auto read_int = [&](const char* what) {
        skip_space();
        std::size_t v = 0;
        const std::size_t start = pos;
        while (pos < bytes.size() && std::isdigit(bytes[pos])) v = v * 10 + (bytes[pos++] - '0');
        if (pos == start) throw FormatError(std::string("PPM: missing ") + what);
        return v;
    };
    if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '6') throw FormatError("not a binary PPM (P6) file");
    pos = 2;
    Rgb8Image img;
    img.width = read_int("width");
    img.height = read_int("height");
    const std::size_t maxval = read_int("maxval");
    if (img.width == 0 || img.height == 0) throw FormatError("PPM: zero extent");
    if (maxval == 0 || maxval > 255) throw FormatError("PPM: only 8-bit maxval is supported");
    if (pos >= bytes.size() || !std::isspace(bytes[pos])) throw FormatError("PPM: malformed header");
    ++pos;
    const std::size_t n = img.width * img.height * 3;
    if (bytes.size() - pos < n) throw FormatError("PPM: truncated pixel data");
    img.pixels.assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                      bytes.begin() + static_cast<std::ptrdiff_t>(pos + n));
    if (maxval != 255)
        for (auto& p : img.pixels) p = static_cast<std::uint8_t>(std::lround(p * 255.0 / static_cast<double>(maxval)));
    return img;
}

// 8-bit RGB or RGBA only; alpha is dropped.
inline Rgb8Image decode_png(const std::vector<std::uint8_t>& bytes)
{
    png_image image;
    std::memset(&image, 0, sizeof image);
    image.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_memory(&image, bytes.data(), bytes.size()))
        throw FormatError(std::string("PNG: ") + image.message);
    const auto fmt = image.format;
    const bool supported = (fmt & PNG_FORMAT_FLAG_COLOR) && !(fmt & PNG_FORMAT_FLAG_COLORMAP)
                           && !(fmt & PNG_FORMAT_FLAG_LINEAR);
    if (!supported) {
        png_image_free(&image);
        throw FormatError("PNG: only 8-bit RGB/RGBA images are supported");
    }
    image.format = PNG_FORMAT_RGB;
    Rgb8Image img;
    img.width = image.width;
    img.height = image.height;
    img.pixels.resize(PNG_IMAGE_SIZE(image));
    if (!png_image_finish_read(&image, nullptr, img.pixels.data(), 0, nullptr)) {
        const std::string msg = image.message;
        png_image_free(&image);
        throw FormatError("PNG: " + msg);
    }
    return img;
}

} // namespace detail

inline Rgb8Image read_rgb8(const std::filesystem::path& path)
{
    const auto bytes = detail::read_bytes(path);
    static const std::uint8_t png_sig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
    if (bytes.size() >= 8 && std::memcmp(bytes.data(), png_sig, 8) == 0) return detail::decode_png(bytes);
    if (bytes.size() >= 2 && bytes[0] == 'P' && bytes[1] == '6') return detail::decode_ppm(bytes);
    throw FormatError("unsupported image format: " + path.string());
}

inline std::vector<std::uint8_t> encode_png(const Rgb8Image& img)
{
    png_image image;
    std::memset(&image, 0, sizeof image);
    image.version = PNG_IMAGE_VERSION;
    image.width = static_cast<png_uint_32>(img.width);
    image.height = static_cast<png_uint_32>(img.height);
    image.format = PNG_FORMAT_RGB;
    png_alloc_size_t size = 0;
    if (!png_image_write_to_memory(&image, nullptr, &size, 0, img.pixels.data(), 0, nullptr))
        throw IoError(std::string("PNG encode: ") + image.message);
    std::vector<std::uint8_t> out(size);
    if (!png_image_write_to_memory(&image, out.data(), &size, 0, img.pixels.data(), 0, nullptr))
        throw IoError(std::string("PNG encode: ") + image.message);
    out.resize(size);
    return out;
}

inline void write_png(const std::filesystem::path& path, const Rgb8Image& img)
{
    const auto bytes = encode_png(img);
    detail::write_bytes_atomic(path, bytes.data(), bytes.size());
}

// [3 x H x W] in [0, 1].
inline Tensor<float> to_unit_tensor(const Rgb8Image& img)
{
    Tensor<float> t({3, img.height, img.width});
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t i = 0; i < img.height; ++i)
            for (std::size_t j = 0; j < img.width; ++j) t(c, i, j) = static_cast<float>(img.at(i, j, c)) / 255.0f;
    return t;
}

inline Rgb8Image from_unit_tensor(const Tensor<float>& t)
{
    if (t.rank() != 3 || t.extent(0) != 3) throw DimensionError("expected a [3 x H x W] image tensor");
    Rgb8Image img{t.extent(2), t.extent(1), {}};
    img.pixels.resize(img.width * img.height * 3);
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t i = 0; i < img.height; ++i)
            for (std::size_t j = 0; j < img.width; ++j) {
                const float v = std::clamp(t(c, i, j), 0.0f, 1.0f);
                img.pixels[(i * img.width + j) * 3 + c] = static_cast<std::uint8_t>(std::lround(v * 255.0f));
            }
    return img;
}

// Bilinear resampling with half-pixel centers: output pixel d samples the
// source at (d + 0.5) * in/out - 0.5, clamped to the valid range.
inline Tensor<float> resize_bilinear(const Tensor<float>& src, std::size_t out_h, std::size_t out_w)
{
    if (src.rank() != 3) throw DimensionError("resize expects [C x H x W]");
    const std::size_t c = src.extent(0), in_h = src.extent(1), in_w = src.extent(2);
    if (out_h == in_h && out_w == in_w) return src;
    auto coord = [](std::size_t d, std::size_t in, std::size_t out) {
        double s = (static_cast<double>(d) + 0.5) * static_cast<double>(in) / static_cast<double>(out) - 0.5;
        s = std::clamp(s, 0.0, static_cast<double>(in - 1));
        const auto i0 = static_cast<std::size_t>(std::floor(s));
        const std::size_t i1 = std::min(i0 + 1, in - 1);
        return std::tuple<std::size_t, std::size_t, double>{i0, i1, s - static_cast<double>(i0)};
    };
    Tensor<float> out({c, out_h, out_w});
    for (std::size_t i = 0; i < out_h; ++i) {
        const auto [y0, y1, fy] = coord(i, in_h, out_h);
        for (std::size_t j = 0; j < out_w; ++j) {
            const auto [x0, x1, fx] = coord(j, in_w, out_w);
            for (std::size_t ch = 0; ch < c; ++ch) {
                const double top = (1 - fx) * src(ch, y0, x0) + fx * src(ch, y0, x1);
                const double bot = (1 - fx) * src(ch, y1, x0) + fx * src(ch, y1, x1);
                out(ch, i, j) = static_cast<float>((1 - fy) * top + fy * bot);
            }
        }
    }
    return out;
}

// Decoded, resized to the spec's extent (when set), scaled to [0, 1]; no
// mean/std normalization yet.
inline Tensor<float> load_raw_image(const std::filesystem::path& path, const PreprocessSpec& spec)
{
    auto t = to_unit_tensor(read_rgb8(path));
    if (spec.height && spec.width) t = resize_bilinear(t, spec.height, spec.width);
    return t;
}

// Per-channel (v - mean) / std.
template <typename T = float>
Tensor<T> normalize(const Tensor<float>& raw, const PreprocessSpec& spec)
{
    spec.validate();
    if (raw.rank() != 3 || raw.extent(0) != 3) throw DimensionError("normalize expects [3 x H x W]");
    Tensor<T> out(raw.shape());
    const std::size_t hw = raw.extent(1) * raw.extent(2);
    for (std::size_t c = 0; c < 3; ++c) {
        const T mean = static_cast<T>(spec.mean[c]);
        const T sd = static_cast<T>(spec.std[c]);
        for (std::size_t p = 0; p < hw; ++p) out[c * hw + p] = (static_cast<T>(raw[c * hw + p]) - mean) / sd;
    }
    return out;
}

template <typename T = float>
Tensor<T> load_image(const std::filesystem::path& path, const PreprocessSpec& spec)
{
    return normalize<T>(load_raw_image(path, spec), spec);
}

// Diverging colormap normalized by the map's max |value|: 0 -> white,
// +1 -> (255, 0, 0), -1 -> (0, 0, 255). With an overlay, the heat color is
// alpha-blended over the source image.
inline Rgb8Image heatmap_rgb(const AttributionMap& map, const Tensor<float>* overlay = nullptr,
                             double alpha = 0.6)
{
    if (map.values.size() != map.height * map.width) throw DimensionError("attribution map extent mismatch");
    if (overlay && (overlay->rank() != 3 || overlay->extent(1) != map.height || overlay->extent(2) != map.width))
        throw DimensionError("overlay image does not match the map extent");
    double peak = 0.0;
    for (float v : map.values) peak = std::max(peak, std::abs(static_cast<double>(v)));
    Rgb8Image img{map.width, map.height, std::vector<std::uint8_t>(map.width * map.height * 3)};
    for (std::size_t p = 0; p < map.values.size(); ++p) {
        const double v = peak > 0.0 ? static_cast<double>(map.values[p]) / peak : 0.0;
        double rgb[3];
        if (v >= 0.0) {
            rgb[0] = 1.0;
            rgb[1] = rgb[2] = 1.0 - v;
        } else {
            rgb[0] = rgb[1] = 1.0 + v;
            rgb[2] = 1.0;
        }
        for (std::size_t c = 0; c < 3; ++c) {
            double out = rgb[c];
            if (overlay) out = alpha * out + (1.0 - alpha) * std::clamp((*overlay)[c * map.values.size() + p], 0.0f, 1.0f);
            img.pixels[p * 3 + c] = static_cast<std::uint8_t>(std::lround(out * 255.0));
        }
    }
    return img;
}

inline void render_heatmap(const AttributionMap& map, const std::filesystem::path& out_path,
                           const Tensor<float>* overlay = nullptr)
{
    write_png(out_path, heatmap_rgb(map, overlay));
}

// Raw map format: "DMBPA001" | u32 height | u32 width | H*W f32 row-major |
// u16 metadata length | UTF-8 metadata ("key=value;..."). Little-endian.
inline constexpr char kRawMagic[8] = {'D', 'M', 'B', 'P', 'A', '0', '0', '1'};

inline std::string encode_metadata(const AttributionMap& map)
{
    std::ostringstream os;
    os << "method=" << map.method << ";target=" << map.target << ";model=" << map.model_id;
    if (!map.extra.empty()) os << ';' << map.extra;
    return os.str();
}

inline std::vector<std::uint8_t> serialize_raw(const AttributionMap& map)
{
    if (map.values.size() != map.height * map.width) throw DimensionError("attribution map extent mismatch");
    const std::string meta = encode_metadata(map);
    if (meta.size() > 0xffff) throw ArgumentError("attribution metadata too long");
    std::vector<std::uint8_t> out(8 + 4 + 4 + map.values.size() * 4 + 2 + meta.size());
    std::uint8_t* p = out.data();
    auto put = [&p](const void* src, std::size_t n) {
        std::memcpy(p, src, n);
        p += n;
    };
    const auto h = static_cast<std::uint32_t>(map.height), w = static_cast<std::uint32_t>(map.width);
    const auto len = static_cast<std::uint16_t>(meta.size());
    put(kRawMagic, 8);
    put(&h, 4);
    put(&w, 4);
    put(map.values.data(), map.values.size() * 4);
    put(&len, 2);
    put(meta.data(), meta.size());
    return out;
}

inline void write_raw(const AttributionMap& map, const std::filesystem::path& path)
{
    const auto bytes = serialize_raw(map);
    detail::write_bytes_atomic(path, bytes.data(), bytes.size());
}

inline AttributionMap parse_raw(const std::vector<std::uint8_t>& bytes)
{
    std::size_t pos = 0;
    auto take = [&](void* dst, std::size_t n, const char* what) {
        if (bytes.size() - pos < n) throw FormatError(std::string("raw map truncated while reading ") + what);
        std::memcpy(dst, bytes.data() + pos, n);
        pos += n;
    };
    char magic[8];
    take(magic, 8, "magic");
    if (std::memcmp(magic, kRawMagic, 8) != 0) throw FormatError("raw map: bad magic");
    std::uint32_t h = 0, w = 0;
    take(&h, 4, "height");
    take(&w, 4, "width");
    AttributionMap map;
    map.height = h;
    map.width = w;
    map.values.resize(static_cast<std::size_t>(h) * w);
    take(map.values.data(), map.values.size() * 4, "values");
    std::uint16_t len = 0;
    take(&len, 2, "metadata length");
    std::string meta(len, '\0');
    take(meta.data(), len, "metadata");
    if (pos != bytes.size()) throw FormatError("raw map: trailing bytes");

    std::istringstream is(meta);
    std::string field;
    std::vector<std::string> extra;
    while (std::getline(is, field, ';')) {
        const auto eq = field.find('=');
        const std::string key = field.substr(0, eq);
        const std::string value = eq == std::string::npos ? "" : field.substr(eq + 1);
        if (key == "method")
            map.method = value;
        else if (key == "target")
            map.target = value.empty() ? -1 : std::stoi(value);
        else if (key == "model")
            map.model_id = value;
        else
            extra.push_back(field);
    }
    for (std::size_t i = 0; i < extra.size(); ++i) map.extra += (i ? ";" : "") + extra[i];
    return map;
}

inline AttributionMap read_raw(const std::filesystem::path& path)
{
    return parse_raw(detail::read_bytes(path));
}

} // namespace dmbp

#pragma once

#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <zlib.h>

#include "cfkit/tensor.hpp"

namespace cfkit {

// 8-bit interleaved RGB image.
struct ImageU8 {
    int width = 0, height = 0;
    std::vector<uint8_t> data;  // row-major, 3 bytes per pixel

    uint8_t at(int y, int x, int c) const {
        return data[static_cast<size_t>((y * width + x) * 3 + c)];
    }
};

namespace image_io {

inline std::string read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IngestError("cannot open file: " + path);
    return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

// ---- PPM (P6, maxval 255) ---------------------------------------------

namespace detail {

inline void skip_ppm_space(const std::string& b, size_t& p) {
    while (p < b.size()) {
        const char c = b[p];
        if (c == '#') {
            while (p < b.size() && b[p] != '\n') ++p;
        } else if (c == ' ' || c == '\t' || c == '\r' || c == '\n') {
            ++p;
        } else {
            break;
        }
    }
}

inline int read_ppm_int(const std::string& b, size_t& p, const char* what) {
    skip_ppm_space(b, p);
    if (p >= b.size() || b[p] < '0' || b[p] > '9')
        throw IngestError(std::string("PPM: expected ") + what + " at offset " + std::to_string(p));
    long v = 0;
    while (p < b.size() && b[p] >= '0' && b[p] <= '9') {
        v = v * 10 + (b[p] - '0');
        if (v > 1 << 20) throw IngestError(std::string("PPM: absurd ") + what + " at offset " + std::to_string(p));
        ++p;
    }
    return static_cast<int>(v);
}

}  // namespace detail

inline ImageU8 decode_ppm(const std::string& bytes) {
    if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '6')
        throw IngestError("not a P6 PPM (bad magic at offset 0)");
    size_t p = 2;
    ImageU8 img;
    img.width = detail::read_ppm_int(bytes, p, "width");
    img.height = detail::read_ppm_int(bytes, p, "height");
    const int maxval = detail::read_ppm_int(bytes, p, "maxval");
    if (img.width <= 0 || img.height <= 0) throw IngestError("PPM: non-positive dimensions");
    if (maxval != 255)
        throw IngestError("PPM: unsupported maxval " + std::to_string(maxval) + " (only 255)");
    if (p >= bytes.size() || (bytes[p] != '\n' && bytes[p] != ' ' && bytes[p] != '\t' && bytes[p] != '\r'))
        throw IngestError("PPM: missing whitespace after maxval at offset " + std::to_string(p));
    ++p;  // exactly one whitespace byte before the payload
    const size_t need = static_cast<size_t>(img.width) * static_cast<size_t>(img.height) * 3;
    if (bytes.size() - p < need)
        throw IngestError("PPM: truncated payload at offset " + std::to_string(bytes.size()) + ", need " +
                          std::to_string(need + p) + " bytes");
    img.data.assign(bytes.begin() + static_cast<std::ptrdiff_t>(p),
                    bytes.begin() + static_cast<std::ptrdiff_t>(p + need));
    return img;
}

inline void write_ppm(const ImageU8& img, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IngestError("cannot open for writing: " + path);
    f << "P6\n" << img.width << " " << img.height << "\n255\n";
    f.write(reinterpret_cast<const char*>(img.data.data()), static_cast<std::streamsize>(img.data.size()));
    if (!f) throw IngestError("write failed: " + path);
}

// ---- PNG (8-bit RGB/RGBA, non-interlaced) -------------------------------

namespace detail {

inline uint32_t be32(const unsigned char* p) {
    return (static_cast<uint32_t>(p[0]) << 24) | (static_cast<uint32_t>(p[1]) << 16) |
           (static_cast<uint32_t>(p[2]) << 8) | static_cast<uint32_t>(p[3]);
}

inline int paeth(int a, int b, int c) {
    const int p = a + b - c;
    const int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
    if (pa <= pb && pa <= pc) return a;
    if (pb <= pc) return b;
    return c;
}

}  // namespace detail

inline ImageU8 decode_png(const std::string& bytes) {
    static const unsigned char sig[8] = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
    if (bytes.size() < 8 || std::memcmp(bytes.data(), sig, 8) != 0)
        throw IngestError("not a PNG (bad signature at offset 0)");
    size_t p = 8;
    int width = 0, height = 0, bit_depth = 0, color_type = 0, interlace = 0;
    bool have_ihdr = false;
    std::string idat;
    while (p + 8 <= bytes.size()) {
        const uint32_t len = detail::be32(reinterpret_cast<const unsigned char*>(bytes.data() + p));
        const std::string type = bytes.substr(p + 4, 4);
        if (p + 12 + len > bytes.size())
            throw IngestError("PNG: truncated chunk '" + type + "' at offset " + std::to_string(p));
        const char* payload = bytes.data() + p + 8;
        if (type == "IHDR") {
            if (len != 13) throw IngestError("PNG: malformed IHDR");
            const unsigned char* q = reinterpret_cast<const unsigned char*>(payload);
            width = static_cast<int>(detail::be32(q));
            height = static_cast<int>(detail::be32(q + 4));
            bit_depth = q[8];
            color_type = q[9];
            interlace = q[12];
            have_ihdr = true;
        } else if (type == "IDAT") {
            idat.append(payload, len);
        } else if (type == "IEND") {
            break;
        }
        p += 12 + len;
    }
    if (!have_ihdr) throw IngestError("PNG: missing IHDR");
    if (bit_depth != 8)
        throw IngestError("PNG: unsupported bit depth " + std::to_string(bit_depth) + " (only 8-bit)");
    if (color_type != 2 && color_type != 6)
        throw IngestError("PNG: unsupported color type " + std::to_string(color_type) +
                          " (only RGB/RGBA)");
    if (interlace != 0) throw IngestError("PNG: interlaced images are not supported");
    if (width <= 0 || height <= 0) throw IngestError("PNG: non-positive dimensions");

    const int ch = color_type == 2 ? 3 : 4;
    const size_t stride = static_cast<size_t>(width) * static_cast<size_t>(ch);
    const size_t raw_size = (stride + 1) * static_cast<size_t>(height);
    std::vector<unsigned char> raw(raw_size);
    uLongf out_len = static_cast<uLongf>(raw_size);
    const int zrc = uncompress(raw.data(), &out_len, reinterpret_cast<const Bytef*>(idat.data()),
                               static_cast<uLong>(idat.size()));
    if (zrc != Z_OK || out_len != raw_size)
        throw IngestError("PNG: inflate failed (zlib rc " + std::to_string(zrc) + ")");

    // Undo per-row filters.
    std::vector<unsigned char> px(stride * static_cast<size_t>(height));
    for (int y = 0; y < height; ++y) {
        const unsigned char filter = raw[(stride + 1) * static_cast<size_t>(y)];
        const unsigned char* src = raw.data() + (stride + 1) * static_cast<size_t>(y) + 1;
        unsigned char* dst = px.data() + stride * static_cast<size_t>(y);
        const unsigned char* prev = y > 0 ? px.data() + stride * static_cast<size_t>(y - 1) : nullptr;
        for (size_t i = 0; i < stride; ++i) {
            const int a = i >= static_cast<size_t>(ch) ? dst[i - static_cast<size_t>(ch)] : 0;
            const int b = prev ? prev[i] : 0;
            const int c = (prev && i >= static_cast<size_t>(ch)) ? prev[i - static_cast<size_t>(ch)] : 0;
            int v = src[i];
            switch (filter) {
                case 0: break;
                case 1: v += a; break;
                case 2: v += b; break;
                case 3: v += (a + b) / 2; break;
                case 4: v += detail::paeth(a, b, c); break;
                default: throw IngestError("PNG: unknown filter " + std::to_string(filter) + " in row " +
                                           std::to_string(y));
            }
            dst[i] = static_cast<unsigned char>(v & 0xff);
        }
    }

    ImageU8 img;
    img.width = width;
    img.height = height;
    img.data.resize(static_cast<size_t>(width) * static_cast<size_t>(height) * 3);
    for (int y = 0; y < height; ++y)
        for (int x = 0; x < width; ++x)
            for (int c = 0; c < 3; ++c)
                img.data[static_cast<size_t>((y * width + x) * 3 + c)] =
                    px[stride * static_cast<size_t>(y) + static_cast<size_t>(x * ch + c)];
    return img;
}

// PPM P6 (mandatory) or PNG (8-bit RGB/RGBA; alpha dropped).
inline ImageU8 load_image(const std::string& path) {
    const std::string bytes = read_file(path);
    if (bytes.size() >= 2 && bytes[0] == 'P' && bytes[1] == '6') return decode_ppm(bytes);
    if (bytes.size() >= 8 && static_cast<unsigned char>(bytes[0]) == 0x89 && bytes[1] == 'P')
        return decode_png(bytes);
    throw IngestError("unrecognized image format (offset 0): " + path + " is neither P6 PPM nor PNG");
}

}  // namespace image_io

// Deterministic palette: golden-ratio hue stepping per class index.
inline void class_color(int64_t cls, uint8_t rgb[3]) {
    const double h = std::fmod(0.6180339887498949 * static_cast<double>(cls), 1.0) * 6.0;
    const double s = 0.65, v = 0.95;
    const int i = static_cast<int>(h);
    const double f = h - i;
    const double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
    double r = v, g = t, b = p;
    switch (i % 6) {
        case 0: r = v; g = t; b = p; break;
        case 1: r = q; g = v; b = p; break;
        case 2: r = p; g = v; b = t; break;
        case 3: r = p; g = q; b = v; break;
        case 4: r = t; g = p; b = v; break;
        case 5: r = v; g = p; b = q; break;
    }
    rgb[0] = static_cast<uint8_t>(r * 255.0 + 0.5);
    rgb[1] = static_cast<uint8_t>(g * 255.0 + 0.5);
    rgb[2] = static_cast<uint8_t>(b * 255.0 + 0.5);
}

// mask: (1, 1, H, W) of class indices.
template <class R>
ImageU8 mask_to_image(const Tensor<R>& mask) {
    const Shape4 s = mask.shape();
    ImageU8 img;
    img.width = static_cast<int>(s.w);
    img.height = static_cast<int>(s.h);
    img.data.resize(static_cast<size_t>(s.h * s.w) * 3);
    for (int64_t y = 0; y < s.h; ++y)
        for (int64_t x = 0; x < s.w; ++x) {
            uint8_t rgb[3];
            class_color(static_cast<int64_t>(mask.at(0, 0, y, x)), rgb);
            for (int c = 0; c < 3; ++c)
                img.data[static_cast<size_t>((y * s.w + x) * 3 + c)] = rgb[c];
        }
    return img;
}

}  // namespace cfkit

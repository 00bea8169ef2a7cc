#pragma once

#include <array>
#include <optional>

#include "cfkit/image.hpp"
#include "cfkit/ops.hpp"

// Gradient-magnitude-and-edge input construction: the 5-channel network input
// stacks RGB with a Sobel gradient magnitude map and a binary edge map.
namespace cfkit::gme {

// ITU-R 601 luma, output in [0, 1].
inline Tensor<float> grayscale(const ImageU8& img) {
    Tensor<float> out({1, 1, img.height, img.width});
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            out.at(0, 0, y, x) = (0.299f * img.at(y, x, 0) + 0.587f * img.at(y, x, 1) +
                                  0.114f * img.at(y, x, 2)) /
                                 255.0f;
    return out;
}

// 3x3 Sobel with replicate padding. For gray values in [0,1] the magnitude
// lies in [0, 4*sqrt(2)].
inline Tensor<float> sobel_magnitude(const Tensor<float>& gray) {
    const Shape4 s = gray.shape();
    if (s.n != 1 || s.c != 1) throw ConfigError("sobel expects a single-channel 1xN image tensor");
    if (s.h < 3 || s.w < 3)
        throw ConfigError("sobel needs at least a 3x3 image, got " + s.str());
    static const int kx[3][3] = {{-1, 0, 1}, {-2, 0, 2}, {-1, 0, 1}};
    static const int ky[3][3] = {{-1, -2, -1}, {0, 0, 0}, {1, 2, 1}};
    Tensor<float> out(s);
    auto pix = [&](int64_t y, int64_t x) {
        y = std::min(std::max<int64_t>(y, 0), s.h - 1);
        x = std::min(std::max<int64_t>(x, 0), s.w - 1);
        return gray.at(0, 0, y, x);
    };
    for (int64_t y = 0; y < s.h; ++y)
        for (int64_t x = 0; x < s.w; ++x) {
            float gx = 0.0f, gy = 0.0f;
            for (int dy = -1; dy <= 1; ++dy)
                for (int dx = -1; dx <= 1; ++dx) {
                    const float v = pix(y + dy, x + dx);
                    gx += v * static_cast<float>(kx[dy + 1][dx + 1]);
                    gy += v * static_cast<float>(ky[dy + 1][dx + 1]);
                }
            out.at(0, 0, y, x) = std::sqrt(gx * gx + gy * gy);
        }
    out.check_finite("sobel_magnitude");
    return out;
}

// Otsu's threshold over a 256-bin histogram of [0, max]. Returns the value
// separating the two classes; 0 for an all-zero map.
inline double otsu_threshold(const Tensor<float>& magnitude) {
    float mx = 0.0f;
    for (int64_t i = 0; i < magnitude.numel(); ++i) {
        if (magnitude[i] < 0.0f) throw ConfigError("edge_map expects a non-negative magnitude");
        mx = std::max(mx, magnitude[i]);
    }
    if (mx == 0.0f) return 0.0;
    constexpr int kBins = 256;
    std::array<int64_t, kBins> hist{};
    for (int64_t i = 0; i < magnitude.numel(); ++i) {
        int b = static_cast<int>(static_cast<double>(magnitude[i]) / mx * kBins);
        if (b >= kBins) b = kBins - 1;
        ++hist[static_cast<size_t>(b)];
    }
    const double total = static_cast<double>(magnitude.numel());
    double sum_all = 0.0;
    for (int b = 0; b < kBins; ++b) sum_all += static_cast<double>(b) * static_cast<double>(hist[b]);
    double w0 = 0.0, sum0 = 0.0, best = -1.0;
    int best_k = 0;
    for (int k = 0; k < kBins - 1; ++k) {
        w0 += static_cast<double>(hist[k]);
        if (w0 == 0.0) continue;
        const double w1 = total - w0;
        if (w1 == 0.0) break;
        sum0 += static_cast<double>(k) * static_cast<double>(hist[k]);
        const double mu0 = sum0 / w0;
        const double mu1 = (sum_all - sum0) / w1;
        const double between = w0 * w1 * (mu0 - mu1) * (mu0 - mu1);
        if (between > best) {
            best = between;
            best_k = k;
        }
    }
    // Everything in bins > best_k is an edge.
    return static_cast<double>(best_k + 1) / kBins * static_cast<double>(mx);
}

// Binary map: 1 where magnitude >= threshold. Threshold defaults to Otsu;
// an all-zero magnitude yields an all-zero map.
inline Tensor<float> edge_map(const Tensor<float>& magnitude,
                              std::optional<double> threshold_override = std::nullopt) {
    Tensor<float> out(magnitude.shape());
    double thr;
    if (threshold_override) {
        if (*threshold_override < 0) throw ConfigError("edge threshold must be >= 0");
        thr = *threshold_override;
    } else {
        float mx = 0.0f;
        for (int64_t i = 0; i < magnitude.numel(); ++i) {
            if (magnitude[i] < 0.0f) throw ConfigError("edge_map expects a non-negative magnitude");
            mx = std::max(mx, magnitude[i]);
        }
        if (mx == 0.0f) return out;  // all zero, no error
        thr = otsu_threshold(magnitude);
    }
    for (int64_t i = 0; i < magnitude.numel(); ++i)
        out[i] = static_cast<double>(magnitude[i]) >= thr ? 1.0f : 0.0f;
    return out;
}

struct GmeStack {
    Tensor<float> tensor;  // (1, 3|5, H, W)
};

// Sobel magnitude spans [0, 4*sqrt(2)] for unit-range input.
inline constexpr double kMagnitudeScale = 5.656854249492381;

// Channels scaled to [0,1], not yet standardized: R, G, B and, with
// input_channels == 5, gradient magnitude and the binary edge map.
inline GmeStack stack_raw(const ImageU8& img, int input_channels,
                          std::optional<double> edge_threshold = std::nullopt) {
    if (input_channels != 3 && input_channels != 5)
        throw ConfigError("input_channels must be 3 or 5, got " + std::to_string(input_channels));
    GmeStack s;
    s.tensor = Tensor<float>({1, input_channels, img.height, img.width});
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < 3; ++c) s.tensor.at(0, c, y, x) = img.at(y, x, c) / 255.0f;
    if (input_channels == 5) {
        const Tensor<float> gray = grayscale(img);
        const Tensor<float> mag = sobel_magnitude(gray);
        const Tensor<float> edge = edge_map(mag, edge_threshold);
        for (int y = 0; y < img.height; ++y)
            for (int x = 0; x < img.width; ++x) {
                s.tensor.at(0, 3, y, x) = static_cast<float>(mag.at(0, 0, y, x) / kMagnitudeScale);
                s.tensor.at(0, 4, y, x) = edge.at(0, 0, y, x);
            }
    }
    return s;
}

// Fixed standardization constants; the magnitude and edge channels use
// mean 0.5, std 0.5.
inline const float kMean[5] = {0.485f, 0.456f, 0.406f, 0.5f, 0.5f};
inline const float kStd[5] = {0.229f, 0.224f, 0.225f, 0.5f, 0.5f};

inline GmeStack standardize(GmeStack s) {
    const Shape4 sh = s.tensor.shape();
    for (int64_t c = 0; c < sh.c; ++c)
        for (int64_t y = 0; y < sh.h; ++y)
            for (int64_t x = 0; x < sh.w; ++x)
                s.tensor.at(0, c, y, x) =
                    (s.tensor.at(0, c, y, x) - kMean[c]) / kStd[c];
    s.tensor.check_finite("gme standardize");
    return s;
}

// The network input: [0,1]-scaled channels, channel-standardized. With
// input_channels == 3 the GME path is bypassed entirely.
inline GmeStack build_gme_stack(const ImageU8& img, int input_channels,
                                std::optional<double> edge_threshold = std::nullopt) {
    return standardize(stack_raw(img, input_channels, edge_threshold));
}

}  // namespace cfkit::gme

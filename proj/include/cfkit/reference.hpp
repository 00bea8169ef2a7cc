#pragma once

#include <cmath>

#include "cfkit/tensor.hpp"

// Naive reference kernels. Straight loop transcriptions of the operator
// definitions, kept deliberately independent of the optimized paths in
// ops.hpp; verify::oracle_sweep compares the two on random instances.
namespace cfkit::reference {

template <class R>
Tensor<R> conv2d(const Tensor<R>& x, const Tensor<R>& w, const ConvSpec& spec) {
    spec.validate();
    if (w.shape() != spec.weight_shape())
        throw ConfigError("conv weight shape " + w.shape().str() + " does not match spec " +
                          spec.weight_shape().str());
    const Shape4 os = spec.out_shape(x.shape());
    Tensor<R> out(os);
    const Shape4 is = x.shape();
    for (int64_t n = 0; n < os.n; ++n)
        for (int64_t oc = 0; oc < os.c; ++oc)
            for (int64_t oh = 0; oh < os.h; ++oh)
                for (int64_t ow = 0; ow < os.w; ++ow) {
                    R acc = 0;
                    if (spec.kind == ConvKind::depthwise) {
                        for (int64_t kh = 0; kh < spec.kernel_h; ++kh)
                            for (int64_t kw = 0; kw < spec.kernel_w; ++kw) {
                                const int64_t ih = oh * spec.stride - spec.pad + kh;
                                const int64_t iw = ow * spec.stride - spec.pad + kw;
                                if (ih < 0 || ih >= is.h || iw < 0 || iw >= is.w) continue;
                                acc += x.at(n, oc, ih, iw) * w.at(oc, 0, kh, kw);
                            }
                    } else {
                        for (int64_t ic = 0; ic < is.c; ++ic)
                            for (int64_t kh = 0; kh < spec.kernel_h; ++kh)
                                for (int64_t kw = 0; kw < spec.kernel_w; ++kw) {
                                    const int64_t ih = oh * spec.stride - spec.pad + kh;
                                    const int64_t iw = ow * spec.stride - spec.pad + kw;
                                    if (ih < 0 || ih >= is.h || iw < 0 || iw >= is.w) continue;
                                    acc += x.at(n, ic, ih, iw) * w.at(oc, ic, kh, kw);
                                }
                    }
                    out.at(n, oc, oh, ow) = acc;
                }
    return out;
}

template <class R>
Tensor<R> batchnorm_infer(const Tensor<R>& x, const BatchNormParams<R>& p) {
    p.validate();
    if (x.shape().c != p.channels())
        throw ConfigError("batchnorm channel mismatch: input " + std::to_string(x.shape().c) +
                          ", params " + std::to_string(p.channels()));
    Tensor<R> out(x.shape());
    const Shape4 s = x.shape();
    for (int64_t n = 0; n < s.n; ++n)
        for (int64_t c = 0; c < s.c; ++c) {
            const R denom = std::sqrt(p.var[static_cast<size_t>(c)] + p.eps);
            for (int64_t h = 0; h < s.h; ++h)
                for (int64_t w = 0; w < s.w; ++w) {
                    const R xv = x.at(n, c, h, w);
                    out.at(n, c, h, w) =
                        (xv - p.mean[static_cast<size_t>(c)]) / denom * p.gamma[static_cast<size_t>(c)] +
                        p.beta[static_cast<size_t>(c)];
                }
        }
    return out;
}

template <class R>
Tensor<R> relu6(const Tensor<R>& x) {
    Tensor<R> out(x.shape());
    for (int64_t i = 0; i < x.numel(); ++i) {
        R v = x[i];
        if (v < R(0)) v = R(0);
        if (v > R(6)) v = R(6);
        out[i] = v;
    }
    return out;
}

template <class R>
Tensor<R> sigmoid(const Tensor<R>& x) {
    Tensor<R> out(x.shape());
    for (int64_t i = 0; i < x.numel(); ++i) out[i] = R(1) / (R(1) + std::exp(-x[i]));
    return out;
}

// Softmax along W (each row of the trailing matrix), max-subtracted.
template <class R>
Tensor<R> softmax_rows(const Tensor<R>& x) {
    Tensor<R> out(x.shape());
    const int64_t rows = x.numel() / x.shape().w;
    const int64_t w = x.shape().w;
    for (int64_t r = 0; r < rows; ++r) {
        const R* in = x.data() + r * w;
        R* o = out.data() + r * w;
        R mx = in[0];
        for (int64_t j = 1; j < w; ++j) mx = std::max(mx, in[j]);
        R sum = 0;
        for (int64_t j = 0; j < w; ++j) {
            o[j] = std::exp(in[j] - mx);
            sum += o[j];
        }
        for (int64_t j = 0; j < w; ++j) o[j] /= sum;
    }
    return out;
}

template <class R>
Tensor<R> avg_pool(const Tensor<R>& x, int out_h, int out_w) {
    const Shape4 s = x.shape();
    if (out_h <= 0 || out_w <= 0 || s.h % out_h != 0 || s.w % out_w != 0)
        throw ConfigError("avg_pool target " + std::to_string(out_h) + "x" + std::to_string(out_w) +
                          " does not divide input " + s.str());
    const int64_t wh = s.h / out_h, ww = s.w / out_w;
    Tensor<R> out({s.n, s.c, out_h, out_w});
    for (int64_t n = 0; n < s.n; ++n)
        for (int64_t c = 0; c < s.c; ++c)
            for (int64_t oh = 0; oh < out_h; ++oh)
                for (int64_t ow = 0; ow < out_w; ++ow) {
                    R acc = 0;
                    for (int64_t dh = 0; dh < wh; ++dh)
                        for (int64_t dw = 0; dw < ww; ++dw) acc += x.at(n, c, oh * wh + dh, ow * ww + dw);
                    out.at(n, c, oh, ow) = acc / static_cast<R>(wh * ww);
                }
    return out;
}

template <class R>
Tensor<R> global_avg_pool(const Tensor<R>& x) {
    return avg_pool(x, 1, 1);
}

// align-corners=false, half-pixel centers:
//   src = (dst + 0.5) * (in / out) - 0.5, clamped to [0, in - 1].
template <class R>
Tensor<R> upsample_bilinear(const Tensor<R>& x, int out_h, int out_w) {
    const Shape4 s = x.shape();
    if (out_h < s.h || out_w < s.w)
        throw ConfigError("upsample target " + std::to_string(out_h) + "x" + std::to_string(out_w) +
                          " is smaller than input " + s.str());
    Tensor<R> out({s.n, s.c, out_h, out_w});
    const double sh = static_cast<double>(s.h) / out_h;
    const double sw = static_cast<double>(s.w) / out_w;
    for (int64_t oh = 0; oh < out_h; ++oh)
        for (int64_t ow = 0; ow < out_w; ++ow) {
            double fy = (static_cast<double>(oh) + 0.5) * sh - 0.5;
            double fx = (static_cast<double>(ow) + 0.5) * sw - 0.5;
            fy = std::min(std::max(fy, 0.0), static_cast<double>(s.h - 1));
            fx = std::min(std::max(fx, 0.0), static_cast<double>(s.w - 1));
            const int64_t y0 = static_cast<int64_t>(std::floor(fy));
            const int64_t x0 = static_cast<int64_t>(std::floor(fx));
            const int64_t y1 = std::min(y0 + 1, s.h - 1);
            const int64_t x1 = std::min(x0 + 1, s.w - 1);
            const R ty = static_cast<R>(fy - static_cast<double>(y0));
            const R tx = static_cast<R>(fx - static_cast<double>(x0));
            for (int64_t n = 0; n < s.n; ++n)
                for (int64_t c = 0; c < s.c; ++c) {
                    const R a = x.at(n, c, y0, x0), b = x.at(n, c, y0, x1);
                    const R d = x.at(n, c, y1, x0), e = x.at(n, c, y1, x1);
                    const R top = a + (b - a) * tx;
                    const R bot = d + (e - d) * tx;
                    out.at(n, c, oh, ow) = top + (bot - top) * ty;
                }
        }
    return out;
}

// Batched matrix product over the two leading dims: (N,C,M,K) x (N,C,K,P).
template <class R>
Tensor<R> matmul(const Tensor<R>& a, const Tensor<R>& b) {
    const Shape4 as = a.shape(), bs = b.shape();
    if (as.n != bs.n || as.c != bs.c || as.w != bs.h)
        throw ConfigError("matmul shape mismatch: " + as.str() + " x " + bs.str());
    Tensor<R> out({as.n, as.c, as.h, bs.w});
    for (int64_t n = 0; n < as.n; ++n)
        for (int64_t c = 0; c < as.c; ++c)
            for (int64_t i = 0; i < as.h; ++i)
                for (int64_t j = 0; j < bs.w; ++j) {
                    R acc = 0;
                    for (int64_t k = 0; k < as.w; ++k) acc += a.at(n, c, i, k) * b.at(n, c, k, j);
                    out.at(n, c, i, j) = acc;
                }
    return out;
}

template <class R>
Tensor<R> concat_channels(const std::vector<const Tensor<R>*>& parts) {
    if (parts.empty()) throw ConfigError("concat of zero tensors");
    const Shape4 s0 = parts[0]->shape();
    int64_t c_total = 0;
    for (const auto* p : parts) {
        const Shape4 s = p->shape();
        if (s.n != s0.n || s.h != s0.h || s.w != s0.w)
            throw ConfigError("concat inputs disagree on N/H/W: " + s.str() + " vs " + s0.str());
        c_total += s.c;
    }
    Tensor<R> out({s0.n, c_total, s0.h, s0.w});
    for (int64_t n = 0; n < s0.n; ++n) {
        int64_t c_off = 0;
        for (const auto* p : parts) {
            const Shape4 s = p->shape();
            for (int64_t c = 0; c < s.c; ++c)
                for (int64_t h = 0; h < s.h; ++h)
                    for (int64_t w = 0; w < s.w; ++w) out.at(n, c_off + c, h, w) = p->at(n, c, h, w);
            c_off += s.c;
        }
    }
    return out;
}

template <class R>
Tensor<R> add(const Tensor<R>& a, const Tensor<R>& b) {
    if (a.shape() != b.shape())
        throw ConfigError("elementwise add shape mismatch: " + a.shape().str() + " vs " + b.shape().str());
    Tensor<R> out(a.shape());
    for (int64_t i = 0; i < a.numel(); ++i) out[i] = a[i] + b[i];
    return out;
}

template <class R>
Tensor<R> hadamard(const Tensor<R>& a, const Tensor<R>& b) {
    if (a.shape() != b.shape())
        throw ConfigError("hadamard shape mismatch: " + a.shape().str() + " vs " + b.shape().str());
    Tensor<R> out(a.shape());
    for (int64_t i = 0; i < a.numel(); ++i) out[i] = a[i] * b[i];
    return out;
}

}  // namespace cfkit::reference

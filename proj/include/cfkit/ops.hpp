#pragma once

#include <cmath>
#include <utility>

#include "cfkit/tensor.hpp"

// Optimized operator implementations plus hand-written analytic backward
// passes. Forward results must agree with cfkit::reference to 1e-6 (32-bit);
// the accumulation order (in-channel major, then kh, kw) is kept identical to
// the naive loops so the two paths round the same way.
namespace cfkit::ops {

namespace detail {

template <class R>
void check_weight(const Tensor<R>& w, const ConvSpec& spec) {
    if (w.shape() != spec.weight_shape())
        throw ConfigError("conv weight shape " + w.shape().str() + " does not match spec " +
                          spec.weight_shape().str());
}

template <class R>
void conv_pointwise(const Tensor<R>& x, const Tensor<R>& w, Tensor<R>& out) {
    const Shape4 is = x.shape(), os = out.shape();
    const int64_t px = is.h * is.w;
    for (int64_t n = 0; n < is.n; ++n) {
        const R* xbase = x.data() + n * is.c * px;
        R* obase = out.data() + n * os.c * px;
        parallel_for(os.c, os.c * is.c * px, [&](int64_t oc0, int64_t oc1) {
            for (int64_t oc = oc0; oc < oc1; ++oc) {
                R* orow = obase + oc * px;
                for (int64_t p = 0; p < px; ++p) orow[p] = R(0);
                for (int64_t ic = 0; ic < is.c; ++ic) {
                    const R wv = w.at(oc, ic, 0, 0);
                    const R* xrow = xbase + ic * px;
                    for (int64_t p = 0; p < px; ++p) orow[p] += wv * xrow[p];
                }
            }
        });
    }
}

template <class R>
void conv_depthwise(const Tensor<R>& x, const Tensor<R>& w, const ConvSpec& spec, Tensor<R>& out) {
    const Shape4 is = x.shape(), os = out.shape();
    const int64_t dw_work = is.c * os.h * os.w * spec.kernel_h * spec.kernel_w;
    for (int64_t n = 0; n < is.n; ++n) {
        parallel_for(is.c, dw_work, [&](int64_t c0, int64_t c1) {
            for (int64_t c = c0; c < c1; ++c)
                for (int64_t oh = 0; oh < os.h; ++oh)
                    for (int64_t ow = 0; ow < os.w; ++ow) {
                        R acc = 0;
                        for (int64_t kh = 0; kh < spec.kernel_h; ++kh) {
                            const int64_t ih = oh * spec.stride - spec.pad + kh;
                            if (ih < 0 || ih >= is.h) continue;
                            for (int64_t kw = 0; kw < spec.kernel_w; ++kw) {
                                const int64_t iw = ow * spec.stride - spec.pad + kw;
                                if (iw < 0 || iw >= is.w) continue;
                                acc += x.at(n, c, ih, iw) * w.at(c, 0, kh, kw);
                            }
                        }
                        out.at(n, c, oh, ow) = acc;
                    }
        });
    }
}

// im2col with zero fill for padding; column index k runs (ic, kh, kw)-major.
template <class R>
void conv_dense(const Tensor<R>& x, const Tensor<R>& w, const ConvSpec& spec, Tensor<R>& out) {
    const Shape4 is = x.shape(), os = out.shape();
    const int64_t kdim = is.c * spec.kernel_h * spec.kernel_w;
    const int64_t px = os.h * os.w;
    std::vector<R> col(static_cast<size_t>(kdim * px));
    for (int64_t n = 0; n < is.n; ++n) {
        int64_t k = 0;
        for (int64_t ic = 0; ic < is.c; ++ic)
            for (int64_t kh = 0; kh < spec.kernel_h; ++kh)
                for (int64_t kw = 0; kw < spec.kernel_w; ++kw, ++k) {
                    R* crow = col.data() + k * px;
                    int64_t p = 0;
                    for (int64_t oh = 0; oh < os.h; ++oh) {
                        const int64_t ih = oh * spec.stride - spec.pad + kh;
                        for (int64_t ow = 0; ow < os.w; ++ow, ++p) {
                            const int64_t iw = ow * spec.stride - spec.pad + kw;
                            crow[p] = (ih < 0 || ih >= is.h || iw < 0 || iw >= is.w) ? R(0) : x.at(n, ic, ih, iw);
                        }
                    }
                }
        R* obase = out.data() + n * os.c * px;
        parallel_for(os.c, os.c * kdim * px, [&](int64_t oc0, int64_t oc1) {
            for (int64_t oc = oc0; oc < oc1; ++oc) {
                R* orow = obase + oc * px;
                for (int64_t p = 0; p < px; ++p) orow[p] = R(0);
                const R* wrow = w.data() + oc * kdim;
                for (int64_t kk = 0; kk < kdim; ++kk) {
                    const R wv = wrow[kk];
                    const R* crow = col.data() + kk * px;
                    for (int64_t p = 0; p < px; ++p) orow[p] += wv * crow[p];
                }
            }
        });
    }
}

}  // namespace detail

template <class R>
Tensor<R> conv2d(const Tensor<R>& x, const Tensor<R>& w, const ConvSpec& spec) {
    spec.validate();
    detail::check_weight(w, spec);
    Tensor<R> out(spec.out_shape(x.shape()));
    switch (spec.kind) {
        case ConvKind::pointwise:
            // The channel-mix fast path assumes output pixels match input pixels.
            if (spec.stride == 1 && spec.pad == 0)
                detail::conv_pointwise(x, w, out);
            else
                detail::conv_dense(x, w, spec, out);
            break;
        case ConvKind::depthwise: detail::conv_depthwise(x, w, spec, out); break;
        case ConvKind::dense: detail::conv_dense(x, w, spec, out); break;
    }
    out.check_finite("conv2d");
    return out;
}

// Exact analytic gradients of conv2d. Verification-path code: clarity over
// speed, serial scatter loops.
template <class R>
std::pair<Tensor<R>, Tensor<R>> conv2d_backward(const Tensor<R>& grad_out, const Tensor<R>& x,
                                                const Tensor<R>& w, const ConvSpec& spec) {
    spec.validate();
    detail::check_weight(w, spec);
    const Shape4 os = spec.out_shape(x.shape());
    if (grad_out.shape() != os)
        throw ConfigError("conv2d_backward grad shape " + grad_out.shape().str() +
                          " does not match forward output " + os.str());
    const Shape4 is = x.shape();
    Tensor<R> gx(is), gw(spec.weight_shape());
    for (int64_t n = 0; n < os.n; ++n)
        for (int64_t oc = 0; oc < os.c; ++oc)
            for (int64_t oh = 0; oh < os.h; ++oh)
                for (int64_t ow = 0; ow < os.w; ++ow) {
                    const R g = grad_out.at(n, oc, oh, ow);
                    if (spec.kind == ConvKind::depthwise) {
                        for (int64_t kh = 0; kh < spec.kernel_h; ++kh)
                            for (int64_t kw = 0; kw < spec.kernel_w; ++kw) {
                                const int64_t ih = oh * spec.stride - spec.pad + kh;
                                const int64_t iw = ow * spec.stride - spec.pad + kw;
                                if (ih < 0 || ih >= is.h || iw < 0 || iw >= is.w) continue;
                                gw.at(oc, 0, kh, kw) += g * x.at(n, oc, ih, iw);
                                gx.at(n, oc, ih, iw) += g * w.at(oc, 0, kh, kw);
                            }
                    } else {
                        for (int64_t ic = 0; ic < is.c; ++ic)
                            for (int64_t kh = 0; kh < spec.kernel_h; ++kh)
                                for (int64_t kw = 0; kw < spec.kernel_w; ++kw) {
                                    const int64_t ih = oh * spec.stride - spec.pad + kh;
                                    const int64_t iw = ow * spec.stride - spec.pad + kw;
                                    if (ih < 0 || ih >= is.h || iw < 0 || iw >= is.w) continue;
                                    gw.at(oc, ic, kh, kw) += g * x.at(n, ic, ih, iw);
                                    gx.at(n, ic, ih, iw) += g * w.at(oc, ic, kh, kw);
                                }
                    }
                }
    return {std::move(gx), std::move(gw)};
}

template <class R>
Tensor<R> batchnorm_infer(const Tensor<R>& x, const BatchNormParams<R>& p) {
    p.validate();
    if (x.shape().c != p.channels())
        throw ConfigError("batchnorm channel mismatch: input " + std::to_string(x.shape().c) +
                          ", params " + std::to_string(p.channels()));
    const Shape4 s = x.shape();
    Tensor<R> out(s);
    const int64_t px = s.h * s.w;
    for (int64_t n = 0; n < s.n; ++n)
        for (int64_t c = 0; c < s.c; ++c) {
            const size_t ci = static_cast<size_t>(c);
            // Same expression shape as the reference path so both round alike.
            const R denom = std::sqrt(p.var[ci] + p.eps);
            const R mean = p.mean[ci], gamma = p.gamma[ci], beta = p.beta[ci];
            const R* xr = x.data() + (n * s.c + c) * px;
            R* orow = out.data() + (n * s.c + c) * px;
            for (int64_t i = 0; i < px; ++i) orow[i] = (xr[i] - mean) / denom * gamma + beta;
        }
    out.check_finite("batchnorm_infer");
    return out;
}

// Returns (grad_x, grad_gamma, grad_beta); running stats are constants.
template <class R>
std::tuple<Tensor<R>, std::vector<R>, std::vector<R>> batchnorm_backward(const Tensor<R>& grad_out,
                                                                         const Tensor<R>& x,
                                                                         const BatchNormParams<R>& p) {
    const Shape4 s = x.shape();
    if (grad_out.shape() != s) throw ConfigError("batchnorm_backward shape mismatch");
    Tensor<R> gx(s);
    std::vector<R> ggamma(static_cast<size_t>(p.channels()), R(0));
    std::vector<R> gbeta(static_cast<size_t>(p.channels()), R(0));
    const int64_t px = s.h * s.w;
    for (int64_t n = 0; n < s.n; ++n)
        for (int64_t c = 0; c < s.c; ++c) {
            const size_t ci = static_cast<size_t>(c);
            const R inv = R(1) / std::sqrt(p.var[ci] + p.eps);
            const R* xr = x.data() + (n * s.c + c) * px;
            const R* gr = grad_out.data() + (n * s.c + c) * px;
            R* gxr = gx.data() + (n * s.c + c) * px;
            for (int64_t i = 0; i < px; ++i) {
                gxr[i] = gr[i] * p.gamma[ci] * inv;
                ggamma[ci] += gr[i] * (xr[i] - p.mean[ci]) * inv;
                gbeta[ci] += gr[i];
            }
        }
    return {std::move(gx), std::move(ggamma), std::move(gbeta)};
}

template <class R>
Tensor<R> relu6(const Tensor<R>& x) {
    Tensor<R> out(x.shape());
    for (int64_t i = 0; i < x.numel(); ++i) out[i] = std::min(std::max(x[i], R(0)), R(6));
    out.check_finite("relu6");
    return out;
}

template <class R>
Tensor<R> relu6_backward(const Tensor<R>& grad_out, const Tensor<R>& x) {
    Tensor<R> gx(x.shape());
    for (int64_t i = 0; i < x.numel(); ++i)
        gx[i] = (x[i] > R(0) && x[i] < R(6)) ? grad_out[i] : R(0);
    return gx;
}

// Saturates to the open interval: deep-tail outputs are clamped one ulp away
// from 0 and 1 so the documented range holds at any precision.
template <class R>
Tensor<R> sigmoid(const Tensor<R>& x) {
    constexpr R lo = std::numeric_limits<R>::denorm_min();
    const R hi = R(1) - std::numeric_limits<R>::epsilon();
    Tensor<R> out(x.shape());
    for (int64_t i = 0; i < x.numel(); ++i)
        out[i] = std::min(hi, std::max(lo, R(1) / (R(1) + std::exp(-x[i]))));
    out.check_finite("sigmoid");
    return out;
}

// Takes the forward output y = sigmoid(x).
template <class R>
Tensor<R> sigmoid_backward(const Tensor<R>& grad_out, const Tensor<R>& y) {
    Tensor<R> gx(y.shape());
    for (int64_t i = 0; i < y.numel(); ++i) gx[i] = grad_out[i] * y[i] * (R(1) - y[i]);
    return gx;
}

template <class R>
Tensor<R> softmax_rows(const Tensor<R>& x) {
    Tensor<R> out(x.shape());
    const int64_t w = x.shape().w;
    if (w <= 0) throw ConfigError("softmax over empty rows");
    const int64_t rows = x.numel() / w;
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
    out.check_finite("softmax_rows");
    return out;
}

// Takes the forward output y.
template <class R>
Tensor<R> softmax_rows_backward(const Tensor<R>& grad_out, const Tensor<R>& y) {
    Tensor<R> gx(y.shape());
    const int64_t w = y.shape().w;
    const int64_t rows = y.numel() / w;
    for (int64_t r = 0; r < rows; ++r) {
        const R* yr = y.data() + r * w;
        const R* gr = grad_out.data() + r * w;
        R* o = gx.data() + r * w;
        R dot = 0;
        for (int64_t j = 0; j < w; ++j) dot += gr[j] * yr[j];
        for (int64_t j = 0; j < w; ++j) o[j] = yr[j] * (gr[j] - dot);
    }
    return gx;
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
    out.check_finite("avg_pool");
    return out;
}

template <class R>
Tensor<R> avg_pool_backward(const Tensor<R>& grad_out, const Shape4& in_shape) {
    const Shape4 os = grad_out.shape();
    const int64_t wh = in_shape.h / os.h, ww = in_shape.w / os.w;
    Tensor<R> gx(in_shape);
    const R inv = R(1) / static_cast<R>(wh * ww);
    for (int64_t n = 0; n < os.n; ++n)
        for (int64_t c = 0; c < os.c; ++c)
            for (int64_t oh = 0; oh < os.h; ++oh)
                for (int64_t ow = 0; ow < os.w; ++ow) {
                    const R g = grad_out.at(n, c, oh, ow) * inv;
                    for (int64_t dh = 0; dh < wh; ++dh)
                        for (int64_t dw = 0; dw < ww; ++dw) gx.at(n, c, oh * wh + dh, ow * ww + dw) += g;
                }
    return gx;
}

template <class R>
Tensor<R> global_avg_pool(const Tensor<R>& x) {
    return avg_pool(x, 1, 1);
}

template <class R>
Tensor<R> upsample_bilinear(const Tensor<R>& x, int out_h, int out_w) {
    const Shape4 s = x.shape();
    if (out_h < s.h || out_w < s.w)
        throw ConfigError("upsample target " + std::to_string(out_h) + "x" + std::to_string(out_w) +
                          " is smaller than input " + s.str());
    Tensor<R> out({s.n, s.c, out_h, out_w});
    // Precompute per-axis source indices and blend weights.
    std::vector<int64_t> y0(out_h), y1(out_h), x0(out_w), x1(out_w);
    std::vector<R> ty(out_h), tx(out_w);
    const double sh = static_cast<double>(s.h) / out_h;
    const double sw = static_cast<double>(s.w) / out_w;
    for (int64_t oh = 0; oh < out_h; ++oh) {
        double fy = (static_cast<double>(oh) + 0.5) * sh - 0.5;
        fy = std::min(std::max(fy, 0.0), static_cast<double>(s.h - 1));
        y0[oh] = static_cast<int64_t>(std::floor(fy));
        y1[oh] = std::min(y0[oh] + 1, s.h - 1);
        ty[oh] = static_cast<R>(fy - static_cast<double>(y0[oh]));
    }
    for (int64_t ow = 0; ow < out_w; ++ow) {
        double fx = (static_cast<double>(ow) + 0.5) * sw - 0.5;
        fx = std::min(std::max(fx, 0.0), static_cast<double>(s.w - 1));
        x0[ow] = static_cast<int64_t>(std::floor(fx));
        x1[ow] = std::min(x0[ow] + 1, s.w - 1);
        tx[ow] = static_cast<R>(fx - static_cast<double>(x0[ow]));
    }
    for (int64_t n = 0; n < s.n; ++n)
        parallel_for(s.c, s.c * out_h * out_w * 8, [&](int64_t c0, int64_t c1) {
            for (int64_t c = c0; c < c1; ++c)
                for (int64_t oh = 0; oh < out_h; ++oh)
                    for (int64_t ow = 0; ow < out_w; ++ow) {
                        const R a = x.at(n, c, y0[oh], x0[ow]), b = x.at(n, c, y0[oh], x1[ow]);
                        const R d = x.at(n, c, y1[oh], x0[ow]), e = x.at(n, c, y1[oh], x1[ow]);
                        const R top = a + (b - a) * tx[ow];
                        const R bot = d + (e - d) * tx[ow];
                        out.at(n, c, oh, ow) = top + (bot - top) * ty[oh];
                    }
        });
    out.check_finite("upsample_bilinear");
    return out;
}

template <class R>
Tensor<R> upsample_bilinear_backward(const Tensor<R>& grad_out, const Shape4& in_shape) {
    const Shape4 os = grad_out.shape();
    Tensor<R> gx(in_shape);
    const double sh = static_cast<double>(in_shape.h) / os.h;
    const double sw = static_cast<double>(in_shape.w) / os.w;
    for (int64_t oh = 0; oh < os.h; ++oh) {
        double fy = (static_cast<double>(oh) + 0.5) * sh - 0.5;
        fy = std::min(std::max(fy, 0.0), static_cast<double>(in_shape.h - 1));
        const int64_t yy0 = static_cast<int64_t>(std::floor(fy));
        const int64_t yy1 = std::min(yy0 + 1, in_shape.h - 1);
        const R tty = static_cast<R>(fy - static_cast<double>(yy0));
        for (int64_t ow = 0; ow < os.w; ++ow) {
            double fx = (static_cast<double>(ow) + 0.5) * sw - 0.5;
            fx = std::min(std::max(fx, 0.0), static_cast<double>(in_shape.w - 1));
            const int64_t xx0 = static_cast<int64_t>(std::floor(fx));
            const int64_t xx1 = std::min(xx0 + 1, in_shape.w - 1);
            const R ttx = static_cast<R>(fx - static_cast<double>(xx0));
            for (int64_t n = 0; n < os.n; ++n)
                for (int64_t c = 0; c < os.c; ++c) {
                    const R g = grad_out.at(n, c, oh, ow);
                    gx.at(n, c, yy0, xx0) += g * (R(1) - tty) * (R(1) - ttx);
                    gx.at(n, c, yy0, xx1) += g * (R(1) - tty) * ttx;
                    gx.at(n, c, yy1, xx0) += g * tty * (R(1) - ttx);
                    gx.at(n, c, yy1, xx1) += g * tty * ttx;
                }
        }
    }
    return gx;
}

template <class R>
Tensor<R> matmul(const Tensor<R>& a, const Tensor<R>& b) {
    const Shape4 as = a.shape(), bs = b.shape();
    if (as.n != bs.n || as.c != bs.c || as.w != bs.h)
        throw ConfigError("matmul shape mismatch: " + as.str() + " x " + bs.str());
    Tensor<R> out({as.n, as.c, as.h, bs.w});
    const int64_t batches = as.n * as.c;
    const int64_t M = as.h, K = as.w, P = bs.w;
    for (int64_t nb = 0; nb < batches; ++nb) {
        const R* ab = a.data() + nb * M * K;
        const R* bb = b.data() + nb * K * P;
        R* ob = out.data() + nb * M * P;
        for (int64_t i = 0; i < M; ++i) {
            R* orow = ob + i * P;
            for (int64_t j = 0; j < P; ++j) orow[j] = R(0);
            for (int64_t k = 0; k < K; ++k) {
                const R av = ab[i * K + k];
                const R* brow = bb + k * P;
                for (int64_t j = 0; j < P; ++j) orow[j] += av * brow[j];
            }
        }
    }
    out.check_finite("matmul");
    return out;
}

template <class R>
Tensor<R> transpose_last2(const Tensor<R>& x) {
    const Shape4 s = x.shape();
    Tensor<R> out({s.n, s.c, s.w, s.h});
    for (int64_t n = 0; n < s.n; ++n)
        for (int64_t c = 0; c < s.c; ++c)
            for (int64_t h = 0; h < s.h; ++h)
                for (int64_t w = 0; w < s.w; ++w) out.at(n, c, w, h) = x.at(n, c, h, w);
    return out;
}

// Returns (grad_a, grad_b) for out = a . b.
template <class R>
std::pair<Tensor<R>, Tensor<R>> matmul_backward(const Tensor<R>& grad_out, const Tensor<R>& a,
                                                const Tensor<R>& b) {
    Tensor<R> ga = matmul(grad_out, transpose_last2(b));
    Tensor<R> gb = matmul(transpose_last2(a), grad_out);
    return {std::move(ga), std::move(gb)};
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
    const int64_t px = s0.h * s0.w;
    for (int64_t n = 0; n < s0.n; ++n) {
        int64_t c_off = 0;
        for (const auto* p : parts) {
            const int64_t pc = p->shape().c;
            const R* src = p->data() + n * pc * px;
            R* dst = out.data() + (n * c_total + c_off) * px;
            std::copy(src, src + pc * px, dst);
            c_off += pc;
        }
    }
    return out;
}

template <class R>
std::vector<Tensor<R>> split_channels(const Tensor<R>& x, const std::vector<int64_t>& sizes) {
    const Shape4 s = x.shape();
    int64_t total = 0;
    for (int64_t c : sizes) total += c;
    if (total != s.c) throw ConfigError("split sizes do not sum to channel count");
    std::vector<Tensor<R>> out;
    out.reserve(sizes.size());
    int64_t c_off = 0;
    for (int64_t cs : sizes) {
        Tensor<R> part({s.n, cs, s.h, s.w});
        for (int64_t n = 0; n < s.n; ++n)
            for (int64_t c = 0; c < cs; ++c)
                for (int64_t h = 0; h < s.h; ++h)
                    for (int64_t w = 0; w < s.w; ++w) part.at(n, c, h, w) = x.at(n, c_off + c, h, w);
        c_off += cs;
        out.push_back(std::move(part));
    }
    return out;
}

template <class R>
Tensor<R> add(const Tensor<R>& a, const Tensor<R>& b) {
    if (a.shape() != b.shape())
        throw ConfigError("elementwise add shape mismatch: " + a.shape().str() + " vs " + b.shape().str());
    Tensor<R> out(a.shape());
    for (int64_t i = 0; i < a.numel(); ++i) out[i] = a[i] + b[i];
    out.check_finite("add");
    return out;
}

template <class R>
Tensor<R> hadamard(const Tensor<R>& a, const Tensor<R>& b) {
    if (a.shape() != b.shape())
        throw ConfigError("hadamard shape mismatch: " + a.shape().str() + " vs " + b.shape().str());
    Tensor<R> out(a.shape());
    for (int64_t i = 0; i < a.numel(); ++i) out[i] = a[i] * b[i];
    out.check_finite("hadamard");
    return out;
}

template <class R>
Tensor<R> scale(const Tensor<R>& x, R s) {
    Tensor<R> out(x.shape());
    for (int64_t i = 0; i < x.numel(); ++i) out[i] = x[i] * s;
    return out;
}

// Broadcast a per-channel bias over N,H,W.
template <class R>
Tensor<R> add_channel_bias(const Tensor<R>& x, const std::vector<R>& bias) {
    if (static_cast<int64_t>(bias.size()) != x.shape().c)
        throw ConfigError("bias length does not match channel count");
    const Shape4 s = x.shape();
    Tensor<R> out(s);
    const int64_t px = s.h * s.w;
    for (int64_t n = 0; n < s.n; ++n)
        for (int64_t c = 0; c < s.c; ++c) {
            const R b = bias[static_cast<size_t>(c)];
            const R* xr = x.data() + (n * s.c + c) * px;
            R* orow = out.data() + (n * s.c + c) * px;
            for (int64_t i = 0; i < px; ++i) orow[i] = xr[i] + b;
        }
    out.check_finite("add_channel_bias");
    return out;
}

// x (N,C,H,W) scaled per channel by s (N,C,1,1); the squeeze-excite gate.
template <class R>
Tensor<R> broadcast_mul(const Tensor<R>& x, const Tensor<R>& s) {
    const Shape4 xs = x.shape(), ss = s.shape();
    if (ss.n != xs.n || ss.c != xs.c || ss.h != 1 || ss.w != 1)
        throw ConfigError("broadcast_mul gate shape " + ss.str() + " incompatible with " + xs.str());
    Tensor<R> out(xs);
    const int64_t px = xs.h * xs.w;
    for (int64_t n = 0; n < xs.n; ++n)
        for (int64_t c = 0; c < xs.c; ++c) {
            const R g = s.at(n, c, 0, 0);
            const R* xr = x.data() + (n * xs.c + c) * px;
            R* orow = out.data() + (n * xs.c + c) * px;
            for (int64_t i = 0; i < px; ++i) orow[i] = xr[i] * g;
        }
    out.check_finite("broadcast_mul");
    return out;
}

template <class R>
std::pair<Tensor<R>, Tensor<R>> broadcast_mul_backward(const Tensor<R>& grad_out, const Tensor<R>& x,
                                                       const Tensor<R>& s) {
    const Shape4 xs = x.shape();
    Tensor<R> gx(xs), gs(s.shape());
    const int64_t px = xs.h * xs.w;
    for (int64_t n = 0; n < xs.n; ++n)
        for (int64_t c = 0; c < xs.c; ++c) {
            const R g = s.at(n, c, 0, 0);
            R acc = 0;
            const R* xr = x.data() + (n * xs.c + c) * px;
            const R* gr = grad_out.data() + (n * xs.c + c) * px;
            R* gxr = gx.data() + (n * xs.c + c) * px;
            for (int64_t i = 0; i < px; ++i) {
                gxr[i] = gr[i] * g;
                acc += gr[i] * xr[i];
            }
            gs.at(n, c, 0, 0) = acc;
        }
    return {std::move(gx), std::move(gs)};
}

template <class R>
std::vector<R> channel_bias_backward(const Tensor<R>& grad_out) {
    const Shape4 s = grad_out.shape();
    std::vector<R> gb(static_cast<size_t>(s.c), R(0));
    for (int64_t n = 0; n < s.n; ++n)
        for (int64_t c = 0; c < s.c; ++c)
            for (int64_t h = 0; h < s.h; ++h)
                for (int64_t w = 0; w < s.w; ++w) gb[static_cast<size_t>(c)] += grad_out.at(n, c, h, w);
    return gb;
}

}  // namespace cfkit::ops

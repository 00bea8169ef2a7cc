#pragma once

#include <algorithm>
#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include "cfkit/common.hpp"

namespace cfkit {

// NCHW extents. W is the fastest-varying dimension of the flat storage.
struct Shape4 {
    int64_t n = 0, c = 0, h = 0, w = 0;

    int64_t numel() const { return n * c * h * w; }

    bool operator==(const Shape4& o) const { return n == o.n && c == o.c && h == o.h && w == o.w; }
    bool operator!=(const Shape4& o) const { return !(*this == o); }

    std::string str() const {
        std::ostringstream os;
        os << n << "x" << c << "x" << h << "x" << w;
        return os.str();
    }
};

// Dense rank-4 tensor, row-major NCHW, value-semantic. The universal value
// type of the kit; float for inference/profiling, double for gradient checks.
template <class R>
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape4 shape) : shape_(shape) {
        validate_shape(shape);
        data_.assign(static_cast<size_t>(shape.numel()), R(0));
    }

    Tensor(Shape4 shape, std::vector<R> data) : shape_(shape), data_(std::move(data)) {
        validate_shape(shape);
        if (static_cast<int64_t>(data_.size()) != shape.numel())
            throw ConfigError("tensor data length " + std::to_string(data_.size()) +
                              " does not match shape " + shape.str());
    }

    static Tensor zeros(Shape4 shape) { return Tensor(shape); }

    static Tensor full(Shape4 shape, R value) {
        Tensor t(shape);
        std::fill(t.data_.begin(), t.data_.end(), value);
        return t;
    }

    static Tensor random_uniform(Shape4 shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
        Tensor t(shape);
        for (auto& v : t.data_) v = static_cast<R>(rng.uniform(lo, hi));
        return t;
    }

    const Shape4& shape() const { return shape_; }
    int64_t numel() const { return shape_.numel(); }

    R* data() { return data_.data(); }
    const R* data() const { return data_.data(); }
    std::vector<R>& vec() { return data_; }
    const std::vector<R>& vec() const { return data_; }

    int64_t index(int64_t n, int64_t c, int64_t h, int64_t w) const {
        return ((n * shape_.c + c) * shape_.h + h) * shape_.w + w;
    }

    R& at(int64_t n, int64_t c, int64_t h, int64_t w) { return data_[static_cast<size_t>(index(n, c, h, w))]; }
    R at(int64_t n, int64_t c, int64_t h, int64_t w) const { return data_[static_cast<size_t>(index(n, c, h, w))]; }

    R& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
    R operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

    // NaN/Inf is an error condition, never silent.
    void check_finite(const char* context) const {
        for (const R v : data_)
            if (!is_finite_value(v))
                throw NumericError(std::string(context) + " produced a non-finite value");
    }

private:
    static void validate_shape(const Shape4& s) {
        if (s.n < 0 || s.c < 0 || s.h < 0 || s.w < 0)
            throw ConfigError("negative extent in shape " + s.str());
    }

    Shape4 shape_{};
    std::vector<R> data_;
};

enum class ConvKind { pointwise, depthwise, dense };

inline const char* conv_kind_name(ConvKind k) {
    switch (k) {
        case ConvKind::pointwise: return "pointwise";
        case ConvKind::depthwise: return "depthwise";
        case ConvKind::dense: return "dense";
    }
    return "?";
}

// Static description of a 2-d convolution. Weight layout:
//   dense:     (out_channels, in_channels, kh, kw)
//   depthwise: (channels, 1, kh, kw), out_channels == in_channels
//   pointwise: (out_channels, in_channels, 1, 1)
struct ConvSpec {
    ConvKind kind = ConvKind::dense;
    int kernel_h = 3, kernel_w = 3;
    int stride = 1;
    int pad = 0;
    int in_channels = 0, out_channels = 0;

    static ConvSpec make_dense(int in_c, int out_c, int k, int stride, int pad) {
        return validated({ConvKind::dense, k, k, stride, pad, in_c, out_c});
    }
    static ConvSpec make_depthwise(int channels, int k, int stride, int pad) {
        return validated({ConvKind::depthwise, k, k, stride, pad, channels, channels});
    }
    static ConvSpec make_pointwise(int in_c, int out_c) {
        return validated({ConvKind::pointwise, 1, 1, 1, 0, in_c, out_c});
    }

    static ConvSpec validated(ConvSpec s) {
        s.validate();
        return s;
    }

    void validate() const {
        if (kernel_h <= 0 || kernel_w <= 0) throw ConfigError("conv kernel must be positive");
        if (stride <= 0) throw ConfigError("conv stride must be positive");
        if (pad < 0) throw ConfigError("conv padding must be non-negative");
        if (in_channels <= 0 || out_channels <= 0) throw ConfigError("conv channel counts must be positive");
        if (kind == ConvKind::depthwise && in_channels != out_channels)
            throw ConfigError("depthwise conv requires out_channels == in_channels (multiplier 1)");
        if (kind == ConvKind::pointwise && (kernel_h != 1 || kernel_w != 1))
            throw ConfigError("pointwise conv requires a 1x1 kernel");
    }

    int out_extent(int in, int k) const { return (in + 2 * pad - k) / stride + 1; }

    Shape4 out_shape(const Shape4& in) const {
        if (in.c != in_channels)
            throw ConfigError("conv expects " + std::to_string(in_channels) + " input channels, got " +
                              std::to_string(in.c));
        const int oh = out_extent(static_cast<int>(in.h), kernel_h);
        const int ow = out_extent(static_cast<int>(in.w), kernel_w);
        if (oh <= 0 || ow <= 0)
            throw ConfigError("conv output would be empty for input " + in.str());
        return {in.n, out_channels, oh, ow};
    }

    Shape4 weight_shape() const {
        if (kind == ConvKind::depthwise) return {in_channels, 1, kernel_h, kernel_w};
        return {out_channels, in_channels, kernel_h, kernel_w};
    }

    // MACs for one forward evaluation on the given input.
    int64_t macs(const Shape4& in) const {
        const Shape4 out = out_shape(in);
        const int64_t per_px =
            static_cast<int64_t>(kernel_h) * kernel_w * (kind == ConvKind::depthwise ? 1 : in_channels);
        return per_px * out.c * out.h * out.w * out.n;
    }

    int64_t param_count() const { return weight_shape().numel(); }
};

// Per-channel inference-time batch norm. Running statistics are part of the
// op contract; built models keep them at identity (training is out of scope).
template <class R>
struct BatchNormParams {
    std::vector<R> gamma, beta, mean, var;
    R eps = static_cast<R>(1e-5);

    static BatchNormParams identity(int channels, R eps = static_cast<R>(1e-5)) {
        BatchNormParams p;
        p.gamma.assign(static_cast<size_t>(channels), R(1));
        p.beta.assign(static_cast<size_t>(channels), R(0));
        p.mean.assign(static_cast<size_t>(channels), R(0));
        p.var.assign(static_cast<size_t>(channels), R(1));
        p.eps = eps;
        return p;
    }

    int channels() const { return static_cast<int>(gamma.size()); }

    void validate() const {
        const size_t c = gamma.size();
        if (beta.size() != c || mean.size() != c || var.size() != c)
            throw ConfigError("batchnorm parameter arrays disagree on channel count");
        if (!(eps > R(0))) throw ConfigError("batchnorm epsilon must be positive");
        for (const R v : var)
            if (v < R(0)) throw ConfigError("batchnorm variance must be non-negative");
    }
};

}  // namespace cfkit

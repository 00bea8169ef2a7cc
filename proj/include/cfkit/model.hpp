#pragma once

#include <array>
#include <memory>
#include <optional>

#include "cfkit/config.hpp"
#include "cfkit/ops.hpp"
#include "cfkit/params.hpp"

namespace cfkit {

// One row of the static cost model (cmd_inspect line, CSV row).
struct CostNode {
    std::string name;
    std::string kind;
    Shape4 out_shape;
    int64_t params = 0;
    int64_t macs = 0;       // conv/linear/matmul multiply-accumulates
    int64_t minor_ops = 0;  // BN, activations, pools, elementwise, softmax
};

namespace layers {

// Registers parameters with deterministic seeded init:
// Kaiming-uniform (fan-in) weights, U(-1/sqrt(fan_in), +) biases, BN gamma=1 beta=0.
template <class R>
class Builder {
public:
    Builder(ParamStore<R>& store, uint64_t seed) : store_(store), rng_(seed) {}

    int conv_weight(const std::string& name, const ConvSpec& spec) {
        const Shape4 ws = spec.weight_shape();
        const double fan_in =
            static_cast<double>(spec.kernel_h) * spec.kernel_w *
            (spec.kind == ConvKind::depthwise ? 1 : spec.in_channels);
        const double bound = std::sqrt(6.0 / fan_in);
        Tensor<R> w(ws);
        for (int64_t i = 0; i < w.numel(); ++i) w[i] = static_cast<R>(rng_.uniform(-bound, bound));
        return store_.add(name, std::move(w));
    }

    int bias(const std::string& name, int channels, double fan_in) {
        const double bound = fan_in > 0 ? 1.0 / std::sqrt(fan_in) : 0.0;
        Tensor<R> b({1, channels, 1, 1});
        for (int64_t i = 0; i < b.numel(); ++i) b[i] = static_cast<R>(rng_.uniform(-bound, bound));
        return store_.add(name, std::move(b));
    }

    int bn_gamma(const std::string& name, int channels) {
        return store_.add(name, Tensor<R>::full({1, channels, 1, 1}, R(1)));
    }

    int bn_beta(const std::string& name, int channels) {
        return store_.add(name, Tensor<R>::zeros({1, channels, 1, 1}));
    }

private:
    ParamStore<R>& store_;
    Rng rng_;
};

// conv (bias-free) -> BN (identity running stats) -> optional ReLU6.
template <class R>
struct ConvBn {
    ConvSpec spec;
    int w = -1, gamma = -1, beta = -1;
    bool act = false;

    struct Cache {
        Tensor<R> x, conv_out, bn_out;
    };

    static ConvBn create(Builder<R>& b, const std::string& name, const ConvSpec& spec, bool act) {
        ConvBn l;
        l.spec = spec;
        l.act = act;
        l.w = b.conv_weight(name + ".weight", spec);
        l.gamma = b.bn_gamma(name + ".bn.gamma", spec.out_channels);
        l.beta = b.bn_beta(name + ".bn.beta", spec.out_channels);
        return l;
    }

    BatchNormParams<R> bn(const ParamStore<R>& ps) const {
        BatchNormParams<R> p = BatchNormParams<R>::identity(spec.out_channels);
        const Tensor<R>& g = ps.value(gamma);
        const Tensor<R>& bt = ps.value(beta);
        for (int c = 0; c < spec.out_channels; ++c) {
            p.gamma[static_cast<size_t>(c)] = g[c];
            p.beta[static_cast<size_t>(c)] = bt[c];
        }
        return p;
    }

    Tensor<R> forward(const ParamStore<R>& ps, const Tensor<R>& x, Cache* c) const {
        Tensor<R> conv = ops::conv2d(x, ps.value(w), spec);
        Tensor<R> bno = ops::batchnorm_infer(conv, bn(ps));
        Tensor<R> out = act ? ops::relu6(bno) : bno;
        if (c) {
            c->x = x;
            c->conv_out = std::move(conv);
            c->bn_out = act ? bno : Tensor<R>();
        }
        return out;
    }

    Tensor<R> backward(const ParamStore<R>& ps, const Cache& c, const Tensor<R>& grad,
                       GradStore<R>& gs) const {
        Tensor<R> g = act ? ops::relu6_backward(grad, c.bn_out) : grad;
        auto [gx_bn, ggamma, gbeta] = ops::batchnorm_backward(g, c.conv_out, bn(ps));
        gs.accumulate_vec(gamma, ggamma);
        gs.accumulate_vec(beta, gbeta);
        auto [gx, gw] = ops::conv2d_backward(gx_bn, c.x, ps.value(w), spec);
        gs.accumulate(w, gw);
        return gx;
    }

    Shape4 out_shape(const Shape4& in) const { return spec.out_shape(in); }
    int64_t param_count() const { return spec.param_count() + 2 * spec.out_channels; }

    int64_t macs(const Shape4& in) const { return spec.macs(in); }
    // BN + activation passes.
    int64_t minor(const Shape4& in) const { return spec.out_shape(in).numel() * (act ? 2 : 1); }
};

// conv with a per-channel bias and no normalization.
template <class R>
struct ConvBias {
    ConvSpec spec;
    int w = -1, b = -1;

    struct Cache {
        Tensor<R> x;
    };

    static ConvBias create(Builder<R>& bld, const std::string& name, const ConvSpec& spec) {
        ConvBias l;
        l.spec = spec;
        l.w = bld.conv_weight(name + ".weight", spec);
        const double fan_in = static_cast<double>(spec.kernel_h) * spec.kernel_w *
                              (spec.kind == ConvKind::depthwise ? 1 : spec.in_channels);
        l.b = bld.bias(name + ".bias", spec.out_channels, fan_in);
        return l;
    }

    std::vector<R> bias_vec(const ParamStore<R>& ps) const {
        const Tensor<R>& bt = ps.value(b);
        return bt.vec();
    }

    Tensor<R> forward(const ParamStore<R>& ps, const Tensor<R>& x, Cache* c) const {
        Tensor<R> conv = ops::conv2d(x, ps.value(w), spec);
        Tensor<R> out = ops::add_channel_bias(conv, bias_vec(ps));
        if (c) c->x = x;
        return out;
    }

    Tensor<R> backward(const ParamStore<R>& ps, const Cache& c, const Tensor<R>& grad,
                       GradStore<R>& gs) const {
        gs.accumulate_vec(b, ops::channel_bias_backward(grad));
        auto [gx, gw] = ops::conv2d_backward(grad, c.x, ps.value(w), spec);
        gs.accumulate(w, gw);
        return gx;
    }

    Shape4 out_shape(const Shape4& in) const { return spec.out_shape(in); }
    int64_t param_count() const { return spec.param_count() + spec.out_channels; }
    int64_t macs(const Shape4& in) const { return spec.macs(in); }
    int64_t minor(const Shape4& in) const { return spec.out_shape(in).numel(); }
};

// MobileNetV2 inverted residual: expand (skipped at ratio 1) -> depthwise -> project.
template <class R>
struct InvertedResidual {
    std::optional<ConvBn<R>> expand;
    ConvBn<R> dw;
    ConvBn<R> project;
    bool residual = false;

    struct Cache {
        typename ConvBn<R>::Cache ex, dwc, pr;
        Tensor<R> x;
    };

    static InvertedResidual create(Builder<R>& b, const std::string& name, int in_c,
                                   const InvertedResidualSpec& s) {
        InvertedResidual l;
        const int mid = in_c * s.expand_ratio;
        if (s.expand_ratio != 1)
            l.expand = ConvBn<R>::create(b, name + ".expand", ConvSpec::make_pointwise(in_c, mid), true);
        l.dw = ConvBn<R>::create(b, name + ".dw",
                                 ConvSpec::make_depthwise(mid, s.kernel, s.stride, s.kernel / 2), true);
        l.project = ConvBn<R>::create(b, name + ".project", ConvSpec::make_pointwise(mid, s.out_channels),
                                      false);
        l.residual = (s.stride == 1 && in_c == s.out_channels);
        return l;
    }

    Tensor<R> forward(const ParamStore<R>& ps, const Tensor<R>& x, Cache* c) const {
        Tensor<R> t = expand ? expand->forward(ps, x, c ? &c->ex : nullptr) : x;
        t = dw.forward(ps, t, c ? &c->dwc : nullptr);
        t = project.forward(ps, t, c ? &c->pr : nullptr);
        if (residual) t = ops::add(t, x);
        if (c) c->x = x;
        return t;
    }

    Tensor<R> backward(const ParamStore<R>& ps, const Cache& c, const Tensor<R>& grad,
                       GradStore<R>& gs) const {
        Tensor<R> g = project.backward(ps, c.pr, grad, gs);
        g = dw.backward(ps, c.dwc, g, gs);
        if (expand) g = expand->backward(ps, c.ex, g, gs);
        if (residual) g = ops::add(g, grad);
        return g;
    }

    Shape4 out_shape(const Shape4& in) const {
        Shape4 s = in;
        if (expand) s = expand->out_shape(s);
        s = dw.out_shape(s);
        return project.out_shape(s);
    }

    int64_t param_count() const {
        return (expand ? expand->param_count() : 0) + dw.param_count() + project.param_count();
    }

    int64_t macs(const Shape4& in) const {
        Shape4 s = in;
        int64_t m = 0;
        if (expand) {
            m += expand->macs(s);
            s = expand->out_shape(s);
        }
        m += dw.macs(s);
        s = dw.out_shape(s);
        m += project.macs(s);
        return m;
    }

    int64_t minor(const Shape4& in) const {
        Shape4 s = in;
        int64_t m = 0;
        if (expand) {
            m += expand->minor(s);
            s = expand->out_shape(s);
        }
        m += dw.minor(s);
        s = dw.out_shape(s);
        m += project.minor(s);
        s = project.out_shape(s);
        if (residual) m += s.numel();
        return m;
    }
};

// Squeeze-excite: global pool -> FC -> ReLU6 -> FC -> sigmoid -> per-channel gate.
template <class R>
struct ChannelAttention {
    ConvBias<R> fc1, fc2;

    struct Cache {
        Tensor<R> x, pooled, fc1_out, act_out, gate;
        typename ConvBias<R>::Cache c1, c2;
    };

    static ChannelAttention create(Builder<R>& b, const std::string& name, int channels, int reduction) {
        ChannelAttention l;
        const int hidden = std::max(1, channels / reduction);
        l.fc1 = ConvBias<R>::create(b, name + ".fc1", ConvSpec::make_pointwise(channels, hidden));
        l.fc2 = ConvBias<R>::create(b, name + ".fc2", ConvSpec::make_pointwise(hidden, channels));
        return l;
    }

    Tensor<R> forward(const ParamStore<R>& ps, const Tensor<R>& x, Cache* c) const {
        Tensor<R> pooled = ops::global_avg_pool(x);
        Tensor<R> h = fc1.forward(ps, pooled, c ? &c->c1 : nullptr);
        Tensor<R> hr = ops::relu6(h);
        Tensor<R> z = fc2.forward(ps, hr, c ? &c->c2 : nullptr);
        Tensor<R> gate = ops::sigmoid(z);
        Tensor<R> out = ops::broadcast_mul(x, gate);
        if (c) {
            c->x = x;
            c->pooled = std::move(pooled);
            c->fc1_out = std::move(h);
            c->act_out = std::move(hr);
            c->gate = gate;
        }
        return out;
    }

    Tensor<R> backward(const ParamStore<R>& ps, const Cache& c, const Tensor<R>& grad,
                       GradStore<R>& gs) const {
        auto [gx_direct, ggate] = ops::broadcast_mul_backward(grad, c.x, c.gate);
        Tensor<R> gz = ops::sigmoid_backward(ggate, c.gate);
        Tensor<R> ghr = fc2.backward(ps, c.c2, gz, gs);
        Tensor<R> gh = ops::relu6_backward(ghr, c.fc1_out);
        Tensor<R> gpooled = fc1.backward(ps, c.c1, gh, gs);
        Tensor<R> gx_pool = ops::avg_pool_backward(gpooled, c.x.shape());
        return ops::add(gx_direct, gx_pool);
    }

    int64_t param_count() const { return fc1.param_count() + fc2.param_count(); }

    int64_t macs(const Shape4& in) const {
        const Shape4 pooled{in.n, in.c, 1, 1};
        return fc1.macs(pooled) + fc2.macs(fc1.out_shape(pooled));
    }

    int64_t minor(const Shape4& in) const {
        const Shape4 pooled{in.n, in.c, 1, 1};
        const int64_t hidden = fc1.spec.out_channels;
        // pool, relu6, sigmoid, gate multiply
        return in.numel() * 2 + pooled.n * (hidden + pooled.c);
    }
};

// Branched depthwise-conv module: parallel 3x3 dw, 1x1 dw and 3x3 dw-separable
// branches summed with the identity, then channel attention.
template <class R>
struct BdcModule {
    std::optional<ConvBn<R>> dw3, dw1, sep_dw, sep_pw;
    std::optional<ChannelAttention<R>> cattn;

    struct Cache {
        Tensor<R> x, delta;
        typename ConvBn<R>::Cache c_dw3, c_dw1, c_sep_dw, c_sep_pw;
        typename ChannelAttention<R>::Cache c_att;
    };

    static BdcModule create(Builder<R>& b, const std::string& name, int channels, const TransBdcSpec& t) {
        BdcModule l;
        if (t.use_dw3)
            l.dw3 = ConvBn<R>::create(b, name + ".dw3", ConvSpec::make_depthwise(channels, 3, 1, 1), false);
        if (t.use_dw1)
            l.dw1 = ConvBn<R>::create(b, name + ".dw1", ConvSpec::make_depthwise(channels, 1, 1, 0), false);
        if (t.use_dwsep) {
            l.sep_dw = ConvBn<R>::create(b, name + ".sep_dw", ConvSpec::make_depthwise(channels, 3, 1, 1),
                                         false);
            l.sep_pw = ConvBn<R>::create(b, name + ".sep_pw", ConvSpec::make_pointwise(channels, channels),
                                         false);
        }
        if (t.use_channel_attn)
            l.cattn = ChannelAttention<R>::create(b, name + ".cattn", channels, t.channel_attn_reduction);
        return l;
    }

    bool empty() const { return !dw3 && !dw1 && !sep_dw && !cattn; }

    Tensor<R> forward(const ParamStore<R>& ps, const Tensor<R>& x, Cache* c) const {
        Tensor<R> delta = x;
        if (dw3) delta = ops::add(delta, dw3->forward(ps, x, c ? &c->c_dw3 : nullptr));
        if (dw1) delta = ops::add(delta, dw1->forward(ps, x, c ? &c->c_dw1 : nullptr));
        if (sep_dw) {
            Tensor<R> t = sep_dw->forward(ps, x, c ? &c->c_sep_dw : nullptr);
            t = sep_pw->forward(ps, t, c ? &c->c_sep_pw : nullptr);
            delta = ops::add(delta, t);
        }
        Tensor<R> out = cattn ? cattn->forward(ps, delta, c ? &c->c_att : nullptr) : delta;
        if (c) {
            c->x = x;
            c->delta = std::move(delta);
        }
        return out;
    }

    Tensor<R> backward(const ParamStore<R>& ps, const Cache& c, const Tensor<R>& grad,
                       GradStore<R>& gs) const {
        Tensor<R> gdelta = cattn ? cattn->backward(ps, c.c_att, grad, gs) : grad;
        Tensor<R> gx = gdelta;  // identity branch
        if (dw3) gx = ops::add(gx, dw3->backward(ps, c.c_dw3, gdelta, gs));
        if (dw1) gx = ops::add(gx, dw1->backward(ps, c.c_dw1, gdelta, gs));
        if (sep_dw) {
            Tensor<R> g = sep_pw->backward(ps, c.c_sep_pw, gdelta, gs);
            gx = ops::add(gx, sep_dw->backward(ps, c.c_sep_dw, g, gs));
        }
        return gx;
    }

    int64_t param_count() const {
        int64_t p = 0;
        if (dw3) p += dw3->param_count();
        if (dw1) p += dw1->param_count();
        if (sep_dw) p += sep_dw->param_count() + sep_pw->param_count();
        if (cattn) p += cattn->param_count();
        return p;
    }

    int64_t macs(const Shape4& in) const {
        int64_t m = 0;
        if (dw3) m += dw3->macs(in);
        if (dw1) m += dw1->macs(in);
        if (sep_dw) m += sep_dw->macs(in) + sep_pw->macs(in);
        if (cattn) m += cattn->macs(in);
        return m;
    }

    int64_t minor(const Shape4& in) const {
        int64_t m = 0;
        int64_t adds = 0;
        if (dw3) m += dw3->minor(in), ++adds;
        if (dw1) m += dw1->minor(in), ++adds;
        if (sep_dw) m += sep_dw->minor(in) + sep_pw->minor(in), ++adds;
        if (cattn) m += cattn->minor(in);
        return m + adds * in.numel();
    }
};

// Lightweight multi-head self-attention over the pooled tokens. Q/K/V are
// per-head 1x1 conv + BN projections; softmax(Q K^T / sqrt(d_k)) V per head;
// concatenated heads pass through ReLU6 -> 1x1 conv -> BN; residual add.
template <class R>
struct AttentionModule {
    ConvBn<R> to_q, to_k, to_v, proj;
    int heads = 4, d_qk = 16, d_v = 32;

    struct Cache {
        Tensor<R> x, Q, K, V, A, merged;
        typename ConvBn<R>::Cache cq, ck, cv, cp;
    };

    static AttentionModule create(Builder<R>& b, const std::string& name, int channels,
                                  const TransBdcSpec& t) {
        AttentionModule l;
        l.heads = t.num_heads;
        l.d_qk = t.q_dim;
        l.d_v = t.v_dim;
        l.to_q = ConvBn<R>::create(b, name + ".q", ConvSpec::make_pointwise(channels, t.num_heads * t.q_dim),
                                   false);
        l.to_k = ConvBn<R>::create(b, name + ".k", ConvSpec::make_pointwise(channels, t.num_heads * t.k_dim),
                                   false);
        l.to_v = ConvBn<R>::create(b, name + ".v", ConvSpec::make_pointwise(channels, t.num_heads * t.v_dim),
                                   false);
        l.proj = ConvBn<R>::create(b, name + ".proj",
                                   ConvSpec::make_pointwise(t.num_heads * t.v_dim, channels), false);
        return l;
    }

    // (N, heads*d, h, w) -> (N, heads, d, h*w)
    static Tensor<R> split_heads(const Tensor<R>& x, int heads, int d) {
        const Shape4 s = x.shape();
        Tensor<R> out({s.n, heads, d, s.h * s.w});
        for (int64_t n = 0; n < s.n; ++n)
            for (int64_t hd = 0; hd < heads; ++hd)
                for (int64_t di = 0; di < d; ++di)
                    for (int64_t p = 0; p < s.h * s.w; ++p)
                        out.at(n, hd, di, p) = x.at(n, hd * d + di, p / s.w, p % s.w);
        return out;
    }

    static Tensor<R> merge_heads(const Tensor<R>& x, int64_t h, int64_t w) {
        const Shape4 s = x.shape();  // (N, heads, d, T)
        Tensor<R> out({s.n, s.c * s.h, h, w});
        for (int64_t n = 0; n < s.n; ++n)
            for (int64_t hd = 0; hd < s.c; ++hd)
                for (int64_t di = 0; di < s.h; ++di)
                    for (int64_t p = 0; p < s.w; ++p)
                        out.at(n, hd * s.h + di, p / w, p % w) = x.at(n, hd, di, p);
        return out;
    }

    Tensor<R> forward(const ParamStore<R>& ps, const Tensor<R>& x, Cache* c) const {
        const Shape4 s = x.shape();
        if (s.h * s.w <= 0) throw ConfigError("attention needs a non-empty token grid");
        Tensor<R> q = to_q.forward(ps, x, c ? &c->cq : nullptr);
        Tensor<R> k = to_k.forward(ps, x, c ? &c->ck : nullptr);
        Tensor<R> v = to_v.forward(ps, x, c ? &c->cv : nullptr);
        Tensor<R> Q = split_heads(q, heads, d_qk);
        Tensor<R> K = split_heads(k, heads, d_qk);
        Tensor<R> V = split_heads(v, heads, d_v);
        const R inv_sqrt_dk = static_cast<R>(1.0 / std::sqrt(static_cast<double>(d_qk)));
        Tensor<R> logits = ops::scale(ops::matmul(ops::transpose_last2(Q), K), inv_sqrt_dk);
        Tensor<R> A = ops::softmax_rows(logits);
        Tensor<R> heads_out = ops::matmul(V, ops::transpose_last2(A));
        Tensor<R> merged = merge_heads(heads_out, s.h, s.w);
        Tensor<R> acted = ops::relu6(merged);
        Tensor<R> p = proj.forward(ps, acted, c ? &c->cp : nullptr);
        Tensor<R> out = ops::add(p, x);
        if (c) {
            c->x = x;
            c->Q = std::move(Q);
            c->K = std::move(K);
            c->V = std::move(V);
            c->A = std::move(A);
            c->merged = std::move(merged);
        }
        return out;
    }

    Tensor<R> backward(const ParamStore<R>& ps, const Cache& c, const Tensor<R>& grad,
                       GradStore<R>& gs) const {
        const Shape4 s = c.x.shape();
        Tensor<R> g_act = proj.backward(ps, c.cp, grad, gs);
        Tensor<R> g_merged = ops::relu6_backward(g_act, c.merged);
        Tensor<R> g_heads = split_heads(g_merged, heads, d_v);
        Tensor<R> At = ops::transpose_last2(c.A);
        auto [gV, gAt] = ops::matmul_backward(g_heads, c.V, At);
        Tensor<R> gA = ops::transpose_last2(gAt);
        Tensor<R> g_logits = ops::softmax_rows_backward(gA, c.A);
        const R inv_sqrt_dk = static_cast<R>(1.0 / std::sqrt(static_cast<double>(d_qk)));
        g_logits = ops::scale(g_logits, inv_sqrt_dk);
        Tensor<R> Qt = ops::transpose_last2(c.Q);
        auto [gQt, gK] = ops::matmul_backward(g_logits, Qt, c.K);
        Tensor<R> gQ = ops::transpose_last2(gQt);
        Tensor<R> gq = merge_heads(gQ, s.h, s.w);
        Tensor<R> gk = merge_heads(gK, s.h, s.w);
        Tensor<R> gv = merge_heads(gV, s.h, s.w);
        Tensor<R> gx = grad;  // residual
        gx = ops::add(gx, to_q.backward(ps, c.cq, gq, gs));
        gx = ops::add(gx, to_k.backward(ps, c.ck, gk, gs));
        gx = ops::add(gx, to_v.backward(ps, c.cv, gv, gs));
        return gx;
    }

    int64_t param_count() const {
        return to_q.param_count() + to_k.param_count() + to_v.param_count() + proj.param_count();
    }

    int64_t macs(const Shape4& in) const {
        const int64_t T = in.h * in.w;
        int64_t m = to_q.macs(in) + to_k.macs(in) + to_v.macs(in);
        m += in.n * heads * T * T * (d_qk + d_v);  // QK^T and AV
        m += proj.macs({in.n, static_cast<int64_t>(heads) * d_v, in.h, in.w});
        return m;
    }

    int64_t minor(const Shape4& in) const {
        const int64_t T = in.h * in.w;
        int64_t m = to_q.minor(in) + to_k.minor(in) + to_v.minor(in);
        m += in.n * heads * T * T;                       // softmax
        m += in.n * heads * d_v * T;                     // relu6 on merged
        m += proj.minor({in.n, static_cast<int64_t>(heads) * d_v, in.h, in.w});
        m += in.numel();  // residual
        return m;
    }
};

// 1x1 expand -> 3x3 depthwise -> 1x1 project, BN+ReLU6 between, linear output.
template <class R>
struct FfnModule {
    ConvBn<R> fc1, dw, fc2;

    struct Cache {
        typename ConvBn<R>::Cache c1, cd, c2;
    };

    static FfnModule create(Builder<R>& b, const std::string& name, int channels, int expansion) {
        FfnModule l;
        const int hidden = channels * expansion;
        l.fc1 = ConvBn<R>::create(b, name + ".fc1", ConvSpec::make_pointwise(channels, hidden), true);
        l.dw = ConvBn<R>::create(b, name + ".dw", ConvSpec::make_depthwise(hidden, 3, 1, 1), true);
        l.fc2 = ConvBn<R>::create(b, name + ".fc2", ConvSpec::make_pointwise(hidden, channels), false);
        return l;
    }

    Tensor<R> forward(const ParamStore<R>& ps, const Tensor<R>& x, Cache* c) const {
        Tensor<R> t = fc1.forward(ps, x, c ? &c->c1 : nullptr);
        t = dw.forward(ps, t, c ? &c->cd : nullptr);
        return fc2.forward(ps, t, c ? &c->c2 : nullptr);
    }

    Tensor<R> backward(const ParamStore<R>& ps, const Cache& c, const Tensor<R>& grad,
                       GradStore<R>& gs) const {
        Tensor<R> g = fc2.backward(ps, c.c2, grad, gs);
        g = dw.backward(ps, c.cd, g, gs);
        return fc1.backward(ps, c.c1, g, gs);
    }

    int64_t param_count() const { return fc1.param_count() + dw.param_count() + fc2.param_count(); }

    int64_t macs(const Shape4& in) const {
        Shape4 s = in;
        int64_t m = fc1.macs(s);
        s = fc1.out_shape(s);
        m += dw.macs(s) + fc2.macs(s);
        return m;
    }

    int64_t minor(const Shape4& in) const {
        Shape4 s = in;
        int64_t m = fc1.minor(s);
        s = fc1.out_shape(s);
        m += dw.minor(s) + fc2.minor(s);
        return m;
    }
};

// One bottleneck unit: parallel BDC and attention branches on the same input,
// fused by elementwise sum, then a depthwise FFN with residual.
template <class R>
struct TransBdcBlock {
    std::optional<BdcModule<R>> bdc;
    std::optional<AttentionModule<R>> attn;
    FfnModule<R> ffn;

    struct Cache {
        typename BdcModule<R>::Cache cb;
        typename AttentionModule<R>::Cache ca;
        typename FfnModule<R>::Cache cf;
        Tensor<R> xf1;
    };

    static TransBdcBlock create(Builder<R>& b, const std::string& name, int channels,
                                const TransBdcSpec& t) {
        TransBdcBlock l;
        if (t.use_dw3 || t.use_dw1 || t.use_dwsep || t.use_channel_attn)
            l.bdc = BdcModule<R>::create(b, name + ".bdc", channels, t);
        if (t.use_attention) l.attn = AttentionModule<R>::create(b, name + ".attn", channels, t);
        l.ffn = FfnModule<R>::create(b, name + ".ffn", channels, t.ffn_expansion);
        return l;
    }

    Tensor<R> forward(const ParamStore<R>& ps, const Tensor<R>& x, Cache* c) const {
        std::optional<Tensor<R>> xb, xv;
        if (bdc) xb = bdc->forward(ps, x, c ? &c->cb : nullptr);
        if (attn) xv = attn->forward(ps, x, c ? &c->ca : nullptr);
        Tensor<R> xf1;
        if (xb && xv)
            xf1 = ops::add(*xb, *xv);
        else if (xb)
            xf1 = std::move(*xb);
        else
            xf1 = std::move(*xv);
        Tensor<R> y = ops::add(ffn.forward(ps, xf1, c ? &c->cf : nullptr), xf1);
        if (c) c->xf1 = std::move(xf1);
        return y;
    }

    Tensor<R> backward(const ParamStore<R>& ps, const Cache& c, const Tensor<R>& grad,
                       GradStore<R>& gs) const {
        Tensor<R> g_xf1 = ops::add(grad, ffn.backward(ps, c.cf, grad, gs));
        Tensor<R> gx;
        bool have = false;
        if (bdc) {
            gx = bdc->backward(ps, c.cb, g_xf1, gs);
            have = true;
        }
        if (attn) {
            Tensor<R> ga = attn->backward(ps, c.ca, g_xf1, gs);
            gx = have ? ops::add(gx, ga) : std::move(ga);
        }
        return gx;
    }
};

}  // namespace layers

// The four multi-scale TPEM taps plus the pooled, concatenated tokens.
template <class R>
struct FeaturePyramid {
    std::vector<Tensor<R>> taps;  // s1..s4 at strides 4, 8, 16, 32
    Tensor<R> x_f;                // (N, sum of tap channels, H/divisor, W/divisor)
};

template <class R>
Tensor<R> argmax_channels(const Tensor<R>& logits) {
    const Shape4 s = logits.shape();
    Tensor<R> out({s.n, 1, s.h, s.w});
    for (int64_t n = 0; n < s.n; ++n)
        for (int64_t h = 0; h < s.h; ++h)
            for (int64_t w = 0; w < s.w; ++w) {
                int64_t best = 0;
                R bv = logits.at(n, 0, h, w);
                for (int64_t c = 1; c < s.c; ++c) {
                    const R v = logits.at(n, c, h, w);
                    if (v > bv) {  // ties keep the lowest class index
                        bv = v;
                        best = c;
                    }
                }
                out.at(n, 0, h, w) = static_cast<R>(best);
            }
    return out;
}

// Upsample logits to full resolution, then per-pixel argmax.
template <class R>
Tensor<R> segmentation_mask(const Tensor<R>& logits, int out_h, int out_w) {
    return argmax_channels(ops::upsample_bilinear(logits, out_h, out_w));
}

// The assembled network. Immutable after construction (apart from loading
// weights); forward passes own their activations, so concurrent inference on
// one model is safe.
template <class R>
class ContextFormer {
public:
    // One gated FMM scale: dense local projection, per-channel gate and
    // additive transforms of the shared upsampled global projection.
    struct FmmScale {
        int tap = 0;  // pyramid tap index supplying the local features
        layers::ConvBn<R> local;
        layers::ConvBias<R> gate;
        layers::ConvBn<R> add;
    };

    ContextFormer(const ModelConfig& cfg, uint64_t seed) : cfg_(cfg) {
        cfg_.validate();
        layers::Builder<R> b(store_, seed);

        int c = cfg_.input_channels;
        stem_conv_ = layers::ConvBn<R>::create(
            b, "stem.conv",
            ConvSpec::make_dense(c, cfg_.stem.out, cfg_.stem.kernel, cfg_.stem.stride, cfg_.stem.kernel / 2),
            true);
        c = cfg_.stem.out;
        stem_irb_ = layers::InvertedResidual<R>::create(b, "stem.irb", c, {3, 1, cfg_.stem.out, 1});
        c = cfg_.stem.out;

        for (size_t si = 0; si < cfg_.tpem_stages.size(); ++si) {
            std::vector<layers::InvertedResidual<R>> stage;
            for (size_t bi = 0; bi < cfg_.tpem_stages[si].size(); ++bi) {
                const auto& spec = cfg_.tpem_stages[si][bi];
                stage.push_back(layers::InvertedResidual<R>::create(
                    b, "tpem.stage" + std::to_string(si + 1) + ".block" + std::to_string(bi), c, spec));
                c = spec.out_channels;
            }
            stages_.push_back(std::move(stage));
            tap_channels_.push_back(c);
        }

        const int width = cfg_.bottleneck_channels();
        if (cfg_.trans_bdc.num_blocks > 0 && width <= 0)
            throw ConfigError("trans_bdc blocks need a non-empty pyramid");
        for (int i = 0; i < cfg_.trans_bdc.num_blocks; ++i)
            blocks_.push_back(layers::TransBdcBlock<R>::create(b, "trans_bdc.block" + std::to_string(i),
                                                               width, cfg_.trans_bdc));

        if (cfg_.mode == HeadMode::seg) {
            const int T = cfg_.fmm_target_channels;
            fmm_gproj_ = layers::ConvBn<R>::create(b, "fmm.global_proj", ConvSpec::make_pointwise(width, T),
                                                   false);
            // Gated scales, coarsest first: s4, s3, s2.
            const std::array<int, 3> tap_idx = {3, 2, 1};
            const std::array<const char*, 3> tag = {"s4", "s3", "s2"};
            for (int i = 0; i < 3; ++i) {
                FmmScale sc;
                sc.tap = tap_idx[static_cast<size_t>(i)];
                const std::string base = std::string("fmm.") + tag[static_cast<size_t>(i)];
                sc.local = layers::ConvBn<R>::create(
                    b, base + ".local",
                    ConvSpec::make_pointwise(tap_channels_[static_cast<size_t>(sc.tap)], T), false);
                sc.gate = layers::ConvBias<R>::create(b, base + ".gate", ConvSpec::make_depthwise(T, 1, 1, 0));
                sc.add = layers::ConvBn<R>::create(b, base + ".add", ConvSpec::make_depthwise(T, 1, 1, 0),
                                                   false);
                fmm_scales_.push_back(std::move(sc));
            }
            head_fuse_ = layers::ConvBn<R>::create(b, "head.fuse",
                                                   ConvSpec::make_pointwise(T, cfg_.head_hidden), true);
            head_cls_ = layers::ConvBias<R>::create(
                b, "head.classifier", ConvSpec::make_pointwise(cfg_.head_hidden, cfg_.num_classes));
        } else if (cfg_.mode == HeadMode::cls) {
            head_cls_ = layers::ConvBias<R>::create(b, "head.linear",
                                                    ConvSpec::make_pointwise(width, cfg_.num_classes));
        }
    }

    const ModelConfig& config() const { return cfg_; }
    ParamStore<R>& params() { return store_; }
    const ParamStore<R>& params() const { return store_; }

    // ---- forward pieces -------------------------------------------------

    struct TrunkCache {
        typename layers::ConvBn<R>::Cache c_stem;
        typename layers::InvertedResidual<R>::Cache c_stem_irb;
        std::vector<std::vector<typename layers::InvertedResidual<R>::Cache>> c_stages;
        std::vector<Shape4> tap_shapes;
    };

    FeaturePyramid<R> tpem_forward(const Tensor<R>& x, TrunkCache* cache = nullptr) const {
        const Shape4 s = x.shape();
        if (s.c != cfg_.input_channels)
            throw ConfigError("model expects " + std::to_string(cfg_.input_channels) +
                              " input channels, got " + std::to_string(s.c));
        const int64_t align = lcm64(32, cfg_.pool_divisor);
        if (s.h % align != 0 || s.w % align != 0)
            throw ConfigError("input " + s.str() + " is not divisible by " + std::to_string(align));
        FeaturePyramid<R> pyr;
        Tensor<R> t = stem_conv_.forward(store_, x, cache ? &cache->c_stem : nullptr);
        t = stem_irb_.forward(store_, t, cache ? &cache->c_stem_irb : nullptr);
        if (cache) cache->c_stages.resize(stages_.size());
        for (size_t si = 0; si < stages_.size(); ++si) {
            if (cache) cache->c_stages[si].resize(stages_[si].size());
            for (size_t bi = 0; bi < stages_[si].size(); ++bi)
                t = stages_[si][bi].forward(store_, t, cache ? &cache->c_stages[si][bi] : nullptr);
            pyr.taps.push_back(t);
            if (cache) cache->tap_shapes.push_back(t.shape());
        }
        const int th = static_cast<int>(s.h) / cfg_.pool_divisor;
        const int tw = static_cast<int>(s.w) / cfg_.pool_divisor;
        std::vector<Tensor<R>> pooled;
        std::vector<const Tensor<R>*> parts;
        pooled.reserve(pyr.taps.size());
        for (const auto& tap : pyr.taps) pooled.push_back(ops::avg_pool(tap, th, tw));
        for (const auto& p : pooled) parts.push_back(&p);
        if (!parts.empty()) pyr.x_f = ops::concat_channels(parts);
        return pyr;
    }

    struct BottleneckCache {
        std::vector<typename layers::TransBdcBlock<R>::Cache> c_blocks;
    };

    Tensor<R> bottleneck_forward(const Tensor<R>& x_f, BottleneckCache* cache = nullptr) const {
        Tensor<R> t = x_f;
        if (cache) cache->c_blocks.resize(blocks_.size());
        for (size_t i = 0; i < blocks_.size(); ++i)
            t = blocks_[i].forward(store_, t, cache ? &cache->c_blocks[i] : nullptr);
        return t;
    }

    struct DecodeCache {
        typename layers::ConvBn<R>::Cache c_gproj;
        struct ScaleCache {
            typename layers::ConvBn<R>::Cache c_local, c_add;
            typename layers::ConvBias<R>::Cache c_gate;
            Tensor<R> up, gate_out, local_out;
            Shape4 g_shape;
        };
        std::array<ScaleCache, 3> c_scales;
        std::vector<Tensor<R>> fmm_outputs;
        std::vector<Tensor<R>> sums;  // progressive pre-add values for backward
        typename layers::ConvBn<R>::Cache c_fuse;
        typename layers::ConvBias<R>::Cache c_cls;
    };

    // The four FMM outputs, coarsest (H/divisor) to finest (H/8).
    std::vector<Tensor<R>> fmm_forward(const FeaturePyramid<R>& pyr, const Tensor<R>& x_f2,
                                       DecodeCache* cache = nullptr) const {
        if (cfg_.mode != HeadMode::seg) throw ConfigError("fmm_forward requires seg mode");
        std::vector<Tensor<R>> outs;
        Tensor<R> g = fmm_gproj_.forward(store_, x_f2, cache ? &cache->c_gproj : nullptr);
        outs.push_back(g);
        for (size_t i = 0; i < fmm_scales_.size(); ++i) {
            const FmmScale& sc = fmm_scales_[i];
            const Tensor<R>& local_in = pyr.taps[static_cast<size_t>(sc.tap)];
            auto* scc = cache ? &cache->c_scales[i] : nullptr;
            outs.push_back(fmm_scale_forward(sc, local_in, g, scc));
        }
        if (cache) cache->fmm_outputs = outs;
        return outs;
    }

    // One gated merge: local 1x1 conv, per-channel gate and additive transforms
    // of the upsampled global projection.
    Tensor<R> fmm_scale_forward(const FmmScale& sc, const Tensor<R>& local_in, const Tensor<R>& g,
                                typename DecodeCache::ScaleCache* cache = nullptr) const {
        Tensor<R> local = sc.local.forward(store_, local_in, cache ? &cache->c_local : nullptr);
        Tensor<R> up = ops::upsample_bilinear(g, static_cast<int>(local_in.shape().h),
                                              static_cast<int>(local_in.shape().w));
        Tensor<R> gate_logit = sc.gate.forward(store_, up, cache ? &cache->c_gate : nullptr);
        Tensor<R> gate = ops::sigmoid(gate_logit);
        Tensor<R> additive = sc.add.forward(store_, up, cache ? &cache->c_add : nullptr);
        Tensor<R> out = ops::add(ops::hadamard(local, gate), additive);
        if (cache) {
            cache->up = std::move(up);
            cache->gate_out = std::move(gate);
            cache->local_out = std::move(local);
            cache->g_shape = g.shape();
        }
        return out;
    }

    Tensor<R> seg_head_forward(const std::vector<Tensor<R>>& fmm_outputs,
                               DecodeCache* cache = nullptr) const {
        if (fmm_outputs.size() != fmm_scales_.size() + 1)
            throw ConfigError("seg head expects " + std::to_string(fmm_scales_.size() + 1) +
                              " FMM outputs, got " + std::to_string(fmm_outputs.size()));
        Tensor<R> y = fmm_outputs[0];
        if (cache) cache->sums.clear();
        for (size_t i = 1; i < fmm_outputs.size(); ++i) {
            const Shape4 target = fmm_outputs[i].shape();
            if (cache) cache->sums.push_back(y);
            y = ops::add(ops::upsample_bilinear(y, static_cast<int>(target.h), static_cast<int>(target.w)),
                         fmm_outputs[i]);
        }
        Tensor<R> fused = head_fuse_.forward(store_, y, cache ? &cache->c_fuse : nullptr);
        return head_cls_.forward(store_, fused, cache ? &cache->c_cls : nullptr);
    }

    struct ClsCache {
        Shape4 in_shape;
        typename layers::ConvBias<R>::Cache c_cls;
    };

    Tensor<R> cls_head_forward(const Tensor<R>& x_f2, ClsCache* cache = nullptr) const {
        if (cfg_.mode != HeadMode::cls) throw ConfigError("cls_head_forward requires cls mode");
        Tensor<R> pooled = ops::global_avg_pool(x_f2);
        if (cache) cache->in_shape = x_f2.shape();
        return head_cls_.forward(store_, pooled, cache ? &cache->c_cls : nullptr);
    }

    struct FullCache {
        TrunkCache trunk;
        FeaturePyramid<R> pyr;
        BottleneckCache bottleneck;
        Tensor<R> x_f2;
        DecodeCache decode;
        ClsCache cls;
        Shape4 input_shape;
    };

    // Seg mode: logits (N, classes, H/8, W/8). Cls mode: scores (N, classes, 1, 1).
    Tensor<R> forward(const Tensor<R>& x, FullCache* cache = nullptr) const {
        if (cache) cache->input_shape = x.shape();
        FeaturePyramid<R> pyr = tpem_forward(x, cache ? &cache->trunk : nullptr);
        if (cfg_.mode == HeadMode::none) return pyr.x_f;
        Tensor<R> x_f2 = bottleneck_forward(pyr.x_f, cache ? &cache->bottleneck : nullptr);
        Tensor<R> out;
        if (cfg_.mode == HeadMode::seg) {
            std::vector<Tensor<R>> fmm = fmm_forward(pyr, x_f2, cache ? &cache->decode : nullptr);
            out = seg_head_forward(fmm, cache ? &cache->decode : nullptr);
        } else {
            out = cls_head_forward(x_f2, cache ? &cache->cls : nullptr);
        }
        if (cache) {
            cache->pyr = std::move(pyr);
            cache->x_f2 = std::move(x_f2);
        }
        return out;
    }

    // Accumulates parameter gradients for d(loss)/d(output) = grad_out.
    // Returns d(loss)/d(input).
    Tensor<R> backward(const FullCache& cache, const Tensor<R>& grad_out, GradStore<R>& gs) const {
        Tensor<R> g_xf2;
        std::vector<Tensor<R>> g_taps(tap_channels_.size());
        if (cfg_.mode == HeadMode::seg) {
            g_xf2 = decode_backward(cache, grad_out, gs, g_taps);
        } else if (cfg_.mode == HeadMode::cls) {
            Tensor<R> g_pooled = head_cls_.backward(store_, cache.cls.c_cls, grad_out, gs);
            g_xf2 = ops::avg_pool_backward(g_pooled, cache.cls.in_shape);
        } else {
            g_xf2 = grad_out;  // "loss" on x_f directly
        }
        // Through the bottleneck blocks.
        Tensor<R> g = g_xf2;
        for (size_t i = blocks_.size(); i-- > 0;)
            g = blocks_[i].backward(store_, cache.bottleneck.c_blocks[i], g, gs);
        // Through pooled concat back to the taps.
        if (!tap_channels_.empty()) {
            std::vector<int64_t> sizes(tap_channels_.begin(), tap_channels_.end());
            std::vector<Tensor<R>> parts = ops::split_channels(g, sizes);
            for (size_t i = 0; i < parts.size(); ++i) {
                Tensor<R> gt = ops::avg_pool_backward(parts[i], cache.trunk.tap_shapes[i]);
                g_taps[i] = (g_taps[i].numel() > 0) ? ops::add(g_taps[i], gt) : std::move(gt);
            }
        }
        // Through the stages, threading tap gradients in.
        Tensor<R> gcur;
        for (size_t si = stages_.size(); si-- > 0;) {
            Tensor<R> stage_grad = g_taps[si];
            if (gcur.numel() > 0) stage_grad = ops::add(stage_grad, gcur);
            for (size_t bi = stages_[si].size(); bi-- > 0;)
                stage_grad = stages_[si][bi].backward(store_, cache.trunk.c_stages[si][bi], stage_grad, gs);
            gcur = std::move(stage_grad);
        }
        gcur = stem_irb_.backward(store_, cache.trunk.c_stem_irb, gcur, gs);
        return stem_conv_.backward(store_, cache.trunk.c_stem, gcur, gs);
    }

    // ---- static cost walk ------------------------------------------------

    std::vector<CostNode> describe(Shape4 in) const {
        std::vector<CostNode> nodes;
        auto push = [&nodes](std::string name, std::string kind, Shape4 out, int64_t params, int64_t macs,
                             int64_t minor) {
            nodes.push_back({std::move(name), std::move(kind), out, params, macs, minor});
        };
        Shape4 s = in;
        push("stem.conv", "conv", stem_conv_.out_shape(s), stem_conv_.param_count(), stem_conv_.macs(s),
             stem_conv_.minor(s));
        s = stem_conv_.out_shape(s);
        push("stem.irb", "inverted_residual", stem_irb_.out_shape(s), stem_irb_.param_count(),
             stem_irb_.macs(s), stem_irb_.minor(s));
        s = stem_irb_.out_shape(s);
        std::vector<Shape4> tap_shapes;
        for (size_t si = 0; si < stages_.size(); ++si) {
            for (size_t bi = 0; bi < stages_[si].size(); ++bi) {
                const auto& blk = stages_[si][bi];
                push("tpem.stage" + std::to_string(si + 1) + ".block" + std::to_string(bi),
                     "inverted_residual", blk.out_shape(s), blk.param_count(), blk.macs(s), blk.minor(s));
                s = blk.out_shape(s);
            }
            tap_shapes.push_back(s);
        }
        if (stages_.empty()) return nodes;
        const int64_t th = in.h / cfg_.pool_divisor, tw = in.w / cfg_.pool_divisor;
        Shape4 tok{in.n, 0, th, tw};
        int64_t pool_minor = 0;
        for (const Shape4& tsp : tap_shapes) {
            tok.c += tsp.c;
            pool_minor += tsp.numel();  // window sums
        }
        push("tpem.tokens", "pool_concat", tok, 0, 0, pool_minor + tok.numel());
        for (size_t i = 0; i < blocks_.size(); ++i) {
            const auto& blk = blocks_[i];
            const std::string base = "trans_bdc.block" + std::to_string(i);
            if (blk.bdc)
                push(base + ".bdc", "bdc", tok, blk.bdc->param_count(), blk.bdc->macs(tok),
                     blk.bdc->minor(tok));
            if (blk.attn)
                push(base + ".attn", "attention", tok, blk.attn->param_count(), blk.attn->macs(tok),
                     blk.attn->minor(tok));
            push(base + ".ffn", "ffn", tok, blk.ffn.param_count(), blk.ffn.macs(tok),
                 blk.ffn.minor(tok) + tok.numel());
        }
        if (cfg_.mode == HeadMode::seg) {
            const Shape4 gshape = fmm_gproj_.out_shape(tok);
            push("fmm.global_proj", "conv", gshape, fmm_gproj_.param_count(), fmm_gproj_.macs(tok),
                 fmm_gproj_.minor(tok));
            const std::array<const char*, 3> tag = {"s4", "s3", "s2"};
            Shape4 finest = gshape;
            for (size_t i = 0; i < fmm_scales_.size(); ++i) {
                const FmmScale& sc = fmm_scales_[i];
                const Shape4 lin = tap_shapes[static_cast<size_t>(sc.tap)];
                const Shape4 up{gshape.n, gshape.c, lin.h, lin.w};
                const int64_t macs = sc.local.macs(lin) + sc.gate.macs(up) + sc.add.macs(up);
                const int64_t minor = sc.local.minor(lin) + sc.gate.minor(up) + sc.add.minor(up) +
                                      up.numel() * 4;  // upsample, sigmoid, hadamard, add
                const Shape4 out = sc.local.out_shape(lin);
                push(std::string("fmm.") + tag[i], "fmm", out,
                     sc.local.param_count() + sc.gate.param_count() + sc.add.param_count(), macs, minor);
                finest = out;
            }
            // Progressive upsample-and-sum then the two head convs.
            Shape4 hs = finest;
            const int64_t sum_minor = hs.numel() * 2 * static_cast<int64_t>(fmm_scales_.size());
            push("head.fuse", "conv", head_fuse_.out_shape(hs), head_fuse_.param_count(),
                 head_fuse_.macs(hs), head_fuse_.minor(hs) + sum_minor);
            hs = head_fuse_.out_shape(hs);
            push("head.classifier", "conv", head_cls_.out_shape(hs), head_cls_.param_count(),
                 head_cls_.macs(hs), head_cls_.minor(hs));
        } else if (cfg_.mode == HeadMode::cls) {
            const Shape4 pooled{tok.n, tok.c, 1, 1};
            push("head.pool", "pool", pooled, 0, 0, tok.numel());
            push("head.linear", "linear", head_cls_.out_shape(pooled), head_cls_.param_count(),
                 head_cls_.macs(pooled), head_cls_.minor(pooled));
        }
        return nodes;
    }

    // Test hooks.
    const std::vector<layers::TransBdcBlock<R>>& blocks() const { return blocks_; }
    const std::vector<FmmScale>& fmm_scales() const { return fmm_scales_; }
    const layers::ConvBn<R>& fmm_gproj() const { return fmm_gproj_; }

private:
    Tensor<R> decode_backward(const FullCache& cache, const Tensor<R>& grad_out, GradStore<R>& gs,
                              std::vector<Tensor<R>>& g_taps) const {
        const DecodeCache& dc = cache.decode;
        Tensor<R> g_fused = head_cls_.backward(store_, dc.c_cls, grad_out, gs);
        Tensor<R> g_sum = head_fuse_.backward(store_, dc.c_fuse, g_fused, gs);
        // Undo the progressive upsample-and-sum, coarsest last.
        std::vector<Tensor<R>> g_fmm(dc.fmm_outputs.size());
        for (size_t i = dc.fmm_outputs.size(); i-- > 1;) {
            g_fmm[i] = g_sum;
            g_sum = ops::upsample_bilinear_backward(g_sum, dc.sums[i - 1].shape());
        }
        g_fmm[0] = g_sum;
        // Per-scale FMM backward; gradients w.r.t. the shared projection accumulate.
        Tensor<R> g_g = g_fmm[0];
        for (size_t i = 0; i < fmm_scales_.size(); ++i) {
            const FmmScale& sc = fmm_scales_[i];
            const auto& scc = dc.c_scales[i];
            const Tensor<R>& gy = g_fmm[i + 1];
            Tensor<R> g_local = ops::hadamard(gy, scc.gate_out);
            Tensor<R> g_gate = ops::hadamard(gy, scc.local_out);
            Tensor<R> g_local_in = sc.local.backward(store_, scc.c_local, g_local, gs);
            const int tapi = sc.tap;
            g_taps[static_cast<size_t>(tapi)] = (g_taps[static_cast<size_t>(tapi)].numel() > 0)
                                                    ? ops::add(g_taps[static_cast<size_t>(tapi)], g_local_in)
                                                    : std::move(g_local_in);
            Tensor<R> g_gate_logit = ops::sigmoid_backward(g_gate, scc.gate_out);
            Tensor<R> g_up = sc.gate.backward(store_, scc.c_gate, g_gate_logit, gs);
            g_up = ops::add(g_up, sc.add.backward(store_, scc.c_add, gy, gs));
            g_g = ops::add(g_g, ops::upsample_bilinear_backward(g_up, scc.g_shape));
        }
        return fmm_gproj_.backward(store_, dc.c_gproj, g_g, gs);
    }

    ModelConfig cfg_;
    ParamStore<R> store_;
    layers::ConvBn<R> stem_conv_;
    layers::InvertedResidual<R> stem_irb_;
    std::vector<std::vector<layers::InvertedResidual<R>>> stages_;
    std::vector<int> tap_channels_;
    std::vector<layers::TransBdcBlock<R>> blocks_;
    layers::ConvBn<R> fmm_gproj_;
    std::vector<FmmScale> fmm_scales_;
    layers::ConvBn<R> head_fuse_;
    layers::ConvBias<R> head_cls_;
};

}  // namespace cfkit

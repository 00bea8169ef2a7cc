#pragma once

#include <functional>
#include <set>

#include <json.hpp>

#include "cfkit/analysis.hpp"
#include "cfkit/gme.hpp"
#include "cfkit/model.hpp"
#include "cfkit/reference.hpp"

// Verification harness: finite-difference gradient oracle, naive-vs-optimized
// operator comparator, and the per-module invariant suites.
namespace cfkit::verify {

struct CheckResult {
    std::string name;
    bool pass = false;
    std::string detail;
};

class Harness {
public:
    void check(const std::string& name, bool pass, const std::string& detail = "") {
        results_.push_back({name, pass, detail});
    }

    bool all_pass() const {
        for (const auto& r : results_)
            if (!r.pass) return false;
        return true;
    }

    int failures() const {
        int n = 0;
        for (const auto& r : results_)
            if (!r.pass) ++n;
        return n;
    }

    const std::vector<CheckResult>& results() const { return results_; }

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json arr = nlohmann::ordered_json::array();
        for (const auto& r : results_)
            arr.push_back({{"name", r.name}, {"pass", r.pass}, {"detail", r.detail}});
        return arr;
    }

private:
    std::vector<CheckResult> results_;
};

inline double rel_err(double analytic, double numeric) {
    return std::abs(analytic - numeric) /
           std::max({std::abs(analytic), std::abs(numeric), 1e-8});
}

template <class R>
double max_abs_diff(const Tensor<R>& a, const Tensor<R>& b) {
    if (a.shape() != b.shape()) return std::numeric_limits<double>::infinity();
    double worst = 0.0;
    for (int64_t i = 0; i < a.numel(); ++i)
        worst = std::max(worst, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
    return worst;
}

// ---- gradient checking ----------------------------------------------------

struct GradCheckCase {
    std::string param_filter;  // substring match; empty selects everything
    double h = 1e-5;
    double tolerance = 1e-4;
    // Coordinates where analytic and numeric agree within this absolute bound
    // count as matching regardless of relative error. Dead-ReLU6 subpaths and
    // the softmax-shift-invariant K shift have true-zero gradients, where a
    // central difference returns pure roundoff (~1e-8 at loss scale 1e3) and a
    // purely relative comparison is meaningless.
    double atol = 1e-6;
    // Uniform parameter jitter applied before checking. The symmetric init
    // (BN beta = 0) parks dead-window activations exactly on the ReLU6 kink,
    // where two-sided differences are undefined; checking at a generic point
    // avoids that.
    double jitter = 0.02;
    int max_coords_per_tensor = 32;
    uint64_t seed = 42;
};

struct GradCheckReport {
    bool pass = false;
    double tolerance = 0.0;
    double worst_rel = 0.0;
    std::string worst_param;
    int64_t worst_coord = -1;
    double worst_analytic = 0.0, worst_numeric = 0.0;
    int params_checked = 0;
    int params_skipped = 0;
    int64_t coords_checked = 0;
    int64_t coords_within_atol = 0;
    int64_t kink_retries = 0;
    uint64_t seed = 0;

    nlohmann::ordered_json to_json() const {
        return {{"pass", pass},
                {"tolerance", tolerance},
                {"worst_rel", worst_rel},
                {"worst_param", worst_param},
                {"worst_coord", worst_coord},
                {"worst_analytic", worst_analytic},
                {"worst_numeric", worst_numeric},
                {"params_checked", params_checked},
                {"params_skipped", params_skipped},
                {"coords_checked", coords_checked},
                {"coords_within_atol", coords_within_atol},
                {"seed", seed}};
    }
};

// Core routine: compares precomputed analytic gradients against central
// differences of loss_fn, sampling <= max coords per tensor (seeded uniform
// plus always index 0).
inline GradCheckReport gradcheck_store(ParamStore<double>& store, const GradStore<double>& analytic,
                                       const std::function<double()>& loss_fn, const GradCheckCase& c) {
    GradCheckReport rep;
    rep.tolerance = c.tolerance;
    rep.seed = c.seed;
    Rng rng(c.seed);
    for (int pi = 0; pi < store.size(); ++pi) {
        auto& entry = store.entry(pi);
        if (!c.param_filter.empty() && entry.name.find(c.param_filter) == std::string::npos) {
            ++rep.params_skipped;
            continue;
        }
        ++rep.params_checked;
        const int64_t numel = entry.value.numel();
        std::set<int64_t> coords{0};
        while (static_cast<int>(coords.size()) < std::min<int64_t>(c.max_coords_per_tensor, numel))
            coords.insert(rng.uniform_int(0, numel - 1));
        for (const int64_t i : coords) {
            const double a = analytic[pi][i];
            ++rep.coords_checked;
            // A coordinate whose +/-h window straddles a ReLU6 kink sees large
            // truncation error at the default step; shrinking h moves the kink
            // outside the window, so retry before judging.
            bool within_atol = false;
            bool first_attempt = true;
            double err = 0.0, numeric = 0.0;
            for (const double h : {c.h, c.h / 10.0, c.h / 100.0}) {
                if (!first_attempt) ++rep.kink_retries;
                first_attempt = false;
                const double orig = entry.value[i];
                entry.value[i] = orig + h;
                const double lp = loss_fn();
                entry.value[i] = orig - h;
                const double lm = loss_fn();
                entry.value[i] = orig;
                if (!std::isfinite(lp) || !std::isfinite(lm))
                    throw NumericError("non-finite loss while perturbing " + entry.name);
                numeric = (lp - lm) / (2.0 * h);
                if (std::abs(a - numeric) <= c.atol) {
                    within_atol = true;
                    break;
                }
                err = rel_err(a, numeric);
                if (err < c.tolerance) break;
            }
            if (within_atol) {
                ++rep.coords_within_atol;
                continue;
            }
            if (err > rep.worst_rel) {
                rep.worst_rel = err;
                rep.worst_param = entry.name;
                rep.worst_coord = i;
                rep.worst_analytic = a;
                rep.worst_numeric = numeric;
            }
        }
    }
    rep.pass = rep.worst_rel < c.tolerance;
    return rep;
}

inline double sum_all(const Tensor<double>& t) {
    double s = 0.0;
    for (int64_t i = 0; i < t.numel(); ++i) s += t[i];
    return s;
}

// Gradcheck of a whole model with loss = sum of outputs, 64-bit end to end.
// Perturbs the model's parameters in place (jitter); use a dedicated instance.
inline GradCheckReport gradcheck_model(ContextFormer<double>& model, Shape4 input_shape,
                                       const GradCheckCase& c) {
    Rng rng(c.seed ^ 0x5eed);
    if (c.jitter > 0.0)
        for (int i = 0; i < model.params().size(); ++i) {
            Tensor<double>& v = model.params().value(i);
            for (int64_t j = 0; j < v.numel(); ++j) v[j] += rng.uniform(-c.jitter, c.jitter);
        }
    const Tensor<double> x = Tensor<double>::random_uniform(input_shape, rng, -1.0, 1.0);
    typename ContextFormer<double>::FullCache cache;
    const Tensor<double> out = model.forward(x, &cache);
    if (!std::isfinite(sum_all(out))) throw NumericError("non-finite loss at the gradcheck base point");
    GradStore<double> gs(model.params());
    model.backward(cache, Tensor<double>::full(out.shape(), 1.0), gs);
    auto loss = [&model, &x]() { return sum_all(model.forward(x)); };
    return gradcheck_store(model.params(), gs, loss, c);
}

// ---- oracle sweep -----------------------------------------------------------

struct OracleCase {
    std::string op;
    uint64_t seed = 42;
    int trials = 100;
    double tolerance = 1e-6;
};

struct OpReport {
    std::string op;
    int trials = 0;
    double worst = 0.0;
    uint64_t worst_seed = 0;
    std::string worst_shape;
    double tolerance = 0.0;
    bool pass = false;
};

struct SweepReport {
    std::vector<OpReport> ops;

    bool pass() const {
        for (const auto& o : ops)
            if (!o.pass) return false;
        return true;
    }

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json arr = nlohmann::ordered_json::array();
        for (const auto& o : ops)
            arr.push_back({{"op", o.op},
                           {"trials", o.trials},
                           {"worst", o.worst},
                           {"worst_seed", o.worst_seed},
                           {"worst_shape", o.worst_shape},
                           {"tolerance", o.tolerance},
                           {"pass", o.pass}});
        return arr;
    }
};

namespace detail {

template <class R>
Tensor<R> rand_tensor(Rng& rng, Shape4 s, double lo = -2.0, double hi = 2.0) {
    return Tensor<R>::random_uniform(s, rng, lo, hi);
}

// One seeded random trial of one operator; returns max abs diff and the shape.
template <class R>
std::pair<double, std::string> oracle_trial(const std::string& op, uint64_t seed) {
    Rng rng(seed);
    const int64_t n = rng.uniform_int(1, 2);
    if (op == "conv2d_dense" || op == "conv2d_depthwise" || op == "conv2d_pointwise") {
        const int k = op == "conv2d_pointwise" ? 1 : (rng.uniform_int(0, 1) ? 3 : 5);
        const int stride = static_cast<int>(rng.uniform_int(1, 2));
        const int pad = op == "conv2d_pointwise" ? 0 : static_cast<int>(rng.uniform_int(0, k / 2));
        const int cin = static_cast<int>(rng.uniform_int(1, 8));
        const int cout = op == "conv2d_depthwise" ? cin : static_cast<int>(rng.uniform_int(1, 8));
        const int h = k + static_cast<int>(rng.uniform_int(0, 12));
        const int w = k + static_cast<int>(rng.uniform_int(0, 12));
        ConvSpec spec;
        spec.kind = op == "conv2d_dense" ? ConvKind::dense
                    : op == "conv2d_depthwise" ? ConvKind::depthwise
                                               : ConvKind::pointwise;
        spec.kernel_h = spec.kernel_w = k;
        spec.stride = stride;
        spec.pad = pad;
        spec.in_channels = cin;
        spec.out_channels = cout;
        spec.validate();
        const Tensor<R> x = rand_tensor<R>(rng, {n, cin, h, w});
        const Tensor<R> wgt = rand_tensor<R>(rng, spec.weight_shape());
        return {max_abs_diff(ops::conv2d(x, wgt, spec), reference::conv2d(x, wgt, spec)), x.shape().str()};
    }
    if (op == "batchnorm") {
        const int c = static_cast<int>(rng.uniform_int(1, 12));
        const Tensor<R> x = rand_tensor<R>(rng, {n, c, rng.uniform_int(1, 9), rng.uniform_int(1, 9)});
        BatchNormParams<R> p = BatchNormParams<R>::identity(c);
        for (int i = 0; i < c; ++i) {
            p.gamma[static_cast<size_t>(i)] = static_cast<R>(rng.uniform(-2, 2));
            p.beta[static_cast<size_t>(i)] = static_cast<R>(rng.uniform(-2, 2));
            p.mean[static_cast<size_t>(i)] = static_cast<R>(rng.uniform(-2, 2));
            p.var[static_cast<size_t>(i)] = static_cast<R>(rng.uniform(0.01, 3.0));
        }
        return {max_abs_diff(ops::batchnorm_infer(x, p), reference::batchnorm_infer(x, p)),
                x.shape().str()};
    }
    if (op == "relu6" || op == "sigmoid") {
        const Tensor<R> x =
            rand_tensor<R>(rng, {n, rng.uniform_int(1, 6), rng.uniform_int(1, 9), rng.uniform_int(1, 9)},
                           -8.0, 8.0);
        if (op == "relu6") return {max_abs_diff(ops::relu6(x), reference::relu6(x)), x.shape().str()};
        return {max_abs_diff(ops::sigmoid(x), reference::sigmoid(x)), x.shape().str()};
    }
    if (op == "softmax") {
        const Tensor<R> x =
            rand_tensor<R>(rng, {n, rng.uniform_int(1, 4), rng.uniform_int(1, 8), rng.uniform_int(1, 24)},
                           -6.0, 6.0);
        return {max_abs_diff(ops::softmax_rows(x), reference::softmax_rows(x)), x.shape().str()};
    }
    if (op == "avg_pool" || op == "global_avg_pool") {
        const int oh = static_cast<int>(rng.uniform_int(1, 4)), ow = static_cast<int>(rng.uniform_int(1, 4));
        const int h = oh * static_cast<int>(rng.uniform_int(1, 4));
        const int w = ow * static_cast<int>(rng.uniform_int(1, 4));
        const Tensor<R> x = rand_tensor<R>(rng, {n, rng.uniform_int(1, 6), h, w});
        if (op == "avg_pool")
            return {max_abs_diff(ops::avg_pool(x, oh, ow), reference::avg_pool(x, oh, ow)),
                    x.shape().str()};
        return {max_abs_diff(ops::global_avg_pool(x), reference::global_avg_pool(x)), x.shape().str()};
    }
    if (op == "upsample_bilinear") {
        const int h = static_cast<int>(rng.uniform_int(1, 8)), w = static_cast<int>(rng.uniform_int(1, 8));
        const int oh = h + static_cast<int>(rng.uniform_int(0, 9));
        const int ow = w + static_cast<int>(rng.uniform_int(0, 9));
        const Tensor<R> x = rand_tensor<R>(rng, {n, rng.uniform_int(1, 6), h, w});
        return {max_abs_diff(ops::upsample_bilinear(x, oh, ow), reference::upsample_bilinear(x, oh, ow)),
                x.shape().str()};
    }
    if (op == "matmul") {
        const int64_t c = rng.uniform_int(1, 3);
        const int64_t m = rng.uniform_int(1, 12), k = rng.uniform_int(1, 12), p = rng.uniform_int(1, 12);
        const Tensor<R> a = rand_tensor<R>(rng, {n, c, m, k});
        const Tensor<R> b = rand_tensor<R>(rng, {n, c, k, p});
        return {max_abs_diff(ops::matmul(a, b), reference::matmul(a, b)), a.shape().str()};
    }
    if (op == "concat") {
        const int64_t h = rng.uniform_int(1, 8), w = rng.uniform_int(1, 8);
        const int parts = static_cast<int>(rng.uniform_int(2, 4));
        std::vector<Tensor<R>> ts;
        std::vector<const Tensor<R>*> ptrs;
        for (int i = 0; i < parts; ++i) ts.push_back(rand_tensor<R>(rng, {n, rng.uniform_int(1, 6), h, w}));
        for (const auto& t : ts) ptrs.push_back(&t);
        return {max_abs_diff(ops::concat_channels(ptrs), reference::concat_channels(ptrs)),
                ts[0].shape().str()};
    }
    if (op == "add" || op == "hadamard") {
        const Shape4 s{n, rng.uniform_int(1, 6), rng.uniform_int(1, 9), rng.uniform_int(1, 9)};
        const Tensor<R> a = rand_tensor<R>(rng, s), b = rand_tensor<R>(rng, s);
        if (op == "add") return {max_abs_diff(ops::add(a, b), reference::add(a, b)), s.str()};
        return {max_abs_diff(ops::hadamard(a, b), reference::hadamard(a, b)), s.str()};
    }
    throw UsageError("unknown operator id: " + op);
}

}  // namespace detail

inline std::vector<std::string> all_operator_ids() {
    return {"conv2d_dense", "conv2d_depthwise", "conv2d_pointwise", "batchnorm", "relu6", "sigmoid",
            "softmax", "avg_pool", "global_avg_pool", "upsample_bilinear", "matmul", "concat", "add",
            "hadamard"};
}

template <class R>
OpReport run_oracle_case(const OracleCase& c) {
    if (c.trials < 1) throw ConfigError("oracle case needs trials >= 1");
    OpReport rep;
    rep.op = c.op;
    rep.trials = c.trials;
    rep.tolerance = c.tolerance;
    for (int t = 0; t < c.trials; ++t) {
        const uint64_t seed = c.seed + static_cast<uint64_t>(t) * 1000003ull;
        const auto [diff, shape] = detail::oracle_trial<R>(c.op, seed);
        if (diff > rep.worst) {
            rep.worst = diff;
            rep.worst_seed = seed;
            rep.worst_shape = shape;
        }
    }
    rep.pass = rep.worst < c.tolerance;
    return rep;
}

template <class R>
SweepReport oracle_sweep(const std::vector<OracleCase>& cases) {
    SweepReport rep;
    for (const auto& c : cases) rep.ops.push_back(run_oracle_case<R>(c));
    return rep;
}

template <class R>
SweepReport oracle_sweep_default(uint64_t seed, int trials, double tolerance) {
    std::vector<OracleCase> cases;
    for (const std::string& op : all_operator_ids()) cases.push_back({op, seed, trials, tolerance});
    return oracle_sweep<R>(cases);
}

// Tester self-test: a conv with a deliberate kernel-indexing bug must trip
// the comparator.
template <class R>
OpReport mutation_canary(uint64_t seed, int trials) {
    OpReport rep;
    rep.op = "conv2d_dense[mutated]";
    rep.trials = trials;
    rep.tolerance = 1e-6;
    for (int t = 0; t < trials; ++t) {
        Rng rng(seed + static_cast<uint64_t>(t));
        ConvSpec spec = ConvSpec::make_dense(static_cast<int>(rng.uniform_int(1, 4)),
                                             static_cast<int>(rng.uniform_int(1, 4)), 3, 1, 1);
        const Tensor<R> x = detail::rand_tensor<R>(rng, {1, spec.in_channels, 6, 6});
        const Tensor<R> w = detail::rand_tensor<R>(rng, spec.weight_shape());
        // Shift every kernel column read by one (clamped): a classic off-by-one.
        const Shape4 os = spec.out_shape(x.shape());
        Tensor<R> bad(os);
        for (int64_t oc = 0; oc < os.c; ++oc)
            for (int64_t oh = 0; oh < os.h; ++oh)
                for (int64_t ow = 0; ow < os.w; ++ow) {
                    R acc = 0;
                    for (int64_t ic = 0; ic < x.shape().c; ++ic)
                        for (int64_t kh = 0; kh < 3; ++kh)
                            for (int64_t kw = 0; kw < 3; ++kw) {
                                const int64_t ih = oh - 1 + kh;
                                const int64_t iw = ow - 1 + std::min<int64_t>(kw + 1, 2);
                                if (ih < 0 || ih >= x.shape().h || iw < 0 || iw >= x.shape().w) continue;
                                acc += x.at(0, ic, ih, iw) * w.at(oc, ic, kh, kw);
                            }
                    bad.at(0, oc, oh, ow) = acc;
                }
        const double diff = max_abs_diff(bad, reference::conv2d(x, w, spec));
        rep.worst = std::max(rep.worst, diff);
    }
    rep.pass = rep.worst < rep.tolerance;  // expected to FAIL
    return rep;
}

// ---- invariant suites -------------------------------------------------------

namespace suites {

// finite-difference slope of loss() w.r.t. one mutable coordinate
inline double fd_slope(const std::function<double()>& loss, double& coord, double h = 1e-5) {
    const double orig = coord;
    coord = orig + h;
    const double lp = loss();
    coord = orig - h;
    const double lm = loss();
    coord = orig;
    return (lp - lm) / (2.0 * h);
}

// Weighted-sum loss makes per-operator gradient checks sensitive to every
// output coordinate.
inline double dot_loss(const Tensor<double>& y, const Tensor<double>& w) {
    double s = 0.0;
    for (int64_t i = 0; i < y.numel(); ++i) s += y[i] * w[i];
    return s;
}

inline void tensor_suite(Harness& h, uint64_t seed) {
    // Optimized vs naive reference on seeded random instances.
    {
        const SweepReport s32 = oracle_sweep_default<float>(seed, 100, 1e-6);
        for (const auto& o : s32.ops)
            h.check("tensor.oracle32." + o.op, o.pass,
                    "worst " + std::to_string(o.worst) + " over " + std::to_string(o.trials) + " trials");
        const SweepReport s64 = oracle_sweep_default<double>(seed + 1, 40, 1e-12);
        for (const auto& o : s64.ops)
            h.check("tensor.oracle64." + o.op, o.pass, "worst " + std::to_string(o.worst));
    }
    // Analytic backward vs central differences (64-bit, h=1e-5) per operator.
    {
        Rng rng(seed + 2);
        auto fd_vs = [&h](const std::string& name, double worst) {
            h.check("tensor.grad." + name, worst < 1e-6, "worst rel " + std::to_string(worst));
        };
        for (ConvKind kind : {ConvKind::dense, ConvKind::depthwise, ConvKind::pointwise}) {
            ConvSpec spec;
            spec.kind = kind;
            const int k = kind == ConvKind::pointwise ? 1 : 3;
            spec.kernel_h = spec.kernel_w = k;
            spec.stride = 1;
            spec.pad = k / 2;
            spec.in_channels = 2;
            spec.out_channels = kind == ConvKind::depthwise ? 2 : 3;
            Tensor<double> x = detail::rand_tensor<double>(rng, {1, 2, 5, 5});
            Tensor<double> w = detail::rand_tensor<double>(rng, spec.weight_shape());
            const Tensor<double> gw_loss =
                detail::rand_tensor<double>(rng, spec.out_shape(x.shape()));
            auto loss = [&]() { return dot_loss(ops::conv2d(x, w, spec), gw_loss); };
            auto [gx, gw] = ops::conv2d_backward(gw_loss, x, w, spec);
            double worst = 0.0;
            for (int rep = 0; rep < 6; ++rep) {
                int64_t i = Rng(seed + rep).uniform_int(0, x.numel() - 1);
                worst = std::max(worst, rel_err(gx[i], fd_slope(loss, x[i])));
                int64_t j = Rng(seed + 16 + rep).uniform_int(0, w.numel() - 1);
                worst = std::max(worst, rel_err(gw[j], fd_slope(loss, w[j])));
            }
            fd_vs(std::string("conv2d_") + conv_kind_name(kind), worst);
        }
        {
            Tensor<double> x = detail::rand_tensor<double>(rng, {1, 3, 4, 4});
            BatchNormParams<double> p = BatchNormParams<double>::identity(3);
            for (int i = 0; i < 3; ++i) {
                p.gamma[static_cast<size_t>(i)] = rng.uniform(0.5, 2.0);
                p.beta[static_cast<size_t>(i)] = rng.uniform(-1, 1);
                p.mean[static_cast<size_t>(i)] = rng.uniform(-1, 1);
                p.var[static_cast<size_t>(i)] = rng.uniform(0.2, 2.0);
            }
            const Tensor<double> gl = detail::rand_tensor<double>(rng, x.shape());
            auto loss = [&]() { return dot_loss(ops::batchnorm_infer(x, p), gl); };
            auto [gx, ggamma, gbeta] = ops::batchnorm_backward(gl, x, p);
            double worst = 0.0;
            for (int64_t i = 0; i < 8; ++i) {
                const int64_t j = Rng(seed + 32 + i).uniform_int(0, x.numel() - 1);
                worst = std::max(worst, rel_err(gx[j], fd_slope(loss, x[j])));
            }
            worst = std::max(worst, rel_err(ggamma[0], fd_slope(loss, p.gamma[0])));
            worst = std::max(worst, rel_err(gbeta[2], fd_slope(loss, p.beta[2])));
            fd_vs("batchnorm", worst);
        }
        {
            Tensor<double> x = detail::rand_tensor<double>(rng, {1, 2, 4, 4}, -5.0, 5.0);
            const Tensor<double> gl = detail::rand_tensor<double>(rng, x.shape());
            auto loss_r = [&]() { return dot_loss(ops::relu6(x), gl); };
            const Tensor<double> grx = ops::relu6_backward(gl, x);
            double worst = 0.0;
            for (int64_t i = 0; i < x.numel(); i += 5)
                worst = std::max(worst, rel_err(grx[i], fd_slope(loss_r, x[i])));
            fd_vs("relu6", worst);
            auto y = ops::sigmoid(x);
            auto loss_s = [&]() { return dot_loss(ops::sigmoid(x), gl); };
            const Tensor<double> gsx = ops::sigmoid_backward(gl, y);
            worst = 0.0;
            for (int64_t i = 0; i < x.numel(); i += 5)
                worst = std::max(worst, rel_err(gsx[i], fd_slope(loss_s, x[i])));
            fd_vs("sigmoid", worst);
        }
        {
            Tensor<double> x = detail::rand_tensor<double>(rng, {1, 2, 3, 7}, -4.0, 4.0);
            const Tensor<double> gl = detail::rand_tensor<double>(rng, x.shape());
            auto loss = [&]() { return dot_loss(ops::softmax_rows(x), gl); };
            const Tensor<double> y = ops::softmax_rows(x);
            const Tensor<double> gx = ops::softmax_rows_backward(gl, y);
            double worst = 0.0;
            for (int64_t i = 0; i < x.numel(); i += 4)
                worst = std::max(worst, rel_err(gx[i], fd_slope(loss, x[i])));
            fd_vs("softmax_rows", worst);
        }
        {
            Tensor<double> x = detail::rand_tensor<double>(rng, {1, 2, 6, 6});
            Tensor<double> gl = detail::rand_tensor<double>(rng, {1, 2, 3, 3});
            auto loss = [&]() { return dot_loss(ops::avg_pool(x, 3, 3), gl); };
            const Tensor<double> gx = ops::avg_pool_backward(gl, x.shape());
            double worst = 0.0;
            for (int64_t i = 0; i < x.numel(); i += 7)
                worst = std::max(worst, rel_err(gx[i], fd_slope(loss, x[i])));
            fd_vs("avg_pool", worst);
        }
        {
            Tensor<double> x = detail::rand_tensor<double>(rng, {1, 2, 3, 3});
            Tensor<double> gl = detail::rand_tensor<double>(rng, {1, 2, 7, 8});
            auto loss = [&]() { return dot_loss(ops::upsample_bilinear(x, 7, 8), gl); };
            const Tensor<double> gx = ops::upsample_bilinear_backward(gl, x.shape());
            double worst = 0.0;
            for (int64_t i = 0; i < x.numel(); ++i)
                worst = std::max(worst, rel_err(gx[i], fd_slope(loss, x[i])));
            fd_vs("upsample_bilinear", worst);
        }
        {
            Tensor<double> a = detail::rand_tensor<double>(rng, {1, 2, 3, 4});
            Tensor<double> b = detail::rand_tensor<double>(rng, {1, 2, 4, 5});
            Tensor<double> gl = detail::rand_tensor<double>(rng, {1, 2, 3, 5});
            auto loss = [&]() { return dot_loss(ops::matmul(a, b), gl); };
            auto [ga, gb] = ops::matmul_backward(gl, a, b);
            double worst = 0.0;
            for (int64_t i = 0; i < a.numel(); i += 3)
                worst = std::max(worst, rel_err(ga[i], fd_slope(loss, a[i])));
            for (int64_t i = 0; i < b.numel(); i += 3)
                worst = std::max(worst, rel_err(gb[i], fd_slope(loss, b[i])));
            fd_vs("matmul", worst);
        }
    }
    // Determinism across configured parallelism.
    {
        Rng rng(seed + 3);
        const ConvSpec spec = ConvSpec::make_dense(7, 9, 3, 1, 1);
        const Tensor<float> x = detail::rand_tensor<float>(rng, {2, 7, 19, 17});
        const Tensor<float> w = detail::rand_tensor<float>(rng, spec.weight_shape());
        const int prev = thread_count();
        set_thread_count(1);
        const Tensor<float> y1 = ops::conv2d(x, w, spec);
        set_thread_count(3);
        const Tensor<float> y3 = ops::conv2d(x, w, spec);
        set_thread_count(prev);
        h.check("tensor.determinism.threads", max_abs_diff(y1, y3) == 0.0,
                "1-thread vs 3-thread bitwise equality");
    }
    // Range and normalization properties.
    {
        Rng rng(seed + 4);
        const Tensor<float> x = detail::rand_tensor<float>(rng, {2, 3, 8, 8}, -20.0, 20.0);
        const Tensor<float> r = ops::relu6(x);
        bool in_range = true;
        for (int64_t i = 0; i < r.numel(); ++i) in_range &= (r[i] >= 0.0f && r[i] <= 6.0f);
        h.check("tensor.relu6.range", in_range, "outputs in [0,6]");
        const Tensor<float> sg = ops::sigmoid(x);
        bool open01 = true;
        for (int64_t i = 0; i < sg.numel(); ++i) open01 &= (sg[i] > 0.0f && sg[i] < 1.0f);
        h.check("tensor.sigmoid.range", open01, "outputs in (0,1)");
        const Tensor<float> sm = ops::softmax_rows(detail::rand_tensor<float>(rng, {2, 2, 5, 64}, -9, 9));
        double worst = 0.0;
        for (int64_t rrow = 0; rrow < sm.numel() / 64; ++rrow) {
            double s = 0.0;
            for (int64_t j = 0; j < 64; ++j) s += sm[rrow * 64 + j];
            worst = std::max(worst, std::abs(s - 1.0));
        }
        h.check("tensor.softmax.rowsum", worst < 1e-6, "worst |sum-1| " + std::to_string(worst));
    }
    // Conv output shape follows the floor formula across the Table B schedule.
    {
        bool ok = true;
        const int hw = 256;
        for (const auto& [k, stride] : std::vector<std::pair<int, int>>{{3, 2}, {3, 1}, {5, 2}, {5, 1}}) {
            const ConvSpec spec = ConvSpec::make_dense(3, 3, k, stride, k / 2);
            const Shape4 out = spec.out_shape({1, 3, hw, hw});
            const int expect = (hw + 2 * (k / 2) - k) / stride + 1;
            ok &= out.h == expect && out.w == expect;
        }
        h.check("tensor.conv.shape_formula", ok, "floor((H+2p-k)/s)+1 over the schedule kernels");
    }
}

inline void gme_suite(Harness& h, uint64_t seed) {
    Rng rng(seed);
    // Random test image.
    ImageU8 img;
    img.width = 24;
    img.height = 18;
    img.data.resize(static_cast<size_t>(img.width * img.height * 3));
    for (auto& b : img.data) b = static_cast<uint8_t>(rng.uniform_int(0, 255));

    const Tensor<float> gray = gme::grayscale(img);
    const Tensor<float> mag = gme::sobel_magnitude(gray);

    // Translation equivariance on interior pixels.
    {
        ImageU8 shifted = img;
        for (int y = 0; y < img.height; ++y)
            for (int x = 0; x < img.width; ++x)
                for (int c = 0; c < 3; ++c) {
                    const int sx = std::max(0, x - 1);
                    shifted.data[static_cast<size_t>((y * img.width + x) * 3 + c)] = img.at(y, sx, c);
                }
        const Tensor<float> mag_s = gme::sobel_magnitude(gme::grayscale(shifted));
        double worst = 0.0;
        for (int y = 2; y < img.height - 2; ++y)
            for (int x = 3; x < img.width - 2; ++x)
                worst = std::max(worst,
                                 static_cast<double>(std::abs(mag_s.at(0, 0, y, x) - mag.at(0, 0, y, x - 1))));
        h.check("gme.sobel.translation_equivariance", worst < 1e-6, "worst interior diff " + std::to_string(worst));
    }
    // Invariance to adding a constant.
    {
        Tensor<float> lifted = gray;
        for (int64_t i = 0; i < lifted.numel(); ++i) lifted[i] += 0.173f;
        const Tensor<float> mag_l = gme::sobel_magnitude(lifted);
        h.check("gme.sobel.constant_invariance", max_abs_diff(mag_l, mag) < 1e-5,
                "magnitude unchanged by +c");
    }
    // Edge map is exactly {0,1}-valued.
    {
        const Tensor<float> edge = gme::edge_map(mag);
        bool binary = true;
        for (int64_t i = 0; i < edge.numel(); ++i) binary &= (edge[i] == 0.0f || edge[i] == 1.0f);
        h.check("gme.edge.binary", binary, "edge values in {0,1}");
    }
    // 3-channel stack bypasses the GME path and equals plain RGB normalization.
    {
        const gme::GmeStack s3 = gme::build_gme_stack(img, 3);
        Tensor<float> manual({1, 3, img.height, img.width});
        for (int y = 0; y < img.height; ++y)
            for (int x = 0; x < img.width; ++x)
                for (int c = 0; c < 3; ++c)
                    manual.at(0, c, y, x) =
                        (img.at(y, x, c) / 255.0f - gme::kMean[c]) / gme::kStd[c];
        h.check("gme.stack.bypass", max_abs_diff(s3.tensor, manual) == 0.0,
                "3-channel stack identical to RGB normalization");
    }
}

// Zeroes every parameter whose name contains any of the needles.
template <class R>
void zero_params(ContextFormer<R>& m, const std::vector<std::string>& needles) {
    for (int i = 0; i < m.params().size(); ++i) {
        const std::string& name = m.params().entry(i).name;
        for (const auto& nd : needles)
            if (name.find(nd) != std::string::npos) {
                Tensor<R>& v = m.params().value(i);
                std::fill(v.vec().begin(), v.vec().end(), R(0));
                break;
            }
    }
}

inline void blocks_suite(Harness& h, uint64_t seed) {
    // Residual identity: zeroed attention output projection.
    {
        ModelConfig cfg = ModelConfig::micro();
        ContextFormer<float> m(cfg, seed);
        zero_params(m, {".attn.proj"});
        Rng rng(seed + 9);
        const Tensor<float> x = detail::rand_tensor<float>(rng, {1, 208, 2, 2});
        const auto& attn = *m.blocks()[0].attn;
        const Tensor<float> y = attn.forward(m.params(), x, nullptr);
        h.check("blocks.attn.residual_identity", max_abs_diff(y, x) == 0.0,
                "zero proj weights give X_ViT == x_f exactly");
    }
    // Residual neutrality: zeroed BDC convs and channel-attention FCs gate at 0.5.
    {
        ModelConfig cfg = ModelConfig::micro();
        ContextFormer<float> m(cfg, seed + 1);
        zero_params(m, {".bdc."});
        Rng rng(seed + 10);
        const Tensor<float> x = detail::rand_tensor<float>(rng, {1, 208, 2, 2});
        const auto& bdc = *m.blocks()[0].bdc;
        const Tensor<float> y = bdc.forward(m.params(), x, nullptr);
        const Tensor<float> half = ops::scale(x, 0.5f);
        h.check("blocks.bdc.residual_neutrality", max_abs_diff(y, half) < 1e-7,
                "zero weights give 0.5*x_f");
    }
    // Shape schedule, static walk: pyramid exactly /4 /8 /16 /32 and bottleneck
    // (k, m) for 64k x 64m inputs, k,m in 1..8.
    {
        ModelConfig cfg = ModelConfig::paper_seg();
        bool ok = true;
        std::string bad;
        for (int k = 1; k <= 8 && ok; ++k)
            for (int mm = 1; mm <= 8 && ok; ++mm) {
                cfg.input_h = 64 * k;
                cfg.input_w = 64 * mm;
                ContextFormer<float> m(cfg, 1);
                Shape4 tok{};
                std::array<Shape4, 4> taps{};
                for (const CostNode& n : m.describe({1, 5, cfg.input_h, cfg.input_w})) {
                    if (n.name == "tpem.stage1.block1") taps[0] = n.out_shape;
                    if (n.name == "tpem.stage2.block1") taps[1] = n.out_shape;
                    if (n.name == "tpem.stage3.block1") taps[2] = n.out_shape;
                    if (n.name == "tpem.stage4.block1") taps[3] = n.out_shape;
                    if (n.name == "tpem.tokens") tok = n.out_shape;
                }
                for (int i = 0; i < 4; ++i) {
                    const int div = 4 << i;
                    if (taps[static_cast<size_t>(i)].h != cfg.input_h / div ||
                        taps[static_cast<size_t>(i)].w != cfg.input_w / div)
                        ok = false, bad = "tap " + std::to_string(i + 1) + " at input " +
                                          std::to_string(cfg.input_h) + "x" + std::to_string(cfg.input_w);
                }
                if (tok.h != k || tok.w != mm || tok.c != 208)
                    ok = false, bad = "tokens at input " + std::to_string(cfg.input_h);
            }
        h.check("blocks.shape.schedule_static", ok, bad.empty() ? "all 64 (k,m) grids" : bad);
    }
    // Dynamic agreement for a couple of small inputs, plus channel bookkeeping.
    {
        ModelConfig cfg = ModelConfig::paper_seg();
        cfg.input_h = 64;
        cfg.input_w = 128;
        ContextFormer<float> m(cfg, seed + 2);
        Rng rng(seed + 2);
        const Tensor<float> x = detail::rand_tensor<float>(rng, {1, 5, 64, 128}, -0.5, 0.5);
        const FeaturePyramid<float> pyr = m.tpem_forward(x);
        bool ok = pyr.taps.size() == 4;
        for (int i = 0; ok && i < 4; ++i) {
            const int div = 4 << i;
            ok &= pyr.taps[static_cast<size_t>(i)].shape().h == 64 / div &&
                  pyr.taps[static_cast<size_t>(i)].shape().w == 128 / div;
        }
        ok &= pyr.x_f.shape() == Shape4{1, 208, 1, 2};
        h.check("blocks.shape.schedule_dynamic", ok, "64x128 forward matches the static walk");
        int sum = 0;
        for (const auto& t : pyr.taps) sum += static_cast<int>(t.shape().c);
        h.check("blocks.channels.concat", pyr.x_f.shape().c == sum && sum == 208,
                "x_f channels equal the sum of tap channels");
    }
    // Parameter-count additivity and Table 3 increment ordering.
    {
        auto count = [&](bool dw3, bool dw1, bool sep, bool ca) {
            ModelConfig cfg = ModelConfig::paper_seg();
            cfg.trans_bdc.use_dw3 = dw3;
            cfg.trans_bdc.use_dw1 = dw1;
            cfg.trans_bdc.use_dwsep = sep;
            cfg.trans_bdc.use_channel_attn = ca;
            ContextFormer<float> m(cfg, 1);
            int64_t node_sum = 0;
            for (const CostNode& n : m.describe({1, 5, 512, 512})) node_sum += n.params;
            const int64_t store = m.params().total_elements();
            if (node_sum != store) return int64_t{-1};
            return store;
        };
        const int64_t base = count(false, false, false, false);
        const int64_t with_dw3 = count(true, false, false, false);
        const int64_t with_dw1 = count(true, true, false, false);
        const int64_t with_sep = count(true, true, true, false);
        const int64_t with_ca = count(true, true, true, true);
        const bool additive = base > 0 && with_dw3 > 0 && with_dw1 > 0 && with_sep > 0 && with_ca > 0;
        h.check("blocks.params.additivity", additive, "node sums equal ParamStore totals");
        h.check("blocks.params.monotone", base < with_dw3 && with_dw3 < with_dw1 && with_dw1 < with_sep &&
                                              with_sep < with_ca,
                "each enabled component strictly increases the count");
        const int64_t inc_dw3 = with_dw3 - base, inc_dw1 = with_dw1 - with_dw3;
        const int64_t inc_sep = with_sep - with_dw1, inc_ca = with_ca - with_sep;
        h.check("blocks.params.dwsep_largest_increment",
                inc_sep > inc_dw3 && inc_sep > inc_dw1 && inc_sep > inc_ca,
                "dw-separable branch is the largest single BDC increment (~0.18M)");
    }
    // GME on/off: identical parameter names, only the stem input width changes.
    {
        ContextFormer<float> on(ModelConfig::paper_seg(512, true), 1);
        ContextFormer<float> off(ModelConfig::paper_seg(512, false), 1);
        bool ok = on.params().size() == off.params().size();
        int64_t diff = 0;
        for (int i = 0; ok && i < on.params().size(); ++i) {
            const auto& a = on.params().entry(i);
            const auto& b = off.params().entry(i);
            ok &= a.name == b.name;
            if (a.name != "stem.conv.weight")
                ok &= a.value.shape() == b.value.shape();
            else
                diff = a.value.numel() - b.value.numel();
            }
        h.check("blocks.gme.downstream_invariance", ok && diff == 2LL * 3 * 3 * 16,
                "names identical; only stem.conv.weight grows by 2*k*k*16");
    }
    // Neutral composition: zero conv/FC weights reduce one block to 1.5*x_f.
    {
        ModelConfig cfg = ModelConfig::micro();
        ContextFormer<float> m(cfg, seed + 3);
        zero_params(m, {"trans_bdc."});
        Rng rng(seed + 3);
        const Tensor<float> x = detail::rand_tensor<float>(rng, {1, 208, 2, 2});
        const Tensor<float> y = m.blocks()[0].forward(m.params(), x, nullptr);
        const Tensor<float> expect = ops::scale(x, 1.5f);
        h.check("blocks.block.neutral_composition", max_abs_diff(y, expect) < 1e-6,
                "0.5x (gated BDC) + x (attention residual), FFN adds zero");
    }
    // Isolated gradient checks per block type on the micro model (few coords).
    {
        for (const char* filter : {".attn.", ".bdc.", ".ffn.", "fmm."}) {
            ContextFormer<double> m(ModelConfig::micro(), seed + 4);
            GradCheckCase c;
            c.param_filter = filter;
            c.max_coords_per_tensor = 6;
            c.seed = seed + 5;
            const GradCheckReport rep = gradcheck_model(m, {1, 5, 64, 64}, c);
            h.check(std::string("blocks.gradcheck") + filter, rep.pass,
                    "worst rel " + std::to_string(rep.worst_rel) + " at " + rep.worst_param);
        }
    }
}

inline void analysis_suite(Harness& h, uint64_t seed) {
    // Additivity of rollups, exact.
    {
        ContextFormer<float> m(ModelConfig::paper_seg(), seed);
        const analysis::CostReport rep = analysis::cost_report(m, {1, 5, 512, 512});
        analysis::ModuleTotals sum;
        for (const auto& [k, v] : rep.rollups) {
            sum.params += v.params;
            sum.macs += v.macs;
            sum.act_bytes += v.act_bytes;
            sum.minor_ops += v.minor_ops;
        }
        h.check("analysis.rollup.additivity",
                sum.params == rep.totals.params && sum.macs == rep.totals.macs &&
                    sum.act_bytes == rep.totals.act_bytes && sum.minor_ops == rep.totals.minor_ops,
                "rollups sum to totals for params, macs, act_bytes, minor_ops");
        h.check("analysis.rollup.five_modules", rep.rollups.size() == 5,
                "paper config has exactly stem, tpem, trans_bdc, fmm, heads");
    }
    // Static count equals the number of elements serialized in the weight file.
    {
        ContextFormer<float> m(ModelConfig::micro(), seed + 1);
        const std::string blob = weights::serialize(m.params());
        int64_t header = 8;  // magic + count
        for (const auto& e : m.params().entries())
            header += 2 + static_cast<int64_t>(e.name.size()) + 1 + 1 + 4 * 8;
        const int64_t payload_bytes = static_cast<int64_t>(blob.size()) - header;
        h.check("analysis.static_dynamic_agreement",
                payload_bytes == 4 * analysis::count_params(m),
                "count_params equals serialized payload element count");
    }
    // Monotonicity: enabling any Table 3 component never decreases params or MACs.
    {
        auto cost = [&](bool vit, bool dw3, bool dw1, bool sep, bool ca) {
            ModelConfig cfg = ModelConfig::paper_seg();
            cfg.trans_bdc.use_attention = vit;
            cfg.trans_bdc.use_dw3 = dw3;
            cfg.trans_bdc.use_dw1 = dw1;
            cfg.trans_bdc.use_dwsep = sep;
            cfg.trans_bdc.use_channel_attn = ca;
            ContextFormer<float> m(cfg, 1);
            return std::pair<int64_t, int64_t>(analysis::count_params(m),
                                               analysis::count_macs(m, {1, 5, 512, 512}));
        };
        const auto base = cost(true, false, false, false, false);
        bool ok = true;
        for (int bit = 0; bit < 4; ++bit) {
            const auto up = cost(true, bit == 0, bit == 1, bit == 2, bit == 3);
            ok &= up.first >= base.first && up.second >= base.second;
        }
        h.check("analysis.monotonicity", ok, "single-component enables never decrease params or MACs");
    }
    // Scale law: conv-only trunk MACs scale exactly 4x when the side doubles.
    {
        ModelConfig cfg = ModelConfig::paper_seg();
        cfg.mode = HeadMode::none;
        cfg.trans_bdc.num_blocks = 0;
        ContextFormer<float> m(cfg, 1);
        const int64_t m256 = analysis::count_macs(m, {1, 5, 256, 256});
        const int64_t m512 = analysis::count_macs(m, {1, 5, 512, 512});
        h.check("analysis.scale_law", m512 == 4 * m256,
                "stem+TPEM MACs at 512 are exactly 4x the 256 figure");
    }
    // Latency: a micro model must be faster than the paper model.
    {
        ContextFormer<float> micro(ModelConfig::micro(), seed + 2);
        ContextFormer<float> paper(ModelConfig::paper_seg(), seed + 2);
        const auto lm = analysis::bench_latency(micro, {1, 5, 64, 64}, 1, 3, 1, seed);
        const auto lp = analysis::bench_latency(paper, {1, 5, 512, 512}, 0, 1, 1, seed);
        h.check("analysis.latency.monotone_cost", lm.median_ms < lp.median_ms,
                "micro median " + std::to_string(lm.median_ms) + "ms < paper " +
                    std::to_string(lp.median_ms) + "ms");
    }
}

inline void verifier_suite(Harness& h, uint64_t seed) {
    // The gradcheck machinery is itself validated on a pure-linear model:
    // loss = sum(W x + b) is linear in W and b, so central differences are
    // exact to rounding.
    {
        ParamStore<double> store;
        layers::Builder<double> b(store, seed);
        layers::ConvBias<double> lin =
            layers::ConvBias<double>::create(b, "linear", ConvSpec::make_pointwise(3, 2));
        Rng rng(seed + 1);
        const Tensor<double> x = detail::rand_tensor<double>(rng, {1, 3, 1, 1});
        typename layers::ConvBias<double>::Cache cache;
        const Tensor<double> y = lin.forward(store, x, &cache);
        GradStore<double> gs(store);
        lin.backward(store, cache, Tensor<double>::full(y.shape(), 1.0), gs);
        GradCheckCase c;
        c.seed = seed;
        c.tolerance = 1e-9;
        c.atol = 0.0;  // measure the raw agreement
        auto loss = [&]() { return sum_all(lin.forward(store, x, nullptr)); };
        const GradCheckReport rep = gradcheck_store(store, gs, loss, c);
        h.check("verify.gradcheck.linear_exact", rep.pass && rep.worst_rel < 1e-9,
                "worst rel " + std::to_string(rep.worst_rel) + " on a linear model");
    }
    // Mutation canary: a deliberately mis-indexed conv must fail the sweep.
    {
        const OpReport rep = mutation_canary<float>(seed, 10);
        h.check("verify.mutation_canary_detected", !rep.pass,
                "worst diff " + std::to_string(rep.worst) + " flagged by the comparator");
    }
    // Filter contract: excluded parameters are not sampled and are reported.
    {
        ContextFormer<double> m(ModelConfig::micro(), seed + 2);
        GradCheckCase c;
        c.param_filter = "head.";
        c.max_coords_per_tensor = 2;
        c.seed = seed;
        const GradCheckReport rep = gradcheck_model(m, {1, 5, 64, 64}, c);
        h.check("verify.gradcheck.filter_coverage",
                rep.pass && rep.params_skipped > 0 &&
                    rep.params_checked + rep.params_skipped == m.params().size(),
                std::to_string(rep.params_checked) + " checked, " + std::to_string(rep.params_skipped) +
                    " excluded by filter");
    }
}

}  // namespace suites

// suite name: tensor | gme | blocks | analysis | all
inline Harness run_invariant_suite(const std::string& suite, uint64_t seed = 42) {
    Harness h;
    bool known = false;
    if (suite == "tensor" || suite == "all") suites::tensor_suite(h, seed), known = true;
    if (suite == "gme" || suite == "all") suites::gme_suite(h, seed), known = true;
    if (suite == "blocks" || suite == "all") suites::blocks_suite(h, seed), known = true;
    if (suite == "analysis" || suite == "all") suites::analysis_suite(h, seed), known = true;
    if (suite == "all") {
        suites::verifier_suite(h, seed);
        // Acceptance-grade parameter check rides along with the full suite.
        ContextFormer<float> m(ModelConfig::paper_seg(), seed);
        const double mparams = static_cast<double>(analysis::count_params(m)) / 1e6;
        h.check("all.params.paper_config", std::abs(mparams / 1.68 - 1.0) < 0.05,
                std::to_string(mparams) + "M vs 1.68M (+/-5%)");
    }
    if (!known) throw UsageError("unknown suite '" + suite + "' (tensor|gme|blocks|analysis|all)");
    return h;
}

}  // namespace cfkit::verify

#pragma once

#include <algorithm>
#include <chrono>
#include <sstream>

#include <json.hpp>

#include "cfkit/model.hpp"

// Static cost model (parameters, MACs, activation memory) computed from the
// graph without executing it, plus the wall-clock latency microbenchmark.
// Headline convention: GFLOPs = conv/linear/matmul MACs / 1e9. Elementwise,
// BN, pooling and interpolation passes are tallied in a separate minor-ops
// bucket; 2*MACs is also reported so other conventions can be reconstructed.
namespace cfkit::analysis {

struct NodeRecord {
    std::string name;
    std::string kind;
    std::string out_shape;
    int64_t params = 0;
    int64_t macs = 0;
    int64_t act_bytes = 0;
    int64_t minor_ops = 0;
};

struct ModuleTotals {
    int64_t params = 0;
    int64_t macs = 0;
    int64_t act_bytes = 0;
    int64_t minor_ops = 0;

    void absorb(const NodeRecord& n) {
        params += n.params;
        macs += n.macs;
        act_bytes += n.act_bytes;
        minor_ops += n.minor_ops;
    }
};

struct LatencyRecord {
    int warmup_iters = 0;
    int measure_iters = 0;
    double median_ms = 0.0;
    double p90_ms = 0.0;
    std::string input_shape;
    int thread_count = 1;
};

struct CostReport {
    std::string input_shape;
    std::string mode;
    std::vector<NodeRecord> nodes;
    std::vector<std::pair<std::string, ModuleTotals>> rollups;  // stem, tpem, trans_bdc, fmm, heads
    ModuleTotals totals;
    double gflops = 0.0;     // macs / 1e9
    double gflops_2x = 0.0;  // 2*macs / 1e9
    std::optional<LatencyRecord> latency;
};

inline std::string rollup_key(const std::string& node_name) {
    const size_t dot = node_name.find('.');
    std::string head = dot == std::string::npos ? node_name : node_name.substr(0, dot);
    if (head == "head") return "heads";
    return head;
}

template <class R>
CostReport cost_report(const ContextFormer<R>& model, Shape4 input) {
    CostReport rep;
    rep.input_shape = input.str();
    rep.mode = head_mode_name(model.config().mode);
    const std::vector<CostNode> nodes = model.describe(input);
    for (const CostNode& n : nodes) {
        NodeRecord r;
        r.name = n.name;
        r.kind = n.kind;
        r.out_shape = n.out_shape.str();
        r.params = n.params;
        r.macs = n.macs;
        r.act_bytes = n.out_shape.numel() * static_cast<int64_t>(sizeof(float));
        r.minor_ops = n.minor_ops;
        rep.nodes.push_back(std::move(r));
    }
    for (const NodeRecord& n : rep.nodes) {
        const std::string key = rollup_key(n.name);
        auto it = std::find_if(rep.rollups.begin(), rep.rollups.end(),
                               [&key](const auto& kv) { return kv.first == key; });
        if (it == rep.rollups.end()) {
            rep.rollups.emplace_back(key, ModuleTotals{});
            it = rep.rollups.end() - 1;
        }
        it->second.absorb(n);
        rep.totals.absorb(n);
    }
    rep.gflops = static_cast<double>(rep.totals.macs) / 1e9;
    rep.gflops_2x = 2.0 * static_cast<double>(rep.totals.macs) / 1e9;
    return rep;
}

template <class R>
int64_t count_params(const ContextFormer<R>& model) {
    return model.params().total_elements();
}

template <class R>
int64_t count_macs(const ContextFormer<R>& model, Shape4 input) {
    int64_t macs = 0;
    for (const CostNode& n : model.describe(input)) macs += n.macs;
    return macs;
}

// Runs warmup then measured forward passes on a fixed seeded random input.
template <class R>
LatencyRecord bench_latency(const ContextFormer<R>& model, Shape4 input, int warmup, int iters,
                            int threads, uint64_t seed = 42) {
    if (iters <= 0) throw ConfigError("bench_latency needs iters >= 1");
    if (warmup < 0) throw ConfigError("bench_latency needs warmup >= 0");
    const int prev_threads = thread_count();
    set_thread_count(threads);
    Rng rng(seed);
    Tensor<R> x = Tensor<R>::random_uniform(input, rng, -1.0, 1.0);
    std::vector<double> samples;
    samples.reserve(static_cast<size_t>(iters));
    for (int i = 0; i < warmup; ++i) (void)model.forward(x);
    for (int i = 0; i < iters; ++i) {
        const auto t0 = std::chrono::steady_clock::now();
        (void)model.forward(x);
        const auto t1 = std::chrono::steady_clock::now();
        samples.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
    }
    set_thread_count(prev_threads);
    std::sort(samples.begin(), samples.end());
    LatencyRecord rec;
    rec.warmup_iters = warmup;
    rec.measure_iters = iters;
    rec.median_ms = samples[static_cast<size_t>((iters - 1) / 2)];
    rec.p90_ms = samples[std::min<size_t>(static_cast<size_t>(iters) - 1,
                                          static_cast<size_t>(0.9 * (iters - 1) + 0.5))];
    rec.input_shape = input.str();
    rec.thread_count = threads;
    return rec;
}

// ---- emission ("cfkit_report_v1") ---------------------------------------

using nlohmann::ordered_json;

inline ordered_json module_json(const ModuleTotals& m) {
    return ordered_json{{"params", m.params},
                        {"macs", m.macs},
                        {"act_bytes", m.act_bytes},
                        {"minor_ops", m.minor_ops}};
}

inline ordered_json to_json(const CostReport& rep) {
    ordered_json j;
    j["schema"] = "cfkit_report_v1";
    j["input_shape"] = rep.input_shape;
    j["mode"] = rep.mode;
    ordered_json nodes = ordered_json::array();
    for (const NodeRecord& n : rep.nodes)
        nodes.push_back(ordered_json{{"name", n.name},
                                     {"kind", n.kind},
                                     {"out_shape", n.out_shape},
                                     {"params", n.params},
                                     {"macs", n.macs},
                                     {"act_bytes", n.act_bytes},
                                     {"minor_ops", n.minor_ops}});
    j["nodes"] = nodes;
    ordered_json rollups;
    for (const auto& [k, v] : rep.rollups) rollups[k] = module_json(v);
    j["rollups"] = rollups;
    j["totals"] = module_json(rep.totals);
    j["gflops"] = rep.gflops;
    j["gflops_2x"] = rep.gflops_2x;
    if (rep.latency)
        j["latency"] = ordered_json{{"warmup_iters", rep.latency->warmup_iters},
                                    {"measure_iters", rep.latency->measure_iters},
                                    {"median_ms", rep.latency->median_ms},
                                    {"p90_ms", rep.latency->p90_ms},
                                    {"input_shape", rep.latency->input_shape},
                                    {"thread_count", rep.latency->thread_count}};
    return j;
}

inline CostReport report_from_json(const nlohmann::json& j) {
    if (j.value("schema", "") != "cfkit_report_v1") throw IngestError("not a cfkit_report_v1 document");
    CostReport rep;
    rep.input_shape = j.value("input_shape", "");
    rep.mode = j.value("mode", "");
    for (const auto& n : j.at("nodes")) {
        NodeRecord r;
        r.name = n.at("name").get<std::string>();
        r.kind = n.at("kind").get<std::string>();
        r.out_shape = n.value("out_shape", "");
        r.params = n.at("params").get<int64_t>();
        r.macs = n.at("macs").get<int64_t>();
        r.act_bytes = n.at("act_bytes").get<int64_t>();
        r.minor_ops = n.value("minor_ops", int64_t{0});
        rep.nodes.push_back(std::move(r));
    }
    auto take = [](const nlohmann::json& m) {
        ModuleTotals t;
        t.params = m.at("params").get<int64_t>();
        t.macs = m.at("macs").get<int64_t>();
        t.act_bytes = m.at("act_bytes").get<int64_t>();
        t.minor_ops = m.value("minor_ops", int64_t{0});
        return t;
    };
    for (const auto& [k, v] : j.at("rollups").items()) rep.rollups.emplace_back(k, take(v));
    rep.totals = take(j.at("totals"));
    rep.gflops = j.at("gflops").get<double>();
    rep.gflops_2x = j.value("gflops_2x", 0.0);
    if (j.contains("latency")) {
        const auto& l = j.at("latency");
        LatencyRecord rec;
        rec.warmup_iters = l.at("warmup_iters").get<int>();
        rec.measure_iters = l.at("measure_iters").get<int>();
        rec.median_ms = l.at("median_ms").get<double>();
        rec.p90_ms = l.at("p90_ms").get<double>();
        rec.input_shape = l.value("input_shape", "");
        rec.thread_count = l.value("thread_count", 1);
        rep.latency = rec;
    }
    return rep;
}

// CSV: one row per node, then one per rollup, then the total row.
inline std::string to_csv(const CostReport& rep) {
    std::ostringstream os;
    os << "name,kind,out_shape,params,macs,act_bytes,minor_ops\n";
    for (const NodeRecord& n : rep.nodes)
        os << n.name << "," << n.kind << "," << n.out_shape << "," << n.params << "," << n.macs << ","
           << n.act_bytes << "," << n.minor_ops << "\n";
    for (const auto& [k, v] : rep.rollups)
        os << k << ",rollup,," << v.params << "," << v.macs << "," << v.act_bytes << "," << v.minor_ops
           << "\n";
    os << "total,total,," << rep.totals.params << "," << rep.totals.macs << "," << rep.totals.act_bytes
       << "," << rep.totals.minor_ops << "\n";
    return os.str();
}

// Re-parses the rollup and total rows of a CSV document.
inline std::pair<std::vector<std::pair<std::string, ModuleTotals>>, ModuleTotals> csv_totals(
    const std::string& csv) {
    std::vector<std::pair<std::string, ModuleTotals>> rollups;
    ModuleTotals total;
    std::istringstream is(csv);
    std::string line;
    std::getline(is, line);  // header
    while (std::getline(is, line)) {
        std::vector<std::string> cells;
        std::string cell;
        std::istringstream ls(line);
        while (std::getline(ls, cell, ',')) cells.push_back(cell);
        if (cells.size() < 7) continue;
        ModuleTotals t;
        t.params = std::stoll(cells[3]);
        t.macs = std::stoll(cells[4]);
        t.act_bytes = std::stoll(cells[5]);
        t.minor_ops = std::stoll(cells[6]);
        if (cells[1] == "rollup") rollups.emplace_back(cells[0], t);
        if (cells[1] == "total") total = t;
    }
    return {rollups, total};
}

inline void write_text_file(const std::string& path, const std::string& content) {
    std::ofstream f(path);
    if (!f) throw IngestError("cannot open for writing: " + path);
    f << content;
    if (!f) throw IngestError("write failed: " + path);
}

}  // namespace cfkit::analysis

#pragma once

#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "cfkit/common.hpp"

namespace cfkit {

inline int64_t lcm64(int64_t a, int64_t b) {
    int64_t x = a, y = b;
    while (y) {
        const int64_t t = x % y;
        x = y;
        y = t;
    }
    return a / x * b;
}

struct StemSpec {
    int kernel = 3;
    int out = 16;
    int stride = 2;
};

// MobileNetV2-style block. Residual skip exists iff stride==1 and
// in_channels==out_channels.
struct InvertedResidualSpec {
    int kernel = 3;
    int expand_ratio = 1;
    int out_channels = 16;
    int stride = 1;
};

struct TransBdcSpec {
    int num_blocks = 4;
    int num_heads = 4;
    int q_dim = 16;  // per head
    int k_dim = 16;
    int v_dim = 32;
    int ffn_expansion = 2;
    // Table 3 component toggles.
    bool use_attention = true;
    bool use_dw3 = true;
    bool use_dw1 = true;
    bool use_dwsep = true;
    bool use_channel_attn = true;
    int channel_attn_reduction = 4;
};

enum class HeadMode { seg, cls, none };

inline const char* head_mode_name(HeadMode m) {
    switch (m) {
        case HeadMode::seg: return "seg";
        case HeadMode::cls: return "cls";
        case HeadMode::none: return "none";
    }
    return "?";
}

// Declarative description of the full network. JSON schema "cfkit_config_v1".
struct ModelConfig {
    HeadMode mode = HeadMode::seg;
    int input_channels = 5;  // 3 (RGB) or 5 (RGB + gradient magnitude + edge)
    int num_classes = 150;
    int input_h = 512, input_w = 512;
    StemSpec stem;
    std::vector<std::vector<InvertedResidualSpec>> tpem_stages;
    int pool_divisor = 64;
    TransBdcSpec trans_bdc;
    int fmm_target_channels = 160;
    int head_hidden = 96;
    std::optional<double> edge_threshold;  // fixed GME threshold instead of Otsu

    // Sum of the pyramid tap widths; the width of the concatenated tokens.
    int bottleneck_channels() const {
        int c = 0;
        for (const auto& stage : tpem_stages)
            if (!stage.empty()) c += stage.back().out_channels;
        return c;
    }

    int token_h() const { return input_h / pool_divisor; }
    int token_w() const { return input_w / pool_divisor; }

    void validate() const {
        if (input_channels != 3 && input_channels != 5)
            throw ConfigError("input_channels must be 3 or 5, got " + std::to_string(input_channels));
        if (num_classes <= 0) throw ConfigError("num_classes must be positive");
        if (stem.kernel <= 0 || stem.out <= 0 || stem.stride <= 0)
            throw ConfigError("stem fields must be positive");
        if (pool_divisor < 32 || pool_divisor % 32 != 0)
            throw ConfigError("pool_divisor must be a positive multiple of 32 (tokens must divide every pyramid scale), got " +
                              std::to_string(pool_divisor));
        const int64_t align = lcm64(32, pool_divisor);
        if (input_h <= 0 || input_w <= 0 || input_h % align != 0 || input_w % align != 0)
            throw ConfigError("input_h/input_w must be positive multiples of " + std::to_string(align) +
                              ", got " + std::to_string(input_h) + "x" + std::to_string(input_w));
        for (size_t si = 0; si < tpem_stages.size(); ++si) {
            if (tpem_stages[si].empty())
                throw ConfigError("tpem_stages[" + std::to_string(si) + "] is empty");
            for (const auto& b : tpem_stages[si]) {
                if (b.kernel != 3 && b.kernel != 5)
                    throw ConfigError("tpem_stages: kernel must be 3 or 5");
                if (b.expand_ratio < 1) throw ConfigError("tpem_stages: expand_ratio must be >= 1");
                if (b.out_channels <= 0) throw ConfigError("tpem_stages: out_channels must be positive");
                if (b.stride != 1 && b.stride != 2) throw ConfigError("tpem_stages: stride must be 1 or 2");
            }
        }
        const auto& t = trans_bdc;
        if (t.num_blocks < 0) throw ConfigError("trans_bdc.num_blocks must be >= 0");
        if (t.num_blocks > 0) {
            if (t.use_attention) {
                if (t.num_heads <= 0 || t.q_dim <= 0 || t.k_dim <= 0 || t.v_dim <= 0)
                    throw ConfigError("trans_bdc attention dims must be positive");
                if (t.q_dim != t.k_dim)
                    throw ConfigError("trans_bdc.q_dim must equal k_dim (dot-product compatibility)");
            }
            if (t.ffn_expansion <= 0) throw ConfigError("trans_bdc.ffn_expansion must be positive");
            if (t.use_channel_attn && t.channel_attn_reduction <= 0)
                throw ConfigError("trans_bdc.channel_attn_reduction must be positive");
            if (!t.use_attention && !t.use_dw3 && !t.use_dw1 && !t.use_dwsep)
                throw ConfigError("trans_bdc: all branches disabled; enable attention or a BDC branch");
        }
        if (mode == HeadMode::seg) {
            if (fmm_target_channels <= 0) throw ConfigError("fmm_target_channels must be positive");
            if (head_hidden <= 0) throw ConfigError("head_hidden must be positive");
            if (tpem_stages.size() < 4)
                throw ConfigError("seg mode needs the four-stage pyramid (got " +
                                  std::to_string(tpem_stages.size()) + " stages)");
        }
        if (mode != HeadMode::none && tpem_stages.empty())
            throw ConfigError("heads require at least one TPEM stage");
        if (edge_threshold && *edge_threshold < 0) throw ConfigError("edge_threshold must be >= 0");
    }

    // The paper's segmentation network (supplementary Table B).
    static ModelConfig paper_seg(int input_hw = 512, bool gme = true) {
        ModelConfig c;
        c.mode = HeadMode::seg;
        c.input_channels = gme ? 5 : 3;
        c.num_classes = 150;
        c.input_h = c.input_w = input_hw;
        c.stem = {3, 16, 2};
        c.tpem_stages = {
            {{3, 4, 16, 2}, {3, 3, 16, 1}},
            {{5, 3, 32, 2}, {5, 3, 32, 1}},
            {{3, 3, 64, 2}, {3, 3, 64, 1}},
            {{5, 6, 96, 2}, {5, 6, 96, 1}},
        };
        c.pool_divisor = 64;
        c.trans_bdc = TransBdcSpec{};
        c.fmm_target_channels = 160;
        c.head_hidden = 96;
        return c;
    }

    // ImageNet classification variant (supplementary Table A): same trunk,
    // average pooling + linear head, 7x7 bottleneck tokens at 224x224.
    static ModelConfig paper_cls(int num_classes = 1000, bool gme = true) {
        ModelConfig c = paper_seg(512, gme);
        c.mode = HeadMode::cls;
        c.num_classes = num_classes;
        c.input_h = c.input_w = 224;
        c.pool_divisor = 32;
        return c;
    }

    // Gradient-check scale: 64x64 input, one block, 8 classes, 2x2 tokens.
    static ModelConfig micro() {
        ModelConfig c = paper_seg(64);
        c.num_classes = 8;
        c.pool_divisor = 32;
        c.trans_bdc.num_blocks = 1;
        return c;
    }

    static ModelConfig stem_only(int input_hw = 64, int input_channels = 3) {
        ModelConfig c;
        c.mode = HeadMode::none;
        c.input_channels = input_channels;
        c.input_h = c.input_w = input_hw;
        c.tpem_stages.clear();
        c.trans_bdc.num_blocks = 0;
        return c;
    }
};

namespace cfg_json {

using nlohmann::ordered_json;

inline ordered_json to_json(const InvertedResidualSpec& b) {
    return ordered_json{{"kernel", b.kernel},
                        {"expand_ratio", b.expand_ratio},
                        {"out_channels", b.out_channels},
                        {"stride", b.stride}};
}

inline ordered_json to_json(const ModelConfig& c) {
    ordered_json j;
    j["schema"] = "cfkit_config_v1";
    j["mode"] = head_mode_name(c.mode);
    j["input_channels"] = c.input_channels;
    j["num_classes"] = c.num_classes;
    j["input_h"] = c.input_h;
    j["input_w"] = c.input_w;
    j["stem"] = ordered_json{{"kernel", c.stem.kernel}, {"out", c.stem.out}, {"stride", c.stem.stride}};
    ordered_json stages = ordered_json::array();
    for (const auto& stage : c.tpem_stages) {
        ordered_json blocks = ordered_json::array();
        for (const auto& b : stage) blocks.push_back(to_json(b));
        stages.push_back(blocks);
    }
    j["tpem_stages"] = stages;
    j["pool_divisor"] = c.pool_divisor;
    j["trans_bdc"] = ordered_json{{"num_blocks", c.trans_bdc.num_blocks},
                                  {"num_heads", c.trans_bdc.num_heads},
                                  {"q_dim", c.trans_bdc.q_dim},
                                  {"k_dim", c.trans_bdc.k_dim},
                                  {"v_dim", c.trans_bdc.v_dim},
                                  {"ffn_expansion", c.trans_bdc.ffn_expansion},
                                  {"use_attention", c.trans_bdc.use_attention},
                                  {"use_dw3", c.trans_bdc.use_dw3},
                                  {"use_dw1", c.trans_bdc.use_dw1},
                                  {"use_dwsep", c.trans_bdc.use_dwsep},
                                  {"use_channel_attn", c.trans_bdc.use_channel_attn},
                                  {"channel_attn_reduction", c.trans_bdc.channel_attn_reduction}};
    j["fmm_target_channels"] = c.fmm_target_channels;
    j["head_hidden"] = c.head_hidden;
    if (c.edge_threshold) j["edge_threshold"] = *c.edge_threshold;
    return j;
}

template <class T>
T require(const nlohmann::json& j, const std::string& path, const char* key) {
    if (!j.contains(key)) throw ConfigError("missing field " + path + key);
    try {
        return j.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
        throw ConfigError("bad value for field " + path + key);
    }
}

inline ModelConfig from_json(const nlohmann::json& j) {
    ModelConfig c;
    const std::string schema = require<std::string>(j, "", "schema");
    if (schema != "cfkit_config_v1") throw ConfigError("unsupported config schema: " + schema);
    const std::string mode = j.value("mode", "seg");
    if (mode == "seg")
        c.mode = HeadMode::seg;
    else if (mode == "cls")
        c.mode = HeadMode::cls;
    else if (mode == "none")
        c.mode = HeadMode::none;
    else
        throw ConfigError("mode must be seg|cls|none, got " + mode);
    c.input_channels = require<int>(j, "", "input_channels");
    c.num_classes = j.value("num_classes", 150);
    c.input_h = require<int>(j, "", "input_h");
    c.input_w = require<int>(j, "", "input_w");
    if (j.contains("stem")) {
        const auto& s = j.at("stem");
        c.stem.kernel = require<int>(s, "stem.", "kernel");
        c.stem.out = require<int>(s, "stem.", "out");
        c.stem.stride = require<int>(s, "stem.", "stride");
    }
    c.tpem_stages.clear();
    if (j.contains("tpem_stages")) {
        for (const auto& stage : j.at("tpem_stages")) {
            std::vector<InvertedResidualSpec> blocks;
            for (const auto& b : stage) {
                InvertedResidualSpec ir;
                ir.kernel = require<int>(b, "tpem_stages[].", "kernel");
                ir.expand_ratio = require<int>(b, "tpem_stages[].", "expand_ratio");
                ir.out_channels = require<int>(b, "tpem_stages[].", "out_channels");
                ir.stride = require<int>(b, "tpem_stages[].", "stride");
                blocks.push_back(ir);
            }
            c.tpem_stages.push_back(std::move(blocks));
        }
    }
    c.pool_divisor = j.value("pool_divisor", 64);
    if (j.contains("trans_bdc")) {
        const auto& t = j.at("trans_bdc");
        c.trans_bdc.num_blocks = require<int>(t, "trans_bdc.", "num_blocks");
        c.trans_bdc.num_heads = t.value("num_heads", 4);
        c.trans_bdc.q_dim = t.value("q_dim", 16);
        c.trans_bdc.k_dim = t.value("k_dim", 16);
        c.trans_bdc.v_dim = t.value("v_dim", 32);
        c.trans_bdc.ffn_expansion = t.value("ffn_expansion", 2);
        c.trans_bdc.use_attention = t.value("use_attention", true);
        c.trans_bdc.use_dw3 = t.value("use_dw3", true);
        c.trans_bdc.use_dw1 = t.value("use_dw1", true);
        c.trans_bdc.use_dwsep = t.value("use_dwsep", true);
        c.trans_bdc.use_channel_attn = t.value("use_channel_attn", true);
        c.trans_bdc.channel_attn_reduction = t.value("channel_attn_reduction", 4);
    }
    c.fmm_target_channels = j.value("fmm_target_channels", 160);
    c.head_hidden = j.value("head_hidden", 96);
    if (j.contains("edge_threshold") && !j.at("edge_threshold").is_null())
        c.edge_threshold = j.at("edge_threshold").get<double>();
    c.validate();
    return c;
}

inline ModelConfig load_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IngestError("cannot open config file: " + path);
    nlohmann::json j;
    try {
        f >> j;
    } catch (const nlohmann::json::exception& e) {
        throw IngestError("config is not valid JSON: " + path + " (" + e.what() + ")");
    }
    return from_json(j);
}

inline void save_file(const ModelConfig& c, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw IngestError("cannot open for writing: " + path);
    f << to_json(c).dump(2) << "\n";
}

}  // namespace cfg_json

}  // namespace cfkit

#include "lwdna/complexity.hpp"

#include <stdexcept>

#include "json.hpp"

namespace lwdna {

const char* cost_kind_str(CostKind k) {
    switch (k) {
        case CostKind::Conv: return "conv";
        case CostKind::Depthwise: return "depthwise";
        case CostKind::Bn: return "bn";
        case CostKind::Linear: return "linear";
        case CostKind::Act: return "act";
        case CostKind::Add: return "add";
        case CostKind::Pool: return "pool";
    }
    return "?";
}

CostReport model_cost(const ArchSpec& arch, const ChannelConfig& config, int input_hw) {
    if (input_hw < 1)
        throw std::invalid_argument("model_cost: input_hw must be positive");
    validate_config(arch, config);

    CostReport rep;
    auto push = [&rep](int id, CostKind kind, int64_t flops, int64_t params, int h, int w) {
        rep.rows.push_back(LayerCost{id, kind, flops, params, h, w});
        rep.total_flops += flops;
        rep.total_params += params;
    };

    const int L = arch.num_layers();
    std::vector<int> out_h(static_cast<size_t>(L)), out_w(static_cast<size_t>(L));

    for (int l = 0; l < L; ++l) {
        const LayerDesc& d = arch.layers[static_cast<size_t>(l)];
        int in_h = -1, in_w = -1;
        for (int src : d.inputs) {
            const int h = src < 0 ? input_hw : out_h[static_cast<size_t>(src)];
            const int w = src < 0 ? input_hw : out_w[static_cast<size_t>(src)];
            if (in_h < 0) {
                in_h = h;
                in_w = w;
            } else if (in_h != h || in_w != w) {
                throw std::invalid_argument("model_cost: layer " + std::to_string(l) +
                                            " concatenates inputs of unequal spatial size");
            }
        }
        const int64_t in_ch = layer_in_channels(arch, config, l);
        const int64_t n = config[static_cast<size_t>(l)];
        const int64_t in_elems = in_ch * in_h * in_w;

        if (d.bn == BnPlace::Pre) {
            push(l, CostKind::Bn, 2 * in_elems, 2 * in_ch, in_h, in_w);
            if (d.relu) push(l, CostKind::Act, in_elems, 0, in_h, in_w);
        }

        const int oh = (in_h + 2 * d.padding - d.kernel) / d.stride + 1;
        const int ow = (in_w + 2 * d.padding - d.kernel) / d.stride + 1;
        if (oh < 1 || ow < 1)
            throw std::invalid_argument("model_cost: layer " + std::to_string(l) + " output collapses to zero size");
        const int64_t out_elems = n * oh * ow;
        const int64_t k2 = static_cast<int64_t>(d.kernel) * d.kernel;

        if (d.kind == LayerKind::Depthwise) {
            push(l, CostKind::Depthwise, n * k2 * oh * ow, n * k2 + (d.bias ? n : 0), oh, ow);
        } else {
            push(l, CostKind::Conv, n * in_ch * k2 * oh * ow, n * in_ch * k2 + (d.bias ? n : 0), oh, ow);
        }

        if (d.bn == BnPlace::Post) push(l, CostKind::Bn, 2 * out_elems, 2 * n, oh, ow);
        if (d.add_from >= 0) push(l, CostKind::Add, out_elems, 0, oh, ow);
        if (d.relu && d.bn != BnPlace::Pre) push(l, CostKind::Act, out_elems, 0, oh, ow);

        int fh = oh, fw = ow;
        if (d.pool_after == PoolAfter::Avg2) {
            fh = oh / 2;
            fw = ow / 2;
            push(l, CostKind::Pool, n * fh * fw * 4, 0, fh, fw);
        }
        out_h[static_cast<size_t>(l)] = fh;
        out_w[static_cast<size_t>(l)] = fw;
    }

    // classifier head: (final BN) -> global average pool -> linear
    int hh = -1, hw = -1;
    for (int src : arch.head_inputs) {
        if (hh < 0) {
            hh = out_h[static_cast<size_t>(src)];
            hw = out_w[static_cast<size_t>(src)];
        } else if (hh != out_h[static_cast<size_t>(src)] || hw != out_w[static_cast<size_t>(src)]) {
            throw std::invalid_argument("model_cost: head inputs have unequal spatial size");
        }
    }
    const int64_t feats = head_in_features(arch, config);
    const int64_t head_elems = feats * hh * hw;
    const int head_id = L;
    if (arch.final_bn) {
        push(head_id, CostKind::Bn, 2 * head_elems, 2 * feats, hh, hw);
        push(head_id, CostKind::Act, head_elems, 0, hh, hw);
    }
    push(head_id, CostKind::Pool, head_elems, 0, 1, 1);
    const int64_t k = arch.num_classes;
    push(head_id, CostKind::Linear, k * feats + (arch.head_bias ? k : 0),
         k * feats + (arch.head_bias ? k : 0), 1, 1);
    return rep;
}

RatioReport ratio_report(const ChannelConfig& base_config, const ChannelConfig& new_config,
                         const ArchSpec& arch, int input_hw) {
    const CostReport base = model_cost(arch, base_config, input_hw);
    const CostReport cur = model_cost(arch, new_config, input_hw);
    RatioReport r;
    r.base_flops = base.total_flops;
    r.base_params = base.total_params;
    r.new_flops = cur.total_flops;
    r.new_params = cur.total_params;
    r.flops_ratio = 100.0 * static_cast<double>(cur.total_flops) / static_cast<double>(base.total_flops);
    r.params_ratio = 100.0 * static_cast<double>(cur.total_params) / static_cast<double>(base.total_params);
    return r;
}

std::string cost_report_json(const ArchSpec& arch, const ChannelConfig& config, int input_hw,
                             const CostReport& report, const RatioReport& ratio) {
    nlohmann::json j;
    j["schema_version"] = 1;
    j["arch"] = arch.name;
    j["input_hw"] = input_hw;
    j["config"] = config;
    j["total_flops"] = report.total_flops;
    j["total_params"] = report.total_params;
    j["flops_ratio"] = ratio.flops_ratio;
    j["params_ratio"] = ratio.params_ratio;
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& r : report.rows)
        rows.push_back({{"layer", r.layer_id},
                        {"kind", cost_kind_str(r.kind)},
                        {"flops", r.flops},
                        {"params", r.params},
                        {"out_h", r.out_h},
                        {"out_w", r.out_w}});
    j["rows"] = rows;
    return j.dump(2) + "\n";
}

std::string cost_rows_csv(const CostReport& report) {
    std::string out = "layer,kind,flops,params,out_h,out_w\n";
    for (const auto& r : report.rows)
        out += std::to_string(r.layer_id) + "," + cost_kind_str(r.kind) + "," + std::to_string(r.flops) +
               "," + std::to_string(r.params) + "," + std::to_string(r.out_h) + "," +
               std::to_string(r.out_w) + "\n";
    return out;
}

} // namespace lwdna

#pragma once

#include <cstdint>

#include "lwdna/arch.hpp"

namespace lwdna {

enum class CostKind { Conv, Depthwise, Bn, Linear, Act, Add, Pool };

const char* cost_kind_str(CostKind k);

/// One accounting row. A single arch layer can produce several rows (conv,
/// bn, activation, residual add, pooling); head rows carry id == num_layers.
struct LayerCost {
    int layer_id;
    CostKind kind;
    int64_t flops;      // multiply-accumulates count 1; bn is 2 per element
    int64_t params;
    int out_h;
    int out_w;
};

struct CostReport {
    int64_t total_flops = 0;
    int64_t total_params = 0;
    std::vector<LayerCost> rows;

    double gflops() const { return static_cast<double>(total_flops) / 1e9; }
    double mparams() const { return static_cast<double>(total_params) / 1e6; }
};

/// Exact per-sample cost of an architecture under a channel configuration.
/// Convention: one MAC = 1 FLOP; BN costs 2 per element, activations and
/// elementwise adds 1, pooling its kernel-area adds. Totals sum every row.
CostReport model_cost(const ArchSpec& arch, const ChannelConfig& config, int input_hw);

struct RatioReport {
    int64_t base_flops, base_params;
    int64_t new_flops, new_params;
    double flops_ratio;    // 100 * new / base
    double params_ratio;
};

RatioReport ratio_report(const ChannelConfig& base_config, const ChannelConfig& new_config,
                         const ArchSpec& arch, int input_hw);

std::string cost_report_json(const ArchSpec& arch, const ChannelConfig& config, int input_hw,
                             const CostReport& report, const RatioReport& ratio);

std::string cost_rows_csv(const CostReport& report);

} // namespace lwdna

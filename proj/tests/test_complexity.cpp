#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "lwdna/complexity.hpp"

using namespace lwdna;

namespace {

double rel_pct(double got, double want) { return 100.0 * std::fabs(got - want) / want; }

} // namespace

TEST_CASE("resnet56 reproduces the published complexity") {
    const ArchSpec arch = build("resnet56", 10, 32);
    const CostReport rep = model_cost(arch, arch.default_config, 32);
    CHECK(rel_pct(rep.gflops(), 0.1274) <= 1.0);
    CHECK(rel_pct(rep.mparams(), 0.856) <= 1.0);
}

TEST_CASE("densenet40 reproduces the published complexity") {
    const ArchSpec arch = build("densenet40", 10, 32);
    const CostReport rep = model_cost(arch, arch.default_config, 32);
    CHECK(rel_pct(rep.gflops(), 0.2901) <= 1.0);
    CHECK(rel_pct(rep.mparams(), 1.059) <= 1.0);

    // CIFAR100-style head only changes the classifier
    const ArchSpec arch100 = build("densenet40", 100, 32);
    const CostReport rep100 = model_cost(arch100, arch100.default_config, 32);
    CHECK(rel_pct(rep100.mparams(), 1.100) <= 1.0);
}

TEST_CASE("single conv layer hand count") {
    ArchSpec a;
    a.name = "one-conv";
    a.input_channels = 1;
    a.input_hw = 5;
    a.num_classes = 2;
    LayerDesc d;
    d.kernel = 3;
    d.stride = 1;
    d.padding = 1;
    d.bn = BnPlace::None;
    d.relu = false;
    d.inputs = {-1};
    d.latent_group = 0;
    a.layers.push_back(d);
    a.default_config = {1};
    a.head_inputs = {0};

    const CostReport rep = model_cost(a, a.default_config, 5);
    REQUIRE(rep.rows.size() >= 1);
    CHECK(rep.rows[0].kind == CostKind::Conv);
    CHECK(rep.rows[0].flops == 225);    // 1*1*9*25
    CHECK(rep.rows[0].params == 9);
    CHECK(rep.rows[0].out_h == 5);
}

TEST_CASE("ratio report") {
    const ArchSpec arch = build("vgg-tiny", 10, 32);
    const RatioReport same = ratio_report(arch.default_config, arch.default_config, arch, 32);
    CHECK(same.flops_ratio == 100.0);
    CHECK(same.params_ratio == 100.0);

    // halving every channel of a plain chain scales both metrics ~quadratically
    ChannelConfig half = arch.default_config;
    for (auto& c : half) c /= 2;
    const RatioReport halved = ratio_report(arch.default_config, half, arch, 32);
    CHECK(halved.flops_ratio > 23.0);
    CHECK(halved.flops_ratio < 29.0);
    CHECK(halved.params_ratio > 23.0);
    CHECK(halved.params_ratio < 29.0);
}

TEST_CASE("additivity and per-layer recount on a random pruned config") {
    const ArchSpec arch = build("vgg-tiny", 10, 32);
    Rng rng(99);
    ChannelConfig cfg = arch.default_config;
    for (auto& c : cfg) c = std::max(1, c - rng.uniform_int(0, c / 2));
    const CostReport rep = model_cost(arch, cfg, 32);

    int64_t fl = 0, pr = 0;
    for (const auto& row : rep.rows) {
        fl += row.flops;
        pr += row.params;
    }
    CHECK(fl == rep.total_flops);
    CHECK(pr == rep.total_params);

    // independent recount of the conv rows (plain chain, strides 1,2,1,2,1,2)
    int h = 32;
    int in_ch = 3;
    const int strides[6] = {1, 2, 1, 2, 1, 2};
    size_t row_i = 0;
    for (int l = 0; l < 6; ++l) {
        const int oh = (h + 2 - 3) / strides[l] + 1;
        while (rep.rows[row_i].kind != CostKind::Conv) ++row_i;
        CHECK(rep.rows[row_i].flops ==
              static_cast<int64_t>(cfg[l]) * in_ch * 9 * oh * oh);
        CHECK(rep.rows[row_i].params == static_cast<int64_t>(cfg[l]) * in_ch * 9);
        ++row_i;
        in_ch = cfg[l];
        h = oh;
    }
}

TEST_CASE("monotonicity: removing a channel never raises the cost") {
    const ArchSpec arch = build("mobile-tiny", 10, 32);
    const CostReport base = model_cost(arch, arch.default_config, 32);
    // depthwise widths are tied to their producer's latent: removing a
    // channel shrinks the pointwise layer and the depthwise fed by it
    ChannelConfig cfg = arch.default_config;
    cfg[2] -= 1;   // first pointwise
    cfg[3] -= 1;   // depthwise sharing its latent
    const CostReport less = model_cost(arch, cfg, 32);
    CHECK(less.total_flops < base.total_flops);
    CHECK(less.total_params < base.total_params);
}

TEST_CASE("width-multiplier law on a plain chain") {
    const ArchSpec arch = build("vgg-tiny", 10, 32);
    ChannelConfig doubled = arch.default_config;
    for (auto& c : doubled) c *= 2;
    const CostReport base = model_cost(arch, arch.default_config, 32);
    const CostReport twice = model_cost(arch, doubled, 32);

    // interior conv rows scale exactly by alpha^2
    std::vector<const LayerCost*> conv_base, conv_twice;
    for (const auto& r : base.rows)
        if (r.kind == CostKind::Conv) conv_base.push_back(&r);
    for (const auto& r : twice.rows)
        if (r.kind == CostKind::Conv) conv_twice.push_back(&r);
    REQUIRE(conv_base.size() == 6);
    for (size_t l = 1; l < 6; ++l)
        CHECK(conv_twice[l]->flops == 4 * conv_base[l]->flops);

    // total tends to alpha^2 (the linear BN/act terms dilute it slightly)
    const double ratio = static_cast<double>(twice.total_flops) / static_cast<double>(base.total_flops);
    CHECK(ratio > 3.7);
    CHECK(ratio <= 4.0);

    CHECK_THROWS_AS(model_cost(arch, ChannelConfig{16, 16}, 32), std::invalid_argument);
}

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <set>

#include "lwdna/arch.hpp"

using namespace lwdna;

TEST_CASE("vgg11 configuration constant") {
    CHECK(vgg11_config() == ChannelConfig{64, 128, 256, 256, 512, 512, 512, 512});
}

TEST_CASE("builders and structural properties") {
    const ArchSpec vgg = build("vgg-tiny", 10, 32);
    CHECK(vgg.num_layers() == 6);
    CHECK(vgg.default_config == ChannelConfig{16, 16, 32, 32, 64, 64});

    const ArchSpec mob = build("mobile-tiny", 10, 32);
    // every depthwise layer is immediately followed by a pointwise conv
    for (int l = 0; l < mob.num_layers(); ++l)
        if (mob.layers[l].kind == LayerKind::Depthwise) {
            REQUIRE(l + 1 < mob.num_layers());
            CHECK(mob.layers[l + 1].kind == LayerKind::Conv);
            CHECK(mob.layers[l + 1].kernel == 1);
            CHECK(mob.layers[l + 1].inputs == std::vector<int>{l});
            // its channels track the producing latent
            CHECK(mob.layers[l].latent_group == mob.layers[mob.layers[l].inputs[0]].latent_group);
        }
    CHECK(mob.layers[0].latent_group == mob.layers[1].latent_group);

    const ArchSpec res = build("resnet-tiny", 10, 32);
    CHECK(res.num_layers() == 15);
    // every residual join shares the stream's latent group
    for (int l = 0; l < res.num_layers(); ++l)
        if (res.layers[l].add_from >= 0)
            CHECK(res.layers[l].latent_group == res.layers[res.layers[l].add_from].latent_group);
    // three streams + stem/inner groups; stage streams hold 3 members each
    std::set<int> stream_groups;
    for (int l = 0; l < res.num_layers(); ++l)
        if (res.layers[l].add_from >= 0) stream_groups.insert(res.layers[l].latent_group);
    CHECK(stream_groups.size() == 3);

    CHECK_THROWS_AS(build("vgg19", 10, 32), std::invalid_argument);
}

TEST_CASE("widen") {
    const ArchSpec vgg = build("vgg-tiny", 10, 32);
    CHECK(widen(vgg.default_config, 1.0, vgg) == vgg.default_config);

    ArchSpec two;
    two.name = "two";
    two.input_channels = 3;
    two.num_classes = 10;
    LayerDesc d;
    d.inputs = {-1};
    d.latent_group = 0;
    two.layers.push_back(d);
    d.inputs = {0};
    d.latent_group = 1;
    two.layers.push_back(d);
    two.default_config = {64, 128};
    two.head_inputs = {1};
    CHECK(widen({64, 128}, 0.5, two) == ChannelConfig{32, 64});

    // vgg11 doubling
    ArchSpec chain;
    chain.name = "vgg11ish";
    chain.input_channels = 3;
    chain.num_classes = 10;
    for (int l = 0; l < 8; ++l) {
        LayerDesc c;
        c.inputs = {l - 1};
        c.latent_group = l;
        chain.layers.push_back(c);
    }
    chain.default_config = vgg11_config();
    chain.head_inputs = {7};
    CHECK(widen(vgg11_config(), 2.0, chain) ==
          ChannelConfig{128, 256, 512, 512, 1024, 1024, 1024, 1024});

    // rounding: half away from zero, floor of 1
    CHECK(widen({2, 10}, 1.25, two) == ChannelConfig{3, 13});   // 2.5 -> 3, 12.5 -> 13
    CHECK(widen({1, 1}, 0.2, two) == ChannelConfig{1, 1});

    // composition up to rounding
    Rng rng(4);
    for (int trial = 0; trial < 50; ++trial) {
        const double a = 1.0 + rng.uniform();
        const double b = 1.0 + rng.uniform();
        ChannelConfig base{rng.uniform_int(2, 64), rng.uniform_int(2, 64)};
        const ChannelConfig once = widen(widen(base, a, two), b, two);
        const ChannelConfig direct = widen(base, a * b, two);
        for (size_t i = 0; i < base.size(); ++i)
            CHECK(std::abs(once[i] - direct[i]) <= 1 + static_cast<int>(b));
    }

    CHECK_THROWS_AS(widen({4, 4}, -1.0, two), std::invalid_argument);
}

TEST_CASE("widen-compose stays within one rounding step for gentle factors") {
    ArchSpec two;
    two.name = "two";
    two.input_channels = 3;
    two.num_classes = 10;
    LayerDesc d;
    d.inputs = {-1};
    d.latent_group = 0;
    two.layers.push_back(d);
    d.inputs = {0};
    d.latent_group = 1;
    two.layers.push_back(d);
    two.default_config = {8, 8};
    two.head_inputs = {1};
    // widen(widen(c,a),b) == widen(c,a*b) +- 1 per entry
    for (int c0 = 3; c0 <= 40; ++c0) {
        const ChannelConfig base{c0, c0};
        const ChannelConfig once = widen(widen(base, 2.0, two), 1.5, two);
        const ChannelConfig direct = widen(base, 3.0, two);
        for (size_t i = 0; i < base.size(); ++i) CHECK(std::abs(once[i] - direct[i]) <= 1);
    }
}

TEST_CASE("json round trip is lossless") {
    for (const char* name : {"vgg-tiny", "resnet-tiny", "mobile-tiny", "resnet56", "densenet40"}) {
        const ArchSpec a = build(name, 10, 32);
        const std::string j = arch_to_json(a);
        const ArchSpec b = arch_from_json(j);
        CHECK(b.name == a.name);
        CHECK(b.default_config == a.default_config);
        CHECK(b.head_inputs == a.head_inputs);
        CHECK(b.num_layers() == a.num_layers());
        CHECK(arch_to_json(b) == j);   // byte-identical re-serialization
    }
}

TEST_CASE("config validation") {
    const ArchSpec res = build("resnet-tiny", 10, 32);
    ChannelConfig broken = res.default_config;
    broken[res.num_layers() - 1] += 1;   // breaks the stage-3 stream width
    CHECK_THROWS_AS(validate_config(res, broken), std::invalid_argument);

    ChannelConfig negative = res.default_config;
    negative[0] = 0;
    CHECK_THROWS_AS(validate_config(res, negative), std::invalid_argument);

    const ArchSpec mob = build("mobile-tiny", 10, 32);
    ChannelConfig dw_broken = mob.default_config;
    dw_broken[1] += 1;   // depthwise must match its input width
    CHECK_THROWS_AS(validate_config(mob, dw_broken), std::invalid_argument);
}

TEST_CASE("deterministic builds") {
    const std::string a = arch_to_json(build("resnet56", 10, 32));
    const std::string b = arch_to_json(build("resnet56", 10, 32));
    CHECK(a == b);
}

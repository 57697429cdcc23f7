#include "lwdna/arch.hpp"

#include <cmath>
#include <map>
#include <stdexcept>

#include "json.hpp"

namespace lwdna {

namespace {

LayerDesc conv(int kernel, int stride, int padding, std::vector<int> inputs, int group,
               BnPlace bn = BnPlace::Post, bool relu = true, int add_from = -1) {
    LayerDesc d;
    d.kind = LayerKind::Conv;
    d.kernel = kernel;
    d.stride = stride;
    d.padding = padding;
    d.bn = bn;
    d.relu = relu;
    d.inputs = std::move(inputs);
    d.add_from = add_from;
    d.latent_group = group;
    return d;
}

LayerDesc depthwise(int stride, std::vector<int> inputs, int group) {
    LayerDesc d = conv(3, stride, 1, std::move(inputs), group);
    d.kind = LayerKind::Depthwise;
    return d;
}

ArchSpec build_vgg_tiny(int num_classes, int input_hw, int input_channels) {
    ArchSpec a;
    a.name = "vgg-tiny";
    a.input_channels = input_channels;
    a.input_hw = input_hw;
    a.num_classes = num_classes;
    const int widths[6] = {16, 16, 32, 32, 64, 64};
    const int strides[6] = {1, 2, 1, 2, 1, 2};
    for (int l = 0; l < 6; ++l) {
        a.layers.push_back(conv(3, strides[l], 1, {l - 1}, l));
        a.default_config.push_back(widths[l]);
    }
    a.head_inputs = {5};
    return a;
}

// Basic-block residual net; projection shortcut at the first block of each
// downsampling stage. All conv outputs summed on a stage's stream share one
// latent group.
ArchSpec build_resnet(const std::string& name, int blocks_per_stage, int num_classes,
                      int input_hw, int input_channels) {
    ArchSpec a;
    a.name = name;
    a.input_channels = input_channels;
    a.input_hw = input_hw;
    a.num_classes = num_classes;
    const int widths[3] = {16, 32, 64};
    int next_group = 0;

    const int stream0 = next_group++;
    a.layers.push_back(conv(3, 1, 1, {-1}, stream0));
    a.default_config.push_back(widths[0]);

    int block_in = 0;            // layer index feeding the next block
    int stream = stream0;
    for (int s = 0; s < 3; ++s) {
        for (int b = 0; b < blocks_per_stage; ++b) {
            const bool down = (b == 0 && s > 0);
            int shortcut = block_in;
            if (down) {
                stream = next_group++;
                a.layers.push_back(conv(1, 2, 0, {block_in}, stream, BnPlace::Post, false));
                a.default_config.push_back(widths[s]);
                shortcut = static_cast<int>(a.layers.size()) - 1;
            }
            const int c1_group = next_group++;
            a.layers.push_back(conv(3, down ? 2 : 1, 1, {block_in}, c1_group));
            a.default_config.push_back(widths[s]);
            const int c1 = static_cast<int>(a.layers.size()) - 1;
            a.layers.push_back(conv(3, 1, 1, {c1}, stream, BnPlace::Post, true, shortcut));
            a.default_config.push_back(widths[s]);
            block_in = static_cast<int>(a.layers.size()) - 1;
        }
    }
    a.head_inputs = {block_in};
    return a;
}

ArchSpec build_mobile_tiny(int num_classes, int input_hw, int input_channels) {
    ArchSpec a;
    a.name = "mobile-tiny";
    a.input_channels = input_channels;
    a.input_hw = input_hw;
    a.num_classes = num_classes;
    int next_group = 0;

    int g = next_group++;
    a.layers.push_back(conv(3, 1, 1, {-1}, g));
    a.default_config.push_back(16);

    const int pw_widths[4] = {32, 64, 64, 128};
    const int dw_strides[4] = {1, 2, 1, 2};
    int prev = 0;
    int prev_width = 16;
    for (int b = 0; b < 4; ++b) {
        // depthwise inherits the preceding layer's latent group: its channels
        // exist exactly when the incoming channels do
        a.layers.push_back(depthwise(dw_strides[b], {prev}, g));
        a.default_config.push_back(prev_width);
        const int dw = static_cast<int>(a.layers.size()) - 1;
        g = next_group++;
        a.layers.push_back(conv(1, 1, 0, {dw}, g));
        a.default_config.push_back(pw_widths[b]);
        prev = static_cast<int>(a.layers.size()) - 1;
        prev_width = pw_widths[b];
    }
    a.head_inputs = {prev};
    return a;
}

// Pre-activation dense net, growth 12, three 12-layer blocks, 1x1 transition
// convs with 2x2 average pooling, stem of 2*growth channels. Used by the
// complexity counter; the execution path does not support concat inputs.
ArchSpec build_densenet40(int num_classes, int input_hw, int input_channels) {
    ArchSpec a;
    a.name = "densenet40";
    a.input_channels = input_channels;
    a.input_hw = input_hw;
    a.num_classes = num_classes;
    const int growth = 12;
    int next_group = 0;

    a.layers.push_back(conv(3, 1, 1, {-1}, next_group++, BnPlace::None, false));
    a.default_config.push_back(2 * growth);

    std::vector<int> carry = {0};   // layer outputs concatenated so far
    for (int blk = 0; blk < 3; ++blk) {
        for (int i = 0; i < 12; ++i) {
            LayerDesc d = conv(3, 1, 1, carry, next_group++, BnPlace::Pre, true);
            a.layers.push_back(d);
            a.default_config.push_back(growth);
            carry.push_back(static_cast<int>(a.layers.size()) - 1);
        }
        if (blk < 2) {
            int in_ch = 0;
            for (int src : carry) in_ch += a.default_config[static_cast<size_t>(src)];
            LayerDesc t = conv(1, 1, 0, carry, next_group++, BnPlace::Pre, true);
            t.pool_after = PoolAfter::Avg2;
            a.layers.push_back(t);
            a.default_config.push_back(in_ch);
            carry = {static_cast<int>(a.layers.size()) - 1};
        }
    }
    a.head_inputs = carry;
    a.final_bn = true;
    return a;
}

} // namespace

ArchSpec build(const std::string& name, int num_classes, int input_hw, int input_channels) {
    if (input_hw < 1 || num_classes < 1 || input_channels < 1)
        throw std::invalid_argument("build: num_classes, input_hw and input_channels must be positive");
    ArchSpec a;
    if (name == "vgg-tiny")
        a = build_vgg_tiny(num_classes, input_hw, input_channels);
    else if (name == "resnet-tiny")
        a = build_resnet("resnet-tiny", 2, num_classes, input_hw, input_channels);
    else if (name == "mobile-tiny")
        a = build_mobile_tiny(num_classes, input_hw, input_channels);
    else if (name == "resnet56")
        a = build_resnet("resnet56", 9, num_classes, input_hw, input_channels);
    else if (name == "densenet40")
        a = build_densenet40(num_classes, input_hw, input_channels);
    else
        throw std::invalid_argument("build: unknown architecture '" + name + "'");
    validate_config(a, a.default_config);
    return a;
}

ChannelConfig vgg11_config() {
    return {64, 128, 256, 256, 512, 512, 512, 512};
}

ChannelConfig widen(const ChannelConfig& config, double beta, const ArchSpec& arch) {
    if (beta <= 0.0)
        throw std::invalid_argument("widen: beta must be positive");
    if (config.size() != arch.layers.size())
        throw std::invalid_argument("widen: config length " + std::to_string(config.size()) +
                                    " vs " + std::to_string(arch.layers.size()) + " layers");
    ChannelConfig out = config;
    for (size_t l = 0; l < config.size(); ++l) {
        if (!arch.layers[l].prunable) continue;
        long long v = std::llround(beta * config[l]);   // llround: half away from zero
        out[l] = static_cast<int>(std::max(1LL, v));
    }
    return out;
}

int layer_in_channels(const ArchSpec& arch, const ChannelConfig& config, int layer) {
    int sum = 0;
    for (int src : arch.layers[static_cast<size_t>(layer)].inputs)
        sum += src < 0 ? arch.input_channels : config[static_cast<size_t>(src)];
    return sum;
}

int head_in_features(const ArchSpec& arch, const ChannelConfig& config) {
    int sum = 0;
    for (int src : arch.head_inputs) sum += config[static_cast<size_t>(src)];
    return sum;
}

void validate_config(const ArchSpec& arch, const ChannelConfig& config) {
    const int L = arch.num_layers();
    if (static_cast<int>(config.size()) != L)
        throw std::invalid_argument("config length " + std::to_string(config.size()) +
                                    " does not match " + std::to_string(L) + " layers");
    for (int l = 0; l < L; ++l) {
        const LayerDesc& d = arch.layers[static_cast<size_t>(l)];
        if (config[static_cast<size_t>(l)] < 1)
            throw std::invalid_argument("layer " + std::to_string(l) + ": channel count must be >= 1");
        for (int src : d.inputs)
            if (src < -1 || src >= l)
                throw std::invalid_argument("layer " + std::to_string(l) + ": input " + std::to_string(src) +
                                            " breaks topological order");
        if (d.add_from >= l || d.add_from < -1)
            throw std::invalid_argument("layer " + std::to_string(l) + ": bad residual source");
        if (d.kind == LayerKind::Depthwise &&
            layer_in_channels(arch, config, l) != config[static_cast<size_t>(l)])
            throw std::invalid_argument("layer " + std::to_string(l) + ": depthwise output channels " +
                                        std::to_string(config[static_cast<size_t>(l)]) + " must equal input channels " +
                                        std::to_string(layer_in_channels(arch, config, l)));
        if (d.add_from >= 0 &&
            config[static_cast<size_t>(d.add_from)] != config[static_cast<size_t>(l)])
            throw std::invalid_argument("layer " + std::to_string(l) + ": residual join widths differ");
    }
    // latent-group members must agree on width
    std::map<int, int> group_width;
    for (int l = 0; l < L; ++l) {
        const int g = arch.layers[static_cast<size_t>(l)].latent_group;
        auto [it, fresh] = group_width.emplace(g, config[static_cast<size_t>(l)]);
        if (!fresh && it->second != config[static_cast<size_t>(l)])
            throw std::invalid_argument("layer " + std::to_string(l) + ": width " +
                                        std::to_string(config[static_cast<size_t>(l)]) +
                                        " disagrees with latent group " + std::to_string(g));
    }
    if (arch.head_inputs.empty())
        throw std::invalid_argument("arch has no classifier head input");
}

std::vector<std::vector<int>> latent_groups(const ArchSpec& arch) {
    std::vector<std::vector<int>> groups;
    std::map<int, size_t> index_of;
    for (int l = 0; l < arch.num_layers(); ++l) {
        const int g = arch.layers[static_cast<size_t>(l)].latent_group;
        auto it = index_of.find(g);
        if (it == index_of.end()) {
            index_of.emplace(g, groups.size());
            groups.push_back({l});
        } else {
            groups[it->second].push_back(l);
        }
    }
    return groups;
}

namespace {

const char* kind_str(LayerKind k) { return k == LayerKind::Conv ? "conv" : "depthwise"; }
const char* bn_str(BnPlace b) { return b == BnPlace::None ? "none" : (b == BnPlace::Pre ? "pre" : "post"); }
const char* pool_str(PoolAfter p) { return p == PoolAfter::None ? "none" : "avg2"; }

LayerKind kind_from(const std::string& s) {
    if (s == "conv") return LayerKind::Conv;
    if (s == "depthwise") return LayerKind::Depthwise;
    throw std::invalid_argument("unknown layer kind '" + s + "'");
}

BnPlace bn_from(const std::string& s) {
    if (s == "none") return BnPlace::None;
    if (s == "pre") return BnPlace::Pre;
    if (s == "post") return BnPlace::Post;
    throw std::invalid_argument("unknown bn placement '" + s + "'");
}

PoolAfter pool_from(const std::string& s) {
    if (s == "none") return PoolAfter::None;
    if (s == "avg2") return PoolAfter::Avg2;
    throw std::invalid_argument("unknown pool kind '" + s + "'");
}

} // namespace

std::string arch_to_json(const ArchSpec& arch) {
    nlohmann::json j;
    j["name"] = arch.name;
    j["input_channels"] = arch.input_channels;
    j["input_hw"] = arch.input_hw;
    j["num_classes"] = arch.num_classes;
    j["default_config"] = arch.default_config;
    j["head_inputs"] = arch.head_inputs;
    j["final_bn"] = arch.final_bn;
    j["head_bias"] = arch.head_bias;
    nlohmann::json layers = nlohmann::json::array();
    for (const LayerDesc& d : arch.layers) {
        nlohmann::json l;
        l["kind"] = kind_str(d.kind);
        l["kernel"] = d.kernel;
        l["stride"] = d.stride;
        l["padding"] = d.padding;
        l["bias"] = d.bias;
        l["bn"] = bn_str(d.bn);
        l["relu"] = d.relu;
        l["inputs"] = d.inputs;
        l["add_from"] = d.add_from;
        l["latent_group"] = d.latent_group;
        l["prunable"] = d.prunable;
        l["pool_after"] = pool_str(d.pool_after);
        layers.push_back(l);
    }
    j["layers"] = layers;
    return j.dump(2);
}

ArchSpec arch_from_json(const std::string& text) {
    nlohmann::json j = nlohmann::json::parse(text);
    ArchSpec a;
    a.name = j.at("name").get<std::string>();
    a.input_channels = j.at("input_channels").get<int>();
    a.input_hw = j.at("input_hw").get<int>();
    a.num_classes = j.at("num_classes").get<int>();
    a.default_config = j.at("default_config").get<ChannelConfig>();
    a.head_inputs = j.at("head_inputs").get<std::vector<int>>();
    a.final_bn = j.at("final_bn").get<bool>();
    a.head_bias = j.at("head_bias").get<bool>();
    for (const auto& l : j.at("layers")) {
        LayerDesc d;
        d.kind = kind_from(l.at("kind").get<std::string>());
        d.kernel = l.at("kernel").get<int>();
        d.stride = l.at("stride").get<int>();
        d.padding = l.at("padding").get<int>();
        d.bias = l.at("bias").get<bool>();
        d.bn = bn_from(l.at("bn").get<std::string>());
        d.relu = l.at("relu").get<bool>();
        d.inputs = l.at("inputs").get<std::vector<int>>();
        d.add_from = l.at("add_from").get<int>();
        d.latent_group = l.at("latent_group").get<int>();
        d.prunable = l.at("prunable").get<bool>();
        d.pool_after = pool_from(l.at("pool_after").get<std::string>());
        a.layers.push_back(d);
    }
    validate_config(a, a.default_config);
    return a;
}

} // namespace lwdna

#pragma once

#include <string>
#include <vector>

#include "lwdna/tensor.hpp"

namespace lwdna {

/// Per-layer output-channel counts, one entry per conv/depthwise layer.
using ChannelConfig = std::vector<int>;

enum class LayerKind { Conv, Depthwise };

/// Where batch normalization (and the activation) sits relative to the conv:
/// Post = conv -> BN -> (residual add) -> ReLU; Pre = BN -> ReLU -> conv.
enum class BnPlace { None, Pre, Post };

enum class PoolAfter { None, Avg2 };

struct LayerDesc {
    LayerKind kind = LayerKind::Conv;
    int kernel = 3;
    int stride = 1;
    int padding = 1;
    bool bias = false;
    BnPlace bn = BnPlace::Post;
    bool relu = true;
    std::vector<int> inputs{-1};   // feeding layer indices; -1 = network input;
                                   // more than one entry = channel concat
    int add_from = -1;             // residual partner layer, or -1
    int latent_group = 0;          // layers with equal group share one output latent
    bool prunable = true;
    PoolAfter pool_after = PoolAfter::None;
};

/// Layer graph plus the classifier head (global average pool + linear).
struct ArchSpec {
    std::string name;
    int input_channels = 3;
    int input_hw = 32;             // default evaluation resolution
    int num_classes = 10;
    std::vector<LayerDesc> layers;
    ChannelConfig default_config;
    std::vector<int> head_inputs;  // layer outputs concatenated into the head
    bool final_bn = false;         // BN+ReLU on the head input (pre-activation nets)
    bool head_bias = true;

    int num_layers() const { return static_cast<int>(layers.size()); }
};

/// Known architectures: vgg-tiny, resnet-tiny, mobile-tiny, resnet56, densenet40.
ArchSpec build(const std::string& name, int num_classes, int input_hw, int input_channels = 3);

/// The classic 8-conv VGG11 channel configuration.
ChannelConfig vgg11_config();

/// Scale every prunable entry to round(beta * c), rounding half away from
/// zero, floored at 1. Entries tied to a shared latent stay consistent
/// because group members carry equal baseline widths.
ChannelConfig widen(const ChannelConfig& config, double beta, const ArchSpec& arch);

/// Structural checks: length, positivity, depthwise in==out, equal widths
/// across residual joins and latent groups. Throws on violation.
void validate_config(const ArchSpec& arch, const ChannelConfig& config);

/// Input channel count of a layer under a config (sums concat inputs).
int layer_in_channels(const ArchSpec& arch, const ChannelConfig& config, int layer);

/// Width of the classifier head input.
int head_in_features(const ArchSpec& arch, const ChannelConfig& config);

/// Layer indices grouped by shared output latent, in first-appearance order.
std::vector<std::vector<int>> latent_groups(const ArchSpec& arch);

std::string arch_to_json(const ArchSpec& arch);
ArchSpec arch_from_json(const std::string& text);

} // namespace lwdna

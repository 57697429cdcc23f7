#pragma once

#include "lwdna/arch.hpp"
#include "lwdna/ops.hpp"

namespace lwdna {

/// Parameter bundle consumed by the forward walker. One weight per arch
/// layer; BN tensors are defined only where the layer has BN. Running stats
/// live outside the tape.
struct NetParams {
    std::vector<Tensor> weights;
    std::vector<Tensor> bn_gamma, bn_beta;
    std::vector<std::shared_ptr<std::vector<double>>> bn_rm, bn_rv;
    Tensor head_w, head_b;
};

inline constexpr double kBnEps = 1e-5;
inline constexpr double kBnMomentum = 0.1;

/// Execute the layer graph: conv/depthwise with BN, residual adds, ReLU,
/// global average pooling and the linear head. Rejects concat inputs and
/// final-BN tails (those exist for cost accounting only).
Tensor forward_net(Tape& tape, const ArchSpec& arch, NetParams& params, const Tensor& x,
                   bool train, double bn_eps = kBnEps, double bn_momentum = kBnMomentum);

/// Concrete trainable network: an ArchSpec instantiated at a channel
/// configuration with freshly initialized parameters.
class Model {
public:
    Model(const ArchSpec& arch, ChannelConfig config, uint64_t seed);

    Tensor forward(Tape& tape, const Tensor& x, bool train);

    std::vector<Tensor> parameters();   // trainable tensors, stable order
    int64_t parameter_count() const;

    const ArchSpec& arch() const { return arch_; }
    const ChannelConfig& config() const { return config_; }
    NetParams& params() { return params_; }

    void save(const std::string& path) const;
    static Model load(const std::string& path);

private:
    Model(ArchSpec arch, ChannelConfig config);
    ArchSpec arch_;
    ChannelConfig config_;
    NetParams params_;
};

} // namespace lwdna

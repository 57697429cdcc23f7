#pragma once

#include "lwdna/model.hpp"

namespace lwdna {

/// Trainable vector with one element per output channel of the layers that
/// share it. Zeroing element i removes channel i everywhere the latent is
/// consumed (output row of its layers, input column of downstream layers).
struct Latent {
    int id = -1;
    Tensor values;
    bool prunable = true;
    bool trainable = true;

    int length() const { return static_cast<int>(values.size()); }
};

/// Per-layer weight generator: the grid Z = z_out * z_in^T is lifted per
/// cell through W1 (embedding) and W2 (projection) into a kh x kw kernel.
struct HyperLayer {
    int layer = -1;                  // arch layer index
    std::shared_ptr<Latent> z_out;
    std::shared_ptr<Latent> z_in;
    Tensor w1;                       // (n, c, m); c == 1 for depthwise
    Tensor w2;                       // (n, c, kh*kw, m)
    int kh = 3, kw = 3;
};

/// Keep vectors indexed by latent id; non-prunable latents carry all-true.
using KeepMasks = std::vector<std::vector<bool>>;

/// Plain network materialized from generated weights with pruned rows and
/// columns deleted; runnable through forward_net.
struct ShrunkNet {
    ChannelConfig config;
    NetParams params;
};

class HyperNet {
public:
    /// Widen every prunable layer to round(beta * c) channels and attach
    /// latents plus per-layer generators. beta < 1 and m < 1 are rejected.
    /// Bit-deterministic under seed.
    static HyperNet init(const ArchSpec& arch, double beta, int m, uint64_t seed);

    const ArchSpec& arch() const { return arch_; }
    const ChannelConfig& wide_config() const { return wide_; }
    double beta() const { return beta_; }
    int embed_width() const { return m_; }

    const std::vector<std::shared_ptr<Latent>>& latents() const { return latents_; }
    const std::vector<HyperLayer>& layers() const { return layers_; }
    const std::shared_ptr<Latent>& out_latent(int layer) const;
    const std::shared_ptr<Latent>& head_latent() const;   // feeds the classifier
    NetParams& aux_params() { return aux_; }

    /// Z = z_out * z_in^T for one layer, recorded on the tape.
    Tensor latent_matrix(Tape& tape, int layer) const;

    /// Generated weight tensor (n, c, kh, kw) for one layer, on the tape.
    Tensor generate_weights(Tape& tape, int layer) const;

    /// Full forward pass with generated weights.
    Tensor forward(Tape& tape, const Tensor& x, bool train);

    /// Zero the masked elements of the layer's output latent in place.
    /// Rejected for non-prunable latents.
    void mask_latent(int layer, const std::vector<bool>& keep);

    /// All keep-true masks, one per latent.
    KeepMasks full_masks() const;

    /// Generator parameters (W1+W2 across layers, plus latent lengths).
    int64_t hyper_parameter_count() const;

private:
    ArchSpec arch_;
    ChannelConfig wide_;
    double beta_ = 1.0;
    int m_ = 8;
    std::vector<std::shared_ptr<Latent>> latents_;
    std::vector<HyperLayer> layers_;
    std::shared_ptr<Latent> input_latent_;
    NetParams aux_;
};

/// Delete pruned rows/columns from the generated weights; BN parameters are
/// sliced with their layer and the head weight along its input features.
/// A layer left without channels is rejected by layer id.
ShrunkNet materialize_shrunk(const HyperNet& net, const KeepMasks& masks);

/// Shrunk channel configuration implied by the masks (popcount per layer).
ChannelConfig masked_config(const HyperNet& net, const KeepMasks& masks);

} // namespace lwdna

#include "lwdna/hypernet.hpp"

#include <cmath>
#include <map>
#include <stdexcept>

namespace lwdna {

HyperNet HyperNet::init(const ArchSpec& arch, double beta, int m, uint64_t seed) {
    if (beta < 1.0)
        throw std::invalid_argument("init_hypernet: beta must be >= 1, got " + std::to_string(beta));
    if (m < 1)
        throw std::invalid_argument("init_hypernet: embedding width m must be >= 1, got " + std::to_string(m));

    HyperNet net;
    net.arch_ = arch;
    net.beta_ = beta;
    net.m_ = m;
    net.wide_ = widen(arch.default_config, beta, arch);
    validate_config(arch, net.wide_);

    Rng rng(Rng::derive(seed, 0x687970657273ULL));

    // image channels are never pruned; the first input latent is fixed
    net.input_latent_ = std::make_shared<Latent>();
    net.input_latent_->id = 0;
    net.input_latent_->values = Tensor::full({arch.input_channels}, 1.0, false);
    net.input_latent_->prunable = false;
    net.input_latent_->trainable = false;
    net.latents_.push_back(net.input_latent_);

    std::map<int, std::shared_ptr<Latent>> group_latent;
    const int L = arch.num_layers();
    net.layers_.resize(static_cast<size_t>(L));
    for (int l = 0; l < L; ++l) {
        const LayerDesc& d = arch.layers[static_cast<size_t>(l)];
        if (d.inputs.size() != 1)
            throw std::invalid_argument("init_hypernet: layer " + std::to_string(l) +
                                        " concatenates inputs; architecture cannot be reparameterized");
        const int n = net.wide_[static_cast<size_t>(l)];

        auto it = group_latent.find(d.latent_group);
        std::shared_ptr<Latent> z_out;
        if (it == group_latent.end()) {
            z_out = std::make_shared<Latent>();
            z_out->id = static_cast<int>(net.latents_.size());
            z_out->values = Tensor::randn({n}, rng, 1.0, true);
            z_out->prunable = d.prunable;
            z_out->trainable = true;
            net.latents_.push_back(z_out);
            group_latent.emplace(d.latent_group, z_out);
        } else {
            z_out = it->second;
            if (z_out->length() != n)
                throw std::invalid_argument("init_hypernet: latent group width mismatch at layer " + std::to_string(l));
        }

        std::shared_ptr<Latent> z_in;
        if (d.kind == LayerKind::Depthwise) {
            // weight input dimension is 1; this latent is never shrunk
            z_in = std::make_shared<Latent>();
            z_in->id = static_cast<int>(net.latents_.size());
            z_in->values = Tensor::randn({1}, rng, 1.0, true);
            z_in->prunable = false;
            z_in->trainable = true;
            net.latents_.push_back(z_in);
        } else if (d.inputs[0] < 0) {
            z_in = net.input_latent_;
        } else {
            z_in = net.layers_[static_cast<size_t>(d.inputs[0])].z_out;
        }

        const int c = d.kind == LayerKind::Depthwise ? 1 : z_in->length();
        const int hw = d.kernel * d.kernel;
        HyperLayer& hl = net.layers_[static_cast<size_t>(l)];
        hl.layer = l;
        hl.z_out = z_out;
        hl.z_in = z_in;
        hl.kh = d.kernel;
        hl.kw = d.kernel;
        hl.w1 = Tensor::randn({n, c, m}, rng, 1.0 / std::sqrt(static_cast<double>(m)), true);
        // sized so the generated kernels start near He fan-in scale
        const double sd2 = std::sqrt(2.0 / (static_cast<double>(c) * hw));
        hl.w2 = Tensor::randn({n, c, hw, m}, rng, sd2, true);
    }

    // non-generated parameters: BN affine pairs and the classifier head
    net.aux_.weights.resize(static_cast<size_t>(L));   // filled per forward pass
    net.aux_.bn_gamma.resize(static_cast<size_t>(L));
    net.aux_.bn_beta.resize(static_cast<size_t>(L));
    net.aux_.bn_rm.resize(static_cast<size_t>(L));
    net.aux_.bn_rv.resize(static_cast<size_t>(L));
    for (int l = 0; l < L; ++l) {
        const LayerDesc& d = arch.layers[static_cast<size_t>(l)];
        if (d.bn == BnPlace::None) continue;
        const int bc = d.bn == BnPlace::Pre ? layer_in_channels(arch, net.wide_, l) : net.wide_[static_cast<size_t>(l)];
        net.aux_.bn_gamma[static_cast<size_t>(l)] = Tensor::full({bc}, 1.0, true);
        net.aux_.bn_beta[static_cast<size_t>(l)] = Tensor::zeros({bc}, true);
        net.aux_.bn_rm[static_cast<size_t>(l)] = std::make_shared<std::vector<double>>(static_cast<size_t>(bc), 0.0);
        net.aux_.bn_rv[static_cast<size_t>(l)] = std::make_shared<std::vector<double>>(static_cast<size_t>(bc), 1.0);
    }
    const int f = head_in_features(arch, net.wide_);
    net.aux_.head_w = Tensor::randn({arch.num_classes, f}, rng, std::sqrt(1.0 / f), true);
    net.aux_.head_b = Tensor::zeros({arch.num_classes}, true);
    return net;
}

const std::shared_ptr<Latent>& HyperNet::out_latent(int layer) const {
    if (layer < 0 || layer >= arch_.num_layers())
        throw std::invalid_argument("out_latent: layer " + std::to_string(layer) + " out of range");
    return layers_[static_cast<size_t>(layer)].z_out;
}

const std::shared_ptr<Latent>& HyperNet::head_latent() const {
    return layers_[static_cast<size_t>(arch_.head_inputs[0])].z_out;
}

Tensor HyperNet::latent_matrix(Tape& tape, int layer) const {
    const HyperLayer& hl = layers_[static_cast<size_t>(layer)];
    return outer(tape, hl.z_out->values, hl.z_in->values);
}

Tensor HyperNet::generate_weights(Tape& tape, int layer) const {
    const HyperLayer& hl = layers_[static_cast<size_t>(layer)];
    Tensor Z = outer(tape, hl.z_out->values, hl.z_in->values);
    return kernel_project(tape, Z, hl.w1, hl.w2, hl.kh, hl.kw);
}

Tensor HyperNet::forward(Tape& tape, const Tensor& x, bool train) {
    tape.mark_forward();
    for (int l = 0; l < arch_.num_layers(); ++l)
        aux_.weights[static_cast<size_t>(l)] = generate_weights(tape, l);
    return forward_net(tape, arch_, aux_, x, train);
}

void HyperNet::mask_latent(int layer, const std::vector<bool>& keep) {
    auto& latent = layers_.at(static_cast<size_t>(layer)).z_out;
    if (!latent->prunable)
        throw std::invalid_argument("mask_latent: latent of layer " + std::to_string(layer) + " is not prunable");
    if (static_cast<int>(keep.size()) != latent->length())
        throw std::invalid_argument("mask_latent: mask length " + std::to_string(keep.size()) +
                                    " vs latent length " + std::to_string(latent->length()));
    for (size_t i = 0; i < keep.size(); ++i)
        if (!keep[i]) (*latent->values.data)[i] = 0.0;
}

KeepMasks HyperNet::full_masks() const {
    KeepMasks masks(latents_.size());
    for (size_t i = 0; i < latents_.size(); ++i)
        masks[i].assign(static_cast<size_t>(latents_[i]->length()), true);
    return masks;
}

int64_t HyperNet::hyper_parameter_count() const {
    int64_t n = 0;
    for (const HyperLayer& hl : layers_) n += hl.w1.size() + hl.w2.size();
    for (const auto& z : latents_) n += z->length();
    return n;
}

namespace {

std::vector<int> kept_indices(const std::vector<bool>& keep) {
    std::vector<int> idx;
    for (size_t i = 0; i < keep.size(); ++i)
        if (keep[i]) idx.push_back(static_cast<int>(i));
    return idx;
}

} // namespace

ChannelConfig masked_config(const HyperNet& net, const KeepMasks& masks) {
    if (masks.size() != net.latents().size())
        throw std::invalid_argument("masked_config: " + std::to_string(masks.size()) + " masks for " +
                                    std::to_string(net.latents().size()) + " latents");
    ChannelConfig cfg(static_cast<size_t>(net.arch().num_layers()));
    for (int l = 0; l < net.arch().num_layers(); ++l) {
        const auto& keep = masks[static_cast<size_t>(net.out_latent(l)->id)];
        int count = 0;
        for (bool k : keep) count += k ? 1 : 0;
        if (count < 1)
            throw std::invalid_argument("masked_config: layer " + std::to_string(l) + " retains no channels");
        cfg[static_cast<size_t>(l)] = count;
    }
    return cfg;
}

ShrunkNet materialize_shrunk(const HyperNet& net, const KeepMasks& masks) {
    const ArchSpec& arch = net.arch();
    const int L = arch.num_layers();
    ShrunkNet out;
    out.config = masked_config(net, masks);   // validates non-empty layers

    Tape scratch;
    const NetParams& aux = const_cast<HyperNet&>(net).aux_params();
    out.params.weights.resize(static_cast<size_t>(L));
    out.params.bn_gamma.resize(static_cast<size_t>(L));
    out.params.bn_beta.resize(static_cast<size_t>(L));
    out.params.bn_rm.resize(static_cast<size_t>(L));
    out.params.bn_rv.resize(static_cast<size_t>(L));

    for (int l = 0; l < L; ++l) {
        const LayerDesc& d = arch.layers[static_cast<size_t>(l)];
        const HyperLayer& hl = net.layers()[static_cast<size_t>(l)];
        const Tensor O = net.generate_weights(scratch, l);
        const auto rows = kept_indices(masks[static_cast<size_t>(hl.z_out->id)]);
        const auto cols = kept_indices(masks[static_cast<size_t>(hl.z_in->id)]);
        const int c_wide = O.dim(1), hw = hl.kh * hl.kw;
        Tensor w = Tensor::zeros({static_cast<int>(rows.size()), static_cast<int>(cols.size()), hl.kh, hl.kw}, true);
        for (size_t ri = 0; ri < rows.size(); ++ri)
            for (size_t ci = 0; ci < cols.size(); ++ci) {
                const double* src = O.ptr() + (static_cast<size_t>(rows[ri]) * c_wide + cols[ci]) * hw;
                double* dst = w.ptr() + (ri * cols.size() + ci) * hw;
                for (int p = 0; p < hw; ++p) dst[p] = src[p];
            }
        out.params.weights[static_cast<size_t>(l)] = w;
        scratch.clear();

        if (d.bn != BnPlace::None) {
            const auto& bsel = d.bn == BnPlace::Pre ? cols : rows;
            const int bc = static_cast<int>(bsel.size());
            Tensor g = Tensor::zeros({bc}, true), b = Tensor::zeros({bc}, true);
            auto rm = std::make_shared<std::vector<double>>(static_cast<size_t>(bc));
            auto rv = std::make_shared<std::vector<double>>(static_cast<size_t>(bc));
            for (int i = 0; i < bc; ++i) {
                const size_t s = static_cast<size_t>(bsel[static_cast<size_t>(i)]);
                (*g.data)[static_cast<size_t>(i)] = (*aux.bn_gamma[static_cast<size_t>(l)].data)[s];
                (*b.data)[static_cast<size_t>(i)] = (*aux.bn_beta[static_cast<size_t>(l)].data)[s];
                (*rm)[static_cast<size_t>(i)] = (*aux.bn_rm[static_cast<size_t>(l)])[s];
                (*rv)[static_cast<size_t>(i)] = (*aux.bn_rv[static_cast<size_t>(l)])[s];
            }
            out.params.bn_gamma[static_cast<size_t>(l)] = g;
            out.params.bn_beta[static_cast<size_t>(l)] = b;
            out.params.bn_rm[static_cast<size_t>(l)] = rm;
            out.params.bn_rv[static_cast<size_t>(l)] = rv;
        }
    }

    // head input features follow the last latent's surviving channels
    const auto hsel = kept_indices(masks[static_cast<size_t>(net.head_latent()->id)]);
    const int K = arch.num_classes;
    const int f_wide = static_cast<int>(aux.head_w.size()) / K;
    Tensor hw_t = Tensor::zeros({K, static_cast<int>(hsel.size())}, true);
    for (int k = 0; k < K; ++k)
        for (size_t i = 0; i < hsel.size(); ++i)
            (*hw_t.data)[static_cast<size_t>(k) * hsel.size() + i] =
                (*aux.head_w.data)[static_cast<size_t>(k) * f_wide + static_cast<size_t>(hsel[i])];
    out.params.head_w = hw_t;
    out.params.head_b = aux.head_b.clone();
    out.params.head_b.requires_grad = true;
    return out;
}

} // namespace lwdna

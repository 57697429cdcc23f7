#include "lwdna/model.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace lwdna {

static_assert(std::endian::native == std::endian::little,
              "checkpoint serialization assumes a little-endian host");

Tensor forward_net(Tape& tape, const ArchSpec& arch, NetParams& params, const Tensor& x,
                   bool train, double bn_eps, double bn_momentum) {
    const int L = arch.num_layers();
    if (static_cast<int>(params.weights.size()) != L)
        throw std::invalid_argument("forward_net: " + std::to_string(params.weights.size()) +
                                    " weights for " + std::to_string(L) + " layers");
    if (arch.final_bn)
        throw std::invalid_argument("forward_net: pre-activation final BN is cost-only, arch '" +
                                    arch.name + "' cannot be executed");
    std::vector<Tensor> outs(static_cast<size_t>(L));
    const Tensor none;
    for (int l = 0; l < L; ++l) {
        const LayerDesc& d = arch.layers[static_cast<size_t>(l)];
        if (d.inputs.size() != 1)
            throw std::invalid_argument("forward_net: layer " + std::to_string(l) +
                                        " concatenates inputs; cost-only architecture");
        if (d.pool_after != PoolAfter::None)
            throw std::invalid_argument("forward_net: inter-layer pooling is cost-only");
        if (d.bias)
            throw std::invalid_argument("forward_net: conv biases are not used by this zoo");
        Tensor t = d.inputs[0] < 0 ? x : outs[static_cast<size_t>(d.inputs[0])];
        if (d.bn == BnPlace::Pre) {
            t = batchnorm2d(tape, t, params.bn_gamma[static_cast<size_t>(l)], params.bn_beta[static_cast<size_t>(l)],
                            *params.bn_rm[static_cast<size_t>(l)], *params.bn_rv[static_cast<size_t>(l)],
                            train, bn_eps, bn_momentum);
            if (d.relu) t = relu(tape, t);
        }
        Tensor y = d.kind == LayerKind::Depthwise
                       ? depthwise_conv2d(tape, t, params.weights[static_cast<size_t>(l)], d.stride, d.padding)
                       : conv2d(tape, t, params.weights[static_cast<size_t>(l)], none, d.stride, d.padding);
        if (d.bn == BnPlace::Post)
            y = batchnorm2d(tape, y, params.bn_gamma[static_cast<size_t>(l)], params.bn_beta[static_cast<size_t>(l)],
                            *params.bn_rm[static_cast<size_t>(l)], *params.bn_rv[static_cast<size_t>(l)],
                            train, bn_eps, bn_momentum);
        if (d.add_from >= 0) y = add(tape, y, outs[static_cast<size_t>(d.add_from)]);
        if (d.relu && d.bn != BnPlace::Pre) y = relu(tape, y);
        outs[static_cast<size_t>(l)] = y;
    }
    if (arch.head_inputs.size() != 1)
        throw std::invalid_argument("forward_net: concatenated head inputs are cost-only");
    Tensor h = global_avg_pool(tape, outs[static_cast<size_t>(arch.head_inputs[0])]);
    return linear(tape, h, params.head_w, params.head_b);
}

Model::Model(ArchSpec arch, ChannelConfig config)
    : arch_(std::move(arch)), config_(std::move(config)) {
    validate_config(arch_, config_);
    const int L = arch_.num_layers();
    params_.weights.resize(static_cast<size_t>(L));
    params_.bn_gamma.resize(static_cast<size_t>(L));
    params_.bn_beta.resize(static_cast<size_t>(L));
    params_.bn_rm.resize(static_cast<size_t>(L));
    params_.bn_rv.resize(static_cast<size_t>(L));
    for (int l = 0; l < L; ++l) {
        const LayerDesc& d = arch_.layers[static_cast<size_t>(l)];
        const int n = config_[static_cast<size_t>(l)];
        const int c = d.kind == LayerKind::Depthwise ? 1 : layer_in_channels(arch_, config_, l);
        params_.weights[static_cast<size_t>(l)] = Tensor::zeros({n, c, d.kernel, d.kernel}, true);
        if (d.bn != BnPlace::None) {
            const int bc = d.bn == BnPlace::Pre ? layer_in_channels(arch_, config_, l) : n;
            params_.bn_gamma[static_cast<size_t>(l)] = Tensor::full({bc}, 1.0, true);
            params_.bn_beta[static_cast<size_t>(l)] = Tensor::zeros({bc}, true);
            params_.bn_rm[static_cast<size_t>(l)] = std::make_shared<std::vector<double>>(static_cast<size_t>(bc), 0.0);
            params_.bn_rv[static_cast<size_t>(l)] = std::make_shared<std::vector<double>>(static_cast<size_t>(bc), 1.0);
        }
    }
    const int f = head_in_features(arch_, config_);
    params_.head_w = Tensor::zeros({arch_.num_classes, f}, true);
    params_.head_b = Tensor::zeros({arch_.num_classes}, true);
}

Model::Model(const ArchSpec& arch, ChannelConfig config, uint64_t seed)
    : Model(arch, std::move(config)) {
    Rng rng(Rng::derive(seed, 0x6d6f64656cULL));
    for (int l = 0; l < arch_.num_layers(); ++l) {
        const LayerDesc& d = arch_.layers[static_cast<size_t>(l)];
        Tensor& w = params_.weights[static_cast<size_t>(l)];
        const int fan_in = (d.kind == LayerKind::Depthwise ? 1 : layer_in_channels(arch_, config_, l)) *
                           d.kernel * d.kernel;
        const double sd = std::sqrt(2.0 / fan_in);
        for (auto& v : *w.data) v = rng.normal(0.0, sd);
    }
    const int f = head_in_features(arch_, config_);
    const double sd = std::sqrt(1.0 / f);
    for (auto& v : *params_.head_w.data) v = rng.normal(0.0, sd);
}

Tensor Model::forward(Tape& tape, const Tensor& x, bool train) {
    tape.mark_forward();
    return forward_net(tape, arch_, params_, x, train);
}

std::vector<Tensor> Model::parameters() {
    std::vector<Tensor> ps;
    for (int l = 0; l < arch_.num_layers(); ++l) {
        ps.push_back(params_.weights[static_cast<size_t>(l)]);
        if (params_.bn_gamma[static_cast<size_t>(l)].defined()) {
            ps.push_back(params_.bn_gamma[static_cast<size_t>(l)]);
            ps.push_back(params_.bn_beta[static_cast<size_t>(l)]);
        }
    }
    ps.push_back(params_.head_w);
    ps.push_back(params_.head_b);
    return ps;
}

int64_t Model::parameter_count() const {
    int64_t n = 0;
    for (int l = 0; l < arch_.num_layers(); ++l) {
        n += params_.weights[static_cast<size_t>(l)].size();
        if (params_.bn_gamma[static_cast<size_t>(l)].defined()) {
            n += params_.bn_gamma[static_cast<size_t>(l)].size();
            n += params_.bn_beta[static_cast<size_t>(l)].size();
        }
    }
    n += params_.head_w.size();
    n += params_.head_b.size();
    return n;
}

namespace {

constexpr char kMagic[6] = {'L', 'W', 'D', 'N', 'A', '1'};

void write_u32(std::ofstream& f, uint32_t v) { f.write(reinterpret_cast<const char*>(&v), 4); }
void write_i32(std::ofstream& f, int32_t v) { f.write(reinterpret_cast<const char*>(&v), 4); }
void write_f64s(std::ofstream& f, const std::vector<double>& v) {
    f.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * 8));
}

uint32_t read_u32(std::ifstream& f) {
    uint32_t v = 0;
    f.read(reinterpret_cast<char*>(&v), 4);
    return v;
}

void read_f64s(std::ifstream& f, std::vector<double>& v) {
    f.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(v.size() * 8));
}

} // namespace

void Model::save(const std::string& path) const {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open checkpoint for writing: " + path);
    f.write(kMagic, 6);
    const std::string aj = arch_to_json(arch_);
    write_u32(f, static_cast<uint32_t>(aj.size()));
    f.write(aj.data(), static_cast<std::streamsize>(aj.size()));
    write_u32(f, static_cast<uint32_t>(config_.size()));
    for (int v : config_) write_i32(f, v);
    for (int l = 0; l < arch_.num_layers(); ++l) {
        write_f64s(f, *params_.weights[static_cast<size_t>(l)].data);
        if (params_.bn_gamma[static_cast<size_t>(l)].defined()) {
            write_f64s(f, *params_.bn_gamma[static_cast<size_t>(l)].data);
            write_f64s(f, *params_.bn_beta[static_cast<size_t>(l)].data);
            write_f64s(f, *params_.bn_rm[static_cast<size_t>(l)]);
            write_f64s(f, *params_.bn_rv[static_cast<size_t>(l)]);
        }
    }
    write_f64s(f, *params_.head_w.data);
    write_f64s(f, *params_.head_b.data);
    if (!f) throw std::runtime_error("short write to checkpoint: " + path);
}

Model Model::load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open checkpoint: " + path);
    char magic[6];
    f.read(magic, 6);
    if (!f || std::memcmp(magic, kMagic, 6) != 0)
        throw std::runtime_error("bad checkpoint magic in " + path);
    const uint32_t alen = read_u32(f);
    std::string aj(alen, '\0');
    f.read(aj.data(), static_cast<std::streamsize>(alen));
    ArchSpec arch = arch_from_json(aj);
    const uint32_t clen = read_u32(f);
    ChannelConfig config(clen);
    for (auto& v : config) {
        int32_t x = 0;
        f.read(reinterpret_cast<char*>(&x), 4);
        v = x;
    }
    Model m(std::move(arch), std::move(config));
    for (int l = 0; l < m.arch_.num_layers(); ++l) {
        read_f64s(f, *m.params_.weights[static_cast<size_t>(l)].data);
        if (m.params_.bn_gamma[static_cast<size_t>(l)].defined()) {
            read_f64s(f, *m.params_.bn_gamma[static_cast<size_t>(l)].data);
            read_f64s(f, *m.params_.bn_beta[static_cast<size_t>(l)].data);
            read_f64s(f, *m.params_.bn_rm[static_cast<size_t>(l)]);
            read_f64s(f, *m.params_.bn_rv[static_cast<size_t>(l)]);
        }
    }
    read_f64s(f, *m.params_.head_w.data);
    read_f64s(f, *m.params_.head_b.data);
    if (!f) throw std::runtime_error("truncated checkpoint: " + path);
    return m;
}

} // namespace lwdna

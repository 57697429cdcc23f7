#include "lwdna/data.hpp"

#include <cmath>
#include <fstream>
#include <stdexcept>

namespace lwdna {

IdxArray load_idx(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("load_idx: cannot open " + path);
    auto fail = [&path](size_t offset, const std::string& what) -> void {
        throw std::runtime_error("load_idx: " + what + " at offset " + std::to_string(offset) + " in " + path);
    };

    unsigned char head[4];
    f.read(reinterpret_cast<char*>(head), 4);
    if (f.gcount() != 4) fail(static_cast<size_t>(f.gcount()), "truncated header");
    if (head[0] != 0 || head[1] != 0) fail(0, "bad magic bytes");
    const int dtype = head[2];
    const int ndim = head[3];
    if (dtype != 0x08) fail(2, "unsupported dtype 0x" + std::to_string(dtype) + " (only ubyte 0x08)");
    if (ndim < 1 || ndim > 4) fail(3, "implausible dimension count " + std::to_string(ndim));

    IdxArray arr;
    size_t offset = 4;
    int64_t total = 1;
    for (int i = 0; i < ndim; ++i) {
        unsigned char b[4];
        f.read(reinterpret_cast<char*>(b), 4);
        if (f.gcount() != 4) fail(offset + static_cast<size_t>(f.gcount()), "truncated dimension field");
        const uint32_t d = (static_cast<uint32_t>(b[0]) << 24) | (static_cast<uint32_t>(b[1]) << 16) |
                           (static_cast<uint32_t>(b[2]) << 8) | static_cast<uint32_t>(b[3]);
        arr.dims.push_back(static_cast<int>(d));
        total *= d;
        offset += 4;
    }
    arr.values.resize(static_cast<size_t>(total));
    std::vector<unsigned char> raw(static_cast<size_t>(total));
    f.read(reinterpret_cast<char*>(raw.data()), total);
    if (f.gcount() != total) fail(offset + static_cast<size_t>(f.gcount()), "truncated payload");
    for (size_t i = 0; i < raw.size(); ++i) arr.values[i] = raw[i] / 255.0;
    return arr;
}

Dataset load_idx_dataset(const std::string& images_path, const std::string& labels_path,
                         int num_classes, const std::string& split) {
    IdxArray imgs = load_idx(images_path);
    IdxArray labs = load_idx(labels_path);
    if (labs.dims.size() != 1)
        throw std::runtime_error("load_idx_dataset: label file must be 1-D");
    int N, C, H, W;
    if (imgs.dims.size() == 3) {           // N x H x W, single channel
        N = imgs.dims[0];
        C = 1;
        H = imgs.dims[1];
        W = imgs.dims[2];
    } else if (imgs.dims.size() == 4) {    // N x C x H x W
        N = imgs.dims[0];
        C = imgs.dims[1];
        H = imgs.dims[2];
        W = imgs.dims[3];
    } else {
        throw std::runtime_error("load_idx_dataset: image file must be 3-D or 4-D");
    }
    if (labs.dims[0] != N)
        throw std::runtime_error("load_idx_dataset: " + std::to_string(labs.dims[0]) + " labels for " +
                                 std::to_string(N) + " images");

    Dataset d;
    d.images = Tensor::from({N, C, H, W}, std::move(imgs.values));
    d.labels.resize(static_cast<size_t>(N));
    for (int i = 0; i < N; ++i) {
        const int y = static_cast<int>(std::lround(labs.values[static_cast<size_t>(i)] * 255.0));
        if (y < 0 || y >= num_classes)
            throw std::runtime_error("load_idx_dataset: label " + std::to_string(y) + " outside " +
                                     std::to_string(num_classes) + " classes");
        d.labels[static_cast<size_t>(i)] = y;
    }
    d.num_classes = num_classes;
    d.split = split;
    return d;
}

namespace {

Dataset synth_split(const SynthSpec& spec, const std::vector<Tensor>& templates, Rng& rng,
                    int n, const std::string& split) {
    const int C = spec.channels, H = spec.hw, W = spec.hw;
    Dataset d;
    d.images = Tensor::zeros({n, C, H, W});
    d.labels.resize(static_cast<size_t>(n));
    d.num_classes = spec.num_classes;
    d.split = split;
    const int64_t chw = static_cast<int64_t>(C) * H * W;
    for (int i = 0; i < n; ++i) {
        const int cls = i % spec.num_classes;
        d.labels[static_cast<size_t>(i)] = cls;
        const double* t = templates[static_cast<size_t>(cls)].ptr();
        double* img = d.images.ptr() + static_cast<size_t>(i) * chw;
        for (int64_t e = 0; e < chw; ++e) img[e] = t[e] + rng.normal(0.0, spec.sigma_within);
    }
    return d;
}

} // namespace

std::pair<Dataset, Dataset> synth_dataset(const SynthSpec& spec, uint64_t seed) {
    if (spec.num_classes < 2 || spec.n_train < 1 || spec.n_test < 1 || spec.hw < 1 || spec.channels < 1)
        throw std::invalid_argument("synth_dataset: implausible spec");
    Rng rng(Rng::derive(seed, 0x73796e7468ULL));
    std::vector<Tensor> templates;
    for (int k = 0; k < spec.num_classes; ++k)
        templates.push_back(Tensor::randn({spec.channels, spec.hw, spec.hw}, rng, spec.sigma_between));
    Dataset train = synth_split(spec, templates, rng, spec.n_train, "train");
    Dataset test = synth_split(spec, templates, rng, spec.n_test, "test");
    std::vector<double> mean, sd;
    compute_channel_stats(train, mean, sd);
    normalize(train, mean, sd);
    normalize(test, mean, sd);
    return {std::move(train), std::move(test)};
}

void compute_channel_stats(const Dataset& d, std::vector<double>& mean, std::vector<double>& std_out) {
    const int N = d.size(), C = d.channels();
    const int hw = d.images.dim(2) * d.images.dim(3);
    mean.assign(static_cast<size_t>(C), 0.0);
    std_out.assign(static_cast<size_t>(C), 0.0);
    const int64_t per_channel = static_cast<int64_t>(N) * hw;
    for (int c = 0; c < C; ++c) {
        double s = 0.0;
        for (int i = 0; i < N; ++i) {
            const double* p = d.images.ptr() + (static_cast<size_t>(i) * C + c) * hw;
            for (int e = 0; e < hw; ++e) s += p[e];
        }
        mean[static_cast<size_t>(c)] = s / static_cast<double>(per_channel);
        double v = 0.0;
        for (int i = 0; i < N; ++i) {
            const double* p = d.images.ptr() + (static_cast<size_t>(i) * C + c) * hw;
            for (int e = 0; e < hw; ++e) {
                const double diff = p[e] - mean[static_cast<size_t>(c)];
                v += diff * diff;
            }
        }
        std_out[static_cast<size_t>(c)] = std::sqrt(v / static_cast<double>(per_channel));
        if (std_out[static_cast<size_t>(c)] < 1e-12) std_out[static_cast<size_t>(c)] = 1.0;
    }
}

void normalize(Dataset& d, const std::vector<double>& mean, const std::vector<double>& std_in) {
    const int N = d.size(), C = d.channels();
    if (static_cast<int>(mean.size()) != C || static_cast<int>(std_in.size()) != C)
        throw std::invalid_argument("normalize: stats length does not match channels");
    const int hw = d.images.dim(2) * d.images.dim(3);
    for (int i = 0; i < N; ++i)
        for (int c = 0; c < C; ++c) {
            double* p = d.images.ptr() + (static_cast<size_t>(i) * C + c) * hw;
            for (int e = 0; e < hw; ++e) p[e] = (p[e] - mean[static_cast<size_t>(c)]) / std_in[static_cast<size_t>(c)];
        }
    d.channel_mean = mean;
    d.channel_std = std_in;
}

std::pair<Tensor, std::vector<int>> take_batch(const Dataset& d, const std::vector<int>& indices) {
    const int C = d.channels(), H = d.images.dim(2), W = d.images.dim(3);
    const int64_t chw = static_cast<int64_t>(C) * H * W;
    Tensor batch = Tensor::zeros({static_cast<int>(indices.size()), C, H, W});
    std::vector<int> labels(indices.size());
    for (size_t i = 0; i < indices.size(); ++i) {
        const double* src = d.images.ptr() + static_cast<size_t>(indices[i]) * chw;
        double* dst = batch.ptr() + i * chw;
        for (int64_t e = 0; e < chw; ++e) dst[e] = src[e];
        labels[i] = d.labels[static_cast<size_t>(indices[i])];
    }
    return {std::move(batch), std::move(labels)};
}

Tensor hflip(const Tensor& batch) {
    const int N = batch.dim(0), C = batch.dim(1), H = batch.dim(2), W = batch.dim(3);
    Tensor out = Tensor::zeros(batch.shape);
    for (int i = 0; i < N; ++i)
        for (int c = 0; c < C; ++c)
            for (int y = 0; y < H; ++y) {
                const double* src = batch.ptr() + ((static_cast<size_t>(i) * C + c) * H + y) * W;
                double* dst = out.ptr() + ((static_cast<size_t>(i) * C + c) * H + y) * W;
                for (int x = 0; x < W; ++x) dst[x] = src[W - 1 - x];
            }
    return out;
}

Tensor augment(const Tensor& batch, Rng& rng, bool do_hflip, bool do_pad_crop, int pad) {
    const int N = batch.dim(0), C = batch.dim(1), H = batch.dim(2), W = batch.dim(3);
    Tensor out = batch.clone();
    for (int i = 0; i < N; ++i) {
        const bool flip = do_hflip && rng.uniform() < 0.5;
        int oy = 0, ox = 0;
        if (do_pad_crop) {
            oy = rng.uniform_int(0, 2 * pad);
            ox = rng.uniform_int(0, 2 * pad);
        }
        if (!flip && oy == pad && ox == pad && do_pad_crop) continue;   // identity crop
        if (!flip && !do_pad_crop) continue;
        for (int c = 0; c < C; ++c) {
            const double* src = batch.ptr() + (static_cast<size_t>(i) * C + c) * H * W;
            double* dst = out.ptr() + (static_cast<size_t>(i) * C + c) * H * W;
            for (int y = 0; y < H; ++y)
                for (int x = 0; x < W; ++x) {
                    int sy = y, sx = x;
                    if (do_pad_crop) {
                        sy = y + oy - pad;
                        sx = x + ox - pad;
                    }
                    if (flip) sx = sx < 0 || sx >= W ? sx : W - 1 - sx;
                    dst[y * W + x] = (sy < 0 || sy >= H || sx < 0 || sx >= W) ? 0.0 : src[sy * W + sx];
                }
        }
    }
    return out;
}

} // namespace lwdna

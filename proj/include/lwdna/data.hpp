#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lwdna/tensor.hpp"

namespace lwdna {

/// Raw contents of one IDX file (big-endian header, ubyte payload scaled
/// to [0,1]).
struct IdxArray {
    std::vector<int> dims;
    std::vector<double> values;
};

/// Parses the standard IDX layout: two zero bytes, dtype byte, ndim byte,
/// ndim big-endian u32 dims, payload. Bad magic or truncation is rejected
/// with the offending byte offset.
IdxArray load_idx(const std::string& path);

struct Dataset {
    Tensor images;                 // N x C x H x W
    std::vector<int> labels;
    int num_classes = 0;
    std::string split;
    std::vector<double> channel_mean, channel_std;   // normalization metadata

    int size() const { return images.defined() ? images.dim(0) : 0; }
    int channels() const { return images.dim(1); }
    int hw() const { return images.dim(2); }
};

/// Image file + label file -> dataset (values in [0,1], not yet normalized).
Dataset load_idx_dataset(const std::string& images_path, const std::string& labels_path,
                         int num_classes, const std::string& split);

struct SynthSpec {
    int num_classes = 10;
    int n_train = 512;
    int n_test = 256;
    int channels = 3;
    int hw = 16;
    double sigma_between = 5.0;   // class template spread
    double sigma_within = 1.0;    // per-sample noise
};

/// Gaussian class-template images: sample = template[class] + noise. Labels
/// cycle through the classes so both splits are balanced. Both splits are
/// normalized with the training statistics. Fully seeded.
std::pair<Dataset, Dataset> synth_dataset(const SynthSpec& spec, uint64_t seed);

/// Channel-wise mean/std over a dataset's images.
void compute_channel_stats(const Dataset& d, std::vector<double>& mean, std::vector<double>& std_out);

/// x <- (x - mean) / std per channel; records the stats in the metadata.
void normalize(Dataset& d, const std::vector<double>& mean, const std::vector<double>& std_in);

/// Copy rows `indices` into a fresh batch tensor + label vector.
std::pair<Tensor, std::vector<int>> take_batch(const Dataset& d, const std::vector<int>& indices);

/// Mirror images horizontally (involution).
Tensor hflip(const Tensor& batch);

/// Standard train-time augmentation: per-sample coin-flip mirror and random
/// crop from a zero-padded canvas. Output shape equals input shape.
Tensor augment(const Tensor& batch, Rng& rng, bool do_hflip, bool do_pad_crop, int pad);

} // namespace lwdna

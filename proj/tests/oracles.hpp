// Test-only reference implementations. Everything here is written directly
// from the mathematical definition and stays independent of the library's
// execution paths (im2col, tape closures, binary search).
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <vector>

#include "lwdna/shrink.hpp"
#include "lwdna/tensor.hpp"

namespace oracle {

using lwdna::Tensor;

// sliding-window dot product, no im2col
inline Tensor naive_conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int pad) {
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int n = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    const int Hout = (H + 2 * pad - kh) / stride + 1;
    const int Wout = (W + 2 * pad - kw) / stride + 1;
    Tensor out = Tensor::zeros({N, n, Hout, Wout});
    for (int s = 0; s < N; ++s)
        for (int o = 0; o < n; ++o)
            for (int oy = 0; oy < Hout; ++oy)
                for (int ox = 0; ox < Wout; ++ox) {
                    double sum = bias.defined() ? (*bias.data)[o] : 0.0;
                    for (int c = 0; c < C; ++c)
                        for (int u = 0; u < kh; ++u)
                            for (int v = 0; v < kw; ++v) {
                                const int iy = oy * stride - pad + u;
                                const int ix = ox * stride - pad + v;
                                if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
                                sum += (*x.data)[((static_cast<size_t>(s) * C + c) * H + iy) * W + ix] *
                                       (*w.data)[((static_cast<size_t>(o) * C + c) * kh + u) * kw + v];
                            }
                    (*out.data)[((static_cast<size_t>(s) * n + o) * Hout + oy) * Wout + ox] = sum;
                }
    return out;
}

// grouped convolution with groups == channels
inline Tensor naive_depthwise(const Tensor& x, const Tensor& w, int stride, int pad) {
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int kh = w.dim(2), kw = w.dim(3);
    const int Hout = (H + 2 * pad - kh) / stride + 1;
    const int Wout = (W + 2 * pad - kw) / stride + 1;
    Tensor out = Tensor::zeros({N, C, Hout, Wout});
    for (int s = 0; s < N; ++s)
        for (int c = 0; c < C; ++c)
            for (int oy = 0; oy < Hout; ++oy)
                for (int ox = 0; ox < Wout; ++ox) {
                    double sum = 0.0;
                    for (int u = 0; u < kh; ++u)
                        for (int v = 0; v < kw; ++v) {
                            const int iy = oy * stride - pad + u;
                            const int ix = ox * stride - pad + v;
                            if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
                            sum += (*x.data)[((static_cast<size_t>(s) * C + c) * H + iy) * W + ix] *
                                   (*w.data)[(static_cast<size_t>(c) * kh + u) * kw + v];
                        }
                    (*out.data)[((static_cast<size_t>(s) * C + c) * Hout + oy) * Wout + ox] = sum;
                }
    return out;
}

inline Tensor naive_linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
    const int N = x.dim(0), f = x.dim(1), k = w.dim(0);
    Tensor out = Tensor::zeros({N, k});
    for (int i = 0; i < N; ++i)
        for (int j = 0; j < k; ++j) {
            double sum = bias.defined() ? (*bias.data)[j] : 0.0;
            for (int e = 0; e < f; ++e)
                sum += (*x.data)[static_cast<size_t>(i) * f + e] * (*w.data)[static_cast<size_t>(j) * f + e];
            (*out.data)[static_cast<size_t>(i) * k + j] = sum;
        }
    return out;
}

inline double logsumexp_ce(const Tensor& logits, const std::vector<int>& labels) {
    const int N = logits.dim(0), K = logits.dim(1);
    double total = 0.0;
    for (int i = 0; i < N; ++i) {
        const double* z = logits.ptr() + static_cast<size_t>(i) * K;
        double mx = z[0];
        for (int k = 1; k < K; ++k) mx = std::max(mx, z[k]);
        double s = 0.0;
        for (int k = 0; k < K; ++k) s += std::exp(z[k] - mx);
        total += std::log(s) + mx - z[labels[static_cast<size_t>(i)]];
    }
    return total / N;
}

inline double kd_formula(const Tensor& student, const Tensor& teacher, const std::vector<int>& labels,
                         double lambda, double T) {
    const int N = student.dim(0), K = student.dim(1);
    auto softmax = [K](const double* z, double T_, std::vector<double>& p) {
        double mx = z[0] / T_;
        for (int k = 1; k < K; ++k) mx = std::max(mx, z[k] / T_);
        double s = 0.0;
        for (int k = 0; k < K; ++k) s += std::exp(z[k] / T_ - mx);
        p.resize(static_cast<size_t>(K));
        for (int k = 0; k < K; ++k) p[static_cast<size_t>(k)] = std::exp(z[k] / T_ - mx) / s;
    };
    double kl = 0.0;
    std::vector<double> p, q;
    for (int i = 0; i < N; ++i) {
        softmax(teacher.ptr() + static_cast<size_t>(i) * K, T, p);
        softmax(student.ptr() + static_cast<size_t>(i) * K, T, q);
        for (int k = 0; k < K; ++k)
            if (p[static_cast<size_t>(k)] > 0)
                kl += p[static_cast<size_t>(k)] * (std::log(p[static_cast<size_t>(k)]) - std::log(q[static_cast<size_t>(k)]));
    }
    return (1.0 - lambda) * logsumexp_ce(student, labels) + lambda * T * T * kl / N;
}

// guarded relative error, standard gradcheck form
inline double rel_err(double a, double b) {
    return std::fabs(a - b) / std::max(std::fabs(a) + std::fabs(b), 1e-6);
}

// central finite difference of a re-evaluated scalar function w.r.t. one slot
inline double fd(const std::function<double()>& eval, double* slot, double h = 1e-5) {
    const double saved = *slot;
    *slot = saved + h;
    const double up = eval();
    *slot = saved - h;
    const double down = eval();
    *slot = saved;
    return (up - down) / (2.0 * h);
}

// exhaustive threshold scan: try every candidate cut and keep the
// max-FLOPs configuration that fits the budget
inline lwdna::ThresholdResult scan_threshold(const lwdna::SaliencyMap& scores, const lwdna::Budget& budget,
                                             const lwdna::Floors& floors, const lwdna::HyperNet& net,
                                             int input_hw) {
    std::vector<double> candidates{0.0};
    for (size_t i = 0; i < net.latents().size(); ++i) {
        if (!net.latents()[i]->prunable) continue;
        for (double s : scores.by_latent[i]) candidates.push_back(s);
    }
    double mx = 0.0;
    for (double c : candidates) mx = std::max(mx, c);
    candidates.push_back(std::nextafter(mx, std::numeric_limits<double>::infinity()));
    std::sort(candidates.begin(), candidates.end());
    candidates.erase(std::unique(candidates.begin(), candidates.end()), candidates.end());

    bool found = false;
    lwdna::ThresholdResult best;
    for (double t : candidates) {            // ascending: first fit = max FLOPs
        lwdna::KeepMasks masks = lwdna::build_keep_masks(scores, t, floors, net);
        lwdna::ChannelConfig cfg = lwdna::masked_config(net, masks);
        const int64_t fl = lwdna::model_cost(net.arch(), cfg, input_hw).total_flops;
        if (fl <= budget.target_flops) {
            best.threshold = t;
            best.masks = std::move(masks);
            best.config = std::move(cfg);
            best.flops = fl;
            found = true;
            break;
        }
    }
    if (!found) throw lwdna::InfeasibleBudget(-1, budget.target_flops);
    return best;
}

} // namespace oracle

#include "lwdna/ops.hpp"

#include <cmath>
#include <cstring>
#include <stdexcept>

namespace lwdna {

void matmul_acc(const double* A, const double* B, double* C, int M, int K, int N) {
    for (int i = 0; i < M; ++i) {
        const double* a_row = A + static_cast<size_t>(i) * K;
        double* c_row = C + static_cast<size_t>(i) * N;
        for (int k = 0; k < K; ++k) {
            double a = a_row[k];
            if (a == 0.0) continue;
            const double* b_row = B + static_cast<size_t>(k) * N;
            for (int j = 0; j < N; ++j) c_row[j] += a * b_row[j];
        }
    }
}

void matmul_ABt_acc(const double* A, const double* B, double* C, int M, int K, int N) {
    for (int i = 0; i < M; ++i) {
        const double* a_row = A + static_cast<size_t>(i) * K;
        double* c_row = C + static_cast<size_t>(i) * N;
        for (int j = 0; j < N; ++j) {
            const double* b_row = B + static_cast<size_t>(j) * K;
            double sum = 0.0;
            for (int k = 0; k < K; ++k) sum += a_row[k] * b_row[k];
            c_row[j] += sum;
        }
    }
}

void matmul_AtB_acc(const double* A, const double* B, double* C, int M, int K, int N) {
    for (int k = 0; k < K; ++k) {
        const double* a_row = A + static_cast<size_t>(k) * M;
        const double* b_row = B + static_cast<size_t>(k) * N;
        for (int i = 0; i < M; ++i) {
            double a = a_row[i];
            if (a == 0.0) continue;
            double* c_row = C + static_cast<size_t>(i) * N;
            for (int j = 0; j < N; ++j) c_row[j] += a * b_row[j];
        }
    }
}

namespace {

void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape != b.shape)
        fail_shape(op, "shape mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));
}

bool any_grad(std::initializer_list<const Tensor*> ts) {
    for (const Tensor* t : ts)
        if (t->requires_grad) return true;
    return false;
}

// out.grad may be absent when no loss depended on this node
const std::vector<double>* out_grad(const Tensor& out) {
    return out.grad ? out.grad.get() : nullptr;
}

} // namespace

Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
    check_same_shape("add", a, b);
    Tensor out = Tensor::zeros(a.shape);
    const int64_t n = a.size();
    for (int64_t i = 0; i < n; ++i) (*out.data)[i] = (*a.data)[i] + (*b.data)[i];
    out.requires_grad = any_grad({&a, &b});
    if (out.requires_grad) out.ensure_grad();
    Tensor av = a, bv = b, ov = out;
    out.node_id = tape.record("add", [av, bv, ov]() mutable {
        const auto* g = out_grad(ov);
        if (!g) return;
        if (av.requires_grad) {
            av.ensure_grad();
            for (size_t i = 0; i < g->size(); ++i) (*av.grad)[i] += (*g)[i];
        }
        if (bv.requires_grad) {
            bv.ensure_grad();
            for (size_t i = 0; i < g->size(); ++i) (*bv.grad)[i] += (*g)[i];
        }
    });
    return out;
}

Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
    check_same_shape("mul", a, b);
    Tensor out = Tensor::zeros(a.shape);
    const int64_t n = a.size();
    for (int64_t i = 0; i < n; ++i) (*out.data)[i] = (*a.data)[i] * (*b.data)[i];
    out.requires_grad = any_grad({&a, &b});
    if (out.requires_grad) out.ensure_grad();
    Tensor av = a, bv = b, ov = out;
    out.node_id = tape.record("mul", [av, bv, ov]() mutable {
        const auto* g = out_grad(ov);
        if (!g) return;
        if (av.requires_grad) {
            av.ensure_grad();
            for (size_t i = 0; i < g->size(); ++i) (*av.grad)[i] += (*g)[i] * (*bv.data)[i];
        }
        if (bv.requires_grad) {
            bv.ensure_grad();
            for (size_t i = 0; i < g->size(); ++i) (*bv.grad)[i] += (*g)[i] * (*av.data)[i];
        }
    });
    return out;
}

Tensor scale(Tape& tape, const Tensor& a, double k) {
    Tensor out = Tensor::zeros(a.shape);
    const int64_t n = a.size();
    for (int64_t i = 0; i < n; ++i) (*out.data)[i] = k * (*a.data)[i];
    out.requires_grad = a.requires_grad;
    if (out.requires_grad) out.ensure_grad();
    Tensor av = a, ov = out;
    out.node_id = tape.record("scale", [av, ov, k]() mutable {
        const auto* g = out_grad(ov);
        if (!g || !av.requires_grad) return;
        av.ensure_grad();
        for (size_t i = 0; i < g->size(); ++i) (*av.grad)[i] += k * (*g)[i];
    });
    return out;
}

Tensor sum_all(Tape& tape, const Tensor& a) {
    Tensor out = Tensor::zeros({1});
    double s = 0.0;
    for (double v : *a.data) s += v;
    (*out.data)[0] = s;
    out.requires_grad = a.requires_grad;
    if (out.requires_grad) out.ensure_grad();
    Tensor av = a, ov = out;
    out.node_id = tape.record("sum", [av, ov]() mutable {
        const auto* g = out_grad(ov);
        if (!g || !av.requires_grad) return;
        av.ensure_grad();
        double gs = (*g)[0];
        for (auto& gv : *av.grad) gv += gs;
    });
    return out;
}

Tensor relu(Tape& tape, const Tensor& x) {
    Tensor out = Tensor::zeros(x.shape);
    const int64_t n = x.size();
    for (int64_t i = 0; i < n; ++i) {
        double v = (*x.data)[i];
        (*out.data)[i] = v > 0.0 ? v : 0.0;
    }
    out.requires_grad = x.requires_grad;
    if (out.requires_grad) out.ensure_grad();
    Tensor xv = x, ov = out;
    // subgradient at 0 is 0
    out.node_id = tape.record("relu", [xv, ov]() mutable {
        const auto* g = out_grad(ov);
        if (!g || !xv.requires_grad) return;
        xv.ensure_grad();
        for (size_t i = 0; i < g->size(); ++i)
            if ((*xv.data)[i] > 0.0) (*xv.grad)[i] += (*g)[i];
    });
    return out;
}

namespace {

// col layout: (C*kh*kw) x (Hout*Wout)
void im2col(const double* x, int C, int H, int W, int kh, int kw, int stride, int pad,
            int Hout, int Wout, double* col) {
    const int P = Hout * Wout;
    for (int c = 0; c < C; ++c) {
        const double* xc = x + static_cast<size_t>(c) * H * W;
        for (int u = 0; u < kh; ++u) {
            for (int v = 0; v < kw; ++v) {
                double* row = col + (static_cast<size_t>(c) * kh * kw + u * kw + v) * P;
                int idx = 0;
                for (int oy = 0; oy < Hout; ++oy) {
                    const int iy = oy * stride - pad + u;
                    if (iy < 0 || iy >= H) {
                        for (int ox = 0; ox < Wout; ++ox) row[idx++] = 0.0;
                        continue;
                    }
                    const double* xrow = xc + static_cast<size_t>(iy) * W;
                    for (int ox = 0; ox < Wout; ++ox) {
                        const int ix = ox * stride - pad + v;
                        row[idx++] = (ix >= 0 && ix < W) ? xrow[ix] : 0.0;
                    }
                }
            }
        }
    }
}

void col2im_acc(const double* col, int C, int H, int W, int kh, int kw, int stride, int pad,
                int Hout, int Wout, double* dx) {
    const int P = Hout * Wout;
    for (int c = 0; c < C; ++c) {
        double* dxc = dx + static_cast<size_t>(c) * H * W;
        for (int u = 0; u < kh; ++u) {
            for (int v = 0; v < kw; ++v) {
                const double* row = col + (static_cast<size_t>(c) * kh * kw + u * kw + v) * P;
                int idx = 0;
                for (int oy = 0; oy < Hout; ++oy) {
                    const int iy = oy * stride - pad + u;
                    if (iy < 0 || iy >= H) {
                        idx += Wout;
                        continue;
                    }
                    double* dxrow = dxc + static_cast<size_t>(iy) * W;
                    for (int ox = 0; ox < Wout; ++ox) {
                        const int ix = ox * stride - pad + v;
                        if (ix >= 0 && ix < W) dxrow[ix] += row[idx];
                        ++idx;
                    }
                }
            }
        }
    }
}

} // namespace

Tensor conv2d(Tape& tape, const Tensor& x, const Tensor& w, const Tensor& bias,
              int stride, int padding) {
    if (x.shape.size() != 4 || w.shape.size() != 4)
        fail_shape("conv2d", "expected 4-D input/weight, got " + shape_str(x.shape) + " and " + shape_str(w.shape));
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int n = w.dim(0), wc = w.dim(1), kh = w.dim(2), kw = w.dim(3);
    if (wc != C)
        fail_shape("conv2d", "input has " + std::to_string(C) + " channels but weight expects " + std::to_string(wc));
    if (stride < 1 || padding < 0)
        fail_shape("conv2d", "stride must be >= 1 and padding >= 0");
    if (bias.defined() && (bias.shape.size() != 1 || bias.dim(0) != n))
        fail_shape("conv2d", "bias shape " + shape_str(bias.shape) + " does not match " + std::to_string(n) + " output channels");
    const int Hout = (H + 2 * padding - kh) / stride + 1;
    const int Wout = (W + 2 * padding - kw) / stride + 1;
    if (Hout < 1 || Wout < 1)
        fail_shape("conv2d", "kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
                                 " does not fit input " + shape_str(x.shape) + " at stride " + std::to_string(stride));

    const int K = C * kh * kw;
    const int P = Hout * Wout;
    Tensor out = Tensor::zeros({N, n, Hout, Wout});
    // im2col buffers are kept alive for the backward pass
    auto cols = std::make_shared<std::vector<double>>(static_cast<size_t>(N) * K * P);
    for (int s = 0; s < N; ++s) {
        double* col = cols->data() + static_cast<size_t>(s) * K * P;
        im2col(x.ptr() + static_cast<size_t>(s) * C * H * W, C, H, W, kh, kw, stride, padding, Hout, Wout, col);
        double* y = out.ptr() + static_cast<size_t>(s) * n * P;
        matmul_acc(w.ptr(), col, y, n, K, P);
        if (bias.defined())
            for (int i = 0; i < n; ++i) {
                const double b = (*bias.data)[i];
                double* yr = y + static_cast<size_t>(i) * P;
                for (int p = 0; p < P; ++p) yr[p] += b;
            }
    }
    out.requires_grad = x.requires_grad || w.requires_grad || (bias.defined() && bias.requires_grad);
    if (out.requires_grad) out.ensure_grad();

    Tensor xv = x, wv = w, bv = bias, ov = out;
    out.node_id = tape.record("conv2d", [xv, wv, bv, ov, cols, N, C, H, W, n, kh, kw, stride, padding, Hout, Wout, K, P]() mutable {
        const auto* g = out_grad(ov);
        if (!g) return;
        if (wv.requires_grad) wv.ensure_grad();
        if (xv.requires_grad) xv.ensure_grad();
        if (bv.defined() && bv.requires_grad) bv.ensure_grad();
        std::vector<double> dcol;
        if (xv.requires_grad) dcol.assign(static_cast<size_t>(K) * P, 0.0);
        for (int s = 0; s < N; ++s) {
            const double* gs = g->data() + static_cast<size_t>(s) * n * P;
            const double* col = cols->data() + static_cast<size_t>(s) * K * P;
            if (wv.requires_grad)
                matmul_ABt_acc(gs, col, wv.grad->data(), n, P, K);
            if (bv.defined() && bv.requires_grad)
                for (int i = 0; i < n; ++i) {
                    const double* gr = gs + static_cast<size_t>(i) * P;
                    double sum = 0.0;
                    for (int p = 0; p < P; ++p) sum += gr[p];
                    (*bv.grad)[i] += sum;
                }
            if (xv.requires_grad) {
                std::fill(dcol.begin(), dcol.end(), 0.0);
                matmul_AtB_acc(wv.ptr(), gs, dcol.data(), K, n, P);
                col2im_acc(dcol.data(), C, H, W, kh, kw, stride, padding, Hout, Wout,
                           xv.grad->data() + static_cast<size_t>(s) * C * H * W);
            }
        }
    });
    return out;
}

Tensor depthwise_conv2d(Tape& tape, const Tensor& x, const Tensor& w, int stride, int padding) {
    if (x.shape.size() != 4 || w.shape.size() != 4)
        fail_shape("depthwise_conv2d", "expected 4-D input/weight");
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int n = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    if (w.dim(1) != 1)
        fail_shape("depthwise_conv2d", "weight input-channel dimension must be 1, got " + std::to_string(w.dim(1)));
    if (n != C)
        fail_shape("depthwise_conv2d", std::to_string(n) + " kernels but input has " + std::to_string(C) + " channels");
    if (stride < 1 || padding < 0)
        fail_shape("depthwise_conv2d", "stride must be >= 1 and padding >= 0");
    const int Hout = (H + 2 * padding - kh) / stride + 1;
    const int Wout = (W + 2 * padding - kw) / stride + 1;
    if (Hout < 1 || Wout < 1)
        fail_shape("depthwise_conv2d", "kernel does not fit input");

    Tensor out = Tensor::zeros({N, C, Hout, Wout});
    for (int s = 0; s < N; ++s)
        for (int c = 0; c < C; ++c) {
            const double* xc = x.ptr() + (static_cast<size_t>(s) * C + c) * H * W;
            const double* wc = w.ptr() + static_cast<size_t>(c) * kh * kw;
            double* yc = out.ptr() + (static_cast<size_t>(s) * C + c) * Hout * Wout;
            for (int oy = 0; oy < Hout; ++oy)
                for (int ox = 0; ox < Wout; ++ox) {
                    double sum = 0.0;
                    for (int u = 0; u < kh; ++u) {
                        const int iy = oy * stride - padding + u;
                        if (iy < 0 || iy >= H) continue;
                        for (int v = 0; v < kw; ++v) {
                            const int ix = ox * stride - padding + v;
                            if (ix < 0 || ix >= W) continue;
                            sum += xc[iy * W + ix] * wc[u * kw + v];
                        }
                    }
                    yc[oy * Wout + ox] = sum;
                }
        }
    out.requires_grad = x.requires_grad || w.requires_grad;
    if (out.requires_grad) out.ensure_grad();

    Tensor xv = x, wv = w, ov = out;
    out.node_id = tape.record("depthwise_conv2d", [xv, wv, ov, N, C, H, W, kh, kw, stride, padding, Hout, Wout]() mutable {
        const auto* g = out_grad(ov);
        if (!g) return;
        if (xv.requires_grad) xv.ensure_grad();
        if (wv.requires_grad) wv.ensure_grad();
        for (int s = 0; s < N; ++s)
            for (int c = 0; c < C; ++c) {
                const double* xc = xv.ptr() + (static_cast<size_t>(s) * C + c) * H * W;
                const double* wc = wv.ptr() + static_cast<size_t>(c) * kh * kw;
                const double* gc = g->data() + (static_cast<size_t>(s) * C + c) * Hout * Wout;
                double* dxc = xv.requires_grad ? xv.grad->data() + (static_cast<size_t>(s) * C + c) * H * W : nullptr;
                double* dwc = wv.requires_grad ? wv.grad->data() + static_cast<size_t>(c) * kh * kw : nullptr;
                for (int oy = 0; oy < Hout; ++oy)
                    for (int ox = 0; ox < Wout; ++ox) {
                        const double go = gc[oy * Wout + ox];
                        if (go == 0.0) continue;
                        for (int u = 0; u < kh; ++u) {
                            const int iy = oy * stride - padding + u;
                            if (iy < 0 || iy >= H) continue;
                            for (int v = 0; v < kw; ++v) {
                                const int ix = ox * stride - padding + v;
                                if (ix < 0 || ix >= W) continue;
                                if (dwc) dwc[u * kw + v] += go * xc[iy * W + ix];
                                if (dxc) dxc[iy * W + ix] += go * wc[u * kw + v];
                            }
                        }
                    }
            }
    });
    return out;
}

Tensor batchnorm2d(Tape& tape, const Tensor& x, const Tensor& gamma, const Tensor& beta,
                   std::vector<double>& running_mean, std::vector<double>& running_var,
                   bool train, double eps, double momentum) {
    if (x.shape.size() != 4)
        fail_shape("batchnorm2d", "expected NCHW input, got " + shape_str(x.shape));
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (gamma.size() != C || beta.size() != C)
        fail_shape("batchnorm2d", "gamma/beta length must equal " + std::to_string(C) + " channels, got " +
                                       std::to_string(gamma.size()) + "/" + std::to_string(beta.size()));
    if (static_cast<int>(running_mean.size()) != C || static_cast<int>(running_var.size()) != C)
        fail_shape("batchnorm2d", "running stats length mismatch");

    const int64_t m = static_cast<int64_t>(N) * H * W;   // elements per channel
    const int HW = H * W;
    auto mean = std::make_shared<std::vector<double>>(C, 0.0);
    auto invstd = std::make_shared<std::vector<double>>(C, 0.0);

    if (train) {
        for (int c = 0; c < C; ++c) {
            double s = 0.0;
            for (int b = 0; b < N; ++b) {
                const double* xc = x.ptr() + (static_cast<size_t>(b) * C + c) * HW;
                for (int i = 0; i < HW; ++i) s += xc[i];
            }
            const double mu = s / static_cast<double>(m);
            double v = 0.0;
            for (int b = 0; b < N; ++b) {
                const double* xc = x.ptr() + (static_cast<size_t>(b) * C + c) * HW;
                for (int i = 0; i < HW; ++i) {
                    const double d = xc[i] - mu;
                    v += d * d;
                }
            }
            v /= static_cast<double>(m);
            (*mean)[c] = mu;
            (*invstd)[c] = 1.0 / std::sqrt(v + eps);
            const double unbiased = m > 1 ? v * static_cast<double>(m) / static_cast<double>(m - 1) : v;
            running_mean[c] = (1.0 - momentum) * running_mean[c] + momentum * mu;
            running_var[c] = (1.0 - momentum) * running_var[c] + momentum * unbiased;
        }
    } else {
        for (int c = 0; c < C; ++c) {
            (*mean)[c] = running_mean[c];
            (*invstd)[c] = 1.0 / std::sqrt(running_var[c] + eps);
        }
    }

    Tensor out = Tensor::zeros(x.shape);
    for (int b = 0; b < N; ++b)
        for (int c = 0; c < C; ++c) {
            const double* xc = x.ptr() + (static_cast<size_t>(b) * C + c) * HW;
            double* yc = out.ptr() + (static_cast<size_t>(b) * C + c) * HW;
            const double mu = (*mean)[c], is = (*invstd)[c];
            const double gm = (*gamma.data)[c], bt = (*beta.data)[c];
            for (int i = 0; i < HW; ++i) yc[i] = gm * (xc[i] - mu) * is + bt;
        }
    out.requires_grad = x.requires_grad || gamma.requires_grad || beta.requires_grad;
    if (out.requires_grad) out.ensure_grad();

    Tensor xv = x, gv = gamma, bv = beta, ov = out;
    out.node_id = tape.record("batchnorm2d", [xv, gv, bv, ov, mean, invstd, train, N, C, HW, m]() mutable {
        const auto* g = out_grad(ov);
        if (!g) return;
        const bool need_dx = xv.requires_grad;
        if (need_dx) xv.ensure_grad();
        if (gv.requires_grad) gv.ensure_grad();
        if (bv.requires_grad) bv.ensure_grad();
        for (int c = 0; c < C; ++c) {
            const double mu = (*mean)[c], is = (*invstd)[c];
            const double gm = (*gv.data)[c];
            double sum_g = 0.0, sum_gx = 0.0;
            for (int b = 0; b < N; ++b) {
                const double* xc = xv.ptr() + (static_cast<size_t>(b) * C + c) * HW;
                const double* gc = g->data() + (static_cast<size_t>(b) * C + c) * HW;
                for (int i = 0; i < HW; ++i) {
                    sum_g += gc[i];
                    sum_gx += gc[i] * (xc[i] - mu) * is;
                }
            }
            if (gv.requires_grad) (*gv.grad)[c] += sum_gx;
            if (bv.requires_grad) (*bv.grad)[c] += sum_g;
            if (!need_dx) continue;
            if (train) {
                const double mg = sum_g / static_cast<double>(m);
                const double mgx = sum_gx / static_cast<double>(m);
                for (int b = 0; b < N; ++b) {
                    const double* xc = xv.ptr() + (static_cast<size_t>(b) * C + c) * HW;
                    const double* gc = g->data() + (static_cast<size_t>(b) * C + c) * HW;
                    double* dxc = xv.grad->data() + (static_cast<size_t>(b) * C + c) * HW;
                    for (int i = 0; i < HW; ++i) {
                        const double xhat = (xc[i] - mu) * is;
                        dxc[i] += gm * is * (gc[i] - mg - xhat * mgx);
                    }
                }
            } else {
                for (int b = 0; b < N; ++b) {
                    const double* gc = g->data() + (static_cast<size_t>(b) * C + c) * HW;
                    double* dxc = xv.grad->data() + (static_cast<size_t>(b) * C + c) * HW;
                    for (int i = 0; i < HW; ++i) dxc[i] += gm * is * gc[i];
                }
            }
        }
    });
    return out;
}

Tensor linear(Tape& tape, const Tensor& x, const Tensor& w, const Tensor& bias) {
    if (x.shape.size() != 2 || w.shape.size() != 2)
        fail_shape("linear", "expected 2-D input/weight, got " + shape_str(x.shape) + " and " + shape_str(w.shape));
    const int N = x.dim(0), f = x.dim(1);
    const int k = w.dim(0);
    if (w.dim(1) != f)
        fail_shape("linear", "input features " + std::to_string(f) + " vs weight features " + std::to_string(w.dim(1)));
    if (bias.defined() && bias.size() != k)
        fail_shape("linear", "bias length " + std::to_string(bias.size()) + " vs " + std::to_string(k) + " outputs");

    Tensor out = Tensor::zeros({N, k});
    matmul_ABt_acc(x.ptr(), w.ptr(), out.ptr(), N, f, k);
    if (bias.defined())
        for (int i = 0; i < N; ++i)
            for (int j = 0; j < k; ++j) (*out.data)[static_cast<size_t>(i) * k + j] += (*bias.data)[j];
    out.requires_grad = x.requires_grad || w.requires_grad || (bias.defined() && bias.requires_grad);
    if (out.requires_grad) out.ensure_grad();

    Tensor xv = x, wv = w, bv = bias, ov = out;
    out.node_id = tape.record("linear", [xv, wv, bv, ov, N, f, k]() mutable {
        const auto* g = out_grad(ov);
        if (!g) return;
        if (xv.requires_grad) {
            xv.ensure_grad();
            matmul_acc(g->data(), wv.ptr(), xv.grad->data(), N, k, f);
        }
        if (wv.requires_grad) {
            wv.ensure_grad();
            matmul_AtB_acc(g->data(), xv.ptr(), wv.grad->data(), k, N, f);
        }
        if (bv.defined() && bv.requires_grad) {
            bv.ensure_grad();
            for (int i = 0; i < N; ++i)
                for (int j = 0; j < k; ++j) (*bv.grad)[j] += (*g)[static_cast<size_t>(i) * k + j];
        }
    });
    return out;
}

Tensor global_avg_pool(Tape& tape, const Tensor& x) {
    if (x.shape.size() != 4)
        fail_shape("global_avg_pool", "expected NCHW input, got " + shape_str(x.shape));
    const int N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    Tensor out = Tensor::zeros({N, C});
    for (int b = 0; b < N; ++b)
        for (int c = 0; c < C; ++c) {
            const double* xc = x.ptr() + (static_cast<size_t>(b) * C + c) * HW;
            double s = 0.0;
            for (int i = 0; i < HW; ++i) s += xc[i];
            (*out.data)[static_cast<size_t>(b) * C + c] = s / HW;
        }
    out.requires_grad = x.requires_grad;
    if (out.requires_grad) out.ensure_grad();
    Tensor xv = x, ov = out;
    out.node_id = tape.record("global_avg_pool", [xv, ov, N, C, HW]() mutable {
        const auto* g = out_grad(ov);
        if (!g || !xv.requires_grad) return;
        xv.ensure_grad();
        const double inv = 1.0 / HW;
        for (int b = 0; b < N; ++b)
            for (int c = 0; c < C; ++c) {
                const double gv = (*g)[static_cast<size_t>(b) * C + c] * inv;
                double* dxc = xv.grad->data() + (static_cast<size_t>(b) * C + c) * HW;
                for (int i = 0; i < HW; ++i) dxc[i] += gv;
            }
    });
    return out;
}

namespace {

// row-wise softmax with max subtraction; returns per-row logsumexp
void stable_softmax(const double* z, int K, double* p, double& lse_out) {
    double mx = z[0];
    for (int k = 1; k < K; ++k) mx = std::max(mx, z[k]);
    double s = 0.0;
    for (int k = 0; k < K; ++k) s += std::exp(z[k] - mx);
    const double lse = std::log(s) + mx;
    for (int k = 0; k < K; ++k) p[k] = std::exp(z[k] - lse);
    lse_out = lse;
}

void check_labels(const char* op, const std::vector<int>& labels, int N, int K) {
    if (static_cast<int>(labels.size()) != N)
        fail_shape(op, std::to_string(labels.size()) + " labels for batch of " + std::to_string(N));
    for (int y : labels)
        if (y < 0 || y >= K) fail_shape(op, "label " + std::to_string(y) + " out of range [0," + std::to_string(K) + ")");
}

} // namespace

Tensor cross_entropy(Tape& tape, const Tensor& logits, const std::vector<int>& labels) {
    if (logits.shape.size() != 2)
        fail_shape("cross_entropy", "expected NxK logits, got " + shape_str(logits.shape));
    const int N = logits.dim(0), K = logits.dim(1);
    check_labels("cross_entropy", labels, N, K);

    auto probs = std::make_shared<std::vector<double>>(static_cast<size_t>(N) * K);
    double loss = 0.0;
    for (int i = 0; i < N; ++i) {
        const double* z = logits.ptr() + static_cast<size_t>(i) * K;
        double lse;
        stable_softmax(z, K, probs->data() + static_cast<size_t>(i) * K, lse);
        loss += lse - z[labels[static_cast<size_t>(i)]];
    }
    Tensor out = Tensor::from({1}, {loss / N});
    out.requires_grad = logits.requires_grad;
    if (out.requires_grad) out.ensure_grad();

    Tensor lv = logits, ov = out;
    auto lab = std::make_shared<std::vector<int>>(labels);
    out.node_id = tape.record("cross_entropy", [lv, ov, probs, lab, N, K]() mutable {
        const auto* g = out_grad(ov);
        if (!g || !lv.requires_grad) return;
        lv.ensure_grad();
        const double go = (*g)[0] / N;
        for (int i = 0; i < N; ++i) {
            double* d = lv.grad->data() + static_cast<size_t>(i) * K;
            const double* p = probs->data() + static_cast<size_t>(i) * K;
            for (int k = 0; k < K; ++k) d[k] += go * p[k];
            d[(*lab)[static_cast<size_t>(i)]] -= go;
        }
    });
    return out;
}

Tensor kd_loss(Tape& tape, const Tensor& student_logits, const Tensor& teacher_logits,
               const std::vector<int>& labels, double lambda, double temperature) {
    if (lambda < 0.0 || lambda > 1.0)
        throw std::invalid_argument("kd_loss: lambda must be in [0,1], got " + std::to_string(lambda));
    if (temperature <= 0.0)
        throw std::invalid_argument("kd_loss: temperature must be > 0, got " + std::to_string(temperature));
    if (lambda == 0.0) return cross_entropy(tape, student_logits, labels);

    check_same_shape("kd_loss", student_logits, teacher_logits);
    if (student_logits.shape.size() != 2)
        fail_shape("kd_loss", "expected NxK logits, got " + shape_str(student_logits.shape));
    const int N = student_logits.dim(0), K = student_logits.dim(1);
    check_labels("kd_loss", labels, N, K);

    auto probs = std::make_shared<std::vector<double>>(static_cast<size_t>(N) * K);   // softmax(student)
    auto q = std::make_shared<std::vector<double>>(static_cast<size_t>(N) * K);       // softmax(student/T)
    auto p = std::make_shared<std::vector<double>>(static_cast<size_t>(N) * K);       // softmax(teacher/T)
    std::vector<double> zt(static_cast<size_t>(K));

    double ce = 0.0, kl = 0.0;
    for (int i = 0; i < N; ++i) {
        const double* zs = student_logits.ptr() + static_cast<size_t>(i) * K;
        const double* ztr = teacher_logits.ptr() + static_cast<size_t>(i) * K;
        double lse;
        stable_softmax(zs, K, probs->data() + static_cast<size_t>(i) * K, lse);
        ce += lse - zs[labels[static_cast<size_t>(i)]];

        for (int k = 0; k < K; ++k) zt[static_cast<size_t>(k)] = zs[k] / temperature;
        stable_softmax(zt.data(), K, q->data() + static_cast<size_t>(i) * K, lse);
        for (int k = 0; k < K; ++k) zt[static_cast<size_t>(k)] = ztr[k] / temperature;
        stable_softmax(zt.data(), K, p->data() + static_cast<size_t>(i) * K, lse);

        const double* pi = p->data() + static_cast<size_t>(i) * K;
        const double* qi = q->data() + static_cast<size_t>(i) * K;
        for (int k = 0; k < K; ++k)
            if (pi[k] > 0.0) kl += pi[k] * (std::log(pi[k]) - std::log(qi[k]));
    }
    const double T2 = temperature * temperature;
    const double loss = (1.0 - lambda) * ce / N + lambda * T2 * kl / N;
    Tensor out = Tensor::from({1}, {loss});
    out.requires_grad = student_logits.requires_grad;
    if (out.requires_grad) out.ensure_grad();

    Tensor sv = student_logits, ov = out;
    auto lab = std::make_shared<std::vector<int>>(labels);
    const double T = temperature, lam = lambda;
    out.node_id = tape.record("kd_loss", [sv, ov, probs, q, p, lab, N, K, T, lam]() mutable {
        const auto* g = out_grad(ov);
        if (!g || !sv.requires_grad) return;
        sv.ensure_grad();
        const double go = (*g)[0] / N;
        for (int i = 0; i < N; ++i) {
            double* d = sv.grad->data() + static_cast<size_t>(i) * K;
            const double* pr = probs->data() + static_cast<size_t>(i) * K;
            const double* qi = q->data() + static_cast<size_t>(i) * K;
            const double* pi = p->data() + static_cast<size_t>(i) * K;
            for (int k = 0; k < K; ++k)
                d[k] += go * ((1.0 - lam) * pr[k] + lam * T * (qi[k] - pi[k]));
            d[(*lab)[static_cast<size_t>(i)]] -= go * (1.0 - lam);
        }
    });
    return out;
}

Tensor outer(Tape& tape, const Tensor& a, const Tensor& b) {
    if (a.shape.size() != 1 || b.shape.size() != 1)
        fail_shape("outer", "expected vectors, got " + shape_str(a.shape) + " and " + shape_str(b.shape));
    const int n = a.dim(0), c = b.dim(0);
    Tensor out = Tensor::zeros({n, c});
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < c; ++j)
            (*out.data)[static_cast<size_t>(i) * c + j] = (*a.data)[i] * (*b.data)[j];
    out.requires_grad = a.requires_grad || b.requires_grad;
    if (out.requires_grad) out.ensure_grad();
    Tensor av = a, bv = b, ov = out;
    out.node_id = tape.record("outer", [av, bv, ov, n, c]() mutable {
        const auto* g = out_grad(ov);
        if (!g) return;
        if (av.requires_grad) {
            av.ensure_grad();
            for (int i = 0; i < n; ++i) {
                double s = 0.0;
                for (int j = 0; j < c; ++j) s += (*g)[static_cast<size_t>(i) * c + j] * (*bv.data)[j];
                (*av.grad)[i] += s;
            }
        }
        if (bv.requires_grad) {
            bv.ensure_grad();
            for (int j = 0; j < c; ++j) {
                double s = 0.0;
                for (int i = 0; i < n; ++i) s += (*g)[static_cast<size_t>(i) * c + j] * (*av.data)[i];
                (*bv.grad)[j] += s;
            }
        }
    });
    return out;
}

Tensor kernel_project(Tape& tape, const Tensor& Z, const Tensor& W1, const Tensor& W2,
                      int kh, int kw) {
    if (Z.shape.size() != 2 || W1.shape.size() != 3 || W2.shape.size() != 4)
        fail_shape("kernel_project", "expected Z (n,c), W1 (n,c,m), W2 (n,c,kh*kw,m)");
    const int n = Z.dim(0), c = Z.dim(1);
    const int m = W1.dim(2);
    const int hw = kh * kw;
    if (W1.dim(0) != n || W1.dim(1) != c)
        fail_shape("kernel_project", "W1 shape " + shape_str(W1.shape) + " vs Z " + shape_str(Z.shape));
    if (W2.dim(0) != n || W2.dim(1) != c || W2.dim(2) != hw || W2.dim(3) != m)
        fail_shape("kernel_project", "W2 shape " + shape_str(W2.shape) + " inconsistent with (n,c,kh*kw,m)=(" +
                                         std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(hw) + "," +
                                         std::to_string(m) + ")");

    Tensor out = Tensor::zeros({n, c, kh, kw});
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < c; ++j) {
            const size_t ij = static_cast<size_t>(i) * c + j;
            const double s = (*Z.data)[ij];
            const double* w1 = W1.ptr() + ij * m;
            const double* w2 = W2.ptr() + ij * hw * m;
            double* o = out.ptr() + ij * hw;
            for (int pp = 0; pp < hw; ++pp) {
                double sum = 0.0;
                const double* w2r = w2 + static_cast<size_t>(pp) * m;
                for (int t = 0; t < m; ++t) sum += w2r[t] * w1[t];
                o[pp] = s * sum;
            }
        }
    out.requires_grad = Z.requires_grad || W1.requires_grad || W2.requires_grad;
    if (out.requires_grad) out.ensure_grad();

    Tensor zv = Z, w1v = W1, w2v = W2, ov = out;
    out.node_id = tape.record("kernel_project", [zv, w1v, w2v, ov, n, c, m, hw]() mutable {
        const auto* g = out_grad(ov);
        if (!g) return;
        if (zv.requires_grad) zv.ensure_grad();
        if (w1v.requires_grad) w1v.ensure_grad();
        if (w2v.requires_grad) w2v.ensure_grad();
        std::vector<double> de(static_cast<size_t>(m));
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < c; ++j) {
                const size_t ij = static_cast<size_t>(i) * c + j;
                const double s = (*zv.data)[ij];
                const double* w1 = w1v.ptr() + ij * m;
                const double* w2 = w2v.ptr() + ij * hw * m;
                const double* go = g->data() + ij * hw;
                std::fill(de.begin(), de.end(), 0.0);
                for (int pp = 0; pp < hw; ++pp) {
                    const double gp = go[pp];
                    if (gp == 0.0) continue;
                    const double* w2r = w2 + static_cast<size_t>(pp) * m;
                    for (int t = 0; t < m; ++t) de[static_cast<size_t>(t)] += gp * w2r[t];
                }
                if (w2v.requires_grad) {
                    double* dw2 = w2v.grad->data() + ij * hw * m;
                    for (int pp = 0; pp < hw; ++pp) {
                        const double gp = go[pp];
                        if (gp == 0.0) continue;
                        double* dw2r = dw2 + static_cast<size_t>(pp) * m;
                        for (int t = 0; t < m; ++t) dw2r[t] += gp * s * w1[t];
                    }
                }
                if (w1v.requires_grad) {
                    double* dw1 = w1v.grad->data() + ij * m;
                    for (int t = 0; t < m; ++t) dw1[t] += de[static_cast<size_t>(t)] * s;
                }
                if (zv.requires_grad) {
                    double ds = 0.0;
                    for (int t = 0; t < m; ++t) ds += de[static_cast<size_t>(t)] * w1[t];
                    (*zv.grad)[ij] += ds;
                }
            }
    });
    return out;
}

} // namespace lwdna

#pragma once

#include "lwdna/tensor.hpp"

namespace lwdna {

// Dense helpers, row-major. C is accumulated into.
void matmul_acc(const double* A, const double* B, double* C, int M, int K, int N);      // C(MxN) += A(MxK)*B(KxN)
void matmul_ABt_acc(const double* A, const double* B, double* C, int M, int K, int N);  // C(MxN) += A(MxK)*B(NxK)^T
void matmul_AtB_acc(const double* A, const double* B, double* C, int M, int K, int N);  // C(MxN) += A(KxM)^T*B(KxN)

// Elementwise / reduction ops
Tensor add(Tape& tape, const Tensor& a, const Tensor& b);
Tensor mul(Tape& tape, const Tensor& a, const Tensor& b);
Tensor scale(Tape& tape, const Tensor& a, double k);
Tensor sum_all(Tape& tape, const Tensor& a);
Tensor relu(Tape& tape, const Tensor& x);

/// 2-D convolution, NCHW input, weight (n, c, kh, kw). Pass a
/// default-constructed Tensor for bias to omit it.
Tensor conv2d(Tape& tape, const Tensor& x, const Tensor& w, const Tensor& bias,
              int stride, int padding);

/// Per-channel convolution, weight (n, 1, kh, kw) with n == input channels.
/// Output channel i depends only on input channel i.
Tensor depthwise_conv2d(Tape& tape, const Tensor& x, const Tensor& w,
                        int stride, int padding);

/// Batch normalization over NCHW. Train mode normalizes with batch statistics
/// and updates running stats in place; eval mode reads the running stats.
Tensor batchnorm2d(Tape& tape, const Tensor& x, const Tensor& gamma, const Tensor& beta,
                   std::vector<double>& running_mean, std::vector<double>& running_var,
                   bool train, double eps, double momentum);

Tensor linear(Tape& tape, const Tensor& x, const Tensor& w, const Tensor& bias);

Tensor global_avg_pool(Tape& tape, const Tensor& x);   // NCHW -> NxC

/// Mean softmax cross-entropy, max-stabilized.
Tensor cross_entropy(Tape& tape, const Tensor& logits, const std::vector<int>& labels);

/// (1-lambda)*CE(labels, student) + lambda*T^2*KL(softmax(teacher/T) || softmax(student/T)),
/// mean over the batch. Teacher logits are treated as constants.
Tensor kd_loss(Tape& tape, const Tensor& student_logits, const Tensor& teacher_logits,
               const std::vector<int>& labels, double lambda, double temperature);

/// Outer product of two vectors: Z[i][j] = a[i]*b[j].
Tensor outer(Tape& tape, const Tensor& a, const Tensor& b);

/// Per-grid-cell two-stage projection: for each (i,j), the scalar Z[i][j] is
/// lifted into an m-dimensional embedding by W1[i][j] and projected to a
/// kh*kw kernel by W2[i][j]. Shapes: Z (n,c), W1 (n,c,m), W2 (n,c,kh*kw,m);
/// output (n,c,kh,kw). Linear in each Z entry.
Tensor kernel_project(Tape& tape, const Tensor& Z, const Tensor& W1, const Tensor& W2,
                      int kh, int kw);

} // namespace lwdna

#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace lwdna {

/// Deterministic RNG (splitmix64 core, Box-Muller normals). Pure integer/FP
/// arithmetic so streams are identical across platforms and compilers.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed) {}

    uint64_t next_u64();
    double uniform();                                // [0, 1)
    double normal(double mean = 0.0, double stddev = 1.0);
    int uniform_int(int lo, int hi);                 // inclusive bounds

    /// Derive an independent stream from a base seed and a stream tag.
    static uint64_t derive(uint64_t seed, uint64_t stream);

private:
    uint64_t state_;
};

using Shape = std::vector<int>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

/// Dense row-major f64 tensor. Copies alias the underlying buffers; the
/// grad buffer is allocated lazily on first use.
struct Tensor {
    Shape shape;
    std::shared_ptr<std::vector<double>> data;
    std::shared_ptr<std::vector<double>> grad;
    bool requires_grad = false;
    int node_id = -1;

    Tensor() = default;

    static Tensor zeros(Shape s, bool requires_grad = false);
    static Tensor full(Shape s, double value, bool requires_grad = false);
    static Tensor from(Shape s, std::vector<double> values, bool requires_grad = false);
    static Tensor randn(Shape s, Rng& rng, double stddev = 1.0, bool requires_grad = false);

    bool defined() const { return static_cast<bool>(data); }
    int64_t size() const { return data ? static_cast<int64_t>(data->size()) : 0; }
    int dim(int i) const { return shape[static_cast<size_t>(i)]; }

    double* ptr() { return data->data(); }
    const double* ptr() const { return data->data(); }

    /// Value of a scalar (single-element) tensor.
    double item() const;

    void ensure_grad();
    void zero_grad();
    double* gptr() { return grad->data(); }
    const double* gptr() const { return grad->data(); }

    /// Deep copy of values (fresh buffers, no grad, not recorded).
    Tensor clone() const;
};

/// Reverse-mode tape. Nodes are replayed in exact reverse recording order;
/// forward/backward counters exist so callers can audit how many passes a
/// routine consumed.
class Tape {
public:
    struct Node {
        std::string op;
        std::function<void()> backward;
    };

    /// Record an op; returns the node id assigned to the op's output.
    int record(std::string op, std::function<void()> backward_fn);

    /// Seed d(loss)/d(loss) = 1 and propagate. Rejects non-scalar losses and
    /// repeated invocations without an intervening clear().
    void backward(Tensor& loss);

    void mark_forward() { ++forward_marks_; }
    int forward_marks() const { return forward_marks_; }
    int backward_calls() const { return backward_calls_; }
    size_t num_nodes() const { return nodes_.size(); }

    /// Drop all recorded nodes (grads on leaves are left untouched).
    void clear();

private:
    std::vector<Node> nodes_;
    int forward_marks_ = 0;
    int backward_calls_ = 0;
    bool backward_done_ = false;
};

[[noreturn]] void fail_shape(const std::string& op, const std::string& detail);

} // namespace lwdna

#include "lwdna/tensor.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace lwdna {

namespace {

inline uint64_t splitmix64(uint64_t& x) {
    x += 0x9e3779b97f4a7c15ULL;
    uint64_t z = x;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

} // namespace

uint64_t Rng::next_u64() {
    return splitmix64(state_);
}

double Rng::uniform() {
    // 53 high bits -> double in [0,1)
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::normal(double mean, double stddev) {
    // Box-Muller; u clamped away from 0 so log() stays finite
    double u = uniform();
    if (u < 1e-300) u = 1e-300;
    double v = uniform();
    double r = std::sqrt(-2.0 * std::log(u));
    return mean + stddev * r * std::cos(2.0 * M_PI * v);
}

int Rng::uniform_int(int lo, int hi) {
    if (hi < lo) throw std::invalid_argument("Rng::uniform_int: hi < lo");
    uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
    return lo + static_cast<int>(next_u64() % span);
}

uint64_t Rng::derive(uint64_t seed, uint64_t stream) {
    uint64_t s = seed ^ (0x632be59bd9b4e019ULL * (stream + 1));
    return splitmix64(s);
}

int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "(";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) os << ",";
        os << s[i];
    }
    os << ")";
    return os.str();
}

Tensor Tensor::zeros(Shape s, bool requires_grad) {
    Tensor t;
    t.shape = std::move(s);
    t.data = std::make_shared<std::vector<double>>(static_cast<size_t>(shape_numel(t.shape)), 0.0);
    t.requires_grad = requires_grad;
    // grad storage is created with the tensor so that every alias shares it
    if (requires_grad) t.ensure_grad();
    return t;
}

Tensor Tensor::full(Shape s, double value, bool requires_grad) {
    Tensor t = zeros(std::move(s), requires_grad);
    for (auto& v : *t.data) v = value;
    return t;
}

Tensor Tensor::from(Shape s, std::vector<double> values, bool requires_grad) {
    if (static_cast<int64_t>(values.size()) != shape_numel(s))
        fail_shape("Tensor::from", "value count " + std::to_string(values.size()) +
                                       " does not match shape " + shape_str(s));
    Tensor t;
    t.shape = std::move(s);
    t.data = std::make_shared<std::vector<double>>(std::move(values));
    t.requires_grad = requires_grad;
    if (requires_grad) t.ensure_grad();
    return t;
}

Tensor Tensor::randn(Shape s, Rng& rng, double stddev, bool requires_grad) {
    Tensor t = zeros(std::move(s), requires_grad);
    for (auto& v : *t.data) v = rng.normal(0.0, stddev);
    return t;
}

double Tensor::item() const {
    if (!defined() || data->size() != 1)
        fail_shape("Tensor::item", "tensor is not scalar, shape " + shape_str(shape));
    return (*data)[0];
}

void Tensor::ensure_grad() {
    if (!grad) grad = std::make_shared<std::vector<double>>(data->size(), 0.0);
}

void Tensor::zero_grad() {
    if (grad)
        for (auto& g : *grad) g = 0.0;
}

Tensor Tensor::clone() const {
    Tensor t;
    t.shape = shape;
    t.data = std::make_shared<std::vector<double>>(*data);
    t.requires_grad = requires_grad;
    if (requires_grad) t.ensure_grad();
    return t;
}

int Tape::record(std::string op, std::function<void()> backward_fn) {
    nodes_.push_back(Node{std::move(op), std::move(backward_fn)});
    return static_cast<int>(nodes_.size()) - 1;
}

void Tape::backward(Tensor& loss) {
    if (backward_done_)
        throw std::logic_error("Tape::backward: called twice without clear()");
    if (!loss.defined() || loss.size() != 1)
        fail_shape("Tape::backward", "loss must be scalar, got " + shape_str(loss.shape));
    loss.ensure_grad();
    (*loss.grad)[0] = 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it)
        if (it->backward) it->backward();
    backward_done_ = true;
    ++backward_calls_;
}

void Tape::clear() {
    nodes_.clear();
    backward_done_ = false;
}

void fail_shape(const std::string& op, const std::string& detail) {
    throw std::invalid_argument(op + ": " + detail);
}

} // namespace lwdna

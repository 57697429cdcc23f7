#include "lwdna/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace lwdna {

LrSchedule LrSchedule::step_half_three_quarters(double base_lr, int total_epochs) {
    LrSchedule s;
    s.kind = Kind::Step;
    s.base_lr = base_lr;
    s.total_epochs = total_epochs;
    s.milestones = {total_epochs / 2, total_epochs * 3 / 4};
    s.factor = 0.1;
    return s;
}

LrSchedule LrSchedule::cosine(double base_lr, int total_epochs) {
    LrSchedule s;
    s.kind = Kind::Cosine;
    s.base_lr = base_lr;
    s.total_epochs = total_epochs;
    return s;
}

double lr_at(const LrSchedule& schedule, int epoch) {
    if (schedule.kind == LrSchedule::Kind::Cosine) {
        if (schedule.total_epochs <= 0) return schedule.base_lr;
        return schedule.base_lr * 0.5 * (1.0 + std::cos(M_PI * epoch / schedule.total_epochs));
    }
    double lr = schedule.base_lr;
    for (int ms : schedule.milestones)
        if (epoch >= ms) lr *= schedule.factor;
    return lr;
}

Sgd::Sgd(double lr, double momentum, double weight_decay)
    : lr_(lr), momentum_(momentum), weight_decay_(weight_decay) {
    if (momentum < 0.0 || momentum >= 1.0)
        throw std::invalid_argument("Sgd: momentum must be in [0,1)");
    if (weight_decay < 0.0)
        throw std::invalid_argument("Sgd: weight_decay must be >= 0");
}

void Sgd::step(std::vector<Tensor>& params) {
    if (velocity_.empty()) {
        velocity_.resize(params.size());
        for (size_t i = 0; i < params.size(); ++i)
            velocity_[i].assign(static_cast<size_t>(params[i].size()), 0.0);
    }
    if (velocity_.size() != params.size())
        throw std::logic_error("Sgd::step: param list changed size");
    for (size_t i = 0; i < params.size(); ++i) {
        Tensor& p = params[i];
        if (!p.grad) continue;   // parameter untouched this step
        auto& v = velocity_[i];
        if (v.size() != p.data->size())
            throw std::logic_error("Sgd::step: velocity shape mismatch");
        for (size_t j = 0; j < v.size(); ++j) {
            const double g = (*p.grad)[j] + weight_decay_ * (*p.data)[j];
            v[j] = momentum_ * v[j] + g;
            (*p.data)[j] -= lr_ * v[j];
        }
    }
}

void Sgd::zero_grads(std::vector<Tensor>& params) {
    for (auto& p : params) p.zero_grad();
}

} // namespace lwdna

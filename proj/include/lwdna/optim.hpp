#pragma once

#include "lwdna/tensor.hpp"

namespace lwdna {

struct LrSchedule {
    enum class Kind { Step, Cosine };
    Kind kind = Kind::Step;
    double base_lr = 0.1;
    int total_epochs = 0;
    std::vector<int> milestones;   // Step: epochs at which lr is multiplied by factor
    double factor = 0.1;

    /// Step schedule decayed at 50% and 75% of the epochs.
    static LrSchedule step_half_three_quarters(double base_lr, int total_epochs);
    static LrSchedule cosine(double base_lr, int total_epochs);
};

double lr_at(const LrSchedule& schedule, int epoch);

/// SGD with momentum and coupled weight decay:
///   v <- mu*v + g + wd*p ;  p <- p - lr*v
class Sgd {
public:
    Sgd(double lr, double momentum, double weight_decay);

    void set_lr(double lr) { lr_ = lr; }
    double lr() const { return lr_; }
    double momentum() const { return momentum_; }
    double weight_decay() const { return weight_decay_; }

    /// One update over all params; velocity buffers are keyed by position, so
    /// the param list must be stable across calls.
    void step(std::vector<Tensor>& params);

    static void zero_grads(std::vector<Tensor>& params);

private:
    double lr_, momentum_, weight_decay_;
    std::vector<std::vector<double>> velocity_;
};

} // namespace lwdna

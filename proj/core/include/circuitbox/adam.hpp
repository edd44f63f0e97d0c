#pragma once

#include <cstdint>
#include <vector>

#include "circuitbox/tensor.hpp"

namespace circuitbox {

/// Adam optimizer over a fixed parameter list. Moment buffers are keyed by
/// position in `params`, so the list must not change between steps.
class AdamState {
  public:
    AdamState(std::vector<Tensor> params, double lr, double beta1 = 0.9, double beta2 = 0.999,
              double epsilon = 1e-8);

    /// Applies one bias-corrected update from the accumulated gradients,
    /// then clears them.
    void step();

    void set_lr(double lr) { lr_ = lr; }
    double lr() const { return lr_; }
    std::int64_t step_count() const { return step_count_; }

    const std::vector<Tensor>& params() const { return params_; }

  private:
    std::vector<Tensor> params_;
    std::vector<std::vector<double>> m_;
    std::vector<std::vector<double>> v_;
    double lr_, beta1_, beta2_, epsilon_;
    std::int64_t step_count_ = 0;
};

}  // namespace circuitbox

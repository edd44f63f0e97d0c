#include "circuitbox/adam.hpp"

#include <cmath>

namespace circuitbox {

AdamState::AdamState(std::vector<Tensor> params, double lr, double beta1, double beta2,
                     double epsilon)
    : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), epsilon_(epsilon) {
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (const Tensor& p : params_) {
        m_.emplace_back(p.size(), 0.0);
        v_.emplace_back(p.size(), 0.0);
    }
}

void AdamState::step() {
    ++step_count_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(step_count_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(step_count_));
    for (std::size_t pi = 0; pi < params_.size(); ++pi) {
        Tensor& p = params_[pi];
        if (!p.has_grad()) continue;
        double* w = p.data();
        double* g = p.grad();
        double* m = m_[pi].data();
        double* v = v_[pi].data();
        const std::size_t n = p.size();
        for (std::size_t i = 0; i < n; ++i) {
            if (!std::isfinite(g[i]))
                throw NumericError("adam step saw a non-finite gradient");
            m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
            v[i] = beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i];
            const double mh = m[i] / bc1;
            const double vh = v[i] / bc2;
            w[i] -= lr_ * mh / (std::sqrt(vh) + epsilon_);
        }
        p.zero_grad();
    }
}

}  // namespace circuitbox

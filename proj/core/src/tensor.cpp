#include "circuitbox/tensor.hpp"

#include <cmath>
#include <numeric>
#include <sstream>

namespace circuitbox {

namespace {
thread_local Tape* g_current_tape = nullptr;
}

std::size_t shape_size(const std::vector<int>& shape) {
    std::size_t n = 1;
    for (int e : shape) n *= static_cast<std::size_t>(e);
    return n;
}

std::string shape_str(const std::vector<int>& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
    os << "]";
    return os.str();
}

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
    Tensor t;
    t.d_ = std::make_shared<Data>();
    t.d_->shape = std::move(shape);
    t.d_->v.assign(shape_size(t.d_->shape), 0.0);
    t.d_->requires_grad = requires_grad;
    return t;
}

Tensor Tensor::from(std::vector<int> shape, std::vector<double> values, bool requires_grad) {
    if (shape_size(shape) != values.size())
        throw DimensionError("Tensor::from: shape " + shape_str(shape) + " does not match " +
                             std::to_string(values.size()) + " values");
    Tensor t;
    t.d_ = std::make_shared<Data>();
    t.d_->shape = std::move(shape);
    t.d_->v = std::move(values);
    t.d_->requires_grad = requires_grad;
    return t;
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return from({1}, {value}, requires_grad);
}

int Tensor::dim(int i) const {
    if (i < 0) i += static_cast<int>(d_->shape.size());
    return d_->shape.at(static_cast<std::size_t>(i));
}

double* Tensor::grad() {
    if (d_->g.empty()) d_->g.assign(d_->v.size(), 0.0);
    return d_->g.data();
}

const std::vector<double>& Tensor::grad_values() const {
    static const std::vector<double> kEmpty;
    return d_->g.empty() ? kEmpty : d_->g;
}

void Tensor::zero_grad() {
    if (d_) d_->g.assign(d_->v.size(), 0.0);
}

double Tensor::item() const {
    if (size() != 1) throw DimensionError("item() on non-scalar tensor " + shape_str(shape()));
    return d_->v[0];
}

void Tensor::accumulate_grad(const double* delta, std::size_t n) {
    double* g = grad();
    for (std::size_t i = 0; i < n; ++i) g[i] += delta[i];
}

Tensor Tensor::detach() const {
    Tensor t;
    t.d_ = std::make_shared<Data>();
    t.d_->shape = d_->shape;
    t.d_->v = d_->v;
    t.d_->requires_grad = false;
    return t;
}

Tape::Tape() {
    prev_ = g_current_tape;
    g_current_tape = this;
}

Tape::~Tape() { g_current_tape = prev_; }

Tape* Tape::current() { return g_current_tape; }

void Tape::record(const Tensor& output, std::function<void()> backward) {
    nodes_.emplace_back(output, std::move(backward));
}

void Tape::backward(Tensor loss) {
    if (loss.size() != 1) throw DimensionError("backward() expects a scalar loss");
    for (auto& n : nodes_) n.first.zero_grad();
    loss.grad()[0] += 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) it->second();
}

NoGradGuard::NoGradGuard() {
    saved_ = g_current_tape;
    g_current_tape = nullptr;
}

NoGradGuard::~NoGradGuard() { g_current_tape = saved_; }

void check_finite(const Tensor& t, const char* op) {
    const double* p = t.data();
    const std::size_t n = t.size();
    for (std::size_t i = 0; i < n; ++i) {
        if (!std::isfinite(p[i]))
            throw NumericError(std::string(op) + " produced a non-finite value at index " +
                               std::to_string(i));
    }
}

}  // namespace circuitbox

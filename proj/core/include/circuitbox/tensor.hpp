#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "circuitbox/error.hpp"

namespace circuitbox {

/// Dense 64-bit float tensor with an optional gradient accumulator.
/// Cheap to copy: copies share the underlying storage.
class Tensor {
  public:
    struct Data {
        std::vector<int> shape;
        std::vector<double> v;
        std::vector<double> g;  // allocated lazily, same extent as v
        bool requires_grad = false;
    };

    Tensor() = default;

    static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
    static Tensor from(std::vector<int> shape, std::vector<double> values, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    bool defined() const { return d_ != nullptr; }
    const std::vector<int>& shape() const { return d_->shape; }
    int dim(int i) const;
    std::size_t size() const { return d_->v.size(); }

    const double* data() const { return d_->v.data(); }
    double* data() { return d_->v.data(); }
    const std::vector<double>& values() const { return d_->v; }

    bool requires_grad() const { return d_ && d_->requires_grad; }
    void set_requires_grad(bool rg) { d_->requires_grad = rg; }

    /// Gradient accumulator; allocates zeros on first touch.
    double* grad();
    const std::vector<double>& grad_values() const;
    bool has_grad() const { return d_ && !d_->g.empty(); }
    void zero_grad();

    double item() const;

    /// Accumulate `delta` into this tensor's gradient.
    void accumulate_grad(const double* delta, std::size_t n);

    Tensor detach() const;  // shares values, drops grad tracking

    Data* raw() const { return d_.get(); }

  private:
    std::shared_ptr<Data> d_;
};

/// Reverse-mode tape. Construction makes it the active tape for the
/// current thread; destruction restores the previous one. Ops record a
/// backward closure only while a tape is active and an input requires
/// gradients.
class Tape {
  public:
    Tape();
    ~Tape();
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape* current();
    void record(const Tensor& output, std::function<void()> backward);

    /// Zeros the grads of all recorded op outputs, seeds d(loss)=1, and
    /// runs recorded closures in reverse order. The tape is not cleared,
    /// so a second call accumulates leaf gradients a second time.
    void backward(Tensor loss);

    std::size_t num_nodes() const { return nodes_.size(); }

  private:
    std::vector<std::pair<Tensor, std::function<void()>>> nodes_;
    Tape* prev_ = nullptr;
};

/// Suspends gradient recording for the current scope.
class NoGradGuard {
  public:
    NoGradGuard();
    ~NoGradGuard();

  private:
    Tape* saved_;
};

/// Throws NumericError if any element of `t` is NaN/Inf.
void check_finite(const Tensor& t, const char* op);

std::size_t shape_size(const std::vector<int>& shape);
std::string shape_str(const std::vector<int>& shape);

}  // namespace circuitbox

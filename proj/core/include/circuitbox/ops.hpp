#pragma once

#include <vector>

#include "circuitbox/tensor.hpp"

namespace circuitbox {

// Differentiable primitives. Every op validates shapes, checks its output
// for NaN/Inf, and records a backward closure on the active tape when an
// input requires gradients.

Tensor matmul(const Tensor& a, const Tensor& b);              // [m,k]x[k,n]
Tensor bmm(const Tensor& a, const Tensor& b);                 // [B,m,k]x[B,k,n]
Tensor bmm_nt(const Tensor& a, const Tensor& b);              // [B,m,k]x[B,n,k]^T

Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor add_scaled(const Tensor& a, const Tensor& b, double c);  // a + c*b

Tensor silu(const Tensor& x);
Tensor sigmoid(const Tensor& x);

/// RMS normalization over the last dimension, scaled by `weight` ([d]).
Tensor rmsnorm(const Tensor& x, const Tensor& weight, double eps = 1e-6);

/// Numerically stable softmax over the last dimension.
Tensor softmax_lastdim(const Tensor& x);

/// Adds `mask` ([r,c]) to every trailing [r,c] block of `x`. The mask is a
/// constant (no gradient); used for causal/knockout attention masking.
Tensor add_mask(const Tensor& x, const Tensor& mask);

/// Mean negative log-softmax probability of `targets` given [n,vocab] logits.
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets);

/// Row gather from an embedding table ([vocab,d]); backward scatter-adds.
Tensor embedding(const Tensor& table, const std::vector<int>& ids);

/// Row gather from a 2-d tensor ([n,d]); backward scatter-adds.
Tensor take_rows(const Tensor& x, const std::vector<int>& rows);

Tensor reshape(const Tensor& x, std::vector<int> shape);
Tensor permute(const Tensor& x, const std::vector<int>& perm);
Tensor concat(const std::vector<Tensor>& parts, int axis);

Tensor reduce_sum(const Tensor& x);
Tensor reduce_mean(const Tensor& x);

/// x + w*(y - x) with scalar tensor w; the interpolation behind mask training.
Tensor lerp_scalar(const Tensor& x, const Tensor& y, const Tensor& w);

/// Scalar view of element i; gradient flows back into x.
Tensor at(const Tensor& x, std::size_t i);

/// One contiguous slice overwrite: out[offset..offset+len) becomes
/// (1-w)*x + w*rep (rep undefined = zeros). `w_param`, when defined, is a
/// learnable scalar weight that overrides `w` and receives gradients.
struct SlicePatch {
    std::size_t offset = 0;
    std::size_t len = 0;
    Tensor rep;
    double w = 1.0;
    Tensor w_param;
};

/// Applies non-overlapping slice patches to a flattened view of x.
Tensor patch_slices(const Tensor& x, const std::vector<SlicePatch>& patches);

/// Rotary position encoding applied to the last dimension (pairs rotated by
/// position-dependent angles). `positions` gives the absolute position of
/// each row of x ([rows, d]).
Tensor rope(const Tensor& x, const std::vector<int>& positions, double base = 10000.0);

}  // namespace circuitbox

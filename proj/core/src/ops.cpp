#include "circuitbox/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "circuitbox/gemm.hpp"

namespace circuitbox {

namespace {

bool track(const std::initializer_list<const Tensor*>& inputs) {
    if (!Tape::current()) return false;
    for (const Tensor* t : inputs)
        if (t->requires_grad()) return true;
    return false;
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.shape().size() != 2 || b.shape().size() != 2 || a.dim(1) != b.dim(0))
        throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
    const std::size_t m = static_cast<std::size_t>(a.dim(0));
    const std::size_t k = static_cast<std::size_t>(a.dim(1));
    const std::size_t n = static_cast<std::size_t>(b.dim(1));
    Tensor out = Tensor::zeros({a.dim(0), b.dim(1)});
    gemm(a.data(), b.data(), out.data(), m, k, n, false);
    check_finite(out, "matmul");
    if (track({&a, &b})) {
        out.set_requires_grad(true);
        Tensor ac = a, bc = b, oc = out;
        Tape::current()->record(out, [ac, bc, oc, m, k, n]() mutable {
            const double* go = oc.grad();
            if (ac.requires_grad()) gemm_bt(go, bc.data(), ac.grad(), m, n, k, true);
            if (bc.requires_grad()) gemm_at(ac.data(), go, bc.grad(), k, m, n, true);
        });
    }
    return out;
}

namespace {

Tensor batched_mm(const Tensor& a, const Tensor& b, bool b_transposed, const char* name) {
    if (a.shape().size() != 3 || b.shape().size() != 3 || a.dim(0) != b.dim(0))
        throw DimensionError(std::string(name) + ": incompatible shapes " + shape_str(a.shape()) +
                             " x " + shape_str(b.shape()));
    const int bt = a.dim(0);
    const std::size_t m = static_cast<std::size_t>(a.dim(1));
    const std::size_t k = static_cast<std::size_t>(a.dim(2));
    const std::size_t n = static_cast<std::size_t>(b_transposed ? b.dim(1) : b.dim(2));
    const std::size_t bk = static_cast<std::size_t>(b_transposed ? b.dim(2) : b.dim(1));
    if (bk != k)
        throw DimensionError(std::string(name) + ": inner extents differ " + shape_str(a.shape()) +
                             " x " + shape_str(b.shape()));
    Tensor out = Tensor::zeros({bt, static_cast<int>(m), static_cast<int>(n)});
    const std::size_t sa = m * k, sb = k * n, so = m * n;
    for (int i = 0; i < bt; ++i) {
        if (b_transposed)
            gemm_bt(a.data() + i * sa, b.data() + i * sb, out.data() + i * so, m, k, n, false);
        else
            gemm(a.data() + i * sa, b.data() + i * sb, out.data() + i * so, m, k, n, false);
    }
    check_finite(out, name);
    if (track({&a, &b})) {
        out.set_requires_grad(true);
        Tensor ac = a, bc = b, oc = out;
        Tape::current()->record(out, [ac, bc, oc, bt, m, k, n, sa, sb, so, b_transposed]() mutable {
            const double* go = oc.grad();
            for (int i = 0; i < bt; ++i) {
                const double* g = go + i * so;
                if (!b_transposed) {
                    // out = a.b : da = g.b^T, db = a^T.g
                    if (ac.requires_grad())
                        gemm_bt(g, bc.data() + i * sb, ac.grad() + i * sa, m, n, k, true);
                    if (bc.requires_grad())
                        gemm_at(ac.data() + i * sa, g, bc.grad() + i * sb, k, m, n, true);
                } else {
                    // out = a.b^T : da = g.b, db = g^T.a
                    if (ac.requires_grad())
                        gemm(g, bc.data() + i * sb, ac.grad() + i * sa, m, n, k, true);
                    if (bc.requires_grad())
                        gemm_at(g, ac.data() + i * sa, bc.grad() + i * sb, n, m, k, true);
                }
            }
        });
    }
    return out;
}

}  // namespace

Tensor bmm(const Tensor& a, const Tensor& b) { return batched_mm(a, b, false, "bmm"); }
Tensor bmm_nt(const Tensor& a, const Tensor& b) { return batched_mm(a, b, true, "bmm_nt"); }

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    const std::size_t n = a.size();
    Tensor out = Tensor::zeros(a.shape());
    const double* pa = a.data();
    const double* pb = b.data();
    double* po = out.data();
    for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
    check_finite(out, "add");
    if (track({&a, &b})) {
        out.set_requires_grad(true);
        Tensor ac = a, bc = b, oc = out;
        Tape::current()->record(out, [ac, bc, oc, n]() mutable {
            const double* go = oc.grad();
            if (ac.requires_grad()) ac.accumulate_grad(go, n);
            if (bc.requires_grad()) bc.accumulate_grad(go, n);
        });
    }
    return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    const std::size_t n = a.size();
    Tensor out = Tensor::zeros(a.shape());
    const double* pa = a.data();
    const double* pb = b.data();
    double* po = out.data();
    for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
    check_finite(out, "mul");
    if (track({&a, &b})) {
        out.set_requires_grad(true);
        Tensor ac = a, bc = b, oc = out;
        Tape::current()->record(out, [ac, bc, oc, n]() mutable {
            const double* go = oc.grad();
            if (ac.requires_grad()) {
                double* g = ac.grad();
                const double* pb2 = bc.data();
                for (std::size_t i = 0; i < n; ++i) g[i] += go[i] * pb2[i];
            }
            if (bc.requires_grad()) {
                double* g = bc.grad();
                const double* pa2 = ac.data();
                for (std::size_t i = 0; i < n; ++i) g[i] += go[i] * pa2[i];
            }
        });
    }
    return out;
}

Tensor scale(const Tensor& a, double c) {
    const std::size_t n = a.size();
    Tensor out = Tensor::zeros(a.shape());
    const double* pa = a.data();
    double* po = out.data();
    for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] * c;
    check_finite(out, "scale");
    if (track({&a})) {
        out.set_requires_grad(true);
        Tensor ac = a, oc = out;
        Tape::current()->record(out, [ac, oc, c, n]() mutable {
            const double* go = oc.grad();
            double* g = ac.grad();
            for (std::size_t i = 0; i < n; ++i) g[i] += go[i] * c;
        });
    }
    return out;
}

Tensor add_scaled(const Tensor& a, const Tensor& b, double c) {
    require_same_shape(a, b, "add_scaled");
    const std::size_t n = a.size();
    Tensor out = Tensor::zeros(a.shape());
    const double* pa = a.data();
    const double* pb = b.data();
    double* po = out.data();
    for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] + c * pb[i];
    check_finite(out, "add_scaled");
    if (track({&a, &b})) {
        out.set_requires_grad(true);
        Tensor ac = a, bc = b, oc = out;
        Tape::current()->record(out, [ac, bc, oc, c, n]() mutable {
            const double* go = oc.grad();
            if (ac.requires_grad()) ac.accumulate_grad(go, n);
            if (bc.requires_grad()) {
                double* g = bc.grad();
                for (std::size_t i = 0; i < n; ++i) g[i] += go[i] * c;
            }
        });
    }
    return out;
}

Tensor silu(const Tensor& x) {
    const std::size_t n = x.size();
    Tensor out = Tensor::zeros(x.shape());
    const double* px = x.data();
    double* po = out.data();
    for (std::size_t i = 0; i < n; ++i) {
        const double s = 1.0 / (1.0 + std::exp(-px[i]));
        po[i] = px[i] * s;
    }
    check_finite(out, "silu");
    if (track({&x})) {
        out.set_requires_grad(true);
        Tensor xc = x, oc = out;
        Tape::current()->record(out, [xc, oc, n]() mutable {
            const double* go = oc.grad();
            const double* px2 = xc.data();
            double* g = xc.grad();
            for (std::size_t i = 0; i < n; ++i) {
                const double s = 1.0 / (1.0 + std::exp(-px2[i]));
                g[i] += go[i] * s * (1.0 + px2[i] * (1.0 - s));
            }
        });
    }
    return out;
}

Tensor sigmoid(const Tensor& x) {
    const std::size_t n = x.size();
    Tensor out = Tensor::zeros(x.shape());
    const double* px = x.data();
    double* po = out.data();
    for (std::size_t i = 0; i < n; ++i) po[i] = 1.0 / (1.0 + std::exp(-px[i]));
    check_finite(out, "sigmoid");
    if (track({&x})) {
        out.set_requires_grad(true);
        Tensor xc = x, oc = out;
        Tape::current()->record(out, [xc, oc, n]() mutable {
            const double* go = oc.grad();
            const double* po2 = oc.data();
            double* g = xc.grad();
            for (std::size_t i = 0; i < n; ++i) g[i] += go[i] * po2[i] * (1.0 - po2[i]);
        });
    }
    return out;
}

Tensor rmsnorm(const Tensor& x, const Tensor& weight, double eps) {
    if (x.shape().empty() || weight.shape().size() != 1 || x.dim(-1) != weight.dim(0))
        throw DimensionError("rmsnorm: weight " + shape_str(weight.shape()) +
                             " does not match input " + shape_str(x.shape()));
    const std::size_t d = static_cast<std::size_t>(x.dim(-1));
    const std::size_t rows = x.size() / d;
    Tensor out = Tensor::zeros(x.shape());
    const double* px = x.data();
    const double* pw = weight.data();
    double* po = out.data();
    std::vector<double> inv_rms(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* row = px + r * d;
        double ss = 0.0;
        for (std::size_t i = 0; i < d; ++i) ss += row[i] * row[i];
        const double inv = 1.0 / std::sqrt(ss / static_cast<double>(d) + eps);
        inv_rms[r] = inv;
        double* orow = po + r * d;
        for (std::size_t i = 0; i < d; ++i) orow[i] = row[i] * inv * pw[i];
    }
    check_finite(out, "rmsnorm");
    if (track({&x, &weight})) {
        out.set_requires_grad(true);
        Tensor xc = x, wc = weight, oc = out;
        Tape::current()->record(out, [xc, wc, oc, rows, d, inv_rms]() mutable {
            const double* go = oc.grad();
            const double* px2 = xc.data();
            const double* pw2 = wc.data();
            for (std::size_t r = 0; r < rows; ++r) {
                const double inv = inv_rms[r];
                const double* row = px2 + r * d;
                const double* grow = go + r * d;
                if (xc.requires_grad()) {
                    double dot = 0.0;
                    for (std::size_t i = 0; i < d; ++i) dot += grow[i] * pw2[i] * row[i];
                    const double coef = inv * inv * inv * dot / static_cast<double>(d);
                    double* gx = xc.grad() + r * d;
                    for (std::size_t i = 0; i < d; ++i)
                        gx[i] += inv * pw2[i] * grow[i] - coef * row[i];
                }
                if (wc.requires_grad()) {
                    double* gw = wc.grad();
                    for (std::size_t i = 0; i < d; ++i) gw[i] += grow[i] * row[i] * inv;
                }
            }
        });
    }
    return out;
}

Tensor softmax_lastdim(const Tensor& x) {
    if (x.shape().empty() || x.dim(-1) < 1)
        throw DimensionError("softmax_lastdim: empty last dimension in " + shape_str(x.shape()));
    const std::size_t d = static_cast<std::size_t>(x.dim(-1));
    const std::size_t rows = x.size() / d;
    Tensor out = Tensor::zeros(x.shape());
    const double* px = x.data();
    double* po = out.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* row = px + r * d;
        double* orow = po + r * d;
        double mx = row[0];
        for (std::size_t i = 1; i < d; ++i) mx = std::max(mx, row[i]);
        double sum = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
            orow[i] = std::exp(row[i] - mx);
            sum += orow[i];
        }
        const double inv = 1.0 / sum;
        for (std::size_t i = 0; i < d; ++i) orow[i] *= inv;
    }
    check_finite(out, "softmax_lastdim");
    if (track({&x})) {
        out.set_requires_grad(true);
        Tensor xc = x, oc = out;
        Tape::current()->record(out, [xc, oc, rows, d]() mutable {
            const double* go = oc.grad();
            const double* py = oc.data();
            double* g = xc.grad();
            for (std::size_t r = 0; r < rows; ++r) {
                const double* grow = go + r * d;
                const double* yrow = py + r * d;
                double dot = 0.0;
                for (std::size_t i = 0; i < d; ++i) dot += grow[i] * yrow[i];
                double* gx = g + r * d;
                for (std::size_t i = 0; i < d; ++i) gx[i] += yrow[i] * (grow[i] - dot);
            }
        });
    }
    return out;
}

Tensor add_mask(const Tensor& x, const Tensor& mask) {
    if (mask.shape().size() != 2 || x.shape().size() < 2 || x.dim(-2) != mask.dim(0) ||
        x.dim(-1) != mask.dim(1))
        throw DimensionError("add_mask: mask " + shape_str(mask.shape()) + " vs input " +
                             shape_str(x.shape()));
    const std::size_t block = static_cast<std::size_t>(mask.size());
    const std::size_t reps = x.size() / block;
    Tensor out = Tensor::zeros(x.shape());
    const double* px = x.data();
    const double* pm = mask.data();
    double* po = out.data();
    for (std::size_t r = 0; r < reps; ++r)
        for (std::size_t i = 0; i < block; ++i) po[r * block + i] = px[r * block + i] + pm[i];
    if (track({&x})) {
        out.set_requires_grad(true);
        Tensor xc = x, oc = out;
        Tape::current()->record(out,
            [xc, oc]() mutable { xc.accumulate_grad(oc.grad(), oc.size()); });
    }
    return out;
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets) {
    if (logits.shape().size() != 2 || static_cast<std::size_t>(logits.dim(0)) != targets.size())
        throw DimensionError("cross_entropy: logits " + shape_str(logits.shape()) + " vs " +
                             std::to_string(targets.size()) + " targets");
    const std::size_t batch = targets.size();
    const std::size_t vocab = static_cast<std::size_t>(logits.dim(1));
    for (int t : targets)
        if (t < 0 || static_cast<std::size_t>(t) >= vocab)
            throw DimensionError("cross_entropy: target " + std::to_string(t) +
                                 " out of range [0," + std::to_string(vocab) + ")");
    const double* pl = logits.data();
    std::vector<double> probs(batch * vocab);
    double loss = 0.0;
    for (std::size_t r = 0; r < batch; ++r) {
        const double* row = pl + r * vocab;
        double mx = row[0];
        for (std::size_t i = 1; i < vocab; ++i) mx = std::max(mx, row[i]);
        double sum = 0.0;
        for (std::size_t i = 0; i < vocab; ++i) {
            probs[r * vocab + i] = std::exp(row[i] - mx);
            sum += probs[r * vocab + i];
        }
        const double inv = 1.0 / sum;
        for (std::size_t i = 0; i < vocab; ++i) probs[r * vocab + i] *= inv;
        loss -= std::log(probs[r * vocab + static_cast<std::size_t>(targets[r])]);
    }
    Tensor out = Tensor::scalar(loss / static_cast<double>(batch));
    check_finite(out, "cross_entropy");
    if (track({&logits})) {
        out.set_requires_grad(true);
        Tensor lc = logits, oc = out;
        std::vector<int> tc = targets;
        Tape::current()->record(out, [lc, oc, tc, probs, batch, vocab]() mutable {
            const double g = oc.grad()[0] / static_cast<double>(batch);
            double* gl = lc.grad();
            for (std::size_t r = 0; r < batch; ++r) {
                for (std::size_t i = 0; i < vocab; ++i)
                    gl[r * vocab + i] += g * probs[r * vocab + i];
                gl[r * vocab + static_cast<std::size_t>(tc[r])] -= g;
            }
        });
    }
    return out;
}

Tensor embedding(const Tensor& table, const std::vector<int>& ids) {
    if (table.shape().size() != 2)
        throw DimensionError("embedding: table must be 2-d, got " + shape_str(table.shape()));
    const int vocab = table.dim(0);
    const std::size_t d = static_cast<std::size_t>(table.dim(1));
    Tensor out = Tensor::zeros({static_cast<int>(ids.size()), table.dim(1)});
    const double* pt = table.data();
    double* po = out.data();
    for (std::size_t r = 0; r < ids.size(); ++r) {
        if (ids[r] < 0 || ids[r] >= vocab)
            throw DimensionError("embedding: id " + std::to_string(ids[r]) + " out of range");
        std::memcpy(po + r * d, pt + static_cast<std::size_t>(ids[r]) * d, d * sizeof(double));
    }
    if (track({&table})) {
        out.set_requires_grad(true);
        Tensor tc = table, oc = out;
        std::vector<int> idc = ids;
        Tape::current()->record(out, [tc, oc, idc, d]() mutable {
            const double* go = oc.grad();
            double* gt = tc.grad();
            for (std::size_t r = 0; r < idc.size(); ++r) {
                double* dst = gt + static_cast<std::size_t>(idc[r]) * d;
                const double* src = go + r * d;
                for (std::size_t i = 0; i < d; ++i) dst[i] += src[i];
            }
        });
    }
    return out;
}

Tensor take_rows(const Tensor& x, const std::vector<int>& rows) {
    if (x.shape().size() != 2)
        throw DimensionError("take_rows: input must be 2-d, got " + shape_str(x.shape()));
    const int n = x.dim(0);
    const std::size_t d = static_cast<std::size_t>(x.dim(1));
    Tensor out = Tensor::zeros({static_cast<int>(rows.size()), x.dim(1)});
    const double* px = x.data();
    double* po = out.data();
    for (std::size_t r = 0; r < rows.size(); ++r) {
        if (rows[r] < 0 || rows[r] >= n)
            throw DimensionError("take_rows: row " + std::to_string(rows[r]) + " out of range");
        std::memcpy(po + r * d, px + static_cast<std::size_t>(rows[r]) * d, d * sizeof(double));
    }
    if (track({&x})) {
        out.set_requires_grad(true);
        Tensor xc = x, oc = out;
        std::vector<int> rc = rows;
        Tape::current()->record(out, [xc, oc, rc, d]() mutable {
            const double* go = oc.grad();
            double* gx = xc.grad();
            for (std::size_t r = 0; r < rc.size(); ++r) {
                double* dst = gx + static_cast<std::size_t>(rc[r]) * d;
                const double* src = go + r * d;
                for (std::size_t i = 0; i < d; ++i) dst[i] += src[i];
            }
        });
    }
    return out;
}

Tensor reshape(const Tensor& x, std::vector<int> shape) {
    if (shape_size(shape) != x.size())
        throw DimensionError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape) +
                             " changes element count");
    Tensor out = Tensor::from(std::move(shape), x.values());
    if (track({&x})) {
        out.set_requires_grad(true);
        Tensor xc = x, oc = out;
        Tape::current()->record(out,
            [xc, oc]() mutable { xc.accumulate_grad(oc.grad(), oc.size()); });
    }
    return out;
}

namespace {

std::vector<std::size_t> strides_of(const std::vector<int>& shape) {
    std::vector<std::size_t> s(shape.size(), 1);
    for (int i = static_cast<int>(shape.size()) - 2; i >= 0; --i)
        s[static_cast<std::size_t>(i)] =
            s[static_cast<std::size_t>(i) + 1] * static_cast<std::size_t>(shape[static_cast<std::size_t>(i) + 1]);
    return s;
}

// For each output linear index, the source linear index under `perm`.
std::vector<std::size_t> permute_map(const std::vector<int>& in_shape,
                                     const std::vector<int>& perm) {
    std::vector<int> out_shape(perm.size());
    for (std::size_t i = 0; i < perm.size(); ++i)
        out_shape[i] = in_shape[static_cast<std::size_t>(perm[i])];
    const auto in_strides = strides_of(in_shape);
    const auto out_strides = strides_of(out_shape);
    const std::size_t n = shape_size(in_shape);
    std::vector<std::size_t> map(n);
    for (std::size_t o = 0; o < n; ++o) {
        std::size_t rem = o, src = 0;
        for (std::size_t ax = 0; ax < perm.size(); ++ax) {
            const std::size_t idx = rem / out_strides[ax];
            rem %= out_strides[ax];
            src += idx * in_strides[static_cast<std::size_t>(perm[ax])];
        }
        map[o] = src;
    }
    return map;
}

}  // namespace

Tensor permute(const Tensor& x, const std::vector<int>& perm) {
    if (perm.size() != x.shape().size())
        throw DimensionError("permute: perm rank mismatch for " + shape_str(x.shape()));
    std::vector<int> out_shape(perm.size());
    for (std::size_t i = 0; i < perm.size(); ++i)
        out_shape[i] = x.shape()[static_cast<std::size_t>(perm[i])];
    const auto map = permute_map(x.shape(), perm);
    Tensor out = Tensor::zeros(out_shape);
    const double* px = x.data();
    double* po = out.data();
    for (std::size_t o = 0; o < map.size(); ++o) po[o] = px[map[o]];
    if (track({&x})) {
        out.set_requires_grad(true);
        Tensor xc = x, oc = out;
        auto mc = map;
        Tape::current()->record(out, [xc, oc, mc]() mutable {
            const double* go = oc.grad();
            double* gx = xc.grad();
            for (std::size_t o = 0; o < mc.size(); ++o) gx[mc[o]] += go[o];
        });
    }
    return out;
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
    if (parts.empty()) throw DimensionError("concat: no inputs");
    const auto& base = parts[0].shape();
    if (axis < 0) axis += static_cast<int>(base.size());
    std::vector<int> out_shape = base;
    int total = 0;
    for (const Tensor& p : parts) {
        if (p.shape().size() != base.size())
            throw DimensionError("concat: rank mismatch");
        for (std::size_t i = 0; i < base.size(); ++i)
            if (static_cast<int>(i) != axis && p.shape()[i] != base[i])
                throw DimensionError("concat: shape mismatch off the concat axis");
        total += p.shape()[static_cast<std::size_t>(axis)];
    }
    out_shape[static_cast<std::size_t>(axis)] = total;
    Tensor out = Tensor::zeros(out_shape);
    // outer = product of dims before axis; copy contiguous [axis..] blocks
    std::size_t outer = 1;
    for (int i = 0; i < axis; ++i) outer *= static_cast<std::size_t>(base[static_cast<std::size_t>(i)]);
    std::size_t inner = 1;
    for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < base.size(); ++i)
        inner *= static_cast<std::size_t>(base[i]);
    const std::size_t out_block = static_cast<std::size_t>(total) * inner;
    std::size_t off = 0;
    std::vector<std::size_t> offsets;
    for (const Tensor& p : parts) {
        offsets.push_back(off);
        const std::size_t blk = static_cast<std::size_t>(p.shape()[static_cast<std::size_t>(axis)]) * inner;
        const double* pp = p.data();
        double* po = out.data();
        for (std::size_t r = 0; r < outer; ++r)
            std::memcpy(po + r * out_block + off, pp + r * blk, blk * sizeof(double));
        off += blk;
    }
    bool any_rg = false;
    for (const Tensor& p : parts)
        if (p.requires_grad()) any_rg = true;
    if (any_rg && Tape::current()) {
        out.set_requires_grad(true);
        std::vector<Tensor> pc = parts;
        Tensor oc = out;
        Tape::current()->record(out, [pc, oc, offsets, outer, inner, out_block, axis]() mutable {
            const double* go = oc.grad();
            for (std::size_t pi = 0; pi < pc.size(); ++pi) {
                if (!pc[pi].requires_grad()) continue;
                const std::size_t blk =
                    static_cast<std::size_t>(pc[pi].shape()[static_cast<std::size_t>(axis)]) * inner;
                double* gp = pc[pi].grad();
                for (std::size_t r = 0; r < outer; ++r) {
                    const double* src = go + r * out_block + offsets[pi];
                    double* dst = gp + r * blk;
                    for (std::size_t i = 0; i < blk; ++i) dst[i] += src[i];
                }
            }
        });
    }
    return out;
}

Tensor reduce_sum(const Tensor& x) {
    double s = 0.0;
    const double* px = x.data();
    for (std::size_t i = 0; i < x.size(); ++i) s += px[i];
    Tensor out = Tensor::scalar(s);
    check_finite(out, "reduce_sum");
    if (track({&x})) {
        out.set_requires_grad(true);
        Tensor xc = x, oc = out;
        Tape::current()->record(out, [xc, oc]() mutable {
            const double g = oc.grad()[0];
            double* gx = xc.grad();
            for (std::size_t i = 0; i < xc.size(); ++i) gx[i] += g;
        });
    }
    return out;
}

Tensor reduce_mean(const Tensor& x) {
    const double inv = 1.0 / static_cast<double>(x.size());
    double s = 0.0;
    const double* px = x.data();
    for (std::size_t i = 0; i < x.size(); ++i) s += px[i];
    Tensor out = Tensor::scalar(s * inv);
    check_finite(out, "reduce_mean");
    if (track({&x})) {
        out.set_requires_grad(true);
        Tensor xc = x, oc = out;
        Tape::current()->record(out, [xc, oc, inv]() mutable {
            const double g = oc.grad()[0] * inv;
            double* gx = xc.grad();
            for (std::size_t i = 0; i < xc.size(); ++i) gx[i] += g;
        });
    }
    return out;
}

Tensor lerp_scalar(const Tensor& x, const Tensor& y, const Tensor& w) {
    require_same_shape(x, y, "lerp_scalar");
    if (w.size() != 1) throw DimensionError("lerp_scalar: w must be scalar");
    const double wv = w.data()[0];
    const std::size_t n = x.size();
    Tensor out = Tensor::zeros(x.shape());
    const double* px = x.data();
    const double* py = y.data();
    double* po = out.data();
    for (std::size_t i = 0; i < n; ++i) po[i] = px[i] + wv * (py[i] - px[i]);
    check_finite(out, "lerp_scalar");
    if (track({&x, &y, &w})) {
        out.set_requires_grad(true);
        Tensor xc = x, yc = y, wc = w, oc = out;
        Tape::current()->record(out, [xc, yc, wc, oc, wv, n]() mutable {
            const double* go = oc.grad();
            if (xc.requires_grad()) {
                double* g = xc.grad();
                for (std::size_t i = 0; i < n; ++i) g[i] += go[i] * (1.0 - wv);
            }
            if (yc.requires_grad()) {
                double* g = yc.grad();
                for (std::size_t i = 0; i < n; ++i) g[i] += go[i] * wv;
            }
            if (wc.requires_grad()) {
                const double* px2 = xc.data();
                const double* py2 = yc.data();
                double acc = 0.0;
                for (std::size_t i = 0; i < n; ++i) acc += go[i] * (py2[i] - px2[i]);
                wc.grad()[0] += acc;
            }
        });
    }
    return out;
}

Tensor at(const Tensor& x, std::size_t i) {
    if (i >= x.size()) throw DimensionError("at: index out of range");
    Tensor out = Tensor::scalar(x.data()[i]);
    if (track({&x})) {
        out.set_requires_grad(true);
        Tensor xc = x, oc = out;
        Tape::current()->record(out, [xc, oc, i]() mutable { xc.grad()[i] += oc.grad()[0]; });
    }
    return out;
}

Tensor patch_slices(const Tensor& x, const std::vector<SlicePatch>& patches) {
    Tensor out = Tensor::from(x.shape(), x.values());
    for (const SlicePatch& p : patches) {
        if (p.offset + p.len > x.size())
            throw DimensionError("patch_slices: slice exceeds tensor extent");
        if (p.rep.defined() && p.rep.size() != p.len)
            throw DimensionError("patch_slices: replacement length mismatch");
        const double wv = p.w_param.defined() ? p.w_param.data()[0] : p.w;
        double* po = out.data() + p.offset;
        const double* px = x.data() + p.offset;
        const double* pr = p.rep.defined() ? p.rep.data() : nullptr;
        for (std::size_t i = 0; i < p.len; ++i)
            po[i] = (1.0 - wv) * px[i] + wv * (pr ? pr[i] : 0.0);
    }
    check_finite(out, "patch_slices");
    bool rg = x.requires_grad();
    for (const SlicePatch& p : patches) {
        if (p.rep.defined() && p.rep.requires_grad()) rg = true;
        if (p.w_param.defined() && p.w_param.requires_grad()) rg = true;
    }
    if (rg && Tape::current()) {
        out.set_requires_grad(true);
        Tensor xc = x, oc = out;
        std::vector<SlicePatch> pc = patches;
        Tape::current()->record(out, [xc, oc, pc]() mutable {
            const double* go = oc.grad();
            if (xc.requires_grad()) {
                double* gx = xc.grad();
                std::vector<bool> patched(xc.size(), false);
                for (const SlicePatch& p : pc) {
                    const double wv = p.w_param.defined() ? p.w_param.data()[0] : p.w;
                    for (std::size_t i = 0; i < p.len; ++i) {
                        gx[p.offset + i] += (1.0 - wv) * go[p.offset + i];
                        patched[p.offset + i] = true;
                    }
                }
                for (std::size_t i = 0; i < xc.size(); ++i)
                    if (!patched[i]) gx[i] += go[i];
            }
            for (SlicePatch& p : pc) {
                const double wv = p.w_param.defined() ? p.w_param.data()[0] : p.w;
                if (p.rep.defined() && p.rep.requires_grad()) {
                    double* gr = p.rep.grad();
                    for (std::size_t i = 0; i < p.len; ++i) gr[i] += wv * go[p.offset + i];
                }
                if (p.w_param.defined() && p.w_param.requires_grad()) {
                    const double* px = xc.data() + p.offset;
                    const double* pr = p.rep.defined() ? p.rep.data() : nullptr;
                    double acc = 0.0;
                    for (std::size_t i = 0; i < p.len; ++i)
                        acc += go[p.offset + i] * ((pr ? pr[i] : 0.0) - px[i]);
                    p.w_param.grad()[0] += acc;
                }
            }
        });
    }
    return out;
}

Tensor rope(const Tensor& x, const std::vector<int>& positions, double base) {
    if (x.shape().size() != 2 || static_cast<std::size_t>(x.dim(0)) != positions.size() ||
        x.dim(1) % 2 != 0)
        throw DimensionError("rope: expects [rows, even d], one position per row");
    const std::size_t rows = positions.size();
    const std::size_t d = static_cast<std::size_t>(x.dim(1));
    const std::size_t half = d / 2;
    std::vector<double> freqs(half);
    for (std::size_t i = 0; i < half; ++i)
        freqs[i] = std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(d));
    Tensor out = Tensor::zeros(x.shape());
    const double* px = x.data();
    double* po = out.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const double pos = static_cast<double>(positions[r]);
        for (std::size_t i = 0; i < half; ++i) {
            const double c = std::cos(pos * freqs[i]);
            const double s = std::sin(pos * freqs[i]);
            const double a = px[r * d + 2 * i];
            const double b = px[r * d + 2 * i + 1];
            po[r * d + 2 * i] = a * c - b * s;
            po[r * d + 2 * i + 1] = a * s + b * c;
        }
    }
    check_finite(out, "rope");
    if (track({&x})) {
        out.set_requires_grad(true);
        Tensor xc = x, oc = out;
        std::vector<int> pc = positions;
        Tape::current()->record(out, [xc, oc, pc, freqs, rows, d]() mutable {
            const std::size_t half = d / 2;
            const double* go = oc.grad();
            double* gx = xc.grad();
            for (std::size_t r = 0; r < rows; ++r) {
                const double pos = static_cast<double>(pc[r]);
                for (std::size_t i = 0; i < half; ++i) {
                    const double c = std::cos(pos * freqs[i]);
                    const double s = std::sin(pos * freqs[i]);
                    const double g0 = go[r * d + 2 * i];
                    const double g1 = go[r * d + 2 * i + 1];
                    gx[r * d + 2 * i] += c * g0 + s * g1;
                    gx[r * d + 2 * i + 1] += -s * g0 + c * g1;
                }
            }
        });
    }
    return out;
}

}  // namespace circuitbox

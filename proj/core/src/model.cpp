#include "circuitbox/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <map>
#include <random>

#include "circuitbox/ops.hpp"

namespace circuitbox {

namespace {
constexpr double kMaskValue = -1e9;
}

void ModelConfig::validate() const {
    if (n_layers < 1 || n_heads < 1 || d_model < 1 || d_mlp < 1)
        throw UsageError("model config: extents must be positive");
    if (d_model % n_heads != 0)
        throw UsageError("model config: d_model must divide evenly into heads");
    if (positional != "rotary" && positional != "learned")
        throw UsageError("model config: unknown positional scheme " + positional);
    if (positional == "rotary" && d_head() % 2 != 0)
        throw UsageError("model config: rotary needs an even d_head");
    if (vocab_size < 1) throw UsageError("model config: vocab_size unset");
    if (max_seq_len < 1) throw UsageError("model config: max_seq_len unset");
}

ModelWeights ModelWeights::init(const ModelConfig& cfg) {
    cfg.validate();
    ModelWeights w;
    w.cfg = cfg;
    std::mt19937_64 rng(cfg.seed);
    std::normal_distribution<double> dist(0.0, 1.0);
    auto randn = [&](std::vector<int> shape, double sd) {
        std::vector<double> v(shape_size(shape));
        for (double& x : v) x = dist(rng) * sd;
        return Tensor::from(std::move(shape), std::move(v));
    };
    const double sd = 0.02;
    const int d = cfg.d_model;
    w.tok_emb = randn({cfg.vocab_size, d}, sd);
    if (cfg.positional == "learned") w.pos_emb = randn({cfg.max_seq_len, d}, sd);
    for (int l = 0; l < cfg.n_layers; ++l) {
        LayerWeights lw;
        lw.attn_norm = Tensor::from({d}, std::vector<double>(static_cast<std::size_t>(d), 1.0));
        lw.wq = randn({d, d}, sd);
        lw.wk = randn({d, d}, sd);
        lw.wv = randn({d, d}, sd);
        lw.wo = randn({d, d}, sd / std::sqrt(2.0 * cfg.n_layers));
        lw.mlp_norm = Tensor::from({d}, std::vector<double>(static_cast<std::size_t>(d), 1.0));
        lw.w1 = randn({d, cfg.d_mlp}, sd);
        lw.w2 = randn({cfg.d_mlp, d}, sd / std::sqrt(2.0 * cfg.n_layers));
        w.layers.push_back(std::move(lw));
    }
    w.final_norm = Tensor::from({d}, std::vector<double>(static_cast<std::size_t>(d), 1.0));
    w.unembed = randn({d, cfg.vocab_size}, sd);
    return w;
}

std::vector<Tensor> ModelWeights::parameters() const {
    std::vector<Tensor> ps{tok_emb};
    if (pos_emb.defined()) ps.push_back(pos_emb);
    for (const LayerWeights& l : layers)
        for (const Tensor& t : {l.attn_norm, l.wq, l.wk, l.wv, l.wo, l.mlp_norm, l.w1, l.w2})
            ps.push_back(t);
    ps.push_back(final_norm);
    ps.push_back(unembed);
    return ps;
}

void ModelWeights::set_requires_grad(bool rg) const {
    for (Tensor t : parameters()) t.set_requires_grad(rg);
}

Site site_from_string(const std::string& s) {
    if (s == "q_in") return Site::q_in;
    if (s == "k_in") return Site::k_in;
    if (s == "v_in") return Site::v_in;
    if (s == "head_out") return Site::head_out;
    if (s == "attn_pattern") return Site::attn_pattern;
    throw UsageError("unknown hook site: " + s);
}

std::string site_to_string(Site s) {
    switch (s) {
        case Site::q_in: return "q_in";
        case Site::k_in: return "k_in";
        case Site::v_in: return "v_in";
        case Site::head_out: return "head_out";
        case Site::attn_pattern: return "attn_pattern";
    }
    return "?";
}

namespace {

/// [B*Ta, D] rows (batch-major) merged over a [B*T, D] base, suffix p..T-1
/// replaced by `fresh`.
Tensor merge_rows(const Tensor& base, const Tensor& fresh, int B, int T, int p) {
    if (p == 0) return fresh;
    const int Ta = T - p;
    const std::size_t D = base.size() / static_cast<std::size_t>(B * T);
    Tensor out = Tensor::from(base.shape(), base.values());
    for (int b = 0; b < B; ++b)
        std::memcpy(out.data() + (static_cast<std::size_t>(b) * T + p) * D,
                    fresh.data() + static_cast<std::size_t>(b) * Ta * D,
                    static_cast<std::size_t>(Ta) * D * sizeof(double));
    return out;
}

/// [S, Ta, D] slabs merged over a [S, T, D] base along the middle axis.
Tensor merge_axis1(const Tensor& base, const Tensor& fresh, int p) {
    if (p == 0) return fresh;
    const int S = base.dim(0);
    const int T = base.dim(1);
    const int Ta = T - p;
    const std::size_t D = static_cast<std::size_t>(base.dim(2));
    Tensor out = Tensor::from(base.shape(), base.values());
    for (int s = 0; s < S; ++s)
        std::memcpy(out.data() + (static_cast<std::size_t>(s) * T + p) * D,
                    fresh.data() + static_cast<std::size_t>(s) * Ta * D,
                    static_cast<std::size_t>(Ta) * D * sizeof(double));
    return out;
}

struct PassContext {
    const ModelConfig* cfg;
    int B, T, p, Ta;
    std::map<std::pair<int, int>, std::vector<const Intervention*>> by_layer_site;
};

std::vector<SlicePatch> patches_for(const PassContext& ctx, int layer, Site site,
                                    std::size_t row_stride, bool per_head_rows) {
    std::vector<SlicePatch> ps;
    auto it = ctx.by_layer_site.find({layer, static_cast<int>(site)});
    if (it == ctx.by_layer_site.end()) return ps;
    const int H = ctx.cfg->n_heads;
    const int dh = ctx.cfg->d_head();
    for (const Intervention* iv : it->second) {
        if (iv->at.position < ctx.p)
            throw UsageError("intervention at position " + std::to_string(iv->at.position) +
                             " precedes resume point " + std::to_string(ctx.p));
        if (iv->at.position >= ctx.T) throw UsageError("intervention position out of range");
        if (iv->at.head < 0 || iv->at.head >= H) throw UsageError("intervention head out of range");
        const int t = iv->at.position - ctx.p;
        const int b0 = iv->batch < 0 ? 0 : iv->batch;
        const int b1 = iv->batch < 0 ? ctx.B : iv->batch + 1;
        if (b0 < 0 || b1 > ctx.B) throw UsageError("intervention batch out of range");
        for (int b = b0; b < b1; ++b) {
            SlicePatch sp;
            if (per_head_rows) {
                // tensor is [B*H, Ta, D]; one row per (head, position)
                sp.offset = (static_cast<std::size_t>(b * H + iv->at.head) * ctx.Ta + t) *
                            row_stride;
                sp.len = row_stride;
            } else {
                // tensor is [B*Ta, d]; heads are column blocks
                sp.offset = static_cast<std::size_t>(b * ctx.Ta + t) * row_stride +
                            static_cast<std::size_t>(iv->at.head) * dh;
                sp.len = static_cast<std::size_t>(dh);
            }
            switch (iv->kind) {
                case ActionKind::zero:
                    break;
                case ActionKind::replace_with:
                case ActionKind::mean_ablate:
                    sp.rep = iv->value;
                    break;
                case ActionKind::scale_mix:
                    sp.rep = iv->value;
                    sp.w = iv->w;
                    sp.w_param = iv->w_param;
                    break;
            }
            if (sp.rep.defined() && sp.rep.size() != sp.len)
                throw DimensionError("intervention replacement has wrong extent");
            if (iv->kind != ActionKind::zero && !sp.rep.defined())
                throw UsageError("intervention needs a replacement tensor");
            ps.push_back(std::move(sp));
        }
    }
    return ps;
}

Tensor maybe_patch(const Tensor& x, const std::vector<SlicePatch>& ps) {
    return ps.empty() ? x : patch_slices(x, ps);
}

}  // namespace

ActivationCache forward(const ModelWeights& w,
                        const std::vector<std::vector<int>>& batch_tokens,
                        const InterventionSpec& iv, const ForwardOptions& opt) {
    const ModelConfig& cfg = w.cfg;
    cfg.validate();
    if (batch_tokens.empty()) throw UsageError("forward: empty batch");
    const int B = static_cast<int>(batch_tokens.size());
    const int T = static_cast<int>(batch_tokens[0].size());
    if (T < 1 || T > cfg.max_seq_len) throw UsageError("forward: sequence length out of range");
    for (const auto& seq : batch_tokens) {
        if (static_cast<int>(seq.size()) != T)
            throw UsageError("forward: ragged batch");
        for (int id : seq)
            if (id < 0 || id >= cfg.vocab_size) throw UsageError("forward: token out of vocab");
    }
    const int p = opt.base ? opt.resume_from : 0;
    if (p < 0 || p >= T) throw UsageError("forward: bad resume position");
    if (opt.base) {
        if (opt.base->B != B || opt.base->T != T ||
            static_cast<int>(opt.base->k.size()) != cfg.n_layers)
            throw UsageError("forward: resume base cache does not match");
    }
    const int Ta = T - p;
    const int H = cfg.n_heads;
    const int dh = cfg.d_head();
    const int d = cfg.d_model;

    PassContext ctx;
    ctx.cfg = &cfg;
    ctx.B = B;
    ctx.T = T;
    ctx.p = p;
    ctx.Ta = Ta;
    for (const Intervention& item : iv.items) {
        if (item.at.layer < 0 || item.at.layer >= cfg.n_layers)
            throw UsageError("intervention layer out of range");
        ctx.by_layer_site[{item.at.layer, static_cast<int>(item.at.site)}].push_back(&item);
    }

    std::vector<int> ids;
    std::vector<int> abs_pos;
    ids.reserve(static_cast<std::size_t>(B) * Ta);
    for (int b = 0; b < B; ++b)
        for (int t = p; t < T; ++t) {
            ids.push_back(batch_tokens[static_cast<std::size_t>(b)][static_cast<std::size_t>(t)]);
            abs_pos.push_back(t);
        }
    std::vector<int> head_pos;
    if (cfg.positional == "rotary") {
        head_pos.reserve(ids.size() * static_cast<std::size_t>(H));
        for (std::size_t r = 0; r < ids.size(); ++r)
            for (int h = 0; h < H; ++h) head_pos.push_back(abs_pos[r]);
    }

    Tensor x = embedding(w.tok_emb, ids);
    if (cfg.positional == "learned") x = add(x, take_rows(w.pos_emb, abs_pos));

    ActivationCache c;
    c.B = B;
    c.T = T;
    c.H = H;
    c.tokens = batch_tokens;

    auto to_heads = [&](const Tensor& t) {
        return reshape(permute(reshape(t, {B, Ta, H, dh}), {0, 2, 1, 3}), {B * H, Ta, dh});
    };
    auto from_heads = [&](const Tensor& t) {
        return reshape(permute(reshape(t, {B, H, Ta, dh}), {0, 2, 1, 3}), {B * Ta, d});
    };
    auto rope_heads = [&](const Tensor& t) {
        return reshape(rope(reshape(t, {B * Ta * H, dh}), head_pos), {B * Ta, d});
    };

    for (int l = 0; l < cfg.n_layers; ++l) {
        const LayerWeights& lw = w.layers[static_cast<std::size_t>(l)];
        if (opt.record)
            c.x.push_back(opt.base ? merge_rows(opt.base->x[static_cast<std::size_t>(l)], x, B, T, p)
                                   : x);
        Tensor a_in = rmsnorm(x, lw.attn_norm);
        Tensor q = maybe_patch(matmul(a_in, lw.wq),
                               patches_for(ctx, l, Site::q_in, static_cast<std::size_t>(d), false));
        Tensor k = maybe_patch(matmul(a_in, lw.wk),
                               patches_for(ctx, l, Site::k_in, static_cast<std::size_t>(d), false));
        Tensor v = maybe_patch(matmul(a_in, lw.wv),
                               patches_for(ctx, l, Site::v_in, static_cast<std::size_t>(d), false));
        if (opt.record) {
            c.q_pre.push_back(opt.base
                                  ? merge_rows(opt.base->q_pre[static_cast<std::size_t>(l)], q, B, T, p)
                                  : q);
            c.k_pre.push_back(opt.base
                                  ? merge_rows(opt.base->k_pre[static_cast<std::size_t>(l)], k, B, T, p)
                                  : k);
        }
        if (cfg.positional == "rotary") {
            q = rope_heads(q);
            k = rope_heads(k);
        }
        Tensor qh = to_heads(q);
        Tensor kh = to_heads(k);
        Tensor vh = to_heads(v);
        if (opt.base) {
            kh = merge_axis1(opt.base->k[static_cast<std::size_t>(l)], kh, p);
            vh = merge_axis1(opt.base->v[static_cast<std::size_t>(l)], vh, p);
        }
        if (opt.record) {
            c.k.push_back(kh);
            c.v.push_back(vh);
        }

        // causal mask plus any attention-blocking edges for this layer
        bool per_head_mask = false;
        for (const BlockEdge& e : iv.block_attention)
            if ((e.layer == l || e.layer < 0) && (e.head >= 0 || e.batch >= 0))
                per_head_mask = true;
        Tensor scores = scale(bmm_nt(qh, kh), 1.0 / std::sqrt(static_cast<double>(dh)));
        if (!per_head_mask) {
            Tensor mask = Tensor::zeros({Ta, T});
            double* pm = mask.data();
            for (int i = 0; i < Ta; ++i)
                for (int j = 0; j < T; ++j)
                    if (j > i + p) pm[static_cast<std::size_t>(i * T + j)] = kMaskValue;
            for (const BlockEdge& e : iv.block_attention) {
                if (e.layer != l && e.layer >= 0) continue;
                if (e.from_pos < p) continue;
                if (e.from_pos >= T || e.to_pos >= T || e.to_pos < 0)
                    throw UsageError("block_attention position out of range");
                pm[static_cast<std::size_t>((e.from_pos - p) * T + e.to_pos)] = kMaskValue;
            }
            scores = add_mask(scores, mask);
        } else {
            Tensor mask = Tensor::zeros({B * H, Ta, T});
            double* pm = mask.data();
            for (int s = 0; s < B * H; ++s)
                for (int i = 0; i < Ta; ++i)
                    for (int j = 0; j < T; ++j)
                        if (j > i + p)
                            pm[(static_cast<std::size_t>(s) * Ta + i) * T + j] = kMaskValue;
            for (const BlockEdge& e : iv.block_attention) {
                if (e.layer != l && e.layer >= 0) continue;
                if (e.from_pos < p) continue;
                if (e.from_pos >= T || e.to_pos >= T || e.to_pos < 0)
                    throw UsageError("block_attention position out of range");
                const int bb0 = e.batch < 0 ? 0 : e.batch;
                const int bb1 = e.batch < 0 ? B : e.batch + 1;
                if (bb0 < 0 || bb1 > B) throw UsageError("block_attention batch out of range");
                for (int b = bb0; b < bb1; ++b) {
                    const int h0 = e.head < 0 ? 0 : e.head;
                    const int h1 = e.head < 0 ? H : e.head + 1;
                    for (int h = h0; h < h1; ++h)
                        pm[(static_cast<std::size_t>(b * H + h) * Ta + (e.from_pos - p)) * T +
                           e.to_pos] = kMaskValue;
                }
            }
            scores = add(scores, mask);
        }
        Tensor attn = maybe_patch(
            softmax_lastdim(scores),
            patches_for(ctx, l, Site::attn_pattern, static_cast<std::size_t>(T), true));
        if (opt.record_attn)
            c.attn.push_back(opt.base && !opt.base->attn.empty()
                                 ? merge_axis1(opt.base->attn[static_cast<std::size_t>(l)], attn, p)
                                 : attn);
        Tensor z = maybe_patch(
            bmm(attn, vh),
            patches_for(ctx, l, Site::head_out, static_cast<std::size_t>(dh), true));
        if (opt.record)
            c.z.push_back(opt.base ? merge_axis1(opt.base->z[static_cast<std::size_t>(l)], z, p)
                                   : z);
        x = add(x, matmul(from_heads(z), lw.wo));
        Tensor m_in = rmsnorm(x, lw.mlp_norm);
        Tensor mlp = matmul(silu(matmul(m_in, lw.w1)), lw.w2);
        if (opt.record)
            c.mlp_out.push_back(
                opt.base ? merge_rows(opt.base->mlp_out[static_cast<std::size_t>(l)], mlp, B, T, p)
                         : mlp);
        x = add(x, mlp);
    }
    if (opt.record)
        c.final_residual =
            opt.base ? merge_rows(opt.base->final_residual, x, B, T, p) : x;
    Tensor logits = matmul(rmsnorm(x, w.final_norm), w.unembed);
    c.logits_active = logits;
    c.active_from = p;
    c.logits = opt.base ? merge_rows(opt.base->logits, logits, B, T, p) : logits;
    return c;
}

std::vector<double> ActivationCache::head_out(int layer, int head, int batch, int pos) const {
    const Tensor& zt = z.at(static_cast<std::size_t>(layer));
    const int H = zt.dim(0) / B;
    const std::size_t dh = static_cast<std::size_t>(zt.dim(2));
    const double* base =
        zt.data() + (static_cast<std::size_t>(batch * H + head) * T + pos) * dh;
    return std::vector<double>(base, base + dh);
}

std::vector<double> ActivationCache::site_value(const HookPoint& hp, int batch) const {
    switch (hp.site) {
        case Site::head_out:
            return head_out(hp.layer, hp.head, batch, hp.position);
        case Site::v_in: {
            const Tensor& vt = v.at(static_cast<std::size_t>(hp.layer));
            const int H = vt.dim(0) / B;
            const std::size_t dh = static_cast<std::size_t>(vt.dim(2));
            const double* base =
                vt.data() + (static_cast<std::size_t>(batch * H + hp.head) * T + hp.position) * dh;
            return std::vector<double>(base, base + dh);
        }
        case Site::q_in:
        case Site::k_in: {
            const Tensor& t = hp.site == Site::q_in ? q_pre.at(static_cast<std::size_t>(hp.layer))
                                                    : k_pre.at(static_cast<std::size_t>(hp.layer));
            const std::size_t d = static_cast<std::size_t>(t.dim(1));
            const std::size_t dhead = d / static_cast<std::size_t>(H);
            const double* base = t.data() + static_cast<std::size_t>(batch * T + hp.position) * d +
                                 static_cast<std::size_t>(hp.head) * dhead;
            return std::vector<double>(base, base + dhead);
        }
        case Site::attn_pattern: {
            const Tensor& at = attn.at(static_cast<std::size_t>(hp.layer));
            const int H = at.dim(0) / B;
            const double* base =
                at.data() + (static_cast<std::size_t>(batch * H + hp.head) * T + hp.position) * T;
            return std::vector<double>(base, base + T);
        }
    }
    throw UsageError("site_value: bad site");
}

double ActivationCache::logit(int batch, int pos, int token) const {
    const std::size_t vocab = static_cast<std::size_t>(logits.dim(1));
    return logits.data()[static_cast<std::size_t>(batch * T + pos) * vocab +
                         static_cast<std::size_t>(token)];
}

double ActivationCache::prob(int batch, int pos, int token) const {
    const std::size_t vocab = static_cast<std::size_t>(logits.dim(1));
    const double* row = logits.data() + static_cast<std::size_t>(batch * T + pos) * vocab;
    double mx = row[0];
    for (std::size_t i = 1; i < vocab; ++i) mx = std::max(mx, row[i]);
    double sum = 0.0;
    for (std::size_t i = 0; i < vocab; ++i) sum += std::exp(row[i] - mx);
    return std::exp(row[static_cast<std::size_t>(token)] - mx) / sum;
}

int ActivationCache::argmax(int batch, int pos) const {
    const std::size_t vocab = static_cast<std::size_t>(logits.dim(1));
    const double* row = logits.data() + static_cast<std::size_t>(batch * T + pos) * vocab;
    return static_cast<int>(std::max_element(row, row + vocab) - row);
}

int ActivationCache::argmax_restricted(int batch, int pos,
                                       const std::vector<int>& candidates) const {
    const std::size_t vocab = static_cast<std::size_t>(logits.dim(1));
    const double* row = logits.data() + static_cast<std::size_t>(batch * T + pos) * vocab;
    int best = candidates.at(0);
    for (int cidx : candidates)
        if (row[static_cast<std::size_t>(cidx)] > row[static_cast<std::size_t>(best)]) best = cidx;
    return best;
}

Tensor head_decomposed_attention(const ModelWeights& w, const std::vector<int>& tokens,
                                 int layer, int head) {
    if (layer < 0 || layer >= w.cfg.n_layers || head < 0 || head >= w.cfg.n_heads)
        throw UsageError("head_decomposed_attention: bad layer/head");
    NoGradGuard ng;
    ForwardOptions opt;
    opt.record = true;
    opt.record_attn = true;
    ActivationCache c = forward(w, {tokens}, {}, opt);
    const int T = c.T;
    const Tensor& at = c.attn.at(static_cast<std::size_t>(layer));
    std::vector<double> vals(static_cast<std::size_t>(T) * T);
    std::memcpy(vals.data(), at.data() + static_cast<std::size_t>(head) * T * T,
                vals.size() * sizeof(double));
    return Tensor::from({T, T}, std::move(vals));
}

std::vector<int> task_candidates(const TaskInstance& t) {
    std::vector<int> c;
    for (const auto& s : t.segments) c.push_back(s.object);
    return c;
}

double accuracy(const ModelWeights& w, const std::vector<TaskInstance>& tasks,
                const InterventionSpec& shared_iv, const AccuracyOptions& opt) {
    return accuracy(w, tasks, std::vector<InterventionSpec>(tasks.size(), shared_iv), opt);
}

double accuracy(const ModelWeights& w, const std::vector<TaskInstance>& tasks,
                const std::vector<InterventionSpec>& per_task, const AccuracyOptions& opt) {
    if (tasks.empty()) throw UsageError("accuracy: no tasks");
    if (per_task.size() != tasks.size())
        throw UsageError("accuracy: one intervention spec per task required");
    NoGradGuard ng;
    int correct = 0;
    for (std::size_t begin = 0; begin < tasks.size();
         begin += static_cast<std::size_t>(opt.chunk)) {
        const std::size_t end = std::min(tasks.size(), begin + static_cast<std::size_t>(opt.chunk));
        std::vector<std::vector<int>> toks;
        InterventionSpec batch_iv;
        for (std::size_t i = begin; i < end; ++i) {
            toks.push_back(tasks[i].tokens);
            for (Intervention item : per_task[i].items) {
                item.batch = static_cast<int>(i - begin);
                batch_iv.items.push_back(std::move(item));
            }
            for (BlockEdge e : per_task[i].block_attention) {
                e.batch = static_cast<int>(i - begin);
                batch_iv.block_attention.push_back(e);
            }
        }
        ActivationCache c = forward(w, toks, batch_iv, {});
        for (std::size_t i = begin; i < end; ++i) {
            const int b = static_cast<int>(i - begin);
            const int pos = tasks[i].positions.at("last");
            const int pred = opt.restrict_to_candidates
                                 ? c.argmax_restricted(b, pos, task_candidates(tasks[i]))
                                 : c.argmax(b, pos);
            if (pred == tasks[i].target) ++correct;
        }
    }
    return static_cast<double>(correct) / static_cast<double>(tasks.size());
}

}  // namespace circuitbox

#include "circuitbox/patch.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>

#include <json.hpp>

#include "circuitbox/ops.hpp"

namespace circuitbox {

Via via_from_string(const std::string& s) {
    if (s == "q") return Via::Q;
    if (s == "v") return Via::V;
    if (s == "direct") return Via::Direct;
    throw UsageError("unknown via: " + s);
}

std::string via_to_string(Via v) {
    switch (v) {
        case Via::Q: return "q";
        case Via::V: return "v";
        case Via::Direct: return "direct";
    }
    return "?";
}

namespace {

int resolve_pos(const TaskInstance& t, const std::string& role) {
    auto it = t.positions.find(role);
    if (it != t.positions.end()) return it->second;
    try {
        std::size_t used = 0;
        const int v = std::stoi(role, &used);
        if (used == role.size()) return v;
    } catch (const std::exception&) {
    }
    throw UsageError("unknown position role: " + role);
}

double prob_of(const double* row, int vocab, int token) {
    double mx = row[0];
    for (int i = 1; i < vocab; ++i) mx = std::max(mx, row[i]);
    double sum = 0.0;
    for (int i = 0; i < vocab; ++i) sum += std::exp(row[i] - mx);
    return std::exp(row[static_cast<std::size_t>(token)] - mx) / sum;
}

bool rows_equal(const double* a, const double* b, std::size_t n) {
    return std::memcmp(a, b, n * sizeof(double)) == 0;
}

Tensor row_tensor(const Tensor& src, std::size_t row, int d) {
    std::vector<double> v(static_cast<std::size_t>(d));
    std::memcpy(v.data(), src.data() + row * static_cast<std::size_t>(d),
                static_cast<std::size_t>(d) * sizeof(double));
    return Tensor::from({1, d}, std::move(v));
}

/// Result of the frozen pass: either the receiver head's input channel at the
/// patched position or the final-logits row at the sender position.
struct FrozenOut {
    std::vector<double> channel;
    std::vector<double> logits;
};

/// Walks the residual stream at the single position `s` with every head output
/// clamped to the clean run except the sender, which carries the noise value.
/// Uses the same tensor primitives as forward() so results are bit-identical
/// where nothing changed.
FrozenOut frozen_pass(const ModelWeights& w, const ActivationCache& clean, int b, int s,
                      int sender_layer, int sender_head, const std::vector<double>& noise_z,
                      const PathReceiver& recv, Via via, bool freeze_mlp) {
    NoGradGuard ng;
    const ModelConfig& cfg = w.cfg;
    const int d = cfg.d_model;
    const int H = cfg.n_heads;
    const int dh = cfg.d_head();
    const int T = clean.T;

    FrozenOut out;
    Tensor x = row_tensor(clean.x.at(static_cast<std::size_t>(sender_layer)),
                          static_cast<std::size_t>(b) * T + s, d);
    for (int l = sender_layer; l < cfg.n_layers; ++l) {
        const LayerWeights& lw = w.layers[static_cast<std::size_t>(l)];
        if (!recv.final_logits && l == recv.layer) {
            Tensor a_in = rmsnorm(x, lw.attn_norm);
            Tensor proj = matmul(a_in, via == Via::Q ? lw.wq : lw.wv);
            const double* base = proj.data() + static_cast<std::size_t>(recv.head) * dh;
            out.channel.assign(base, base + dh);
            return out;
        }
        std::vector<double> zcat(static_cast<std::size_t>(d));
        for (int h = 0; h < H; ++h) {
            const double* src =
                (l == sender_layer && h == sender_head)
                    ? noise_z.data()
                    : clean.z.at(static_cast<std::size_t>(l)).data() +
                          (static_cast<std::size_t>(b * H + h) * T + s) * dh;
            std::memcpy(zcat.data() + static_cast<std::size_t>(h) * dh, src,
                        static_cast<std::size_t>(dh) * sizeof(double));
        }
        x = add(x, matmul(Tensor::from({1, d}, std::move(zcat)), lw.wo));
        if (freeze_mlp) {
            x = add(x, row_tensor(clean.mlp_out.at(static_cast<std::size_t>(l)),
                                  static_cast<std::size_t>(b) * T + s, d));
        } else {
            x = add(x, matmul(silu(matmul(rmsnorm(x, lw.mlp_norm), lw.w1)), lw.w2));
        }
    }
    Tensor logits = matmul(rmsnorm(x, w.final_norm), w.unembed);
    out.logits.assign(logits.data(), logits.data() + logits.size());
    return out;
}

struct SenderSpec {
    int layer = 0;
    int head = 0;
    std::vector<int> pos;  // resolved per pair
    std::string label;
};

std::vector<PatchScore> sweep_impl(const ModelWeights& w, const std::vector<TaskInstance>& origs,
                                   const std::vector<TaskInstance>& noises,
                                   const std::vector<SenderSpec>& senders,
                                   const PathReceiver& receiver, Via via,
                                   const PathPatchOptions& opt) {
    if (origs.empty()) throw UsageError("path patch: empty pair set");
    if (origs.size() != noises.size())
        throw UsageError("path patch: original and noise task counts differ");
    if (senders.empty()) throw UsageError("path patch: no senders");
    if (receiver.final_logits != (via == Via::Direct))
        throw UsageError("path patch: final-logits receiver requires the direct path");
    for (const SenderSpec& s : senders) {
        if (s.layer < 0 || s.layer >= w.cfg.n_layers || s.head < 0 || s.head >= w.cfg.n_heads)
            throw UsageError("path patch: sender out of range");
        if (!receiver.final_logits && s.layer >= receiver.layer)
            throw UsageError("path patch: sender must precede receiver");
    }
    if (!receiver.final_logits &&
        (receiver.layer < 0 || receiver.layer >= w.cfg.n_layers || receiver.head < 0 ||
         receiver.head >= w.cfg.n_heads))
        throw UsageError("path patch: receiver out of range");

    NoGradGuard ng;
    const int n = static_cast<int>(origs.size());
    const int nsend = static_cast<int>(senders.size());
    std::vector<double> sum_po(static_cast<std::size_t>(nsend), 0.0);
    std::vector<double> sum_pp(static_cast<std::size_t>(nsend), 0.0);

    for (int begin = 0; begin < n; begin += opt.chunk) {
        const int end = std::min(n, begin + opt.chunk);
        const int nb = end - begin;
        std::vector<std::vector<int>> otoks, ntoks;
        for (int i = begin; i < end; ++i) {
            otoks.push_back(origs[static_cast<std::size_t>(i)].tokens);
            ntoks.push_back(noises[static_cast<std::size_t>(i)].tokens);
        }
        ForwardOptions rec;
        rec.record = true;
        ActivationCache clean = forward(w, otoks, {}, rec);
        ActivationCache noise = forward(w, ntoks, {}, rec);
        const int vocab = w.cfg.vocab_size;

        for (int si = 0; si < nsend; ++si) {
            const SenderSpec& snd = senders[static_cast<std::size_t>(si)];
            InterventionSpec iv;
            std::vector<double> pp(static_cast<std::size_t>(nb));
            std::vector<bool> pending(static_cast<std::size_t>(nb), false);
            int minpos = std::numeric_limits<int>::max();
            for (int b = 0; b < nb; ++b) {
                const TaskInstance& task = origs[static_cast<std::size_t>(begin + b)];
                const int s = snd.pos[static_cast<std::size_t>(begin + b)];
                const int last = resolve_pos(task, "last");
                if (s < 0 || s >= clean.T) throw UsageError("path patch: sender position out of range");
                const double po = clean.prob(b, last, task.target);
                sum_po[static_cast<std::size_t>(si)] += po;
                pp[static_cast<std::size_t>(b)] = po;
                const std::vector<double> nz = noise.head_out(snd.layer, snd.head, b, s);
                const std::vector<double> cz = clean.head_out(snd.layer, snd.head, b, s);
                if (rows_equal(nz.data(), cz.data(), nz.size())) continue;
                if (via == Via::Direct) {
                    if (s != last) continue;
                    FrozenOut fo = frozen_pass(w, clean, b, s, snd.layer, snd.head, nz, receiver,
                                               via, opt.freeze_mlp);
                    const double* crow =
                        clean.logits.data() + static_cast<std::size_t>(b * clean.T + s) * vocab;
                    if (!rows_equal(fo.logits.data(), crow, static_cast<std::size_t>(vocab)))
                        pp[static_cast<std::size_t>(b)] =
                            prob_of(fo.logits.data(), vocab, task.target);
                    continue;
                }
                const int patch_pos = via == Via::Q ? resolve_pos(task, receiver.role) : s;
                if (via == Via::Q && patch_pos != s) continue;
                FrozenOut fo = frozen_pass(w, clean, b, s, snd.layer, snd.head, nz, receiver, via,
                                           opt.freeze_mlp);
                HookPoint hp;
                hp.layer = receiver.layer;
                hp.head = receiver.head;
                hp.site = via == Via::Q ? Site::q_in : Site::v_in;
                hp.position = patch_pos;
                const std::vector<double> cc = clean.site_value(hp, b);
                if (rows_equal(fo.channel.data(), cc.data(), cc.size())) continue;
                Intervention item;
                item.at = hp;
                item.kind = ActionKind::replace_with;
                item.batch = b;
                const int clen = static_cast<int>(fo.channel.size());
                item.value = Tensor::from({clen}, std::move(fo.channel));
                iv.items.push_back(std::move(item));
                pending[static_cast<std::size_t>(b)] = true;
                minpos = std::min(minpos, patch_pos);
            }
            if (!iv.items.empty()) {
                ForwardOptions fopt;
                fopt.base = &clean;
                fopt.resume_from = minpos;
                ActivationCache res = forward(w, otoks, iv, fopt);
                for (int b = 0; b < nb; ++b) {
                    if (!pending[static_cast<std::size_t>(b)]) continue;
                    const TaskInstance& task = origs[static_cast<std::size_t>(begin + b)];
                    pp[static_cast<std::size_t>(b)] =
                        res.prob(b, resolve_pos(task, "last"), task.target);
                }
            }
            for (int b = 0; b < nb; ++b)
                sum_pp[static_cast<std::size_t>(si)] += pp[static_cast<std::size_t>(b)];
        }
    }

    std::vector<PatchScore> scores;
    for (int si = 0; si < nsend; ++si) {
        const double po = sum_po[static_cast<std::size_t>(si)] / n;
        const double pp = sum_pp[static_cast<std::size_t>(si)] / n;
        if (po == 0.0) throw NumericError("path patch: clean target probability is zero");
        PatchScore ps;
        ps.sender_layer = senders[static_cast<std::size_t>(si)].layer;
        ps.sender_head = senders[static_cast<std::size_t>(si)].head;
        ps.sender_pos = senders[static_cast<std::size_t>(si)].label;
        ps.via = via_to_string(via);
        ps.p_org = po;
        ps.p_patch = pp;
        ps.score = (pp - po) / po;
        scores.push_back(std::move(ps));
    }
    return scores;
}

}  // namespace

std::vector<PatchScore> path_patch_sweep(const ModelWeights& w,
                                         const std::vector<TaskInstance>& origs,
                                         const std::vector<TaskInstance>& noises,
                                         const std::vector<RoleHook>& senders,
                                         const PathReceiver& receiver, Via via,
                                         const PathPatchOptions& opt) {
    std::vector<SenderSpec> specs;
    for (const RoleHook& rh : senders) {
        SenderSpec s;
        s.layer = rh.layer;
        s.head = rh.head;
        s.label = rh.role;
        for (const TaskInstance& t : origs) s.pos.push_back(resolve_pos(t, rh.role));
        specs.push_back(std::move(s));
    }
    return sweep_impl(w, origs, noises, specs, receiver, via, opt);
}

PatchScore path_patch(const ModelWeights& w, const TaskInstance& orig, const TaskInstance& noise,
                      const HookPoint& sender, const PathReceiver& receiver, Via via,
                      const PathPatchOptions& opt) {
    if (sender.site != Site::head_out)
        throw UsageError("path patch: sender must be a head output");
    SenderSpec s;
    s.layer = sender.layer;
    s.head = sender.head;
    s.pos = {sender.position};
    s.label = std::to_string(sender.position);
    return sweep_impl(w, {orig}, {noise}, {s}, receiver, via, opt).at(0);
}

Tensor activation_patch(const ModelWeights& w, const TaskInstance& src, const TaskInstance& dst,
                        const std::vector<HookPoint>& nodes) {
    if (src.tokens.size() != dst.tokens.size())
        throw UsageError("activation patch: source and destination are not aligned");
    NoGradGuard ng;
    ForwardOptions rec;
    rec.record = true;
    ActivationCache clean = forward(w, {src.tokens}, {}, rec);
    InterventionSpec iv;
    for (const HookPoint& hp : nodes) {
        if (hp.site != Site::head_out)
            throw UsageError("activation patch: only head outputs are patchable");
        Intervention item;
        item.at = hp;
        item.kind = ActionKind::replace_with;
        std::vector<double> v = clean.head_out(hp.layer, hp.head, 0, hp.position);
        const int n_v = static_cast<int>(v.size());
        item.value = Tensor::from({n_v}, std::move(v));
        iv.items.push_back(std::move(item));
    }
    return forward(w, {dst.tokens}, iv, {}).logits;
}

std::vector<double> MeanCache::get(int layer, int head, const std::string& role) const {
    auto it = means.find(role);
    if (it == means.end()) throw UsageError("mean cache: unknown role " + role);
    if (layer < 0 || layer >= n_layers || head < 0 || head >= n_heads)
        throw UsageError("mean cache: head out of range");
    const double* base =
        it->second.data() + static_cast<std::size_t>(layer * n_heads + head) * d_head;
    return std::vector<double>(base, base + d_head);
}

MeanCache build_mean_cache(const ModelWeights& w, const std::vector<TaskInstance>& tasks,
                           int chunk) {
    if (tasks.empty()) throw UsageError("mean cache: no reference tasks");
    NoGradGuard ng;
    MeanCache mc;
    mc.n_layers = w.cfg.n_layers;
    mc.n_heads = w.cfg.n_heads;
    mc.d_head = w.cfg.d_head();
    mc.n_tasks = static_cast<int>(tasks.size());
    mc.seed = tasks.front().seed;
    for (const auto& kv : tasks.front().positions) mc.roles.push_back(kv.first);
    std::map<std::string, std::vector<double>> acc;
    const std::size_t slab =
        static_cast<std::size_t>(mc.n_layers) * mc.n_heads * mc.d_head;
    for (const std::string& r : mc.roles) acc[r].assign(slab, 0.0);

    for (std::size_t begin = 0; begin < tasks.size(); begin += static_cast<std::size_t>(chunk)) {
        const std::size_t end = std::min(tasks.size(), begin + static_cast<std::size_t>(chunk));
        std::vector<std::vector<int>> toks;
        for (std::size_t i = begin; i < end; ++i) toks.push_back(tasks[i].tokens);
        ForwardOptions rec;
        rec.record = true;
        ActivationCache c = forward(w, toks, {}, rec);
        for (std::size_t i = begin; i < end; ++i) {
            const int b = static_cast<int>(i - begin);
            for (const std::string& r : mc.roles) {
                const int pos = resolve_pos(tasks[i], r);
                std::vector<double>& a = acc[r];
                for (int l = 0; l < mc.n_layers; ++l)
                    for (int h = 0; h < mc.n_heads; ++h) {
                        const std::vector<double> z = c.head_out(l, h, b, pos);
                        double* dst = a.data() +
                                      static_cast<std::size_t>(l * mc.n_heads + h) * mc.d_head;
                        for (int j = 0; j < mc.d_head; ++j) dst[j] += z[static_cast<std::size_t>(j)];
                    }
            }
        }
    }
    for (const std::string& r : mc.roles) {
        std::vector<double>& a = acc[r];
        for (double& x : a) x /= static_cast<double>(mc.n_tasks);
        mc.means[r] = Tensor::from({mc.n_layers * mc.n_heads, mc.d_head}, std::move(a));
    }
    return mc;
}

void save_mean_cache(const std::string& path, const MeanCache& mc) {
    nlohmann::json hdr;
    hdr["n_layers"] = mc.n_layers;
    hdr["n_heads"] = mc.n_heads;
    hdr["d_head"] = mc.d_head;
    hdr["n_tasks"] = mc.n_tasks;
    hdr["seed"] = mc.seed;
    hdr["roles"] = mc.roles;
    const std::string hs = hdr.dump();
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("mean cache: cannot open " + path + " for writing");
    f.write("CSMC", 4);
    const std::uint32_t version = 1;
    f.write(reinterpret_cast<const char*>(&version), sizeof(version));
    const std::uint64_t hlen = hs.size();
    f.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
    f.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    for (const std::string& r : mc.roles) {
        const Tensor& t = mc.means.at(r);
        f.write(reinterpret_cast<const char*>(t.data()),
                static_cast<std::streamsize>(t.size() * sizeof(double)));
    }
    if (!f) throw IoError("mean cache: write failed for " + path);
}

MeanCache load_mean_cache(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("mean cache: cannot open " + path);
    char magic[4];
    f.read(magic, 4);
    if (!f || std::memcmp(magic, "CSMC", 4) != 0)
        throw IoError("mean cache: bad magic in " + path);
    std::uint32_t version = 0;
    f.read(reinterpret_cast<char*>(&version), sizeof(version));
    if (!f || version != 1) throw IoError("mean cache: unsupported version");
    std::uint64_t hlen = 0;
    f.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
    std::string hs(static_cast<std::size_t>(hlen), '\0');
    f.read(hs.data(), static_cast<std::streamsize>(hlen));
    if (!f) throw IoError("mean cache: truncated header in " + path);
    nlohmann::json hdr;
    try {
        hdr = nlohmann::json::parse(hs);
    } catch (const std::exception& e) {
        throw IoError(std::string("mean cache: bad header: ") + e.what());
    }
    MeanCache mc;
    mc.n_layers = hdr.at("n_layers").get<int>();
    mc.n_heads = hdr.at("n_heads").get<int>();
    mc.d_head = hdr.at("d_head").get<int>();
    mc.n_tasks = hdr.at("n_tasks").get<int>();
    mc.seed = hdr.at("seed").get<std::uint64_t>();
    mc.roles = hdr.at("roles").get<std::vector<std::string>>();
    const std::size_t slab = static_cast<std::size_t>(mc.n_layers) * mc.n_heads * mc.d_head;
    for (const std::string& r : mc.roles) {
        std::vector<double> v(slab);
        f.read(reinterpret_cast<char*>(v.data()),
               static_cast<std::streamsize>(slab * sizeof(double)));
        if (!f) throw IoError("mean cache: truncated payload in " + path);
        mc.means[r] = Tensor::from({mc.n_layers * mc.n_heads, mc.d_head}, std::move(v));
    }
    return mc;
}

namespace {

InterventionSpec knockout_spec(const ModelWeights& w, const TaskInstance& task,
                               const std::string& from_role, const std::string& to_role,
                               const std::set<int>& unblocked_layers) {
    const int f = resolve_pos(task, from_role);
    const int t = resolve_pos(task, to_role);
    InterventionSpec iv;
    for (int l = 0; l < w.cfg.n_layers; ++l) {
        if (unblocked_layers.count(l)) continue;
        BlockEdge e;
        e.layer = l;
        e.from_pos = f;
        e.to_pos = t;
        iv.block_attention.push_back(e);
    }
    return iv;
}

}  // namespace

Tensor attention_knockout(const ModelWeights& w, const TaskInstance& task,
                          const std::string& from_role, const std::string& to_role,
                          const std::set<int>& unblocked_layers) {
    NoGradGuard ng;
    InterventionSpec iv = knockout_spec(w, task, from_role, to_role, unblocked_layers);
    return forward(w, {task.tokens}, iv, {}).logits;
}

double knockout_accuracy(const ModelWeights& w, const std::vector<TaskInstance>& tasks,
                         const std::string& from_role, const std::string& to_role,
                         const std::set<int>& unblocked_layers, const AccuracyOptions& aopt) {
    std::vector<InterventionSpec> per_task;
    for (const TaskInstance& t : tasks)
        per_task.push_back(knockout_spec(w, t, from_role, to_role, unblocked_layers));
    return accuracy(w, tasks, per_task, aopt);
}

namespace {

void check_cmap_compatible(const ModelWeights& a, const ModelWeights& b) {
    const ModelConfig& ca = a.cfg;
    const ModelConfig& cb = b.cfg;
    if (ca.n_layers != cb.n_layers || ca.n_heads != cb.n_heads || ca.d_model != cb.d_model ||
        ca.vocab_size != cb.vocab_size || ca.positional != cb.positional)
        throw UsageError("cmap: model architectures do not match");
}

}  // namespace

Tensor cmap(const ModelWeights& a, const ModelWeights& b, const TaskInstance& task,
            const std::vector<HookPoint>& nodes) {
    check_cmap_compatible(a, b);
    NoGradGuard ng;
    ForwardOptions rec;
    rec.record = true;
    ActivationCache cb = forward(b, {task.tokens}, {}, rec);
    InterventionSpec iv;
    for (const HookPoint& hp : nodes) {
        if (hp.site != Site::head_out) throw UsageError("cmap: only head outputs are patchable");
        Intervention item;
        item.at = hp;
        item.kind = ActionKind::replace_with;
        std::vector<double> v = cb.head_out(hp.layer, hp.head, 0, hp.position);
        const int n_v = static_cast<int>(v.size());
        item.value = Tensor::from({n_v}, std::move(v));
        iv.items.push_back(std::move(item));
    }
    return forward(a, {task.tokens}, iv, {}).logits;
}

double cmap_accuracy(const ModelWeights& a, const ModelWeights& b,
                     const std::vector<TaskInstance>& tasks, const std::vector<RoleHook>& nodes,
                     const AccuracyOptions& aopt) {
    check_cmap_compatible(a, b);
    if (tasks.empty()) throw UsageError("cmap: no tasks");
    NoGradGuard ng;
    int correct = 0;
    for (std::size_t begin = 0; begin < tasks.size();
         begin += static_cast<std::size_t>(aopt.chunk)) {
        const std::size_t end =
            std::min(tasks.size(), begin + static_cast<std::size_t>(aopt.chunk));
        std::vector<std::vector<int>> toks;
        for (std::size_t i = begin; i < end; ++i) toks.push_back(tasks[i].tokens);
        ForwardOptions rec;
        rec.record = true;
        ActivationCache cb = forward(b, toks, {}, rec);
        InterventionSpec iv;
        for (std::size_t i = begin; i < end; ++i) {
            const int bb = static_cast<int>(i - begin);
            for (const RoleHook& rh : nodes) {
                Intervention item;
                item.at.layer = rh.layer;
                item.at.head = rh.head;
                item.at.site = Site::head_out;
                item.at.position = resolve_pos(tasks[i], rh.role);
                item.kind = ActionKind::replace_with;
                item.batch = bb;
                std::vector<double> v = cb.head_out(rh.layer, rh.head, bb, item.at.position);
                const int n_v = static_cast<int>(v.size());
                item.value = Tensor::from({n_v}, std::move(v));
                iv.items.push_back(std::move(item));
            }
        }
        ActivationCache res = forward(a, toks, iv, {});
        for (std::size_t i = begin; i < end; ++i) {
            const int bb = static_cast<int>(i - begin);
            const int pos = resolve_pos(tasks[i], "last");
            const int pred = aopt.restrict_to_candidates
                                 ? res.argmax_restricted(bb, pos, task_candidates(tasks[i]))
                                 : res.argmax(bb, pos);
            if (pred == tasks[i].target) ++correct;
        }
    }
    return static_cast<double>(correct) / static_cast<double>(tasks.size());
}

std::string patch_scores_to_csv(const std::vector<PatchScore>& scores) {
    std::ostringstream os;
    os << "sender_layer,sender_head,sender_pos,via,p_org,p_patch,score\n";
    char buf[96];
    for (const PatchScore& s : scores) {
        std::snprintf(buf, sizeof(buf), "%.17g,%.17g,%.17g", s.p_org, s.p_patch, s.score);
        os << s.sender_layer << ',' << s.sender_head << ',' << s.sender_pos << ',' << s.via << ','
           << buf << '\n';
    }
    return os.str();
}

std::vector<PatchScore> patch_scores_from_csv(const std::string& csv) {
    std::istringstream is(csv);
    std::string line;
    if (!std::getline(is, line) || line.rfind("sender_layer,", 0) != 0)
        throw IoError("patch score csv: missing header");
    std::vector<PatchScore> out;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string field;
        std::vector<std::string> fields;
        while (std::getline(ls, field, ',')) fields.push_back(field);
        if (fields.size() != 7) throw IoError("patch score csv: malformed row: " + line);
        PatchScore s;
        try {
            s.sender_layer = std::stoi(fields[0]);
            s.sender_head = std::stoi(fields[1]);
            s.sender_pos = fields[2];
            s.via = fields[3];
            s.p_org = std::stod(fields[4]);
            s.p_patch = std::stod(fields[5]);
            s.score = std::stod(fields[6]);
        } catch (const std::exception&) {
            throw IoError("patch score csv: malformed row: " + line);
        }
        out.push_back(std::move(s));
    }
    return out;
}

}  // namespace circuitbox

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <set>
#include <vector>

#include "circuitbox/ops.hpp"
#include "circuitbox/patch.hpp"

using namespace circuitbox;

namespace {

ModelConfig small_cfg(const Vocab& v, int layers = 4, int heads = 4, std::uint64_t seed = 7) {
    ModelConfig cfg;
    cfg.n_layers = layers;
    cfg.n_heads = heads;
    cfg.d_model = 64;
    cfg.d_mlp = 128;
    cfg.vocab_size = v.size();
    cfg.max_seq_len = 64;
    cfg.seed = seed;
    return cfg;
}

std::vector<TaskInstance> gen_tasks(const Vocab& v, int n, std::uint64_t seed0) {
    std::vector<TaskInstance> ts;
    for (int i = 0; i < n; ++i) ts.push_back(gen_task(v, 7, seed0 + static_cast<std::uint64_t>(i)));
    return ts;
}

bool tensors_equal(const Tensor& a, const Tensor& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i)
        if (a.data()[i] != b.data()[i]) return false;
    return true;
}

}  // namespace

TEST_CASE("path patch with identical noise scores exactly zero") {
    Vocab v = Vocab::standard();
    ModelWeights w = ModelWeights::init(small_cfg(v));
    TaskInstance t = gen_task(v, 7, 11);
    const int last = t.positions.at("last");

    for (int layer = 0; layer < 3; ++layer) {
        HookPoint sender{layer, 1, Site::head_out, last};
        PatchScore s = path_patch(w, t, t, sender, PathReceiver::logits(), Via::Direct);
        CHECK(s.score == 0.0);
        CHECK(s.p_patch == s.p_org);
        CHECK(s.p_org > 0.0);
        CHECK(s.p_org <= 1.0);
    }
    HookPoint sender{0, 2, Site::head_out, t.positions.at("query_label")};
    PatchScore sq = path_patch(w, t, t, sender,
                               PathReceiver::head_at(2, 0, "query_label"), Via::Q);
    CHECK(sq.score == 0.0);
    PatchScore sv = path_patch(w, t, t, sender, PathReceiver::head_at(3, 1, "last"), Via::V);
    CHECK(sv.score == 0.0);
}

TEST_CASE("sender with zeroed output weights has no causal path") {
    Vocab v = Vocab::standard();
    ModelWeights w = ModelWeights::init(small_cfg(v));
    const int dead_layer = 1, dead_head = 2;
    const int dh = w.cfg.d_head();
    double* wo = w.layers[dead_layer].wo.data();
    for (int r = dead_head * dh; r < (dead_head + 1) * dh; ++r)
        for (int c = 0; c < w.cfg.d_model; ++c) wo[r * w.cfg.d_model + c] = 0.0;

    TaskInstance orig = gen_task(v, 7, 21);
    TaskInstance noise = gen_noise_task(v, orig, 22);
    const int last = orig.positions.at("last");
    HookPoint sender{dead_layer, dead_head, Site::head_out, last};

    CHECK(path_patch(w, orig, noise, sender, PathReceiver::logits(), Via::Direct).score == 0.0);
    CHECK(path_patch(w, orig, noise, sender, PathReceiver::head_at(3, 0, "last"), Via::Q).score ==
          0.0);
    CHECK(path_patch(w, orig, noise, sender, PathReceiver::head_at(3, 0, "last"), Via::V).score ==
          0.0);
}

TEST_CASE("direct-path score matches a brute-force residual-sum oracle") {
    Vocab v = Vocab::standard();
    ModelWeights w = ModelWeights::init(small_cfg(v, 2, 2, 99));
    TaskInstance orig = gen_task(v, 7, 31);
    TaskInstance noise = gen_noise_task(v, orig, 32);
    const int last = orig.positions.at("last");
    const int d = w.cfg.d_model, H = w.cfg.n_heads, dh = w.cfg.d_head();

    NoGradGuard ng;
    ForwardOptions rec;
    rec.record = true;
    ActivationCache clean = forward(w, {orig.tokens}, {}, rec);
    ActivationCache noisy = forward(w, {noise.tokens}, {}, rec);

    auto naive_rmsnorm = [&](const std::vector<double>& x, const Tensor& wt) {
        double ss = 0.0;
        for (double xi : x) ss += xi * xi;
        const double inv = 1.0 / std::sqrt(ss / static_cast<double>(x.size()) + 1e-6);
        std::vector<double> out(x.size());
        for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * inv * wt.data()[i];
        return out;
    };
    auto naive_matvec = [](const std::vector<double>& x, const Tensor& wt, int rows, int cols) {
        std::vector<double> out(static_cast<std::size_t>(cols), 0.0);
        for (int r = 0; r < rows; ++r)
            for (int c = 0; c < cols; ++c) out[c] += x[static_cast<std::size_t>(r)] * wt.data()[r * cols + c];
        return out;
    };

    for (int sl = 0; sl < 2; ++sl)
        for (int sh = 0; sh < H; ++sh) {
            std::vector<double> x(static_cast<std::size_t>(d));
            const double* xrow = clean.x[sl].data() + static_cast<std::size_t>(last) * d;
            std::copy(xrow, xrow + d, x.begin());
            for (int l = sl; l < 2; ++l) {
                std::vector<double> zcat(static_cast<std::size_t>(d));
                for (int h = 0; h < H; ++h) {
                    const ActivationCache& from = (l == sl && h == sh) ? noisy : clean;
                    std::vector<double> z = from.head_out(l, h, 0, last);
                    std::copy(z.begin(), z.end(), zcat.begin() + static_cast<std::size_t>(h) * dh);
                }
                std::vector<double> attn_out = naive_matvec(zcat, w.layers[l].wo, d, d);
                for (int i = 0; i < d; ++i) x[static_cast<std::size_t>(i)] += attn_out[static_cast<std::size_t>(i)];
                std::vector<double> m = naive_rmsnorm(x, w.layers[l].mlp_norm);
                std::vector<double> h1 = naive_matvec(m, w.layers[l].w1, d, w.cfg.d_mlp);
                for (double& hv : h1) hv = hv / (1.0 + std::exp(-hv));
                std::vector<double> mo = naive_matvec(h1, w.layers[l].w2, w.cfg.d_mlp, d);
                for (int i = 0; i < d; ++i) x[static_cast<std::size_t>(i)] += mo[static_cast<std::size_t>(i)];
            }
            std::vector<double> f = naive_rmsnorm(x, w.final_norm);
            std::vector<double> logits = naive_matvec(f, w.unembed, d, w.cfg.vocab_size);
            double mx = logits[0];
            for (double lv : logits) mx = std::max(mx, lv);
            double sum = 0.0;
            for (double lv : logits) sum += std::exp(lv - mx);
            const double p_expect = std::exp(logits[static_cast<std::size_t>(orig.target)] - mx) / sum;

            HookPoint sender{sl, sh, Site::head_out, last};
            PatchScore s = path_patch(w, orig, noise, sender, PathReceiver::logits(), Via::Direct);
            CHECK(s.p_patch == doctest::Approx(p_expect).epsilon(1e-9));
            CHECK(s.score == doctest::Approx((s.p_patch - s.p_org) / s.p_org).epsilon(1e-12));
        }
}

TEST_CASE("frozen-pass shortcut agrees with a full clamp-everything reference") {
    Vocab v = Vocab::standard();
    ModelWeights w = ModelWeights::init(small_cfg(v));
    TaskInstance orig = gen_task(v, 7, 41);
    TaskInstance noise = gen_noise_task(v, orig, 42);
    const int T = static_cast<int>(orig.tokens.size());
    const int H = w.cfg.n_heads;

    NoGradGuard ng;
    ForwardOptions rec;
    rec.record = true;
    ActivationCache clean = forward(w, {orig.tokens}, {}, rec);
    ActivationCache noisy = forward(w, {noise.tokens}, {}, rec);

    struct Case {
        int sl, sh;
        std::string srole;
        PathReceiver recv;
        Via via;
    };
    std::vector<Case> cases = {
        {0, 1, "query_label", PathReceiver::head_at(2, 3, "query_label"), Via::Q},
        {1, 0, "correct_object", PathReceiver::head_at(3, 2, "last"), Via::V},
        {0, 3, "prev_query_label", PathReceiver::head_at(2, 1, "last"), Via::V},
    };
    for (const Case& c : cases) {
        const int s = orig.positions.at(c.srole);
        // reference: clamp every head at every position to clean, sender to noise
        InterventionSpec clamp;
        for (int l = 0; l <= c.recv.layer - 1; ++l)
            for (int h = 0; h < H; ++h)
                for (int t = 0; t < T; ++t) {
                    const ActivationCache& from = (l == c.sl && h == c.sh && t == s) ? noisy : clean;
                    Intervention item;
                    item.at = {l, h, Site::head_out, t};
                    item.kind = ActionKind::replace_with;
                    std::vector<double> z = from.head_out(l, h, 0, t);
                    const int n_z = static_cast<int>(z.size());
                    item.value = Tensor::from({n_z}, std::move(z));
                    clamp.items.push_back(std::move(item));
                }
        ActivationCache iso = forward(w, {orig.tokens}, clamp, rec);
        const int patch_pos = c.via == Via::Q ? orig.positions.at(c.recv.role) : s;
        HookPoint ch{c.recv.layer, c.recv.head, c.via == Via::Q ? Site::q_in : Site::v_in,
                     patch_pos};
        std::vector<double> channel = iso.site_value(ch, 0);
        Intervention item;
        item.at = ch;
        item.kind = ActionKind::replace_with;
        const int n_channel = static_cast<int>(channel.size());
        item.value = Tensor::from({n_channel}, std::move(channel));
        InterventionSpec free_iv;
        free_iv.items.push_back(std::move(item));
        ActivationCache freed = forward(w, {orig.tokens}, free_iv, {});
        const int last = orig.positions.at("last");
        const double p_ref = freed.prob(0, last, orig.target);

        HookPoint sender{c.sl, c.sh, Site::head_out, s};
        PatchScore got = path_patch(w, orig, noise, sender, c.recv, c.via);
        CHECK(got.p_patch == p_ref);
        CHECK(got.p_org == clean.prob(0, last, orig.target));
    }
}

TEST_CASE("sweep over role-addressed senders matches single-pair calls") {
    Vocab v = Vocab::standard();
    ModelWeights w = ModelWeights::init(small_cfg(v));
    std::vector<TaskInstance> origs = gen_tasks(v, 6, 400);
    std::vector<TaskInstance> noises;
    for (std::size_t i = 0; i < origs.size(); ++i)
        noises.push_back(gen_noise_task(v, origs[i], 500 + static_cast<std::uint64_t>(i)));

    std::vector<RoleHook> senders = {{0, 0, "last"}, {1, 3, "last"}, {2, 1, "last"}};
    PathPatchOptions opt;
    opt.chunk = 4;  // force a chunk boundary
    std::vector<PatchScore> sw =
        path_patch_sweep(w, origs, noises, senders, PathReceiver::logits(), Via::Direct, opt);
    REQUIRE(sw.size() == senders.size());
    for (std::size_t si = 0; si < senders.size(); ++si) {
        double sum_po = 0.0, sum_pp = 0.0;
        for (std::size_t i = 0; i < origs.size(); ++i) {
            HookPoint hp{senders[si].layer, senders[si].head, Site::head_out,
                         origs[i].positions.at("last")};
            PatchScore one =
                path_patch(w, origs[i], noises[i], hp, PathReceiver::logits(), Via::Direct);
            sum_po += one.p_org;
            sum_pp += one.p_patch;
        }
        const double n = static_cast<double>(origs.size());
        CHECK(sw[si].p_org == doctest::Approx(sum_po / n).epsilon(1e-12));
        CHECK(sw[si].p_patch == doctest::Approx(sum_pp / n).epsilon(1e-12));
        CHECK(sw[si].sender_pos == "last");
        CHECK(sw[si].via == "direct");
    }
}

TEST_CASE("path patch rejects bad orderings and unknown roles") {
    Vocab v = Vocab::standard();
    ModelWeights w = ModelWeights::init(small_cfg(v));
    TaskInstance t = gen_task(v, 7, 1);
    TaskInstance n = gen_noise_task(v, t, 2);
    HookPoint sender{2, 0, Site::head_out, t.positions.at("last")};
    CHECK_THROWS_AS(path_patch(w, t, n, sender, PathReceiver::head_at(2, 1, "last"), Via::Q),
                    UsageError);
    CHECK_THROWS_AS(path_patch(w, t, n, sender, PathReceiver::head_at(1, 1, "last"), Via::V),
                    UsageError);
    CHECK_THROWS_AS(path_patch(w, t, n, sender, PathReceiver::head_at(3, 1, "nope"), Via::Q),
                    UsageError);
    CHECK_THROWS_AS(path_patch(w, t, n, sender, PathReceiver::logits(), Via::Q), UsageError);
    HookPoint qsender{0, 0, Site::q_in, 0};
    CHECK_THROWS_AS(path_patch(w, t, n, qsender, PathReceiver::logits(), Via::Direct), UsageError);
}

TEST_CASE("activation patching identity laws hold bitwise") {
    Vocab v = Vocab::standard();
    ModelWeights w = ModelWeights::init(small_cfg(v));
    TaskInstance a = gen_task(v, 7, 61);
    TaskInstance b = gen_task(v, 7, 62);
    NoGradGuard ng;
    Tensor plain_b = forward(w, {b.tokens}, {}, {}).logits;

    std::vector<HookPoint> nodes = {{1, 2, Site::head_out, a.positions.at("last")},
                                    {0, 0, Site::head_out, 3}};
    Tensor self = activation_patch(w, b, b, nodes);
    CHECK(tensors_equal(self, plain_b));

    Tensor none = activation_patch(w, a, b, {});
    CHECK(tensors_equal(none, plain_b));
}

TEST_CASE("patching all heads transfers the attention stream") {
    Vocab v = Vocab::standard();
    ModelWeights w = ModelWeights::init(small_cfg(v));
    TaskInstance a = gen_task(v, 7, 71);
    TaskInstance b = gen_task(v, 7, 72);
    const int T = static_cast<int>(a.tokens.size());
    const int d = w.cfg.d_model;
    NoGradGuard ng;
    ForwardOptions rec;
    rec.record = true;
    ActivationCache src = forward(w, {a.tokens}, {}, rec);

    InterventionSpec iv;
    for (int l = 0; l < w.cfg.n_layers; ++l)
        for (int h = 0; h < w.cfg.n_heads; ++h)
            for (int t = 0; t < T; ++t) {
                Intervention item;
                item.at = {l, h, Site::head_out, t};
                item.kind = ActionKind::replace_with;
                std::vector<double> z = src.head_out(l, h, 0, t);
                const int n_z = static_cast<int>(z.size());
                item.value = Tensor::from({n_z}, std::move(z));
                iv.items.push_back(std::move(item));
            }
    ActivationCache dst = forward(w, {b.tokens}, iv, rec);

    // residual decomposition: embedding + patched attention writes + own MLPs
    std::vector<int> ids(b.tokens.begin(), b.tokens.end());
    Tensor x = embedding(w.tok_emb, ids);
    std::vector<double> expect(x.data(), x.data() + x.size());
    for (int l = 0; l < w.cfg.n_layers; ++l) {
        Tensor zcat = Tensor::zeros({T, d});
        for (int h = 0; h < w.cfg.n_heads; ++h)
            for (int t = 0; t < T; ++t) {
                std::vector<double> z = src.head_out(l, h, 0, t);
                std::copy(z.begin(), z.end(),
                          zcat.data() + static_cast<std::size_t>(t) * d +
                              static_cast<std::size_t>(h) * w.cfg.d_head());
            }
        Tensor contrib = matmul(zcat, w.layers[l].wo);
        const double* pm = dst.mlp_out[l].data();
        for (std::size_t i = 0; i < expect.size(); ++i)
            expect[i] += contrib.data()[i] + pm[i];
    }
    for (std::size_t i = 0; i < expect.size(); ++i)
        CHECK(std::abs(expect[i] - dst.final_residual.data()[i]) < 1e-8);
}

TEST_CASE("activation patch rejects misaligned instances") {
    Vocab v = Vocab::standard();
    ModelWeights w = ModelWeights::init(small_cfg(v));
    TaskInstance a = gen_task(v, 7, 81);
    TaskInstance b = gen_positional_variant(v, 4, 7, 82).alternate;  // one extra segment
    CHECK_THROWS_AS(activation_patch(w, a, b, {}), UsageError);
}

TEST_CASE("mean cache of a single task equals its activations") {
    Vocab v = Vocab::standard();
    ModelWeights w = ModelWeights::init(small_cfg(v));
    TaskInstance t = gen_task(v, 7, 91);
    MeanCache one = build_mean_cache(w, {t});
    CHECK(one.n_tasks == 1);
    CHECK(one.d_head == w.cfg.d_head());

    NoGradGuard ng;
    ForwardOptions rec;
    rec.record = true;
    ActivationCache c = forward(w, {t.tokens}, {}, rec);
    for (const auto& kv : t.positions) {
        for (int l = 0; l < w.cfg.n_layers; ++l)
            for (int h = 0; h < w.cfg.n_heads; ++h) {
                std::vector<double> m = one.get(l, h, kv.first);
                std::vector<double> z = c.head_out(l, h, 0, kv.second);
                REQUIRE(m.size() == z.size());
                for (std::size_t i = 0; i < m.size(); ++i) CHECK(m[i] == z[i]);
            }
    }

    MeanCache dup = build_mean_cache(w, {t, t, t, t});
    for (int l = 0; l < w.cfg.n_layers; ++l) {
        std::vector<double> a = one.get(l, 1, "last");
        std::vector<double> b = dup.get(l, 1, "last");
        for (std::size_t i = 0; i < a.size(); ++i) CHECK(b[i] == doctest::Approx(a[i]).epsilon(1e-14));
    }

    CHECK_THROWS_AS(build_mean_cache(w, {}), UsageError);
    CHECK_THROWS_AS(one.get(0, 0, "nope"), UsageError);
}

TEST_CASE("mean cache round-trips through its container") {
    Vocab v = Vocab::standard();
    ModelWeights w = ModelWeights::init(small_cfg(v));
    MeanCache mc = build_mean_cache(w, gen_tasks(v, 8, 900));
    const std::string path = "/tmp/cb_test_meancache.bin";
    save_mean_cache(path, mc);
    MeanCache rt = load_mean_cache(path);
    CHECK(rt.n_layers == mc.n_layers);
    CHECK(rt.n_heads == mc.n_heads);
    CHECK(rt.n_tasks == mc.n_tasks);
    CHECK(rt.seed == mc.seed);
    REQUIRE(rt.roles == mc.roles);
    for (const std::string& r : mc.roles)
        CHECK(tensors_equal(rt.means.at(r), mc.means.at(r)));
    std::remove(path.c_str());
    CHECK_THROWS_AS(load_mean_cache("/tmp/cb_no_such_meancache.bin"), IoError);
}

TEST_CASE("mean ablation with cache values changes nothing when values are own activations") {
    Vocab v = Vocab::standard();
    ModelWeights w = ModelWeights::init(small_cfg(v));
    TaskInstance t = gen_task(v, 7, 95);
    MeanCache mc = build_mean_cache(w, {t});
    NoGradGuard ng;
    Tensor plain = forward(w, {t.tokens}, {}, {}).logits;
    InterventionSpec iv;
    Intervention item;
    item.at = {1, 2, Site::head_out, t.positions.at("last")};
    item.kind = ActionKind::mean_ablate;
    std::vector<double> m = mc.get(1, 2, "last");
    const int n_m = static_cast<int>(m.size());
    item.value = Tensor::from({n_m}, std::move(m));
    iv.items.push_back(std::move(item));
    Tensor ablated = forward(w, {t.tokens}, iv, {}).logits;
    CHECK(tensors_equal(ablated, plain));
}

TEST_CASE("knockout with every layer unblocked is the baseline bitwise") {
    Vocab v = Vocab::standard();
    ModelWeights w = ModelWeights::init(small_cfg(v));
    TaskInstance t = gen_task(v, 7, 101);
    std::set<int> all;
    for (int l = 0; l < w.cfg.n_layers; ++l) all.insert(l);
    NoGradGuard ng;
    Tensor base = forward(w, {t.tokens}, {}, {}).logits;
    Tensor same = attention_knockout(w, t, "last", "query_label", all);
    CHECK(tensors_equal(same, base));

    std::vector<TaskInstance> ts = gen_tasks(v, 40, 1100);
    CHECK(knockout_accuracy(w, ts, "last", "query_label", all) == accuracy(w, ts));
}

TEST_CASE("knockout keeps attention rows normalized and logits finite") {
    Vocab v = Vocab::standard();
    ModelWeights w = ModelWeights::init(small_cfg(v));
    TaskInstance t = gen_task(v, 7, 103);
    const int last = t.positions.at("last");

    Tensor blocked = attention_knockout(w, t, "last", "last", {});
    for (std::size_t i = 0; i < blocked.size(); ++i) CHECK(std::isfinite(blocked.data()[i]));

    NoGradGuard ng;
    InterventionSpec iv;
    for (int l = 0; l < w.cfg.n_layers; ++l) {
        BlockEdge e;
        e.layer = l;
        e.from_pos = last;
        e.to_pos = last;
        iv.block_attention.push_back(e);
    }
    ForwardOptions rec;
    rec.record = true;
    rec.record_attn = true;
    ActivationCache c = forward(w, {t.tokens}, iv, rec);
    const int T = c.T;
    for (int l = 0; l < w.cfg.n_layers; ++l)
        for (int h = 0; h < w.cfg.n_heads; ++h) {
            const double* row =
                c.attn[l].data() + (static_cast<std::size_t>(h) * T + last) * T;
            double sum = 0.0;
            for (int j = 0; j < T; ++j) sum += row[j];
            CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
            CHECK(row[last] < 1e-12);
        }

    CHECK_THROWS_AS(attention_knockout(w, t, "nope", "last", {}), UsageError);
}

TEST_CASE("self-CMAP is the identity") {
    Vocab v = Vocab::standard();
    ModelWeights w = ModelWeights::init(small_cfg(v));
    TaskInstance t = gen_task(v, 7, 111);
    NoGradGuard ng;
    Tensor plain = forward(w, {t.tokens}, {}, {}).logits;
    std::vector<HookPoint> nodes = {{0, 0, Site::head_out, t.positions.at("last")},
                                    {2, 3, Site::head_out, t.positions.at("query_label")}};
    CHECK(tensors_equal(cmap(w, w, t, nodes), plain));
    CHECK(tensors_equal(cmap(w, w, t, {}), plain));

    std::vector<TaskInstance> ts = gen_tasks(v, 30, 1200);
    std::vector<RoleHook> rnodes = {{0, 0, "last"}, {1, 1, "query_label"}};
    CHECK(cmap_accuracy(w, w, ts, rnodes) == accuracy(w, ts));
}

TEST_CASE("cmap rejects mismatched architectures") {
    Vocab v = Vocab::standard();
    ModelWeights a = ModelWeights::init(small_cfg(v, 4, 4));
    ModelWeights b = ModelWeights::init(small_cfg(v, 3, 4));
    TaskInstance t = gen_task(v, 7, 121);
    CHECK_THROWS_AS(cmap(a, b, t, {}), UsageError);
}

TEST_CASE("cross-model patching moves real information between models") {
    Vocab v = Vocab::standard();
    ModelWeights a = ModelWeights::init(small_cfg(v, 4, 4, 1));
    ModelWeights b = ModelWeights::init(small_cfg(v, 4, 4, 2));
    TaskInstance t = gen_task(v, 7, 131);
    NoGradGuard ng;
    Tensor plain = forward(a, {t.tokens}, {}, {}).logits;
    std::vector<HookPoint> nodes;
    for (int h = 0; h < a.cfg.n_heads; ++h)
        nodes.push_back({0, h, Site::head_out, t.positions.at("last")});
    Tensor patched = cmap(a, b, t, nodes);
    CHECK_FALSE(tensors_equal(patched, plain));
}

TEST_CASE("patch score tables round-trip through csv") {
    std::vector<PatchScore> scores;
    PatchScore a;
    a.sender_layer = 3;
    a.sender_head = 7;
    a.sender_pos = "query_label";
    a.via = "q";
    a.p_org = 0.123456789012345678;
    a.p_patch = 0.0000031415926535897931;
    a.score = (a.p_patch - a.p_org) / a.p_org;
    PatchScore b;
    b.sender_layer = 0;
    b.sender_head = 0;
    b.sender_pos = "52";
    b.via = "direct";
    b.p_org = 1.0 / 3.0;
    b.p_patch = 1.0 / 3.0;
    b.score = 0.0;
    scores = {a, b};

    const std::string csv = patch_scores_to_csv(scores);
    std::vector<PatchScore> rt = patch_scores_from_csv(csv);
    REQUIRE(rt.size() == 2);
    for (std::size_t i = 0; i < 2; ++i) {
        CHECK(rt[i].sender_layer == scores[i].sender_layer);
        CHECK(rt[i].sender_head == scores[i].sender_head);
        CHECK(rt[i].sender_pos == scores[i].sender_pos);
        CHECK(rt[i].via == scores[i].via);
        CHECK(rt[i].p_org == scores[i].p_org);
        CHECK(rt[i].p_patch == scores[i].p_patch);
        CHECK(rt[i].score == scores[i].score);
    }
    CHECK_THROWS_AS(patch_scores_from_csv("bogus\n1,2,3\n"), IoError);
    CHECK_THROWS_AS(patch_scores_from_csv("sender_layer,sender_head,sender_pos,via,p_org,p_patch,score\n1,2\n"),
                    IoError);

    CHECK(via_from_string("q") == Via::Q);
    CHECK(via_from_string("v") == Via::V);
    CHECK(via_from_string("direct") == Via::Direct);
    CHECK_THROWS_AS(via_from_string("k"), UsageError);
    CHECK(via_to_string(Via::Q) == "q");
}

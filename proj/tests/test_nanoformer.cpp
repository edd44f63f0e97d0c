#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>

#include "circuitbox/model.hpp"
#include "circuitbox/ops.hpp"

using namespace circuitbox;

namespace {

const Vocab& vocab() {
    static Vocab v = Vocab::standard();
    return v;
}

ModelConfig small_cfg(std::uint64_t seed = 1) {
    ModelConfig c;
    c.n_layers = 4;
    c.n_heads = 4;
    c.d_model = 64;
    c.d_mlp = 128;
    c.vocab_size = vocab().size();
    c.max_seq_len = 64;
    c.seed = seed;
    return c;
}

std::vector<int> sample_tokens(int n, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::vector<int> toks;
    for (int i = 0; i < n; ++i) toks.push_back(rand_below(rng, vocab().size()));
    return toks;
}

bool same_values(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) return false;
    for (std::size_t i = 0; i < a.size(); ++i)
        if (a.data()[i] != b.data()[i]) return false;
    return true;
}

}  // namespace

TEST_CASE("self-patch with cached head outputs reproduces logits bitwise") {
    ModelWeights w = ModelWeights::init(small_cfg());
    TaskInstance t = gen_task(vocab(), 7, 5);
    ForwardOptions rec;
    rec.record = true;
    ActivationCache c1 = forward(w, {t.tokens}, {}, rec);

    InterventionSpec iv;
    const int T = static_cast<int>(t.tokens.size());
    for (int l = 0; l < w.cfg.n_layers; ++l)
        for (int h = 0; h < w.cfg.n_heads; ++h)
            for (int pos = 0; pos < T; ++pos) {
                Intervention item;
                item.at = {l, h, Site::head_out, pos};
                item.kind = ActionKind::replace_with;
                item.value = Tensor::from({w.cfg.d_head()}, c1.head_out(l, h, 0, pos));
                iv.items.push_back(std::move(item));
            }
    ActivationCache c2 = forward(w, {t.tokens}, iv, {});
    CHECK(same_values(c1.logits, c2.logits));
}

TEST_CASE("zero weights give a uniform output distribution") {
    ModelConfig cfg = small_cfg();
    ModelWeights w = ModelWeights::init(cfg);
    for (Tensor t : w.parameters())
        std::fill(t.data(), t.data() + t.size(), 0.0);
    ActivationCache c = forward(w, {sample_tokens(10, 3)}, {}, {});
    for (int pos = 0; pos < 10; ++pos)
        for (int tok = 0; tok < cfg.vocab_size; ++tok)
            CHECK(c.logit(0, pos, tok) == 0.0);
}

TEST_CASE("write-then-read at a head_out hook returns exactly the written vector") {
    ModelWeights w = ModelWeights::init(small_cfg());
    std::vector<double> vvals(static_cast<std::size_t>(w.cfg.d_head()));
    for (std::size_t i = 0; i < vvals.size(); ++i) vvals[i] = 0.25 * static_cast<double>(i) - 1.0;
    Intervention item;
    item.at = {0, 0, Site::head_out, 3};
    item.kind = ActionKind::replace_with;
    item.value = Tensor::from({w.cfg.d_head()}, vvals);
    InterventionSpec iv;
    iv.items.push_back(item);
    ForwardOptions rec;
    rec.record = true;
    ActivationCache c = forward(w, {sample_tokens(12, 9)}, iv, rec);
    CHECK(c.head_out(0, 0, 0, 3) == vvals);
}

TEST_CASE("attention pattern: normalized rows, causal start, matches cache bitwise") {
    ModelWeights w = ModelWeights::init(small_cfg(7));
    std::vector<int> toks = sample_tokens(14, 21);
    Tensor pat = head_decomposed_attention(w, toks, 2, 1);
    const int T = 14;
    for (int i = 0; i < T; ++i) {
        double s = 0.0;
        for (int j = 0; j < T; ++j) {
            s += pat.data()[static_cast<std::size_t>(i * T + j)];
            if (j > i) CHECK(pat.data()[static_cast<std::size_t>(i * T + j)] == 0.0);
        }
        CHECK(std::abs(s - 1.0) <= 1e-10);
    }
    CHECK(pat.data()[0] == doctest::Approx(1.0).epsilon(1e-12));

    ForwardOptions rec;
    rec.record = true;
    rec.record_attn = true;
    ActivationCache c = forward(w, {toks}, {}, rec);
    HookPoint hp{2, 1, Site::attn_pattern, 5};
    const auto row = c.site_value(hp, 0);
    for (int j = 0; j < T; ++j)
        CHECK(row[static_cast<std::size_t>(j)] == pat.data()[static_cast<std::size_t>(5 * T + j)]);
}

TEST_CASE("intervention locality: earlier positions unchanged bitwise") {
    ModelWeights w = ModelWeights::init(small_cfg(3));
    TaskInstance t = gen_task(vocab(), 7, 11);
    ForwardOptions rec;
    rec.record = true;
    ActivationCache clean = forward(w, {t.tokens}, {}, rec);
    const int P = 20;
    Intervention item;
    item.at = {1, 2, Site::head_out, P};
    item.kind = ActionKind::zero;
    InterventionSpec iv;
    iv.items.push_back(item);
    ActivationCache patched = forward(w, {t.tokens}, iv, rec);
    for (int l = 0; l < w.cfg.n_layers; ++l)
        for (int h = 0; h < w.cfg.n_heads; ++h)
            for (int pos = 0; pos < P; ++pos)
                CHECK(clean.head_out(l, h, 0, pos) == patched.head_out(l, h, 0, pos));
    // and the patched position itself diverges downstream
    CHECK(clean.head_out(1, 2, 0, P) != patched.head_out(1, 2, 0, P));
}

TEST_CASE("residual stream is the sum of embedding, head, and MLP contributions") {
    ModelWeights w = ModelWeights::init(small_cfg(13));
    TaskInstance t = gen_task(vocab(), 7, 17);
    ForwardOptions rec;
    rec.record = true;
    ActivationCache c = forward(w, {t.tokens}, {}, rec);
    const int T = c.T;
    const int d = w.cfg.d_model;
    const int H = w.cfg.n_heads;
    const int dh = w.cfg.d_head();

    for (int pos = 0; pos < T; pos += 7) {
        std::vector<double> acc(static_cast<std::size_t>(d));
        const double* emb =
            w.tok_emb.data() +
            static_cast<std::size_t>(t.tokens[static_cast<std::size_t>(pos)]) * d;
        for (int i = 0; i < d; ++i) acc[static_cast<std::size_t>(i)] = emb[i];
        for (int l = 0; l < w.cfg.n_layers; ++l) {
            for (int h = 0; h < H; ++h) {
                const auto z = c.head_out(l, h, 0, pos);
                const double* wo = w.layers[static_cast<std::size_t>(l)].wo.data();
                for (int r = 0; r < dh; ++r)
                    for (int i = 0; i < d; ++i)
                        acc[static_cast<std::size_t>(i)] +=
                            z[static_cast<std::size_t>(r)] *
                            wo[static_cast<std::size_t>((h * dh + r) * d + i)];
            }
            const double* m =
                c.mlp_out[static_cast<std::size_t>(l)].data() + static_cast<std::size_t>(pos) * d;
            for (int i = 0; i < d; ++i) acc[static_cast<std::size_t>(i)] += m[i];
        }
        const double* fin = c.final_residual.data() + static_cast<std::size_t>(pos) * d;
        for (int i = 0; i < d; ++i)
            CHECK(std::abs(acc[static_cast<std::size_t>(i)] - fin[i]) <= 1e-8);
    }
}

TEST_CASE("accuracy: oracle weights hit 1.0; random weights sit at chance") {
    ModelConfig cfg = small_cfg();
    ModelWeights oracle = ModelWeights::init(cfg);
    for (Tensor t : oracle.parameters())
        std::fill(t.data(), t.data() + t.size(), 0.0);
    for (Tensor t : {oracle.final_norm})
        std::fill(t.data(), t.data() + t.size(), 1.0);
    std::vector<TaskInstance> one{gen_task(vocab(), 7, 123)};
    // constant embedding plus an unembedding column spike on the target
    std::fill(oracle.tok_emb.data(), oracle.tok_emb.data() + oracle.tok_emb.size(), 1.0);
    for (int i = 0; i < cfg.d_model; ++i)
        oracle.unembed.data()[static_cast<std::size_t>(i) * cfg.vocab_size +
                              static_cast<std::size_t>(one[0].target)] = 1.0;
    CHECK(accuracy(oracle, one) == 1.0);

    ModelWeights rnd = ModelWeights::init(small_cfg(99));
    std::vector<TaskInstance> tasks;
    for (std::uint64_t s = 0; s < 500; ++s) tasks.push_back(gen_task(vocab(), 7, 1000 + s));
    const double acc = accuracy(rnd, tasks);
    CHECK(acc >= 1.0 / 7 - 0.05);
    CHECK(acc <= 1.0 / 7 + 0.05);

    // empty per-task interventions equal the plain run
    std::vector<TaskInstance> sub(tasks.begin(), tasks.begin() + 50);
    CHECK(accuracy(rnd, sub) ==
          accuracy(rnd, sub, std::vector<InterventionSpec>(sub.size())));
}

TEST_CASE("attention knockout zeroes the blocked edge") {
    ModelWeights w = ModelWeights::init(small_cfg(23));
    std::vector<int> toks = sample_tokens(16, 31);
    InterventionSpec iv;
    iv.block_attention.push_back({1, -1, 10, 4});
    ForwardOptions rec;
    rec.record = true;
    rec.record_attn = true;
    ActivationCache c = forward(w, {toks}, iv, rec);
    for (int h = 0; h < w.cfg.n_heads; ++h) {
        HookPoint hp{1, h, Site::attn_pattern, 10};
        CHECK(c.site_value(hp, 0)[4] <= 1e-12);
    }
    // per-head edge touches only that head
    InterventionSpec iv2;
    iv2.block_attention.push_back({1, 2, 10, 4});
    ActivationCache c2 = forward(w, {toks}, iv2, rec);
    CHECK(c2.site_value({1, 2, Site::attn_pattern, 10}, 0)[4] <= 1e-12);
    CHECK(c2.site_value({1, 0, Site::attn_pattern, 10}, 0)[4] > 1e-12);
}

TEST_CASE("resume forward matches a full pass bitwise") {
    ModelWeights w = ModelWeights::init(small_cfg(29));
    TaskInstance t = gen_task(vocab(), 7, 41);
    ForwardOptions rec;
    rec.record = true;
    ActivationCache base = forward(w, {t.tokens}, {}, rec);

    Intervention item;
    item.at = {2, 3, Site::head_out, 50};
    item.kind = ActionKind::zero;
    InterventionSpec iv;
    iv.items.push_back(item);

    ActivationCache full = forward(w, {t.tokens}, iv, rec);
    ForwardOptions res;
    res.record = true;
    res.base = &base;
    res.resume_from = 50;
    ActivationCache inc = forward(w, {t.tokens}, iv, res);
    CHECK(same_values(full.logits, inc.logits));
    for (int l = 0; l < w.cfg.n_layers; ++l)
        for (int h = 0; h < w.cfg.n_heads; ++h)
            for (int pos = 0; pos < full.T; ++pos)
                CHECK(full.head_out(l, h, 0, pos) == inc.head_out(l, h, 0, pos));
    CHECK_THROWS_AS(([&] {
                        ForwardOptions bad;
                        bad.base = &base;
                        bad.resume_from = 51;
                        forward(w, {t.tokens}, iv, bad);
                    }()),
                    UsageError);
}

TEST_CASE("per-sequence interventions only touch their sequence") {
    ModelWeights w = ModelWeights::init(small_cfg(31));
    TaskInstance a = gen_task(vocab(), 7, 51);
    TaskInstance b = gen_task(vocab(), 7, 52);
    ActivationCache clean = forward(w, {a.tokens, b.tokens}, {}, {});
    Intervention item;
    item.at = {0, 1, Site::head_out, 10};
    item.kind = ActionKind::zero;
    item.batch = 1;
    InterventionSpec iv;
    iv.items.push_back(item);
    ActivationCache patched = forward(w, {a.tokens, b.tokens}, iv, {});
    for (int tok = 0; tok < w.cfg.vocab_size; tok += 17)
        CHECK(clean.logit(0, 52, tok) == patched.logit(0, 52, tok));
    bool changed = false;
    for (int tok = 0; tok < w.cfg.vocab_size; ++tok)
        if (clean.logit(1, 52, tok) != patched.logit(1, 52, tok)) changed = true;
    CHECK(changed);
}

TEST_CASE("checkpoint round trip is bit-exact") {
    ModelConfig cfg = small_cfg(47);
    ModelWeights w = ModelWeights::init(cfg);
    const std::string p1 = "ckpt_a.bin", p2 = "ckpt_b.bin";
    save_checkpoint(p1, w);
    ModelWeights r = load_checkpoint(p1);
    save_checkpoint(p2, r);
    std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
    std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    CHECK(b1.size() > 0);
    CHECK(b1 == b2);
    CHECK(r.cfg.n_layers == cfg.n_layers);
    CHECK(r.cfg.positional == cfg.positional);

    // reloaded weights drive the same computation
    std::vector<int> toks = sample_tokens(10, 77);
    ActivationCache c1 = forward(r, {toks}, {}, {});
    ActivationCache c2 = forward(load_checkpoint(p2), {toks}, {}, {});
    CHECK(same_values(c1.logits, c2.logits));
    std::remove(p1.c_str());
    std::remove(p2.c_str());
    CHECK_THROWS_AS(load_checkpoint("missing_ckpt.bin"), IoError);
}

TEST_CASE("learned-absolute positional scheme runs and differs from rotary") {
    ModelConfig cfg = small_cfg(53);
    cfg.positional = "learned";
    ModelWeights w = ModelWeights::init(cfg);
    CHECK(w.pos_emb.defined());
    std::vector<int> toks = sample_tokens(12, 81);
    ActivationCache c = forward(w, {toks}, {}, {});
    CHECK(c.logits.dim(0) == 12);

    ModelConfig bad = cfg;
    bad.positional = "fourier";
    CHECK_THROWS_AS(ModelWeights::init(bad), UsageError);
}

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <set>
#include <vector>

#include "circuitbox/circuit.hpp"

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

Circuit all_heads_circuit(const ModelConfig& cfg, const std::vector<std::string>& roles) {
    Circuit cir;
    CircuitGroup g;
    for (int l = 0; l < cfg.n_layers; ++l)
        for (int h = 0; h < cfg.n_heads; ++h)
            for (const std::string& r : roles) {
                HeadNode n;
                n.layer = l;
                n.head = h;
                n.role = r;
                g.nodes.push_back(std::move(n));
            }
    cir.groups["A"] = std::move(g);
    return cir;
}

std::string fixture(const std::string& name) {
    return std::string(CB_FIXTURES_DIR) + "/" + name;
}

}  // namespace

TEST_CASE("circuit json round trip and validation") {
    Circuit cir;
    cir.groups["A"].annotation = "Value Fetcher";
    cir.groups["A"].nodes = {{2, 1, "last", -0.5, "direct"}, {3, 0, "last", -0.25, "direct"}};
    cir.groups["B"].nodes = {{1, 3, "query_label", -0.1, "v"}};
    cir.edges = {{"B", "A", "v"}};

    Circuit rt = circuit_from_json(circuit_to_json(cir));
    CHECK(rt.size() == 3);
    CHECK(rt.groups.at("A").annotation == "Value Fetcher");
    CHECK(rt.groups.at("A").nodes[0].score == -0.5);
    CHECK(rt.groups.at("A").nodes[0].channel == "direct");
    CHECK(rt.edges.size() == 1);
    CHECK(rt.edges[0].composition == "v");
    CHECK(rt.contains(1, 3, "query_label"));
    CHECK_FALSE(rt.contains(1, 3, "last"));

    const std::string path = "/tmp/cb_test_circuit.json";
    save_circuit(path, cir);
    Circuit lf = load_circuit(path);
    CHECK(circuit_to_json(lf) == circuit_to_json(cir));
    std::remove(path.c_str());

    Circuit dup = cir;
    dup.groups["B"].nodes.push_back({2, 1, "last", 0.0, ""});
    CHECK_THROWS_AS(dup.validate(), UsageError);
    Circuit bad_edge = cir;
    bad_edge.edges.push_back({"A", "Z", "q"});
    CHECK_THROWS_AS(bad_edge.validate(), UsageError);
    Circuit bad_comp = cir;
    bad_comp.edges[0].composition = "k";
    CHECK_THROWS_AS(bad_comp.validate(), UsageError);
    CHECK_THROWS_AS(circuit_from_json("{not json"), IoError);
}

TEST_CASE("published circuit fixtures reproduce the reference comparison tables") {
    Circuit llama = load_circuit(fixture("llama7b.json"));
    Circuit goat = load_circuit(fixture("goat7b.json"));
    Circuit fl = load_circuit(fixture("float7b.json"));

    CHECK(llama.size() == 72);
    CHECK(goat.size() == 175);
    CHECK(fl.size() == 175);
    CHECK(llama.groups.at("A").nodes.size() == 40);
    CHECK(llama.groups.at("B").nodes.size() == 7);
    CHECK(llama.groups.at("C").nodes.size() == 20);
    CHECK(llama.groups.at("D").nodes.size() == 5);
    CHECK(llama.groups.at("A").annotation == "Value Fetcher");
    CHECK(llama.groups.at("D").annotation == "Structure Reader");
    REQUIRE(llama.edges.size() == 3);

    std::map<std::string, GroupDiff> dg = circuit_diff(llama, goat);
    CHECK(dg.at("A").n_small == 40);
    CHECK(dg.at("A").n_big == 68);
    CHECK(dg.at("A").intersection == 27);
    CHECK(dg.at("A").precision == doctest::Approx(0.68).epsilon(0.01));
    CHECK(dg.at("A").recall == doctest::Approx(0.40).epsilon(0.01));
    CHECK(dg.at("B").intersection == 6);
    CHECK(dg.at("B").precision == doctest::Approx(0.86).epsilon(0.01));
    CHECK(dg.at("C").intersection == 16);
    CHECK(dg.at("D").intersection == 5);
    CHECK(dg.at("D").precision == 1.0);
    CHECK(dg.at("D").recall == doctest::Approx(0.13).epsilon(0.02));

    std::map<std::string, GroupDiff> df = circuit_diff(llama, fl);
    CHECK(df.at("A").intersection == 27);
    CHECK(df.at("B").intersection == 7);
    CHECK(df.at("B").precision == 1.0);
    CHECK(df.at("C").intersection == 15);
    CHECK(df.at("D").intersection == 5);

    // antisymmetry
    std::map<std::string, GroupDiff> rev = circuit_diff(goat, llama);
    for (const auto& kv : dg) {
        CHECK(kv.second.precision == rev.at(kv.first).recall);
        CHECK(kv.second.recall == rev.at(kv.first).precision);
    }

    // identical circuits
    std::map<std::string, GroupDiff> self = circuit_diff(llama, llama);
    for (const auto& kv : self) {
        CHECK(kv.second.precision == 1.0);
        CHECK(kv.second.recall == 1.0);
    }

    Circuit missing = llama;
    missing.groups.erase("D");
    CHECK_THROWS_AS(circuit_diff(llama, missing), UsageError);
}

TEST_CASE("faithfulness of the all-heads circuit is exactly one") {
    Vocab v = Vocab::standard();
    ModelWeights w = ModelWeights::init(small_cfg(v));
    std::vector<TaskInstance> tasks = gen_tasks(v, 40, 2000);
    MeanCache mc = build_mean_cache(w, gen_tasks(v, 16, 3000));

    std::vector<std::string> roles = mc.roles;
    Circuit full = all_heads_circuit(w.cfg, roles);
    CircuitEval ev_r = faithfulness(w, full, tasks, mc, AccuracyOptions{});
    CHECK(ev_r.faithfulness == 1.0);
    CHECK(ev_r.f_circuit == ev_r.f_model);
    CHECK(ev_r.dataset_size == 40);
    CHECK(ev_r.mean_cache_tasks == 16);

    // empty circuit: fully mean-ablated accuracy stays at or below chance level
    Circuit empty;
    empty.groups["A"] = {};
    CircuitEval ev_e = faithfulness(w, empty, tasks, mc, AccuracyOptions{});
    CHECK(ev_e.f_circuit <= 1.0 / 7 + 0.08);
    CHECK(ev_e.faithfulness == ev_e.f_circuit / ev_e.f_model);
}

TEST_CASE("completeness of the all-heads circuit is exactly zero") {
    Vocab v = Vocab::standard();
    ModelWeights w = ModelWeights::init(small_cfg(v));
    std::vector<TaskInstance> tasks = gen_tasks(v, 24, 2100);
    MeanCache mc = build_mean_cache(w, gen_tasks(v, 8, 3100));

    Circuit full = all_heads_circuit(w.cfg, mc.roles);
    // split into two groups so the group sampler has work to do
    Circuit split;
    split.edges = {};
    std::vector<HeadNode> nodes = full.all_nodes();
    split.groups["A"].nodes.assign(nodes.begin(), nodes.begin() + nodes.size() / 2);
    split.groups["B"].nodes.assign(nodes.begin() + nodes.size() / 2, nodes.end());

    for (const CompletenessRow& row : completeness_by_group(w, split, tasks, mc, AccuracyOptions{}))
        CHECK(row.incompleteness == 0.0);
    for (const CompletenessRow& row :
         completeness_random(w, split, tasks, mc, 4, 77, AccuracyOptions{}))
        CHECK(row.incompleteness == 0.0);
}

TEST_CASE("random completeness draws have the contracted sizes") {
    Vocab v = Vocab::standard();
    ModelWeights w = ModelWeights::init(small_cfg(v));
    std::vector<TaskInstance> tasks = gen_tasks(v, 8, 2200);
    MeanCache mc = build_mean_cache(w, gen_tasks(v, 4, 3200));

    Circuit cir;
    for (int h = 0; h < 4; ++h)
        for (int l = 0; l < 4; ++l) cir.groups["A"].nodes.push_back({l, h, "last", 0.0, ""});

    std::vector<CompletenessRow> rows = completeness_random(w, cir, tasks, mc, 10, 5, AccuracyOptions{});
    REQUIRE(rows.size() == 10);
    std::set<std::size_t> sizes;
    for (const CompletenessRow& r : rows) {
        CHECK(r.k.size() >= 1);
        CHECK(r.k.size() <= cir.size() / 2);
        sizes.insert(r.k.size());
        std::set<std::pair<int, int>> uniq;
        for (const HeadNode& n : r.k) CHECK(uniq.insert({n.layer, n.head}).second);
    }
    CHECK(sizes.size() >= 2);

    // deterministic under the seed
    std::vector<CompletenessRow> again = completeness_random(w, cir, tasks, mc, 10, 5, AccuracyOptions{});
    for (std::size_t i = 0; i < rows.size(); ++i) {
        CHECK(rows[i].f_model_minus_k == again[i].f_model_minus_k);
        CHECK(rows[i].k.size() == again[i].k.size());
    }
}

TEST_CASE("random circuits preserve per-role head counts") {
    Vocab v = Vocab::standard();
    ModelConfig cfg = small_cfg(v);
    Circuit like;
    like.groups["A"].nodes = {{0, 0, "last", 0, ""}, {1, 1, "last", 0, ""}, {2, 2, "query_label", 0, ""}};
    like.groups["B"].nodes = {{3, 3, "prev_query_label", 0, ""}};
    like.edges = {{"B", "A", "q"}};

    Circuit r1 = random_circuit(cfg, like, 17);
    r1.validate();
    CHECK(r1.size() == like.size());
    auto count_roles = [](const Circuit& c, const std::string& g) {
        std::map<std::string, int> m;
        for (const HeadNode& n : c.groups.at(g).nodes) m[n.role]++;
        return m;
    };
    CHECK(count_roles(r1, "A") == count_roles(like, "A"));
    CHECK(count_roles(r1, "B") == count_roles(like, "B"));
    CHECK(r1.edges.size() == 1);

    Circuit r2 = random_circuit(cfg, like, 17);
    CHECK(circuit_to_json(r2) == circuit_to_json(r1));
    Circuit r3 = random_circuit(cfg, like, 18);
    CHECK(circuit_to_json(r3) != circuit_to_json(r1));

    Circuit huge;
    for (int i = 0; i < cfg.n_layers * cfg.n_heads + 1; ++i)
        huge.groups["A"].nodes.push_back({i / cfg.n_heads, i % cfg.n_heads, "last", 0, ""});
    CHECK_THROWS_AS(random_circuit(cfg, huge, 1), UsageError);
    Circuit toomany;  // more than available once split across two groups at one role
    for (int l = 0; l < cfg.n_layers; ++l)
        for (int h = 0; h < cfg.n_heads; ++h) toomany.groups["A"].nodes.push_back({l, h, "last", 0, ""});
    toomany.groups["B"].nodes.push_back({0, 0, "query_label", 0, ""});
    Circuit r4 = random_circuit(cfg, toomany, 3);  // exactly fills the role, still fine
    CHECK(r4.size() == toomany.size());
}

TEST_CASE("discovery finds the single live head on a constructed model") {
    Vocab v = Vocab::standard();
    ModelWeights w = ModelWeights::init(small_cfg(v, 2, 4, 5));
    // only head (1, 2) can write to the residual stream
    const int dh = w.cfg.d_head();
    for (int l = 0; l < 2; ++l)
        for (int h = 0; h < 4; ++h) {
            if (l == 1 && h == 2) continue;
            double* wo = w.layers[l].wo.data();
            for (int r = h * dh; r < (h + 1) * dh; ++r)
                for (int c = 0; c < w.cfg.d_model; ++c) wo[r * w.cfg.d_model + c] = 0.0;
        }

    std::vector<TaskInstance> origs = gen_tasks(v, 8, 5000);
    std::vector<TaskInstance> noises;
    for (std::size_t i = 0; i < origs.size(); ++i)
        noises.push_back(gen_noise_task(v, origs[i], 6000 + static_cast<std::uint64_t>(i)));

    // sanity: the live head must actually hurt the clean prediction when patched
    std::vector<RoleHook> live = {{1, 2, "last"}};
    std::vector<PatchScore> ls =
        path_patch_sweep(w, origs, noises, live, PathReceiver::logits(), Via::Direct);
    REQUIRE(ls[0].score < 0.0);

    Circuit cir = discover(w, origs, noises, {1});
    REQUIRE(cir.groups.count("A") == 1);
    REQUIRE(cir.groups.at("A").nodes.size() == 1);
    const HeadNode& n = cir.groups.at("A").nodes[0];
    CHECK(n.layer == 1);
    CHECK(n.head == 2);
    CHECK(n.role == "last");
    CHECK(n.channel == "direct");
    CHECK(n.score == ls[0].score);

    CHECK_THROWS_AS(discover(w, origs, noises, {1000}), UsageError);
}

TEST_CASE("two-round discovery builds a labeled, disjoint circuit") {
    Vocab v = Vocab::standard();
    ModelWeights w = ModelWeights::init(small_cfg(v));
    std::vector<TaskInstance> origs = gen_tasks(v, 4, 5100);
    std::vector<TaskInstance> noises;
    for (std::size_t i = 0; i < origs.size(); ++i)
        noises.push_back(gen_noise_task(v, origs[i], 6100 + static_cast<std::uint64_t>(i)));

    Circuit cir = discover(w, origs, noises, {2, 2});
    cir.validate();
    CHECK(cir.size() == 4);
    REQUIRE(cir.groups.count("A") == 1);
    REQUIRE(cir.groups.count("B") == 1);
    REQUIRE(cir.edges.size() == 1);
    CHECK(cir.edges[0].from_group == "B");
    CHECK(cir.edges[0].to_group == "A");
    CHECK((cir.edges[0].composition == "q" || cir.edges[0].composition == "v"));
    for (const HeadNode& n : cir.groups.at("A").nodes) CHECK(n.channel == "direct");
    for (const HeadNode& n : cir.groups.at("B").nodes) {
        CHECK((n.channel == "q" || n.channel == "v"));
        // senders must be strictly upstream of at least one receiver
        int max_recv = 0;
        for (const HeadNode& a : cir.groups.at("A").nodes) max_recv = std::max(max_recv, a.layer);
        CHECK(n.layer < max_recv);
    }
    // determinism
    Circuit again = discover(w, origs, noises, {2, 2});
    CHECK(circuit_to_json(again) == circuit_to_json(cir));
}

TEST_CASE("minimality prunes causally dead heads and keeps the report sound") {
    Vocab v = Vocab::standard();
    ModelWeights w = ModelWeights::init(small_cfg(v));
    // make head (2, 3) causally dead
    const int dh = w.cfg.d_head();
    double* wo = w.layers[2].wo.data();
    for (int r = 3 * dh; r < 4 * dh; ++r)
        for (int c = 0; c < w.cfg.d_model; ++c) wo[r * w.cfg.d_model + c] = 0.0;

    std::vector<TaskInstance> tasks = gen_tasks(v, 30, 2300);
    MeanCache mc = build_mean_cache(w, gen_tasks(v, 10, 3300));

    Circuit cir;
    cir.groups["A"].nodes = {{2, 3, "last", 0, ""}, {3, 0, "last", 0, ""}, {3, 1, "last", 0, ""},
                             {1, 2, "last", 0, ""}};
    AccuracyOptions restricted;  // keep F away from zero on an untrained model
    auto [pruned, report] = minimality_prune(w, cir, tasks, mc, 0.01, 0.30, restricted);

    REQUIRE(report.size() == 4);
    bool found_dead = false;
    for (const MinimalityEntry& e : report) {
        CHECK(e.group == "A");
        if (e.node.layer == 2 && e.node.head == 3) {
            found_dead = true;
            CHECK(e.contribution == 0.0);
            CHECK(e.pruned);
        }
        if (!e.flagged) CHECK(e.pruned == (e.contribution < 0.01));
    }
    CHECK(found_dead);
    CHECK_FALSE(pruned.contains(2, 3, "last"));
    CHECK(pruned.size() <= cir.size());
    for (const HeadNode& n : pruned.all_nodes()) CHECK(cir.contains(n.layer, n.head, n.role));

    CHECK_THROWS_AS(minimality_prune(w, Circuit{}, tasks, mc), UsageError);
}

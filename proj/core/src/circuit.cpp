#include "circuitbox/circuit.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <random>
#include <set>
#include <sstream>
#include <tuple>

#include <json.hpp>

namespace circuitbox {

namespace {

using NodeKey = std::tuple<int, int, std::string>;

NodeKey key_of(const HeadNode& n) { return {n.layer, n.head, n.role}; }

}  // namespace

std::vector<HeadNode> Circuit::all_nodes() const {
    std::vector<HeadNode> out;
    for (const auto& kv : groups)
        out.insert(out.end(), kv.second.nodes.begin(), kv.second.nodes.end());
    return out;
}

bool Circuit::contains(int layer, int head, const std::string& role) const {
    for (const auto& kv : groups)
        for (const HeadNode& n : kv.second.nodes)
            if (n.layer == layer && n.head == head && n.role == role) return true;
    return false;
}

std::size_t Circuit::size() const {
    std::size_t s = 0;
    for (const auto& kv : groups) s += kv.second.nodes.size();
    return s;
}

void Circuit::validate() const {
    std::set<NodeKey> seen;
    for (const auto& kv : groups)
        for (const HeadNode& n : kv.second.nodes) {
            if (n.layer < 0 || n.head < 0) throw UsageError("circuit: negative layer/head");
            if (n.role.empty()) throw UsageError("circuit: node without a role");
            if (!seen.insert(key_of(n)).second)
                throw UsageError("circuit: duplicate node L" + std::to_string(n.layer) + " H" +
                                 std::to_string(n.head) + " @" + n.role);
        }
    for (const CircuitEdge& e : edges) {
        if (!groups.count(e.from_group) || !groups.count(e.to_group))
            throw UsageError("circuit: edge references unknown group " + e.from_group + "->" +
                             e.to_group);
        if (e.composition != "q" && e.composition != "v")
            throw UsageError("circuit: edge composition must be q or v");
    }
}

std::string circuit_to_json(const Circuit& cir) {
    nlohmann::json j;
    j["groups"] = nlohmann::json::object();
    for (const auto& kv : cir.groups) {
        nlohmann::json g;
        g["annotation"] = kv.second.annotation;
        g["nodes"] = nlohmann::json::array();
        for (const HeadNode& n : kv.second.nodes)
            g["nodes"].push_back({{"layer", n.layer},
                                  {"head", n.head},
                                  {"role", n.role},
                                  {"score", n.score},
                                  {"channel", n.channel}});
        j["groups"][kv.first] = std::move(g);
    }
    j["edges"] = nlohmann::json::array();
    for (const CircuitEdge& e : cir.edges)
        j["edges"].push_back(
            {{"from", e.from_group}, {"to", e.to_group}, {"composition", e.composition}});
    return j.dump(2);
}

Circuit circuit_from_json(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const std::exception& e) {
        throw IoError(std::string("circuit: bad json: ") + e.what());
    }
    Circuit cir;
    try {
        for (auto it = j.at("groups").begin(); it != j.at("groups").end(); ++it) {
            CircuitGroup g;
            g.annotation = it.value().value("annotation", "");
            for (const auto& jn : it.value().at("nodes")) {
                HeadNode n;
                n.layer = jn.at("layer").get<int>();
                n.head = jn.at("head").get<int>();
                n.role = jn.at("role").get<std::string>();
                n.score = jn.value("score", 0.0);
                n.channel = jn.value("channel", "");
                g.nodes.push_back(std::move(n));
            }
            cir.groups[it.key()] = std::move(g);
        }
        for (const auto& je : j.value("edges", nlohmann::json::array())) {
            CircuitEdge e;
            e.from_group = je.at("from").get<std::string>();
            e.to_group = je.at("to").get<std::string>();
            e.composition = je.at("composition").get<std::string>();
            cir.edges.push_back(std::move(e));
        }
    } catch (const nlohmann::json::exception& e) {
        throw IoError(std::string("circuit: bad json: ") + e.what());
    }
    cir.validate();
    return cir;
}

void save_circuit(const std::string& path, const Circuit& cir) {
    std::ofstream f(path);
    if (!f) throw IoError("circuit: cannot open " + path + " for writing");
    f << circuit_to_json(cir) << "\n";
    if (!f) throw IoError("circuit: write failed for " + path);
}

Circuit load_circuit(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("circuit: cannot open " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return circuit_from_json(ss.str());
}

AccuracyOptions circuit_accuracy_options() {
    AccuracyOptions o;
    o.restrict_to_candidates = false;
    return o;
}

namespace {

/// Mean-ablates every (head, role) pair except those in `keep`, minus the
/// pairs in `knock` which are ablated even when kept.
InterventionSpec ablation_spec(const ModelWeights& w, const MeanCache& mc, const TaskInstance& task,
                               const std::set<NodeKey>& keep, const std::set<NodeKey>& knock) {
    InterventionSpec iv;
    for (const std::string& role : mc.roles) {
        auto it = task.positions.find(role);
        if (it == task.positions.end()) throw UsageError("ablation: task lacks role " + role);
        const int pos = it->second;
        for (int l = 0; l < w.cfg.n_layers; ++l)
            for (int h = 0; h < w.cfg.n_heads; ++h) {
                const NodeKey k{l, h, role};
                if (keep.count(k) && !knock.count(k)) continue;
                Intervention item;
                item.at = {l, h, Site::head_out, pos};
                item.kind = ActionKind::mean_ablate;
                std::vector<double> m = mc.get(l, h, role);
                const int mlen = static_cast<int>(m.size());
                item.value = Tensor::from({mlen}, std::move(m));
                iv.items.push_back(std::move(item));
            }
    }
    return iv;
}

/// Ablates only the pairs in `knock`.
InterventionSpec knockout_only_spec(const ModelWeights& w, const MeanCache& mc,
                                    const TaskInstance& task, const std::set<NodeKey>& knock) {
    InterventionSpec iv;
    for (const NodeKey& k : knock) {
        const auto& [l, h, role] = k;
        auto it = task.positions.find(role);
        if (it == task.positions.end()) throw UsageError("ablation: task lacks role " + role);
        Intervention item;
        item.at = {l, h, Site::head_out, it->second};
        item.kind = ActionKind::mean_ablate;
        std::vector<double> m = mc.get(l, h, role);
        const int mlen = static_cast<int>(m.size());
        item.value = Tensor::from({mlen}, std::move(m));
        iv.items.push_back(std::move(item));
    }
    return iv;
}

std::set<NodeKey> node_keys(const std::vector<HeadNode>& nodes) {
    std::set<NodeKey> s;
    for (const HeadNode& n : nodes) s.insert(key_of(n));
    return s;
}

double circuit_accuracy(const ModelWeights& w, const std::vector<TaskInstance>& tasks,
                        const MeanCache& mc, const std::set<NodeKey>& keep,
                        const std::set<NodeKey>& knock, const AccuracyOptions& aopt) {
    std::vector<InterventionSpec> per_task;
    per_task.reserve(tasks.size());
    for (const TaskInstance& t : tasks) per_task.push_back(ablation_spec(w, mc, t, keep, knock));
    return accuracy(w, tasks, per_task, aopt);
}

}  // namespace

CircuitEval faithfulness(const ModelWeights& w, const Circuit& cir,
                         const std::vector<TaskInstance>& tasks, const MeanCache& mc,
                         const AccuracyOptions& aopt) {
    cir.validate();
    if (tasks.empty()) throw UsageError("faithfulness: no tasks");
    CircuitEval ev;
    ev.dataset_size = static_cast<int>(tasks.size());
    ev.dataset_seed = tasks.front().seed;
    ev.mean_cache_tasks = mc.n_tasks;
    ev.mean_cache_seed = mc.seed;
    ev.f_model = accuracy(w, tasks, InterventionSpec{}, aopt);
    ev.f_circuit = circuit_accuracy(w, tasks, mc, node_keys(cir.all_nodes()), {}, aopt);
    if (ev.f_model == 0.0) throw NumericError("faithfulness: model accuracy is zero");
    ev.faithfulness = ev.f_circuit / ev.f_model;
    return ev;
}

Circuit discover(const ModelWeights& w, const std::vector<TaskInstance>& origs,
                 const std::vector<TaskInstance>& noises, const std::vector<int>& group_sizes,
                 const DiscoverOptions& opt) {
    if (origs.empty() || origs.size() != noises.size())
        throw UsageError("discover: need aligned non-empty task pairs");
    if (group_sizes.empty()) throw UsageError("discover: no group sizes");
    std::vector<std::string> roles = opt.roles;
    if (roles.empty())
        for (const auto& kv : origs.front().positions) roles.push_back(kv.first);
    std::vector<std::string> names = opt.group_names;
    if (names.empty())
        for (std::size_t i = 0; i < group_sizes.size(); ++i)
            names.push_back(std::string(1, static_cast<char>('A' + i)));
    if (names.size() < group_sizes.size())
        throw UsageError("discover: not enough group names");

    std::vector<RoleHook> candidates;
    for (int l = 0; l < w.cfg.n_layers; ++l)
        for (int h = 0; h < w.cfg.n_heads; ++h)
            for (const std::string& r : roles) candidates.push_back({l, h, r});

    Circuit cir;
    std::set<NodeKey> taken;
    std::vector<HeadNode> prev;

    for (std::size_t round = 0; round < group_sizes.size(); ++round) {
        std::vector<RoleHook> remaining;
        for (const RoleHook& c : candidates)
            if (!taken.count({c.layer, c.head, c.role})) remaining.push_back(c);

        // candidate -> (score, channel)
        std::vector<std::pair<double, std::string>> best(remaining.size(),
                                                         {std::numeric_limits<double>::infinity(), ""});
        if (round == 0) {
            std::vector<PatchScore> sc = path_patch_sweep(w, origs, noises, remaining,
                                                          PathReceiver::logits(), Via::Direct,
                                                          opt.patch);
            for (std::size_t i = 0; i < remaining.size(); ++i)
                best[i] = {sc[i].score, "direct"};
        } else {
            for (Via via : {Via::Q, Via::V}) {
                std::vector<double> sum(remaining.size(), 0.0);
                std::vector<int> cnt(remaining.size(), 0);
                for (const HeadNode& rcv : prev) {
                    std::vector<RoleHook> eligible;
                    std::vector<std::size_t> idx;
                    for (std::size_t i = 0; i < remaining.size(); ++i)
                        if (remaining[i].layer < rcv.layer) {
                            eligible.push_back(remaining[i]);
                            idx.push_back(i);
                        }
                    if (eligible.empty()) continue;
                    std::vector<PatchScore> sc =
                        path_patch_sweep(w, origs, noises, eligible,
                                         PathReceiver::head_at(rcv.layer, rcv.head, rcv.role),
                                         via, opt.patch);
                    for (std::size_t k = 0; k < idx.size(); ++k) {
                        sum[idx[k]] += sc[k].score;
                        ++cnt[idx[k]];
                    }
                }
                for (std::size_t i = 0; i < remaining.size(); ++i) {
                    if (cnt[i] == 0) continue;
                    const double mean = sum[i] / cnt[i];
                    if (mean < best[i].first) best[i] = {mean, via_to_string(via)};
                }
            }
        }

        std::vector<std::size_t> order;
        for (std::size_t i = 0; i < remaining.size(); ++i)
            if (std::isfinite(best[i].first)) order.push_back(i);
        if (static_cast<std::size_t>(group_sizes[round]) > order.size())
            throw UsageError("discover: group size exceeds available nodes");
        std::stable_sort(order.begin(), order.end(),
                         [&](std::size_t a, std::size_t b) { return best[a].first < best[b].first; });

        CircuitGroup g;
        for (int k = 0; k < group_sizes[round]; ++k) {
            const RoleHook& c = remaining[order[static_cast<std::size_t>(k)]];
            HeadNode n;
            n.layer = c.layer;
            n.head = c.head;
            n.role = c.role;
            n.score = best[order[static_cast<std::size_t>(k)]].first;
            n.channel = best[order[static_cast<std::size_t>(k)]].second;
            taken.insert(key_of(n));
            g.nodes.push_back(std::move(n));
        }
        if (round > 0) {
            int nq = 0, nv = 0;
            for (const HeadNode& n : g.nodes) (n.channel == "q" ? nq : nv)++;
            cir.edges.push_back({names[round], names[round - 1], nq >= nv ? "q" : "v"});
        }
        prev = g.nodes;
        cir.groups[names[round]] = std::move(g);
    }
    cir.validate();
    return cir;
}

std::pair<Circuit, std::vector<MinimalityEntry>> minimality_prune(
    const ModelWeights& w, const Circuit& cir, const std::vector<TaskInstance>& tasks,
    const MeanCache& mc, double threshold, double subset_fraction, const AccuracyOptions& aopt) {
    cir.validate();
    if (cir.size() == 0) throw UsageError("minimality: empty circuit");
    const std::set<NodeKey> keep = node_keys(cir.all_nodes());

    std::vector<MinimalityEntry> report;
    Circuit pruned = cir;
    for (auto& kv : pruned.groups) kv.second.nodes.clear();

    for (const auto& kv : cir.groups) {
        const std::vector<HeadNode>& g = kv.second.nodes;
        const std::size_t m = g.size();
        if (m == 0) continue;
        // single-removal accuracies, shared across all v in the group
        std::vector<double> f_single(m);
        for (std::size_t j = 0; j < m; ++j)
            f_single[j] = circuit_accuracy(w, tasks, mc, keep, {key_of(g[j])}, aopt);
        // pairwise removals
        std::vector<std::vector<double>> f_pair(m, std::vector<double>(m, 0.0));
        for (std::size_t a = 0; a < m; ++a)
            for (std::size_t b = a + 1; b < m; ++b) {
                const double f =
                    circuit_accuracy(w, tasks, mc, keep, {key_of(g[a]), key_of(g[b])}, aopt);
                f_pair[a][b] = f_pair[b][a] = f;
            }

        const std::size_t ksz = std::min(
            m - 1, static_cast<std::size_t>(subset_fraction * static_cast<double>(m)));
        for (std::size_t vi = 0; vi < m; ++vi) {
            std::vector<std::size_t> others;
            for (std::size_t j = 0; j < m; ++j)
                if (j != vi) others.push_back(j);
            std::stable_sort(others.begin(), others.end(), [&](std::size_t a, std::size_t b) {
                return (f_single[a] - f_pair[vi][a]) > (f_single[b] - f_pair[vi][b]);
            });
            std::set<NodeKey> knock;
            for (std::size_t k = 0; k < ksz; ++k) knock.insert(key_of(g[others[k]]));
            const double f_without_k = knock.empty()
                                           ? circuit_accuracy(w, tasks, mc, keep, {}, aopt)
                                           : circuit_accuracy(w, tasks, mc, keep, knock, aopt);
            std::set<NodeKey> knock_v = knock;
            knock_v.insert(key_of(g[vi]));
            const double f_without_kv = circuit_accuracy(w, tasks, mc, keep, knock_v, aopt);

            MinimalityEntry e;
            e.node = g[vi];
            e.group = kv.first;
            if (f_without_kv == 0.0) {
                e.contribution = f_without_k;
                e.flagged = true;
                e.pruned = false;
            } else {
                e.contribution = (f_without_k - f_without_kv) / f_without_kv;
                e.pruned = e.contribution < threshold;
            }
            if (!e.pruned) pruned.groups[kv.first].nodes.push_back(g[vi]);
            report.push_back(std::move(e));
        }
    }
    // drop groups emptied by pruning so edges stay meaningful
    for (auto it = pruned.groups.begin(); it != pruned.groups.end();) {
        if (it->second.nodes.empty()) {
            const std::string id = it->first;
            pruned.edges.erase(std::remove_if(pruned.edges.begin(), pruned.edges.end(),
                                              [&](const CircuitEdge& e) {
                                                  return e.from_group == id || e.to_group == id;
                                              }),
                               pruned.edges.end());
            it = pruned.groups.erase(it);
        } else {
            ++it;
        }
    }
    return {pruned, report};
}

namespace {

CompletenessRow completeness_row(const ModelWeights& w, const Circuit& cir,
                                 const std::vector<TaskInstance>& tasks, const MeanCache& mc,
                                 std::string label, std::vector<HeadNode> k,
                                 const AccuracyOptions& aopt) {
    CompletenessRow row;
    row.label = std::move(label);
    row.k = std::move(k);
    const std::set<NodeKey> kk = node_keys(row.k);
    std::vector<InterventionSpec> per_task;
    for (const TaskInstance& t : tasks) per_task.push_back(knockout_only_spec(w, mc, t, kk));
    row.f_model_minus_k = accuracy(w, tasks, per_task, aopt);
    row.f_circuit_minus_k = circuit_accuracy(w, tasks, mc, node_keys(cir.all_nodes()), kk, aopt);
    row.incompleteness = std::abs(row.f_circuit_minus_k - row.f_model_minus_k);
    return row;
}

}  // namespace

std::vector<CompletenessRow> completeness_by_group(const ModelWeights& w, const Circuit& cir,
                                                   const std::vector<TaskInstance>& tasks,
                                                   const MeanCache& mc,
                                                   const AccuracyOptions& aopt) {
    cir.validate();
    std::vector<CompletenessRow> rows;
    for (const auto& kv : cir.groups)
        rows.push_back(completeness_row(w, cir, tasks, mc, kv.first, kv.second.nodes, aopt));
    return rows;
}

std::vector<CompletenessRow> completeness_random(const ModelWeights& w, const Circuit& cir,
                                                 const std::vector<TaskInstance>& tasks,
                                                 const MeanCache& mc, int n_draws,
                                                 std::uint64_t seed, const AccuracyOptions& aopt) {
    cir.validate();
    std::vector<HeadNode> nodes = cir.all_nodes();
    if (nodes.empty()) throw UsageError("completeness: empty circuit");
    std::mt19937_64 rng(seed);
    std::vector<CompletenessRow> rows;
    const std::size_t max_sz = std::max<std::size_t>(1, nodes.size() / 2);
    for (int d = 0; d < n_draws; ++d) {
        const std::size_t sz =
            1 + static_cast<std::size_t>(rng() % static_cast<std::uint64_t>(max_sz));
        std::vector<HeadNode> pool = nodes;
        std::vector<HeadNode> k;
        for (std::size_t i = 0; i < sz; ++i) {
            const std::size_t pick = static_cast<std::size_t>(rng() % pool.size());
            k.push_back(pool[pick]);
            pool.erase(pool.begin() + static_cast<std::ptrdiff_t>(pick));
        }
        rows.push_back(completeness_row(w, cir, tasks, mc, "random_" + std::to_string(d),
                                        std::move(k), aopt));
    }
    return rows;
}

Circuit random_circuit(const ModelConfig& cfg, const Circuit& like, std::uint64_t seed) {
    like.validate();
    if (like.size() == 0) throw UsageError("random_circuit: empty template");
    std::mt19937_64 rng(seed);
    Circuit out;
    out.edges = like.edges;
    std::set<NodeKey> used;
    for (const auto& kv : like.groups) {
        // per-role counts in this group
        std::map<std::string, int> counts;
        for (const HeadNode& n : kv.second.nodes) counts[n.role]++;
        CircuitGroup g;
        g.annotation = kv.second.annotation;
        for (const auto& rc : counts) {
            if (rc.second > cfg.n_layers * cfg.n_heads)
                throw UsageError("random_circuit: count exceeds heads available at role " +
                                 rc.first);
            int placed = 0;
            int guard = 0;
            while (placed < rc.second) {
                if (++guard > 100000)
                    throw UsageError("random_circuit: could not place heads at role " + rc.first);
                const int l = static_cast<int>(rng() % static_cast<std::uint64_t>(cfg.n_layers));
                const int h = static_cast<int>(rng() % static_cast<std::uint64_t>(cfg.n_heads));
                if (!used.insert({l, h, rc.first}).second) continue;
                HeadNode n;
                n.layer = l;
                n.head = h;
                n.role = rc.first;
                g.nodes.push_back(std::move(n));
                ++placed;
            }
        }
        out.groups[kv.first] = std::move(g);
    }
    out.validate();
    return out;
}

std::map<std::string, GroupDiff> circuit_diff(const Circuit& small, const Circuit& big) {
    small.validate();
    big.validate();
    std::map<std::string, GroupDiff> out;
    for (const auto& kv : small.groups) {
        auto it = big.groups.find(kv.first);
        if (it == big.groups.end())
            throw UsageError("circuit_diff: group " + kv.first + " missing from second circuit");
        GroupDiff d;
        d.n_small = static_cast<int>(kv.second.nodes.size());
        d.n_big = static_cast<int>(it->second.nodes.size());
        const std::set<NodeKey> bk = node_keys(it->second.nodes);
        for (const HeadNode& n : kv.second.nodes)
            if (bk.count(key_of(n))) ++d.intersection;
        d.precision = d.n_small ? static_cast<double>(d.intersection) / d.n_small : 0.0;
        d.recall = d.n_big ? static_cast<double>(d.intersection) / d.n_big : 0.0;
        out[kv.first] = d;
    }
    return out;
}

}  // namespace circuitbox

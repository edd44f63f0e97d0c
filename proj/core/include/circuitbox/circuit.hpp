#pragma once

#include <map>
#include <string>
#include <vector>

#include "circuitbox/patch.hpp"

namespace circuitbox {

struct HeadNode {
    int layer = 0;
    int head = 0;
    std::string role;
    double score = 0.0;   // discovery patching score, 0 when unknown
    std::string channel;  // "q", "v" or "direct" discovery provenance
};

inline bool same_node(const HeadNode& a, const HeadNode& b) {
    return a.layer == b.layer && a.head == b.head && a.role == b.role;
}

struct CircuitGroup {
    std::string annotation;  // optional functionality label
    std::vector<HeadNode> nodes;
};

struct CircuitEdge {
    std::string from_group;
    std::string to_group;
    std::string composition;  // "q" or "v"
};

struct Circuit {
    std::map<std::string, CircuitGroup> groups;  // ordered by group id
    std::vector<CircuitEdge> edges;

    std::vector<HeadNode> all_nodes() const;
    bool contains(int layer, int head, const std::string& role) const;
    std::size_t size() const;
    void validate() const;
};

std::string circuit_to_json(const Circuit& cir);
Circuit circuit_from_json(const std::string& text);
void save_circuit(const std::string& path, const Circuit& cir);
Circuit load_circuit(const std::string& path);

struct CircuitEval {
    double f_model = 0.0;
    double f_circuit = 0.0;
    double faithfulness = 0.0;
    int dataset_size = 0;
    std::uint64_t dataset_seed = 0;
    int mean_cache_tasks = 0;
    std::uint64_t mean_cache_seed = 0;
};

/// Circuit metrics use the full-vocabulary argmax.
AccuracyOptions circuit_accuracy_options();

struct DiscoverOptions {
    std::vector<std::string> roles;        // candidate sender roles; task roles if empty
    std::vector<std::string> group_names;  // defaults to A, B, C, ...
    PathPatchOptions patch;
};

Circuit discover(const ModelWeights& w, const std::vector<TaskInstance>& origs,
                 const std::vector<TaskInstance>& noises, const std::vector<int>& group_sizes,
                 const DiscoverOptions& opt = {});

CircuitEval faithfulness(const ModelWeights& w, const Circuit& cir,
                         const std::vector<TaskInstance>& tasks, const MeanCache& mc,
                         const AccuracyOptions& aopt = circuit_accuracy_options());

struct MinimalityEntry {
    HeadNode node;
    std::string group;
    double contribution = 0.0;
    bool pruned = false;
    bool flagged = false;  // retained because the denominator vanished
};

std::pair<Circuit, std::vector<MinimalityEntry>> minimality_prune(
    const ModelWeights& w, const Circuit& cir, const std::vector<TaskInstance>& tasks,
    const MeanCache& mc, double threshold = 0.01, double subset_fraction = 0.30,
    const AccuracyOptions& aopt = circuit_accuracy_options());

struct CompletenessRow {
    std::string label;
    std::vector<HeadNode> k;
    double f_model_minus_k = 0.0;
    double f_circuit_minus_k = 0.0;
    double incompleteness = 0.0;
};

std::vector<CompletenessRow> completeness_by_group(
    const ModelWeights& w, const Circuit& cir, const std::vector<TaskInstance>& tasks,
    const MeanCache& mc, const AccuracyOptions& aopt = circuit_accuracy_options());

std::vector<CompletenessRow> completeness_random(
    const ModelWeights& w, const Circuit& cir, const std::vector<TaskInstance>& tasks,
    const MeanCache& mc, int n_draws, std::uint64_t seed,
    const AccuracyOptions& aopt = circuit_accuracy_options());

Circuit random_circuit(const ModelConfig& cfg, const Circuit& like, std::uint64_t seed);

struct GroupDiff {
    int n_small = 0;
    int n_big = 0;
    int intersection = 0;
    double precision = 0.0;
    double recall = 0.0;
};

std::map<std::string, GroupDiff> circuit_diff(const Circuit& small, const Circuit& big);

}  // namespace circuitbox

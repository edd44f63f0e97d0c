#pragma once

#include <map>
#include <set>
#include <string>
#include <vector>

#include "circuitbox/model.hpp"

namespace circuitbox {

enum class Via { Q, V, Direct };

Via via_from_string(const std::string& s);
std::string via_to_string(Via v);

struct PatchScore {
    int sender_layer = 0;
    int sender_head = 0;
    std::string sender_pos;  // role name, or an integer rendered as text
    std::string via;
    double p_org = 0.0;
    double p_patch = 0.0;
    double score = 0.0;  // (p_patch - p_org) / p_org
};

/// Receiver of a path patch: either a head's Q/V input channel or the
/// final logits (direct path through the residual stream).
struct PathReceiver {
    bool final_logits = true;
    int layer = -1;
    int head = -1;
    std::string role;  // receiver position role; senders use their own role
    static PathReceiver logits() { return {}; }
    static PathReceiver head_at(int layer, int head, std::string role) {
        PathReceiver r;
        r.final_logits = false;
        r.layer = layer;
        r.head = head;
        r.role = std::move(role);
        return r;
    }
};

/// A candidate sender: a head at a role position (role resolved per task).
struct RoleHook {
    int layer = 0;
    int head = 0;
    std::string role;
};

struct PathPatchOptions {
    bool freeze_mlp = false;  // strict mode: clamp MLP outputs to clean values
    int chunk = 25;
};

/// Mean score of each candidate sender over the (orig, noise) pair set.
std::vector<PatchScore> path_patch_sweep(const ModelWeights& w,
                                         const std::vector<TaskInstance>& origs,
                                         const std::vector<TaskInstance>& noises,
                                         const std::vector<RoleHook>& senders,
                                         const PathReceiver& receiver, Via via,
                                         const PathPatchOptions& opt = {});

/// Single-pair path patch with absolute positions.
PatchScore path_patch(const ModelWeights& w, const TaskInstance& orig,
                      const TaskInstance& noise, const HookPoint& sender,
                      const PathReceiver& receiver, Via via,
                      const PathPatchOptions& opt = {});

/// Runs `dst` with the listed head outputs replaced by activations recorded
/// from a clean pass over `src`.
Tensor activation_patch(const ModelWeights& w, const TaskInstance& src,
                        const TaskInstance& dst, const std::vector<HookPoint>& nodes);

/// Per-(layer, head, role) mean head outputs over a reference task list.
struct MeanCache {
    int n_layers = 0, n_heads = 0, d_head = 0;
    int n_tasks = 0;
    std::uint64_t seed = 0;
    std::vector<std::string> roles;
    // means[role] is [n_layers*n_heads, d_head]
    std::map<std::string, Tensor> means;

    std::vector<double> get(int layer, int head, const std::string& role) const;
};

MeanCache build_mean_cache(const ModelWeights& w, const std::vector<TaskInstance>& tasks,
                           int chunk = 32);
void save_mean_cache(const std::string& path, const MeanCache& mc);
MeanCache load_mean_cache(const std::string& path);

/// Forward pass with attention from `from_role` to `to_role` blocked in
/// every layer outside `unblocked_layers`; returns the logits.
Tensor attention_knockout(const ModelWeights& w, const TaskInstance& task,
                          const std::string& from_role, const std::string& to_role,
                          const std::set<int>& unblocked_layers);

/// Knockout accuracy over a task list (same blocking, per-task positions).
double knockout_accuracy(const ModelWeights& w, const std::vector<TaskInstance>& tasks,
                         const std::string& from_role, const std::string& to_role,
                         const std::set<int>& unblocked_layers,
                         const AccuracyOptions& aopt = {});

/// Cross-model activation patching: runs model `a` on the task with the
/// listed head outputs replaced by model `b`'s activations on the same input.
Tensor cmap(const ModelWeights& a, const ModelWeights& b, const TaskInstance& task,
            const std::vector<HookPoint>& nodes);

/// CMAP accuracy over a task list for a set of role-addressed heads.
double cmap_accuracy(const ModelWeights& a, const ModelWeights& b,
                     const std::vector<TaskInstance>& tasks,
                     const std::vector<RoleHook>& nodes, const AccuracyOptions& aopt = {});

std::string patch_scores_to_csv(const std::vector<PatchScore>& scores);
std::vector<PatchScore> patch_scores_from_csv(const std::string& csv);

}  // namespace circuitbox

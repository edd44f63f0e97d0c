#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "circuitbox/boxtask.hpp"
#include "circuitbox/tensor.hpp"

namespace circuitbox {

struct ModelConfig {
    int n_layers = 8;
    int n_heads = 8;
    int d_model = 256;
    int d_mlp = 1024;
    int vocab_size = 0;
    int max_seq_len = 64;
    std::string positional = "rotary";  // or "learned"
    std::uint64_t seed = 0;

    int d_head() const { return d_model / n_heads; }
    void validate() const;
};

struct LayerWeights {
    Tensor attn_norm;  // [d]
    Tensor wq, wk, wv; // [d, d], head h occupies columns [h*dh, (h+1)*dh)
    Tensor wo;         // [d, d], head h occupies rows [h*dh, (h+1)*dh)
    Tensor mlp_norm;   // [d]
    Tensor w1;         // [d, d_mlp]
    Tensor w2;         // [d_mlp, d]
};

struct ModelWeights {
    ModelConfig cfg;
    Tensor tok_emb;  // [vocab, d]
    Tensor pos_emb;  // [max_seq_len, d], defined only for learned-absolute
    std::vector<LayerWeights> layers;
    Tensor final_norm;  // [d]
    Tensor unembed;     // [d, vocab]

    static ModelWeights init(const ModelConfig& cfg);
    std::vector<Tensor> parameters() const;
    void set_requires_grad(bool rg) const;
};

enum class Site { q_in, k_in, v_in, head_out, attn_pattern };

Site site_from_string(const std::string& s);
std::string site_to_string(Site s);

struct HookPoint {
    int layer = 0;
    int head = 0;
    Site site = Site::head_out;
    int position = 0;  // resolved token index
};

enum class ActionKind { replace_with, mean_ablate, zero, scale_mix };

struct Intervention {
    HookPoint at;
    ActionKind kind = ActionKind::replace_with;
    int batch = -1;             // sequence index, -1 = every sequence
    Tensor value;               // replacement; undefined for zero
    double w = 1.0;             // mix weight for scale_mix
    Tensor w_param;             // optional learnable weight (overrides w)
};

struct BlockEdge {
    int layer = -1;    // -1 = all layers
    int head = -1;     // -1 = all heads
    int from_pos = 0;  // query position
    int to_pos = 0;    // key position
    int batch = -1;    // -1 = every sequence
};

struct InterventionSpec {
    std::vector<Intervention> items;
    std::vector<BlockEdge> block_attention;
    bool empty() const { return items.empty() && block_attention.empty(); }
};

/// Activations of one batched forward pass. Tensors are stored flattened:
/// residual-stream tensors are [B*T, d] (row b*T+t), per-head tensors are
/// [B*H, T, d_head] (slab b*H+h).
struct ActivationCache {
    int B = 0, T = 0, H = 0;
    std::vector<std::vector<int>> tokens;
    std::vector<Tensor> x;          // pre-attention residual per layer
    std::vector<Tensor> z;          // head outputs per layer
    std::vector<Tensor> q_pre, k_pre;  // pre-rotary projections per layer, [B*T, d]
    std::vector<Tensor> k, v;       // post-rotary keys / values per layer
    std::vector<Tensor> attn;       // attention patterns per layer (optional)
    std::vector<Tensor> mlp_out;    // per layer
    Tensor final_residual;          // pre-unembedding residual
    Tensor logits;                  // [B*T, vocab], merged over any resume base
    Tensor logits_active;           // this pass's own rows; stays on the tape
    int active_from = 0;

    std::vector<double> head_out(int layer, int head, int batch, int pos) const;
    std::vector<double> site_value(const HookPoint& hp, int batch) const;
    double logit(int batch, int pos, int token) const;
    /// softmax probability of `token` at (batch, pos)
    double prob(int batch, int pos, int token) const;
    int argmax(int batch, int pos) const;
    int argmax_restricted(int batch, int pos, const std::vector<int>& candidates) const;
};

struct ForwardOptions {
    bool record = false;       // keep x, z, k, v, mlp_out
    bool record_attn = false;  // additionally keep attention patterns
    int resume_from = 0;       // with `base`, recompute only positions >= this
    const ActivationCache* base = nullptr;
};

ActivationCache forward(const ModelWeights& w,
                        const std::vector<std::vector<int>>& batch_tokens,
                        const InterventionSpec& iv = {}, const ForwardOptions& opt = {});

Tensor head_decomposed_attention(const ModelWeights& w, const std::vector<int>& tokens,
                                 int layer, int head);

struct AccuracyOptions {
    /// restrict the argmax to each task's candidate objects (the objects
    /// appearing in its context); full-vocab argmax otherwise
    bool restrict_to_candidates = true;
    int chunk = 32;
};

double accuracy(const ModelWeights& w, const std::vector<TaskInstance>& tasks,
                const InterventionSpec& shared_iv = {}, const AccuracyOptions& opt = {});
double accuracy(const ModelWeights& w, const std::vector<TaskInstance>& tasks,
                const std::vector<InterventionSpec>& per_task, const AccuracyOptions& opt = {});

std::vector<int> task_candidates(const TaskInstance& t);

void save_checkpoint(const std::string& path, const ModelWeights& w);
ModelWeights load_checkpoint(const std::string& path);

}  // namespace circuitbox

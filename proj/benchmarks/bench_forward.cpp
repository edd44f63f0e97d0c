#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "circuitbox/adam.hpp"
#include "circuitbox/boxtask.hpp"
#include "circuitbox/model.hpp"
#include "circuitbox/ops.hpp"

namespace {

using namespace circuitbox;

ModelConfig small_config(int d_model, int n_layers) {
    Vocab v = Vocab::standard();
    ModelConfig cfg;
    cfg.n_layers = n_layers;
    cfg.n_heads = 4;
    cfg.d_model = d_model;
    cfg.d_mlp = d_model * 4;
    cfg.vocab_size = v.size();
    cfg.max_seq_len = 64;
    cfg.seed = 1;
    return cfg;
}

std::vector<std::vector<int>> sample_batch(int batch, int seq_len) {
    Vocab v = Vocab::standard();
    std::mt19937_64 rng(7);
    std::vector<std::vector<int>> out;
    for (int b = 0; b < batch; ++b) {
        std::vector<int> toks;
        while (static_cast<int>(toks.size()) < seq_len) {
            TaskInstance t = gen_task(v, 5, rng);
            toks.insert(toks.end(), t.tokens.begin(), t.tokens.end());
        }
        toks.resize(seq_len);
        out.push_back(std::move(toks));
    }
    return out;
}

void BM_forward(benchmark::State& state) {
    ModelConfig cfg = small_config(static_cast<int>(state.range(0)),
                                   static_cast<int>(state.range(1)));
    ModelWeights w = ModelWeights::init(cfg);
    auto batch = sample_batch(8, 64);
    for (auto _ : state) {
        ActivationCache ac = forward(w, batch);
        benchmark::DoNotOptimize(ac.logits.data());
    }
    state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations()) * 8 * 64);
}
BENCHMARK(BM_forward)->Args({64, 4})->Args({96, 3})->Args({128, 4});

void BM_forward_recorded(benchmark::State& state) {
    ModelConfig cfg = small_config(64, 4);
    ModelWeights w = ModelWeights::init(cfg);
    auto batch = sample_batch(8, 64);
    ForwardOptions opt;
    opt.record = true;
    for (auto _ : state) {
        ActivationCache ac = forward(w, batch, {}, opt);
        benchmark::DoNotOptimize(ac.logits.data());
    }
    state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations()) * 8 * 64);
}
BENCHMARK(BM_forward_recorded);

void BM_train_step(benchmark::State& state) {
    ModelConfig cfg = small_config(static_cast<int>(state.range(0)),
                                   static_cast<int>(state.range(1)));
    ModelWeights w = ModelWeights::init(cfg);
    w.set_requires_grad(true);
    AdamState adam(w.parameters(), 1e-3);
    auto windows = sample_batch(static_cast<int>(state.range(2)), 64);
    std::vector<std::vector<int>> batch;
    std::vector<int> targets;
    for (const auto& toks : windows) {
        batch.emplace_back(toks.begin(), toks.end() - 1);
        targets.insert(targets.end(), toks.begin() + 1, toks.end());
    }
    for (auto _ : state) {
        Tape tape;
        ActivationCache ac = forward(w, batch);
        Tensor loss = cross_entropy(ac.logits_active, targets);
        tape.backward(loss);
        adam.step();
        benchmark::DoNotOptimize(loss.item());
    }
}
BENCHMARK(BM_train_step)->Args({64, 4, 8})->Args({64, 4, 32});

void BM_task_accuracy(benchmark::State& state) {
    ModelConfig cfg = small_config(64, 4);
    ModelWeights w = ModelWeights::init(cfg);
    Vocab v = Vocab::standard();
    std::mt19937_64 rng(3);
    std::vector<TaskInstance> tasks;
    for (int i = 0; i < 32; ++i) tasks.push_back(gen_task(v, 7, rng));
    for (auto _ : state) benchmark::DoNotOptimize(accuracy(w, tasks));
    state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations()) * 32);
}
BENCHMARK(BM_task_accuracy);

}  // namespace

BENCHMARK_MAIN();

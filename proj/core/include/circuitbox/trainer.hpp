#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "circuitbox/model.hpp"

namespace circuitbox {

struct LrSchedule {
    int warmup = 100;
    double peak = 3e-4;
    double floor = 3e-5;

    double at(int step, int total_steps) const;
};

struct TrainRecipe {
    // data mixture, fractions sum to 1
    double box_tasks = 0.8;
    double filler_lm = 0.1;
    double arithmetic_style = 0.1;

    int steps = 1000;
    int batch = 32;
    LrSchedule lr;
    std::uint64_t seed = 0;

    int eval_every = 25;
    int eval_tasks = 200;
    std::uint64_t eval_seed = 990000;

    int seq_len = 64;
    int boxes_min = 2;
    int boxes_max = 7;
    int eval_boxes = 7;

    void validate() const;
};

// one sequence each; the trainer packs them into fixed-length windows
std::vector<int> make_box_sequence(const Vocab& v, std::mt19937_64& rng, int boxes_min,
                                   int boxes_max);
std::vector<int> make_filler_sequence(const Vocab& v, std::mt19937_64& rng);
std::vector<int> make_arithmetic_stream(const Vocab& v, std::mt19937_64& rng);

struct TrainLogEntry {
    int step = 0;
    double lr = 0;
    double loss = 0;
    double heldout_accuracy = -1;  // -1 when this step was not an eval step
};

struct TrainResult {
    ModelWeights weights;
    std::vector<TrainLogEntry> log;
    double final_accuracy = 0;
    double base_accuracy = 0;  // finetune only
    bool reached_target = false;
    int stop_step = 0;
    std::string note;
};

ModelWeights clone_weights(const ModelWeights& w);

/// Next-token training over the mixture; stops the first time held-out
/// accuracy lands in [band_lo, band_hi].
TrainResult pretrain(const ModelConfig& cfg, const Vocab& v, const TrainRecipe& recipe,
                     double band_lo = 0.55, double band_hi = 0.75);

/// Continued training from `base`; succeeds when held-out accuracy exceeds
/// the base checkpoint's by at least `min_gap`.
TrainResult finetune(const ModelWeights& base, const Vocab& v, const TrainRecipe& recipe,
                     double min_gap = 0.10);

std::string train_result_to_json(const TrainResult& r);

}  // namespace circuitbox

#include "circuitbox/trainer.hpp"

#include <cmath>
#include <sstream>
#include <utility>

#include <json.hpp>

#include "circuitbox/adam.hpp"
#include "circuitbox/error.hpp"
#include "circuitbox/ops.hpp"

namespace circuitbox {

double LrSchedule::at(int step, int total_steps) const {
    if (warmup > 0 && step < warmup) return peak * (step + 1) / warmup;
    const int tail = total_steps - warmup;
    if (tail <= 1) return peak;
    const double t = static_cast<double>(step - warmup) / (tail - 1);
    return floor + 0.5 * (peak - floor) * (1.0 + std::cos(t * 3.14159265358979323846));
}

void TrainRecipe::validate() const {
    if (box_tasks < 0 || filler_lm < 0 || arithmetic_style < 0)
        throw UsageError("recipe: negative mixture fraction");
    if (std::abs(box_tasks + filler_lm + arithmetic_style - 1.0) > 1e-9)
        throw UsageError("recipe: mixture fractions must sum to 1");
    if (steps < 0) throw UsageError("recipe: negative step count");
    if (batch < 1) throw UsageError("recipe: batch must be positive");
    if (seq_len < 2) throw UsageError("recipe: sequence length too short");
    if (eval_every < 1 || eval_tasks < 1) throw UsageError("recipe: bad eval cadence");
    if (boxes_min < 1 || boxes_max < boxes_min || eval_boxes < 1)
        throw UsageError("recipe: bad box count range");
    if (lr.peak <= 0 || lr.floor < 0 || lr.floor > lr.peak || lr.warmup < 0)
        throw UsageError("recipe: bad lr schedule");
}

std::vector<int> make_box_sequence(const Vocab& v, std::mt19937_64& rng, int boxes_min,
                                   int boxes_max) {
    const int nb = boxes_min + rand_below(rng, boxes_max - boxes_min + 1);
    TaskInstance t = gen_task(v, nb, rng);
    std::vector<int> out = t.tokens;
    out.push_back(t.target);
    out.push_back(v.period_);
    return out;
}

std::vector<int> make_filler_sequence(const Vocab& v, std::mt19937_64& rng) {
    const int a = v.fillers[rand_below(rng, static_cast<int>(v.fillers.size()))];
    const int b = v.fillers[rand_below(rng, static_cast<int>(v.fillers.size()))];
    std::vector<int> out = {v.the_, a, v.is_};
    if (rng() % 2 == 0) out.push_back(v.not_);
    out.insert(out.end(), {v.in_, v.the_, b, v.period_});
    return out;
}

namespace {

void push_digits(std::vector<int>& out, const Vocab& v, int n) {
    std::string s = std::to_string(n);
    for (char c : s) out.push_back(v.first_digit + (c - '0'));
}

}  // namespace

std::vector<int> make_arithmetic_stream(const Vocab& v, std::mt19937_64& rng) {
    const int a = rand_below(rng, 100);
    const int b = rand_below(rng, 100);
    std::vector<int> out;
    push_digits(out, v, a);
    out.push_back(v.plus_);
    push_digits(out, v, b);
    out.push_back(v.equals_);
    push_digits(out, v, a + b);
    out.push_back(v.period_);
    return out;
}

ModelWeights clone_weights(const ModelWeights& w) {
    auto copy = [](const Tensor& t) {
        if (!t.defined()) return Tensor();
        return Tensor::from(t.shape(), t.values());
    };
    ModelWeights out;
    out.cfg = w.cfg;
    out.tok_emb = copy(w.tok_emb);
    out.pos_emb = copy(w.pos_emb);
    for (const auto& l : w.layers) {
        LayerWeights lw;
        lw.attn_norm = copy(l.attn_norm);
        lw.wq = copy(l.wq);
        lw.wk = copy(l.wk);
        lw.wv = copy(l.wv);
        lw.wo = copy(l.wo);
        lw.mlp_norm = copy(l.mlp_norm);
        lw.w1 = copy(l.w1);
        lw.w2 = copy(l.w2);
        out.layers.push_back(std::move(lw));
    }
    out.final_norm = copy(w.final_norm);
    out.unembed = copy(w.unembed);
    return out;
}

namespace {

// draws one fixed-length training window (seq_len + 1 tokens) from a single
// mixture source, concatenating sequences until the window is full
std::vector<int> next_window(const Vocab& v, const TrainRecipe& r, std::mt19937_64& rng) {
    const double u = static_cast<double>(rng() >> 11) * 0x1p-53;
    std::vector<int> buf;
    const std::size_t need = static_cast<std::size_t>(r.seq_len) + 1;
    while (buf.size() < need) {
        std::vector<int> seq;
        if (u < r.box_tasks)
            seq = make_box_sequence(v, rng, r.boxes_min, r.boxes_max);
        else if (u < r.box_tasks + r.filler_lm)
            seq = make_filler_sequence(v, rng);
        else
            seq = make_arithmetic_stream(v, rng);
        buf.insert(buf.end(), seq.begin(), seq.end());
    }
    buf.resize(need);
    return buf;
}

enum class Goal { band, gap };

TrainResult run_training(ModelWeights w, const Vocab& v, const TrainRecipe& r, Goal goal,
                         double lo, double hi) {
    r.validate();
    if (r.seq_len > w.cfg.max_seq_len) throw UsageError("recipe: sequence length over model max");

    std::vector<TaskInstance> heldout;
    for (int i = 0; i < r.eval_tasks; ++i)
        heldout.push_back(gen_task(v, r.eval_boxes, r.eval_seed + static_cast<std::uint64_t>(i)));

    TrainResult res;
    res.weights = std::move(w);
    const double base_acc = accuracy(res.weights, heldout);
    if (goal == Goal::gap) res.base_accuracy = base_acc;

    auto met = [&](double acc) {
        return goal == Goal::band ? (acc >= lo && acc <= hi) : (acc - res.base_accuracy >= lo);
    };

    if (r.steps == 0) {
        res.final_accuracy = base_acc;
        res.reached_target = met(base_acc);
        res.note = "no training steps";
        return res;
    }

    res.weights.set_requires_grad(true);
    AdamState adam(res.weights.parameters(), r.lr.peak);
    std::mt19937_64 rng(r.seed);

    double last_acc = base_acc;
    for (int step = 0; step < r.steps; ++step) {
        std::vector<std::vector<int>> inputs;
        std::vector<int> targets;
        for (int b = 0; b < r.batch; ++b) {
            std::vector<int> win = next_window(v, r, rng);
            inputs.emplace_back(win.begin(), win.end() - 1);
            targets.insert(targets.end(), win.begin() + 1, win.end());
        }

        TrainLogEntry e;
        e.step = step;
        e.lr = r.lr.at(step, r.steps);
        {
            Tape tape;
            ActivationCache c = forward(res.weights, inputs);
            Tensor loss = cross_entropy(c.logits_active, targets);
            e.loss = loss.item();
            tape.backward(loss);
        }
        adam.set_lr(e.lr);
        adam.step();

        const bool last_step = step + 1 == r.steps;
        if ((step + 1) % r.eval_every == 0 || last_step) {
            last_acc = accuracy(res.weights, heldout);
            e.heldout_accuracy = last_acc;
        }
        res.log.push_back(e);
        res.stop_step = step + 1;
        if (e.heldout_accuracy >= 0 && met(e.heldout_accuracy)) {
            res.reached_target = true;
            break;
        }
        if (goal == Goal::band && e.heldout_accuracy > hi) break;  // overshot the band
    }

    res.weights.set_requires_grad(false);
    res.final_accuracy = last_acc;
    std::ostringstream os;
    if (res.reached_target) {
        os << "target reached at step " << res.stop_step << " (held-out accuracy "
           << res.final_accuracy << ")";
    } else if (goal == Goal::band) {
        os << "held-out accuracy " << res.final_accuracy << " outside band [" << lo << ", " << hi
           << "] after " << res.stop_step << " steps";
    } else {
        os << "held-out gap " << res.final_accuracy - res.base_accuracy << " below " << lo
           << " after " << res.stop_step << " steps";
    }
    res.note = os.str();
    return res;
}

}  // namespace

TrainResult pretrain(const ModelConfig& cfg, const Vocab& v, const TrainRecipe& recipe,
                     double band_lo, double band_hi) {
    if (cfg.vocab_size != v.size()) throw UsageError("pretrain: config vocab mismatch");
    return run_training(ModelWeights::init(cfg), v, recipe, Goal::band, band_lo, band_hi);
}

TrainResult finetune(const ModelWeights& base, const Vocab& v, const TrainRecipe& recipe,
                     double min_gap) {
    if (base.cfg.vocab_size != v.size()) throw UsageError("finetune: config vocab mismatch");
    return run_training(clone_weights(base), v, recipe, Goal::gap, min_gap, 0.0);
}

std::string train_result_to_json(const TrainResult& r) {
    nlohmann::json j;
    j["final_accuracy"] = r.final_accuracy;
    j["base_accuracy"] = r.base_accuracy;
    j["reached_target"] = r.reached_target;
    j["stop_step"] = r.stop_step;
    j["note"] = r.note;
    j["log"] = nlohmann::json::array();
    for (const auto& e : r.log)
        j["log"].push_back({{"step", e.step},
                            {"lr", e.lr},
                            {"loss", e.loss},
                            {"heldout_accuracy", e.heldout_accuracy}});
    return j.dump(2);
}

}  // namespace circuitbox

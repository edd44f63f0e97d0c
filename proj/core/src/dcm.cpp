#include "circuitbox/dcm.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>
#include <utility>

#include <json.hpp>

#include "circuitbox/error.hpp"
#include "circuitbox/adam.hpp"
#include "circuitbox/ops.hpp"

namespace circuitbox {

namespace {

int role_pos(const TaskInstance& t, const std::string& role) {
    auto it = t.positions.find(role);
    if (it != t.positions.end()) return it->second;
    throw UsageError("dcm: task has no position for role '" + role + "'");
}

void validate_candidates(const ModelConfig& cfg, const std::vector<HeadNode>& cands) {
    if (cands.empty()) throw UsageError("dcm: empty candidate list");
    for (const auto& c : cands) {
        if (c.layer < 0 || c.layer >= cfg.n_layers || c.head < 0 || c.head >= cfg.n_heads)
            throw UsageError("dcm: candidate head out of range");
        if (c.role.empty()) throw UsageError("dcm: candidate has no role");
    }
}

// forward() needs uniform sequence lengths, so mixed-template batches are
// split into runs keyed by (original length, alternate length).
std::map<std::pair<int, int>, std::vector<int>> by_length(
        const std::vector<DesideratumTriple>& triples, int begin, int end) {
    std::map<std::pair<int, int>, std::vector<int>> groups;
    for (int i = begin; i < end; ++i) {
        const auto& tr = triples[i];
        groups[{static_cast<int>(tr.original.tokens.size()),
                static_cast<int>(tr.alternate.tokens.size())}].push_back(i);
    }
    return groups;
}

Tensor alt_value(const ActivationCache& alt, const HeadNode& c, int b, int pos) {
    std::vector<double> v = alt.head_out(c.layer, c.head, b, pos);
    const int n = static_cast<int>(v.size());
    return Tensor::from({n}, std::move(v));
}

}  // namespace

std::vector<double> MaskParams::mask() const {
    std::vector<double> w(theta.size());
    for (std::size_t i = 0; i < w.size(); ++i)
        w[i] = 1.0 / (1.0 + std::exp(-theta.values()[i]));
    return w;
}

std::vector<HeadNode> MaskParams::selected() const {
    std::vector<HeadNode> out;
    std::vector<double> w = mask();
    for (std::size_t i = 0; i < candidates.size(); ++i)
        if (w[i] > 0.5) out.push_back(candidates[i]);
    return out;
}

Tensor dcm_mask_loss(const ModelWeights& w, const std::vector<HeadNode>& candidates,
                     const std::vector<DesideratumTriple>& batch, const Tensor& theta,
                     double lambda) {
    validate_candidates(w.cfg, candidates);
    if (batch.empty()) throw UsageError("dcm: empty batch");
    if (!theta.defined() || theta.size() != candidates.size())
        throw UsageError("dcm: theta extent does not match candidates");

    const int n = static_cast<int>(candidates.size());
    Tensor W = sigmoid(theta);
    std::vector<Tensor> wi(n);
    for (int i = 0; i < n; ++i) wi[i] = at(W, static_cast<std::size_t>(i));

    std::vector<Tensor> terms;
    for (const auto& [key, idx] : by_length(batch, 0, static_cast<int>(batch.size()))) {
        std::vector<std::vector<int>> alt_toks, org_toks;
        for (int i : idx) {
            alt_toks.push_back(batch[i].alternate.tokens);
            org_toks.push_back(batch[i].original.tokens);
        }
        ActivationCache alt;
        {
            NoGradGuard ng;
            alt = forward(w, alt_toks, {}, {.record = true});
        }
        InterventionSpec iv;
        for (int i = 0; i < n; ++i) {
            const HeadNode& c = candidates[i];
            for (int b = 0; b < static_cast<int>(idx.size()); ++b) {
                const auto& tr = batch[idx[b]];
                Intervention item;
                item.at = {c.layer, c.head, Site::head_out, role_pos(tr.original, c.role)};
                item.kind = ActionKind::scale_mix;
                item.batch = b;
                item.value = alt_value(alt, c, b, role_pos(tr.alternate, c.role));
                item.w_param = wi[i];
                iv.items.push_back(std::move(item));
            }
        }
        ActivationCache org = forward(w, org_toks, iv);
        for (int b = 0; b < static_cast<int>(idx.size()); ++b) {
            const auto& tr = batch[idx[b]];
            const int last = role_pos(tr.original, "last");
            const std::size_t flat =
                (static_cast<std::size_t>(b) * org.T + last) * w.cfg.vocab_size + tr.target;
            terms.push_back(at(org.logits_active, flat));
        }
    }
    Tensor logit_term = terms.size() == 1 ? terms[0] : reduce_mean(concat(terms, 0));
    // lambda * sum(1 - W) = lambda*n - lambda*sum(W)
    Tensor penalty = add_scaled(Tensor::scalar(lambda * n), reduce_sum(W), -lambda);
    return add(scale(logit_term, -1.0), penalty);
}

MaskParams train_mask(const ModelWeights& w, const std::vector<HeadNode>& candidates,
                      const std::vector<DesideratumTriple>& triples,
                      const DcmTrainOptions& opt, DcmTrainLog* log) {
    validate_candidates(w.cfg, candidates);
    if (triples.empty()) throw UsageError("dcm: no training triples");
    if (opt.epochs < 1 || opt.batch < 1 || opt.lr <= 0)
        throw UsageError("dcm: bad training options");

    w.set_requires_grad(false);
    MaskParams mp;
    mp.candidates = candidates;
    mp.theta = Tensor::zeros({static_cast<int>(candidates.size())}, true);
    AdamState adam({mp.theta}, opt.lr);

    const int N = static_cast<int>(triples.size());
    for (int epoch = 0; epoch < opt.epochs; ++epoch) {
        double epoch_sum = 0;
        int n_batches = 0;
        for (int begin = 0; begin < N; begin += opt.batch) {
            const int end = std::min(N, begin + opt.batch);
            std::vector<DesideratumTriple> batch(triples.begin() + begin, triples.begin() + end);
            double lv;
            try {
                Tape tape;
                Tensor loss = dcm_mask_loss(w, candidates, batch, mp.theta, opt.lambda);
                lv = loss.item();
                tape.backward(loss);
            } catch (const NumericError& e) {
                std::ostringstream os;
                os << "dcm: diverged at epoch " << epoch << " batch " << n_batches << ": "
                   << e.what();
                throw NumericError(os.str());
            }
            adam.step();
            epoch_sum += lv;
            ++n_batches;
            if (log) log->batch_loss.push_back(lv);
        }
        if (log) log->epoch_loss.push_back(epoch_sum / n_batches);
    }
    return mp;
}

Tensor desideratum_patch_logits(const ModelWeights& w, const std::vector<HeadNode>& heads,
                                const DesideratumTriple& triple) {
    NoGradGuard ng;
    ActivationCache alt = forward(w, {triple.alternate.tokens}, {}, {.record = true});
    InterventionSpec iv;
    for (const auto& c : heads) {
        Intervention item;
        item.at = {c.layer, c.head, Site::head_out, role_pos(triple.original, c.role)};
        item.kind = ActionKind::replace_with;
        item.batch = 0;
        item.value = alt_value(alt, c, 0, role_pos(triple.alternate, c.role));
        iv.items.push_back(std::move(item));
    }
    return forward(w, {triple.original.tokens}, iv).logits;
}

double patched_target_accuracy(const ModelWeights& w, const std::vector<HeadNode>& heads,
                               const std::vector<DesideratumTriple>& triples, int chunk) {
    for (const auto& c : heads) {
        if (c.layer < 0 || c.layer >= w.cfg.n_layers || c.head < 0 || c.head >= w.cfg.n_heads)
            throw UsageError("dcm: head out of range");
        if (c.role.empty()) throw UsageError("dcm: head has no role");
    }
    if (triples.empty()) throw UsageError("dcm: no triples");
    if (chunk < 1) throw UsageError("dcm: bad chunk size");

    NoGradGuard ng;
    int hits = 0;
    for (const auto& [key, idx] : by_length(triples, 0, static_cast<int>(triples.size()))) {
        for (std::size_t cb = 0; cb < idx.size(); cb += chunk) {
            const std::size_t ce = std::min(idx.size(), cb + chunk);
            std::vector<std::vector<int>> alt_toks, org_toks;
            for (std::size_t j = cb; j < ce; ++j) {
                alt_toks.push_back(triples[idx[j]].alternate.tokens);
                org_toks.push_back(triples[idx[j]].original.tokens);
            }
            ActivationCache alt = forward(w, alt_toks, {}, {.record = true});
            InterventionSpec iv;
            for (const auto& c : heads) {
                for (std::size_t j = cb; j < ce; ++j) {
                    const auto& tr = triples[idx[j]];
                    Intervention item;
                    item.at = {c.layer, c.head, Site::head_out, role_pos(tr.original, c.role)};
                    item.kind = ActionKind::replace_with;
                    item.batch = static_cast<int>(j - cb);
                    item.value = alt_value(alt, c, static_cast<int>(j - cb),
                                           role_pos(tr.alternate, c.role));
                    iv.items.push_back(std::move(item));
                }
            }
            ActivationCache org = forward(w, org_toks, iv);
            for (std::size_t j = cb; j < ce; ++j) {
                const auto& tr = triples[idx[j]];
                const int b = static_cast<int>(j - cb);
                if (org.argmax(b, role_pos(tr.original, "last")) == tr.target) ++hits;
            }
        }
    }
    return static_cast<double>(hits) / static_cast<double>(triples.size());
}

DcmResult eval_mask(const ModelWeights& w, const std::vector<HeadNode>& selected,
                    const std::vector<DesideratumTriple>& eval_triples, int repeats) {
    const int N = static_cast<int>(eval_triples.size());
    if (repeats < 1) throw UsageError("dcm: repeats must be positive");
    if (N < repeats) throw UsageError("dcm: fewer eval triples than repeats");

    DcmResult r;
    r.selected = selected;
    r.n_eval = N;
    r.repeats = repeats;
    if (!eval_triples.empty()) r.kind = eval_triples.front().kind;

    std::vector<double> accs;
    const int base = N / repeats, extra = N % repeats;
    int pos = 0;
    for (int k = 0; k < repeats; ++k) {
        const int sz = base + (k < extra ? 1 : 0);
        std::vector<DesideratumTriple> sub(eval_triples.begin() + pos,
                                           eval_triples.begin() + pos + sz);
        pos += sz;
        accs.push_back(selected.empty()
                           ? patched_target_accuracy(w, {}, sub)
                           : patched_target_accuracy(w, selected, sub));
    }
    double mean = 0;
    for (double a : accs) mean += a;
    mean /= accs.size();
    double var = 0;
    for (double a : accs) var += (a - mean) * (a - mean);
    r.eval_mean = mean;
    r.eval_std = std::sqrt(var / accs.size());
    return r;
}

DcmResult run_dcm(const ModelWeights& w, const std::vector<HeadNode>& candidates,
                  const std::vector<DesideratumTriple>& train_triples,
                  const std::vector<DesideratumTriple>& eval_triples,
                  const DcmTrainOptions& opt, int repeats) {
    DcmTrainLog log;
    MaskParams mp = train_mask(w, candidates, train_triples, opt, &log);
    DcmResult r = eval_mask(w, mp.selected(), eval_triples, repeats);
    r.kind = train_triples.front().kind;
    r.candidates = candidates;
    r.theta = mp.theta.values();
    r.loss_curve = log.epoch_loss;
    r.n_train = static_cast<int>(train_triples.size());
    return r;
}

namespace {

nlohmann::json node_json(const HeadNode& n) {
    return {{"layer", n.layer}, {"head", n.head}, {"role", n.role},
            {"score", n.score}, {"channel", n.channel}};
}

HeadNode node_from(const nlohmann::json& j) {
    HeadNode n;
    n.layer = j.at("layer").get<int>();
    n.head = j.at("head").get<int>();
    n.role = j.at("role").get<std::string>();
    n.score = j.value("score", 0.0);
    n.channel = j.value("channel", std::string());
    return n;
}

}  // namespace

std::string dcm_result_to_json(const DcmResult& r) {
    nlohmann::json j;
    j["kind"] = r.kind;
    j["candidates"] = nlohmann::json::array();
    for (const auto& c : r.candidates) j["candidates"].push_back(node_json(c));
    j["theta"] = r.theta;
    j["selected"] = nlohmann::json::array();
    for (const auto& c : r.selected) j["selected"].push_back(node_json(c));
    j["loss_curve"] = r.loss_curve;
    j["eval_mean"] = r.eval_mean;
    j["eval_std"] = r.eval_std;
    j["n_train"] = r.n_train;
    j["n_eval"] = r.n_eval;
    j["repeats"] = r.repeats;
    return j.dump(2);
}

DcmResult dcm_result_from_json(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw IoError(std::string("dcm result: bad json: ") + e.what());
    }
    try {
        DcmResult r;
        r.kind = j.value("kind", std::string());
        for (const auto& c : j.at("candidates")) r.candidates.push_back(node_from(c));
        r.theta = j.at("theta").get<std::vector<double>>();
        for (const auto& c : j.at("selected")) r.selected.push_back(node_from(c));
        r.loss_curve = j.at("loss_curve").get<std::vector<double>>();
        r.eval_mean = j.at("eval_mean").get<double>();
        r.eval_std = j.at("eval_std").get<double>();
        r.n_train = j.at("n_train").get<int>();
        r.n_eval = j.at("n_eval").get<int>();
        r.repeats = j.at("repeats").get<int>();
        return r;
    } catch (const nlohmann::json::exception& e) {
        throw IoError(std::string("dcm result: bad json: ") + e.what());
    }
}

}  // namespace circuitbox

#pragma once

#include <string>
#include <vector>

#include "circuitbox/circuit.hpp"

namespace circuitbox {

struct MaskParams {
    std::vector<HeadNode> candidates;
    Tensor theta;  // one scalar per candidate; mask W = sigmoid(theta)

    std::vector<double> mask() const;
    std::vector<HeadNode> selected() const;  // W > 0.5
};

struct DcmTrainOptions {
    double lambda = 0.01;
    int epochs = 2;
    int batch = 32;
    double lr = 1e-2;
};

struct DcmTrainLog {
    std::vector<double> batch_loss;
    std::vector<double> epoch_loss;  // mean per epoch
};

/// Differentiable mask loss on one batch: the original run with every
/// candidate head's output interpolated toward the alternate run by W,
/// scored as -logit(target) + lambda * sum(1 - W).
Tensor dcm_mask_loss(const ModelWeights& w, const std::vector<HeadNode>& candidates,
                     const std::vector<DesideratumTriple>& batch, const Tensor& theta,
                     double lambda);

MaskParams train_mask(const ModelWeights& w, const std::vector<HeadNode>& candidates,
                      const std::vector<DesideratumTriple>& triples,
                      const DcmTrainOptions& opt = {}, DcmTrainLog* log = nullptr);

/// Logits of the original run with the listed heads hard-patched (W = 1)
/// from the alternate run.
Tensor desideratum_patch_logits(const ModelWeights& w, const std::vector<HeadNode>& heads,
                                const DesideratumTriple& triple);

/// Fraction of triples whose patched original run predicts triple.target.
double patched_target_accuracy(const ModelWeights& w, const std::vector<HeadNode>& heads,
                               const std::vector<DesideratumTriple>& triples, int chunk = 32);

struct DcmResult {
    std::string kind;
    std::vector<HeadNode> candidates;
    std::vector<double> theta;
    std::vector<HeadNode> selected;
    std::vector<double> loss_curve;  // epoch means
    double eval_mean = 0.0;
    double eval_std = 0.0;
    int n_train = 0;
    int n_eval = 0;
    int repeats = 0;
};

DcmResult eval_mask(const ModelWeights& w, const std::vector<HeadNode>& selected,
                    const std::vector<DesideratumTriple>& eval_triples, int repeats = 10);

DcmResult run_dcm(const ModelWeights& w, const std::vector<HeadNode>& candidates,
                  const std::vector<DesideratumTriple>& train_triples,
                  const std::vector<DesideratumTriple>& eval_triples,
                  const DcmTrainOptions& opt = {}, int repeats = 10);

std::string dcm_result_to_json(const DcmResult& r);
DcmResult dcm_result_from_json(const std::string& text);

}  // namespace circuitbox

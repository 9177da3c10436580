#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "qadv/metrics.hpp"
#include "qadv/model.hpp"

namespace qadv {

struct EnsembleConfig {
    std::vector<std::string> members;
    std::size_t m = 4;  // agreement threshold
    std::size_t classes = 10;

    void validate() const;
};

struct EnsembleVerdict {
    std::optional<int> predicted;
    std::vector<std::size_t> votes;  // per class
    bool accepted = false;
};

// Member labels -> verdict. Accepted when some class collects at least m
// votes; the plurality class wins with ties going to the lowest index.
EnsembleVerdict tally(std::span<const int> member_labels, std::size_t m, std::size_t classes);

// labels[member][example]
using LabelMatrix = std::vector<std::vector<int>>;
LabelMatrix member_predictions(const std::vector<const Model*>& models, const Tensor& batch);
std::vector<EnsembleVerdict> ensemble_verdicts(const LabelMatrix& labels, std::size_t m, std::size_t classes);

// |valid(X)| / |X|
double prediction_rate(const LabelMatrix& labels, std::size_t m, std::size_t classes);
// 1 - |accepted and predicted != truth| / |X'|
double defense_accuracy(const LabelMatrix& labels, const std::vector<int>& truth, std::size_t m, std::size_t classes);
// Accuracy restricted to accepted examples.
Metric accepted_accuracy(const LabelMatrix& labels, const std::vector<int>& truth, std::size_t m, std::size_t classes);

EnsembleVerdict ensemble_predict(const EnsembleConfig& ens, const std::vector<const Model*>& models, const Tensor& x);
double prediction_rate(const EnsembleConfig& ens, const std::vector<const Model*>& models, const Tensor& batch);
double defense_accuracy(const EnsembleConfig& ens, const std::vector<const Model*>& models, const Tensor& adversarial,
                        const std::vector<int>& truth);

// Rates at which the members other than `source` agree, split by the source
// model's outcome. Clean-correct and unsuccessful-adversarial rows count when
// every other member outputs the true label; misclassified and successful
// rows count when every other member outputs some wrong label.
struct AgreementStats {
    Metric clean_correct, clean_misclassified, adv_successful, adv_unsuccessful;
    std::size_t n_clean_correct = 0, n_clean_misclassified = 0, n_adv_successful = 0, n_adv_unsuccessful = 0;
};
AgreementStats agreement_stats(const LabelMatrix& clean, const std::vector<int>& clean_truth,
                               const LabelMatrix& adversarial, const std::vector<int>& adversarial_truth,
                               std::size_t source);

}  // namespace qadv

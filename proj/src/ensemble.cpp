#include "qadv/ensemble.hpp"

#include <set>

#include "qadv/error.hpp"

namespace qadv {

void EnsembleConfig::validate() const {
    if (members.empty()) throw ConfigError("ensemble has no members");
    if (m < 1 || m > members.size())
        throw ConfigError("agreement threshold m=" + std::to_string(m) + " outside [1, " +
                          std::to_string(members.size()) + "]");
    if (std::set<std::string>(members.begin(), members.end()).size() != members.size())
        throw ConfigError("ensemble members must be distinct");
    if (classes < 2) throw ConfigError("ensemble needs at least two classes");
}

EnsembleVerdict tally(std::span<const int> member_labels, std::size_t m, std::size_t classes) {
    EnsembleVerdict v;
    v.votes.assign(classes, 0);
    for (int y : member_labels) {
        if (y < 0 || static_cast<std::size_t>(y) >= classes) throw ParameterError("member label out of range");
        ++v.votes[static_cast<std::size_t>(y)];
    }
    std::size_t best = 0;
    for (std::size_t c = 1; c < classes; ++c)
        if (v.votes[c] > v.votes[best]) best = c;
    v.accepted = v.votes[best] >= m;
    if (v.accepted) v.predicted = static_cast<int>(best);
    return v;
}

LabelMatrix member_predictions(const std::vector<const Model*>& models, const Tensor& batch) {
    LabelMatrix out;
    for (const Model* m : models) {
        if (!m) throw ConfigError("ensemble member model is missing");
        out.push_back(predict_labels(*m, batch));
    }
    return out;
}

namespace {
std::size_t examples(const LabelMatrix& labels) {
    if (labels.empty() || labels.front().empty()) throw UsageError("empty label matrix");
    for (const auto& row : labels)
        if (row.size() != labels.front().size()) throw DimensionError("ragged label matrix");
    return labels.front().size();
}
}  // namespace

std::vector<EnsembleVerdict> ensemble_verdicts(const LabelMatrix& labels, std::size_t m, std::size_t classes) {
    const std::size_t n = examples(labels);
    std::vector<EnsembleVerdict> out;
    out.reserve(n);
    std::vector<int> column(labels.size());
    for (std::size_t e = 0; e < n; ++e) {
        for (std::size_t k = 0; k < labels.size(); ++k) column[k] = labels[k][e];
        out.push_back(tally(column, m, classes));
    }
    return out;
}

double prediction_rate(const LabelMatrix& labels, std::size_t m, std::size_t classes) {
    const auto v = ensemble_verdicts(labels, m, classes);
    std::size_t accepted = 0;
    for (const auto& e : v) accepted += e.accepted ? 1 : 0;
    return static_cast<double>(accepted) / static_cast<double>(v.size());
}

double defense_accuracy(const LabelMatrix& labels, const std::vector<int>& truth, std::size_t m, std::size_t classes) {
    const auto v = ensemble_verdicts(labels, m, classes);
    if (truth.size() != v.size()) throw DimensionError("truth labels and predictions differ in length");
    std::size_t fooled = 0;
    for (std::size_t e = 0; e < v.size(); ++e) fooled += (v[e].accepted && *v[e].predicted != truth[e]) ? 1 : 0;
    return 1.0 - static_cast<double>(fooled) / static_cast<double>(v.size());
}

Metric accepted_accuracy(const LabelMatrix& labels, const std::vector<int>& truth, std::size_t m, std::size_t classes) {
    const auto v = ensemble_verdicts(labels, m, classes);
    if (truth.size() != v.size()) throw DimensionError("truth labels and predictions differ in length");
    std::size_t accepted = 0, correct = 0;
    for (std::size_t e = 0; e < v.size(); ++e) {
        if (!v[e].accepted) continue;
        ++accepted;
        correct += *v[e].predicted == truth[e] ? 1 : 0;
    }
    if (accepted == 0) return std::nullopt;
    return static_cast<double>(correct) / static_cast<double>(accepted);
}

namespace {
void check_members(const EnsembleConfig& ens, const std::vector<const Model*>& models) {
    ens.validate();
    if (models.size() != ens.members.size())
        throw ConfigError("ensemble lists " + std::to_string(ens.members.size()) + " members but " +
                          std::to_string(models.size()) + " models were supplied");
    for (std::size_t i = 0; i < models.size(); ++i)
        if (!models[i]) throw ConfigError("ensemble member '" + ens.members[i] + "' is not loaded");
}
}  // namespace

EnsembleVerdict ensemble_predict(const EnsembleConfig& ens, const std::vector<const Model*>& models, const Tensor& x) {
    check_members(ens, models);
    const LabelMatrix labels = member_predictions(models, as_batch(*models.front(), x));
    std::vector<int> column;
    for (const auto& row : labels) column.push_back(row.at(0));
    return tally(column, ens.m, ens.classes);
}

double prediction_rate(const EnsembleConfig& ens, const std::vector<const Model*>& models, const Tensor& batch) {
    check_members(ens, models);
    return prediction_rate(member_predictions(models, batch), ens.m, ens.classes);
}

double defense_accuracy(const EnsembleConfig& ens, const std::vector<const Model*>& models, const Tensor& adversarial,
                        const std::vector<int>& truth) {
    check_members(ens, models);
    return defense_accuracy(member_predictions(models, adversarial), truth, ens.m, ens.classes);
}

AgreementStats agreement_stats(const LabelMatrix& clean, const std::vector<int>& clean_truth,
                               const LabelMatrix& adversarial, const std::vector<int>& adversarial_truth,
                               std::size_t source) {
    if (source >= clean.size() || clean.size() != adversarial.size())
        throw UsageError("agreement statistics need the same members for both sets and a valid source");
    if (clean.size() < 2) throw UsageError("agreement statistics need at least two members");

    struct Count {
        std::size_t hits = 0, total = 0;
        Metric rate() const {
            if (total == 0) return std::nullopt;
            return static_cast<double>(hits) / static_cast<double>(total);
        }
    };
    auto others_all = [&](const LabelMatrix& L, std::size_t e, auto pred) {
        for (std::size_t k = 0; k < L.size(); ++k)
            if (k != source && !pred(L[k][e])) return false;
        return true;
    };
    Count cc, cm, as, au;
    auto scan = [&](const LabelMatrix& L, const std::vector<int>& truth, Count& right, Count& wrong) {
        if (L.empty() || L.front().size() != truth.size()) throw DimensionError("truth labels and predictions differ");
        for (std::size_t e = 0; e < truth.size(); ++e) {
            const int y = truth[e];
            if (L[source][e] == y) {
                ++right.total;
                right.hits += others_all(L, e, [y](int p) { return p == y; }) ? 1 : 0;
            } else {
                ++wrong.total;
                wrong.hits += others_all(L, e, [y](int p) { return p != y; }) ? 1 : 0;
            }
        }
    };
    scan(clean, clean_truth, cc, cm);
    scan(adversarial, adversarial_truth, au, as);

    AgreementStats s;
    s.clean_correct = cc.rate();
    s.clean_misclassified = cm.rate();
    s.adv_successful = as.rate();
    s.adv_unsuccessful = au.rate();
    s.n_clean_correct = cc.total;
    s.n_clean_misclassified = cm.total;
    s.n_adv_successful = as.total;
    s.n_adv_unsuccessful = au.total;
    return s;
}

}  // namespace qadv

#include "qadv/metrics.hpp"

#include <algorithm>
#include <cmath>

#include "qadv/error.hpp"
#include "qadv/quantization.hpp"

namespace qadv {

double adversarial_accuracy(const Model& model, const Tensor& adversarial, const std::vector<int>& labels) {
    if (labels.empty()) throw UsageError("adversarial accuracy of an empty set");
    const auto pred = predict_labels(model, adversarial);
    if (pred.size() != labels.size()) throw DimensionError("adversarial set and labels differ in length");
    std::size_t correct = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) correct += pred[i] == labels[i] ? 1 : 0;
    return static_cast<double>(correct) / static_cast<double>(labels.size());
}

Distortion mean_distortion(std::span<const AdversarialPair> pairs) {
    double l2 = 0.0, linf = 0.0;
    std::size_t n = 0;
    for (const auto& p : pairs) {
        if (!p.success) continue;
        l2 += l2_distance(p.x, p.x_adv);
        linf += linf_distance(p.x, p.x_adv);
        ++n;
    }
    if (n == 0) return {};
    return {l2 / static_cast<double>(n), linf / static_cast<double>(n)};
}

RobustnessReport evaluate_adversarial(const Model& model, const Tensor& clean, const Tensor& adversarial,
                                      const std::vector<int>& labels) {
    require_same_shape(clean, adversarial, "evaluate_adversarial");
    if (labels.empty() || clean.dim(0) != labels.size()) throw DimensionError("adversarial set and labels differ in length");
    const auto pred = predict_labels(model, adversarial);
    RobustnessReport r;
    r.n_total = labels.size();
    std::vector<AdversarialPair> pairs;
    std::size_t correct = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        AdversarialPair p{slice_row(clean, i), slice_row(adversarial, i), pred[i] != labels[i]};
        ExampleOutcome o{p.success, l2_distance(p.x, p.x_adv), linf_distance(p.x, p.x_adv)};
        r.per_example.push_back(o);
        if (p.success) ++r.n_successful;
        else ++correct;
        pairs.push_back(std::move(p));
    }
    r.adversarial_accuracy = static_cast<double>(correct) / static_cast<double>(labels.size());
    const Distortion d = mean_distortion(pairs);
    r.mean_l2 = d.l2;
    r.mean_linf = d.linf;
    return r;
}

Metric cosine_similarity(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw DimensionError("cosine similarity of vectors of different length");
    const double na = l2_norm(a), nb = l2_norm(b);
    if (na == 0.0 || nb == 0.0) return std::nullopt;
    double dot = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) dot += a[i] * b[i];
    return std::clamp(dot / (na * nb), -1.0, 1.0);
}

CosineMatrix gradient_cosine_matrix(const std::vector<const Model*>& models, const Dataset& data) {
    if (models.size() < 2) throw UsageError("gradient cosine matrix needs at least two models");
    data.validate();
    const std::size_t k = models.size(), n = data.size();
    std::vector<Tensor> grads;
    for (const Model* m : models) grads.push_back(loss_gradient_wrt_input(*m, data.features, data.labels));
    const std::size_t d = grads.front().size() / n;

    CosineMatrix out;
    out.mean.assign(k, std::vector<Metric>(k));
    out.skipped.assign(k, std::vector<std::size_t>(k, 0));
    for (std::size_t i = 0; i < k; ++i) {
        out.mean[i][i] = 1.0;
        for (std::size_t j = i + 1; j < k; ++j) {
            double total = 0.0;
            std::size_t used = 0;
            for (std::size_t e = 0; e < n; ++e) {
                const Metric cs = cosine_similarity(grads[i].data().subspan(e * d, d), grads[j].data().subspan(e * d, d));
                if (!cs) {
                    ++out.skipped[i][j];
                    continue;
                }
                total += *cs;
                ++used;
            }
            if (used > 0) out.mean[i][j] = total / static_cast<double>(used);
            out.mean[j][i] = out.mean[i][j];
            out.skipped[j][i] = out.skipped[i][j];
        }
    }
    return out;
}

namespace {
double dot(const Tensor& a, const Tensor& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}
bool positive(double score) { return score >= 0.0; }
}  // namespace

ShiftDemoReport quantization_shift_demo(const Tensor& w, const Tensor& x, const Tensor& perturb, int bits) {
    require_same_shape(w, x, "quantization_shift_demo");
    require_same_shape(x, perturb, "quantization_shift_demo");
    Tensor xp = x;
    for (std::size_t i = 0; i < xp.size(); ++i) xp[i] += perturb[i];

    ShiftDemoReport r;
    r.clean_score = dot(w, x);
    r.adversarial_score = dot(w, xp);
    if (positive(r.clean_score) == positive(r.adversarial_score))
        throw UsageError("the perturbation does not flip the full-precision decision");

    auto row = [&](std::string name, Tensor wq) {
        ShiftDemoRow s;
        s.quantizer = std::move(name);
        s.clean_score = dot(wq, x);
        s.adversarial_score = dot(wq, xp);
        s.flipped = positive(s.clean_score) != positive(s.adversarial_score);
        s.cancelled = !s.flipped;
        s.quantized_w = std::move(wq);
        return s;
    };
    r.rows.push_back(row("binarize", binarize(w)));
    r.rows.push_back(row("dorefa-w" + std::to_string(bits), dorefa_quantize_weights(w, bits)));
    return r;
}

}  // namespace qadv

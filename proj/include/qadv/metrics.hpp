#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "qadv/dataset.hpp"
#include "qadv/model.hpp"

namespace qadv {

// Undefined metrics (no successful example, zero gradient) are nullopt and
// render as "—".
using Metric = std::optional<double>;

struct ExampleOutcome {
    bool success = false;
    double l2 = 0.0;
    double linf = 0.0;
};

struct RobustnessReport {
    double adversarial_accuracy = 0.0;
    Metric mean_l2;
    Metric mean_linf;
    std::size_t n_total = 0;
    std::size_t n_successful = 0;
    std::vector<ExampleOutcome> per_example;
};

// Fraction of adversarial rows the model still labels correctly.
double adversarial_accuracy(const Model& model, const Tensor& adversarial, const std::vector<int>& labels);

struct AdversarialPair {
    Tensor x;
    Tensor x_adv;
    bool success = false;
};
struct Distortion {
    Metric l2;
    Metric linf;
};
// Means over the successful pairs only.
Distortion mean_distortion(std::span<const AdversarialPair> pairs);

// Evaluates `model` on adversarial rows crafted from `clean`; an example is
// successful when the model's label differs from the true one.
RobustnessReport evaluate_adversarial(const Model& model, const Tensor& clean, const Tensor& adversarial,
                                      const std::vector<int>& labels);

// <a,b> / (|a| |b|); undefined when either vector is zero.
Metric cosine_similarity(std::span<const double> a, std::span<const double> b);

struct CosineMatrix {
    std::vector<std::vector<Metric>> mean;   // symmetric, unit diagonal
    std::vector<std::vector<std::size_t>> skipped;  // examples with a zero gradient
};
// Mean cosine similarity of input gradients of the cross-entropy loss.
CosineMatrix gradient_cosine_matrix(const std::vector<const Model*>& models, const Dataset& data);

struct ShiftDemoRow {
    std::string quantizer;
    Tensor quantized_w;
    double clean_score = 0.0;
    double adversarial_score = 0.0;
    bool flipped = false;
    bool cancelled = false;  // full precision flips but this quantizer does not
};
struct ShiftDemoReport {
    double clean_score = 0.0;
    double adversarial_score = 0.0;
    std::vector<ShiftDemoRow> rows;  // binarize, then dorefa with the given bits
};
// Linear classifier sign(w^T x) with sign(0) = +1. Throws UsageError unless
// the perturbation flips the full-precision decision.
ShiftDemoReport quantization_shift_demo(const Tensor& w, const Tensor& x, const Tensor& perturb, int bits);

}  // namespace qadv

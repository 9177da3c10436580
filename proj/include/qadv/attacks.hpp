#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string_view>
#include <vector>

#include "qadv/model.hpp"
#include "qadv/random.hpp"

namespace qadv {

enum class AttackKind { fgsm, bim, cw_l2, spsa, zoo };
std::string_view to_string(AttackKind k);
AttackKind parse_attack(std::string_view s);
// Gradient-free attacks only see a QueryModel.
bool is_query_attack(AttackKind k);

struct AttackConfig {
    double epsilon = 0.03;        // l-inf budget (fgsm, bim, spsa)
    std::size_t iterations = 100;  // T, or optimizer steps per constant for cw / zoo
    double step = 0.0;            // bim step; 0 selects epsilon / iterations
    double kappa = 0.0;
    double c_init = 0.9;
    std::size_t search_steps = 10;
    double lr = 0.1;              // Adam step (cw, zoo, spsa)
    double h = 1e-4;              // zoo finite-difference step
    double delta = 0.01;          // spsa probe size
    std::size_t spsa_batch = 128;
    std::size_t zoo_coordinates = 128;
    // Stop a constant's optimization when the loss has not improved by 0.01%
    // over the last tenth of the iterations (cw, zoo).
    bool abort_early = true;
    double box_lo = 0.0;
    double box_hi = 1.0;
    std::uint64_t seed = 0;

    // Per-attack defaults of the evaluation protocol.
    static AttackConfig defaults(AttackKind kind);
    void validate() const;
    double bim_step() const { return step > 0.0 ? step : epsilon / static_cast<double>(iterations); }
};

struct AdversarialExample {
    Tensor x_adv;
    bool success = false;
    double l2 = 0.0;
    double linf = 0.0;
    std::size_t queries = 0;
    // Every gradient the attack received was exactly zero.
    bool null_gradient = false;
    int predicted = -1;
};

// Gradient attacks. Batched variants take x as [N, input...].
AdversarialExample fgsm(const Model& model, const Tensor& x, int y, const AttackConfig& cfg);
std::vector<AdversarialExample> fgsm(const Model& model, const Tensor& batch, const std::vector<int>& labels,
                                     const AttackConfig& cfg);
AdversarialExample bim(const Model& model, const Tensor& x, int y, const AttackConfig& cfg);
std::vector<AdversarialExample> bim(const Model& model, const Tensor& batch, const std::vector<int>& labels,
                                    const AttackConfig& cfg);
AdversarialExample cw_l2(const Model& model, const Tensor& x, int y, const AttackConfig& cfg);

// Query attacks; cfg.seed drives all randomness.
AdversarialExample spsa(const QueryModel& model, const Tensor& x, int y, const AttackConfig& cfg);
AdversarialExample zoo(const QueryModel& model, const Tensor& x, int y, const AttackConfig& cfg);

// Single dispatch point; gradient-free kinds are routed through a QueryModel.
AdversarialExample run_attack(AttackKind kind, const Model& model, const Tensor& x, int y, const AttackConfig& cfg);

// Maps a batch [K, shape...] to K objective values.
using BatchObjective = std::function<std::vector<double>(const Tensor& batch)>;

// mean over `samples` Rademacher v of [g(x + delta v) - g(x - delta v)] / (2 delta) * v
Tensor spsa_gradient(const BatchObjective& g, const Tensor& x, double delta, std::size_t samples, Rng& rng);

// [g(x + h e_i) - g(x - h e_i)] / (2h) for every i in `coords`.
std::vector<double> coordinate_derivatives(const BatchObjective& g, const Tensor& x,
                                           const std::vector<std::size_t>& coords, double h);

// z_y - max_{j != y} z_j for one logit row.
double logit_margin(std::span<const double> logits, int y);

// Recomputes distances and the source prediction for a finished example.
void finalize_example(AdversarialExample& ex, const Tensor& x, int y, int predicted);

}  // namespace qadv

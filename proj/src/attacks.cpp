#include "qadv/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "qadv/error.hpp"

namespace qadv {

std::string_view to_string(AttackKind k) {
    switch (k) {
        case AttackKind::fgsm: return "fgsm";
        case AttackKind::bim: return "bim";
        case AttackKind::cw_l2: return "cw-l2";
        case AttackKind::spsa: return "spsa";
        case AttackKind::zoo: return "zoo";
    }
    return "unknown";
}

AttackKind parse_attack(std::string_view s) {
    if (s == "fgsm") return AttackKind::fgsm;
    if (s == "bim") return AttackKind::bim;
    if (s == "cw-l2" || s == "cw" || s == "cwl2") return AttackKind::cw_l2;
    if (s == "spsa") return AttackKind::spsa;
    if (s == "zoo") return AttackKind::zoo;
    throw ConfigError("unknown attack '" + std::string(s) + "' (expected fgsm, bim, cw-l2, spsa or zoo)");
}

bool is_query_attack(AttackKind k) { return k == AttackKind::spsa || k == AttackKind::zoo; }

AttackConfig AttackConfig::defaults(AttackKind kind) {
    AttackConfig c;
    switch (kind) {
        case AttackKind::fgsm: c.iterations = 1; break;
        case AttackKind::bim: c.step = 0.0003; break;
        case AttackKind::cw_l2:
        case AttackKind::zoo: break;
        case AttackKind::spsa: c.lr = 0.01; break;
    }
    return c;
}

void AttackConfig::validate() const {
    auto fail = [](const std::string& what) { throw ParameterError("attack config: " + what); };
    if (!(epsilon >= 0.0)) fail("epsilon must be non-negative");
    if (iterations == 0) fail("iterations must be at least 1");
    if (!(step >= 0.0)) fail("step must be non-negative");
    if (!(kappa >= 0.0)) fail("kappa must be non-negative");
    if (!(c_init > 0.0)) fail("initial constant must be positive");
    if (search_steps == 0) fail("search steps must be at least 1");
    if (!(lr > 0.0)) fail("learning rate must be positive");
    if (!(h > 0.0)) fail("finite-difference step h must be positive");
    if (!(delta > 0.0)) fail("SPSA delta must be positive");
    if (spsa_batch == 0 || zoo_coordinates == 0) fail("sample counts must be positive");
    if (!(box_lo < box_hi)) fail("box must satisfy lo < hi");
}

double logit_margin(std::span<const double> z, int y) {
    double other = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < z.size(); ++j)
        if (static_cast<int>(j) != y) other = std::max(other, z[j]);
    return z[static_cast<std::size_t>(y)] - other;
}

void finalize_example(AdversarialExample& ex, const Tensor& x, int /*y*/, int predicted) {
    ex.l2 = l2_distance(ex.x_adv, x);
    ex.linf = linf_distance(ex.x_adv, x);
    ex.predicted = predicted;
}

namespace {

double sign0(double g) { return g > 0.0 ? 1.0 : (g < 0.0 ? -1.0 : 0.0); }

void require_in_box(const Tensor& x, const AttackConfig& cfg) {
    for (double v : x.values())
        if (!(v >= cfg.box_lo && v <= cfg.box_hi)) throw ParameterError("attack input lies outside the box");
}

void require_labels(const Tensor& batch, const std::vector<int>& labels, std::size_t classes) {
    if (batch.dim(0) != labels.size())
        throw DimensionError("batch of " + std::to_string(batch.dim(0)) + " with " + std::to_string(labels.size()) +
                             " labels");
    for (int y : labels)
        if (y < 0 || static_cast<std::size_t>(y) >= classes) throw ParameterError("label out of range");
}

// Adam moments over a flat parameter vector; `t` counts per entry so that
// coordinate-wise updates get their own bias correction.
struct Adam {
    explicit Adam(std::size_t n) : m(n, 0.0), v(n, 0.0), t(n, 0) {}
    double step(std::size_t i, double g, double lr) {
        constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
        m[i] = b1 * m[i] + (1.0 - b1) * g;
        v[i] = b2 * v[i] + (1.0 - b2) * g * g;
        ++t[i];
        const double mh = m[i] / (1.0 - std::pow(b1, static_cast<double>(t[i])));
        const double vh = v[i] / (1.0 - std::pow(b2, static_cast<double>(t[i])));
        return lr * mh / (std::sqrt(vh) + eps);
    }
    std::vector<double> m, v;
    std::vector<std::uint64_t> t;
};

std::vector<AdversarialExample> finish_batch(const Model& model, const Tensor& clean, Tensor adv,
                                             const std::vector<int>& labels, const std::vector<bool>& null_grad) {
    const auto pred = predict_labels(model, adv);
    std::vector<AdversarialExample> out(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i) {
        auto& ex = out[i];
        ex.x_adv = slice_row(adv, i);
        ex.null_gradient = null_grad[i];
        finalize_example(ex, slice_row(clean, i), labels[i], pred[i]);
        ex.success = !ex.null_gradient && pred[i] != labels[i];
    }
    return out;
}

AdversarialExample single(std::vector<AdversarialExample> v, const Model& model) {
    AdversarialExample ex = std::move(v.front());
    ex.x_adv = ex.x_adv.reshaped(model.input_shape);
    return ex;
}

}  // namespace

// ---------------------------------------------------------------------------
// FGSM / BIM
// ---------------------------------------------------------------------------

std::vector<AdversarialExample> fgsm(const Model& model, const Tensor& batch, const std::vector<int>& labels,
                                     const AttackConfig& cfg) {
    cfg.validate();
    const Tensor x = as_batch(model, batch);
    require_labels(x, labels, model.classes);
    require_in_box(x, cfg);
    const Tensor g = loss_gradient_wrt_input(model, x, labels);
    const std::size_t n = labels.size(), d = x.size() / n;
    Tensor adv = x;
    std::vector<bool> null_grad(n, true);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = i * d; k < (i + 1) * d; ++k) {
            if (g[k] != 0.0) null_grad[i] = false;
            adv[k] = std::clamp(x[k] + cfg.epsilon * sign0(g[k]), cfg.box_lo, cfg.box_hi);
        }
    return finish_batch(model, x, std::move(adv), labels, null_grad);
}

AdversarialExample fgsm(const Model& model, const Tensor& x, int y, const AttackConfig& cfg) {
    return single(fgsm(model, as_batch(model, x), std::vector<int>{y}, cfg), model);
}

std::vector<AdversarialExample> bim(const Model& model, const Tensor& batch, const std::vector<int>& labels,
                                    const AttackConfig& cfg) {
    cfg.validate();
    const Tensor x = as_batch(model, batch);
    require_labels(x, labels, model.classes);
    require_in_box(x, cfg);
    const std::size_t n = labels.size(), d = x.size() / n;
    const double alpha = cfg.bim_step();
    Tensor adv = x;
    std::vector<bool> null_grad(n, true);
    for (std::size_t it = 0; it < cfg.iterations; ++it) {
        const Tensor g = loss_gradient_wrt_input(model, adv, labels);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t k = i * d; k < (i + 1) * d; ++k) {
                if (g[k] != 0.0) null_grad[i] = false;
                const double lo = std::max(cfg.box_lo, x[k] - cfg.epsilon);
                const double hi = std::min(cfg.box_hi, x[k] + cfg.epsilon);
                adv[k] = std::clamp(adv[k] + alpha * sign0(g[k]), lo, hi);
            }
    }
    return finish_batch(model, x, std::move(adv), labels, null_grad);
}

AdversarialExample bim(const Model& model, const Tensor& x, int y, const AttackConfig& cfg) {
    return single(bim(model, as_batch(model, x), std::vector<int>{y}, cfg), model);
}

// ---------------------------------------------------------------------------
// CW-l2 and ZOO share the tanh change of variables and the search on c.
// ---------------------------------------------------------------------------

namespace {

struct TanhBox {
    double lo, hi;
    double to_x(double w) const { return lo + (hi - lo) * 0.5 * (std::tanh(w) + 1.0); }
    double to_w(double x) const {
        const double shrink = 1e-6 * (hi - lo);
        const double xs = std::clamp(x, lo + shrink, hi - shrink);
        return std::atanh(2.0 * (xs - lo) / (hi - lo) - 1.0);
    }
};

// Bookkeeping for the binary search on the trade-off constant.
class ConstantSearch {
public:
    explicit ConstantSearch(double c) : c_(c) {}
    double c() const { return c_; }
    void update(bool succeeded) {
        if (succeeded) {
            upper_ = std::min(upper_, c_);
            c_ = (lower_ + upper_) / 2.0;
        } else {
            lower_ = std::max(lower_, c_);
            c_ = upper_ < kUnset ? (lower_ + upper_) / 2.0 : c_ * 10.0;
        }
    }

private:
    static constexpr double kUnset = 1e10;
    double c_;
    double lower_ = 0.0;
    double upper_ = kUnset;
};

// Keeps the least-distortion success and, failing that, the iterate that
// came closest to the decision boundary.
struct BestIterate {
    bool found = false;
    double best_l2sq = std::numeric_limits<double>::infinity();
    Tensor best;
    double closest_margin = std::numeric_limits<double>::infinity();
    Tensor closest;

    // Returns true when the iterate is adversarial.
    bool offer(const Tensor& xa, double l2sq, double margin, int predicted, int y, double kappa) {
        const bool adversarial = margin <= -kappa && predicted != y;
        if (adversarial && l2sq < best_l2sq) {
            found = true;
            best_l2sq = l2sq;
            best = xa;
        }
        if (margin < closest_margin) {
            closest_margin = margin;
            closest = xa;
        }
        return adversarial;
    }
    const Tensor& result() const { return found ? best : closest; }
};

// True when the loss failed to drop by 0.01% since the last checkpoint.
class EarlyAbort {
public:
    EarlyAbort(const AttackConfig& cfg) : on_(cfg.abort_early), every_(std::max<std::size_t>(1, cfg.iterations / 10)) {}
    bool stalled(std::size_t it, double loss) {
        if (!on_ || it % every_ != 0) return false;
        if (loss > prev_ * 0.9999) return true;
        prev_ = loss;
        return false;
    }

private:
    bool on_;
    std::size_t every_;
    double prev_ = std::numeric_limits<double>::infinity();
};

}  // namespace

AdversarialExample cw_l2(const Model& model, const Tensor& x_in, int y, const AttackConfig& cfg) {
    cfg.validate();
    const Tensor x = as_batch(model, x_in);
    if (x.dim(0) != 1) throw DimensionError("cw_l2 attacks one example at a time");
    require_labels(x, {y}, model.classes);
    require_in_box(x, cfg);
    const TanhBox box{cfg.box_lo, cfg.box_hi};
    const double half_range = 0.5 * (cfg.box_hi - cfg.box_lo);

    Tensor w0 = x;
    for (auto& v : w0.data()) v = box.to_w(v);

    BestIterate best;
    ConstantSearch search(cfg.c_init);
    for (std::size_t s = 0; s < cfg.search_steps; ++s) {
        const double c = search.c();
        Tensor w = w0;
        Adam adam(w.size());
        EarlyAbort abort(cfg);
        bool succeeded = false;
        for (std::size_t it = 0; it < cfg.iterations; ++it) {
            Tape tape;
            Var wv = tape.variable(w);
            Var xa = add_scalar(scale(add_scalar(tanh(wv), 1.0), half_range), cfg.box_lo);
            Var dist = sum(square(sub(xa, tape.constant(x))));
            Var logits = trace_forward(tape, model, xa, Mode::eval, false).logits;
            Var loss = add(dist, scale(margin_loss(logits, {y}, cfg.kappa), c));
            const auto z = logits.value().data();
            succeeded |= best.offer(xa.value(), dist.value().item(), logit_margin(z, y),
                                    static_cast<int>(argmax(z)), y, cfg.kappa);
            const double lv = loss.value().item();
            if (abort.stalled(it, lv)) break;
            tape.backward(loss);
            const Tensor g = tape.grad(wv);
            for (std::size_t i = 0; i < w.size(); ++i) w[i] -= adam.step(i, g[i], cfg.lr);
        }
        search.update(succeeded);
    }

    AdversarialExample ex;
    ex.x_adv = best.result().reshaped(model.input_shape);
    const Tensor z = predict_logits(model, ex.x_adv);
    const int pred = static_cast<int>(argmax(z.data()));
    finalize_example(ex, x.reshaped(model.input_shape), y, pred);
    ex.success = best.found && pred != y && logit_margin(z.data(), y) <= -cfg.kappa + 1e-9;
    return ex;
}

// ---------------------------------------------------------------------------
// Gradient estimators
// ---------------------------------------------------------------------------

Tensor spsa_gradient(const BatchObjective& g, const Tensor& x, double delta, std::size_t samples, Rng& rng) {
    const std::size_t d = x.size();
    Shape bs{2 * samples};
    bs.insert(bs.end(), x.shape().begin(), x.shape().end());
    Tensor probes(bs);
    std::vector<double> v(samples * d);
    for (std::size_t s = 0; s < samples; ++s)
        for (std::size_t k = 0; k < d; ++k) {
            const double r = rng.rademacher();
            v[s * d + k] = r;
            probes[(2 * s) * d + k] = x[k] + delta * r;
            probes[(2 * s + 1) * d + k] = x[k] - delta * r;
        }
    const std::vector<double> vals = g(probes);
    if (vals.size() != 2 * samples) throw DimensionError("objective returned the wrong number of values");
    Tensor est(x.shape());
    for (std::size_t s = 0; s < samples; ++s) {
        const double coef = (vals[2 * s] - vals[2 * s + 1]) / (2.0 * delta);
        for (std::size_t k = 0; k < d; ++k) est[k] += coef * v[s * d + k];
    }
    for (auto& e : est.data()) e /= static_cast<double>(samples);
    return est;
}

std::vector<double> coordinate_derivatives(const BatchObjective& g, const Tensor& x,
                                           const std::vector<std::size_t>& coords, double h) {
    const std::size_t d = x.size();
    Shape bs{2 * coords.size()};
    bs.insert(bs.end(), x.shape().begin(), x.shape().end());
    Tensor probes(bs);
    for (std::size_t j = 0; j < coords.size(); ++j) {
        if (coords[j] >= d) throw DimensionError("coordinate index out of range");
        std::copy(x.data().begin(), x.data().end(), probes.data().begin() + static_cast<std::ptrdiff_t>(2 * j * d));
        std::copy(x.data().begin(), x.data().end(), probes.data().begin() + static_cast<std::ptrdiff_t>((2 * j + 1) * d));
        probes[2 * j * d + coords[j]] += h;
        probes[(2 * j + 1) * d + coords[j]] -= h;
    }
    const std::vector<double> vals = g(probes);
    if (vals.size() != 2 * coords.size()) throw DimensionError("objective returned the wrong number of values");
    std::vector<double> out(coords.size());
    for (std::size_t j = 0; j < coords.size(); ++j) out[j] = (vals[2 * j] - vals[2 * j + 1]) / (2.0 * h);
    return out;
}

// ---------------------------------------------------------------------------
// SPSA
// ---------------------------------------------------------------------------

AdversarialExample spsa(const QueryModel& model, const Tensor& x_in, int y, const AttackConfig& cfg) {
    cfg.validate();
    const Tensor x = x_in.reshaped(model.input_shape());
    require_in_box(x, cfg);
    if (y < 0 || static_cast<std::size_t>(y) >= model.classes()) throw ParameterError("label out of range");
    const std::size_t start_queries = model.query_count();
    const std::size_t d = x.size(), c = model.classes();

    auto margins = [&](const Tensor& batch) {
        const Tensor z = model.logits(batch);
        std::vector<double> out(batch.dim(0));
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = logit_margin(z.data().subspan(i * c, c), y);
        return out;
    };

    Shape one{1};
    one.insert(one.end(), model.input_shape().begin(), model.input_shape().end());
    Rng rng(cfg.seed);
    Adam adam(d);
    Tensor adv = x;
    for (std::size_t it = 0; it < cfg.iterations; ++it) {
        if (margins(adv.reshaped(one))[0] < 0.0) break;
        const Tensor g = spsa_gradient(margins, adv, cfg.delta, cfg.spsa_batch, rng);
        for (std::size_t k = 0; k < d; ++k) {
            const double lo = std::max(cfg.box_lo, x[k] - cfg.epsilon);
            const double hi = std::min(cfg.box_hi, x[k] + cfg.epsilon);
            adv[k] = std::clamp(adv[k] - adam.step(k, g[k], cfg.lr), lo, hi);
        }
    }

    AdversarialExample ex;
    ex.x_adv = adv;
    const Tensor z = model.logits(adv);
    const int pred = static_cast<int>(argmax(z.data()));
    finalize_example(ex, x, y, pred);
    ex.success = pred != y;
    ex.queries = model.query_count() - start_queries;
    return ex;
}

// ---------------------------------------------------------------------------
// ZOO
// ---------------------------------------------------------------------------

AdversarialExample zoo(const QueryModel& model, const Tensor& x_in, int y, const AttackConfig& cfg) {
    cfg.validate();
    const Tensor x = x_in.reshaped(model.input_shape());
    require_in_box(x, cfg);
    if (y < 0 || static_cast<std::size_t>(y) >= model.classes()) throw ParameterError("label out of range");
    const std::size_t start_queries = model.query_count();
    const std::size_t d = x.size(), nc = model.classes();
    const TanhBox box{cfg.box_lo, cfg.box_hi};

    // Batch of w points -> image points.
    auto images = [&](const Tensor& wb) {
        Tensor xb = wb;
        for (auto& v : xb.data()) v = box.to_x(v);
        return xb;
    };
    // log f_y - max_{j != y} log f_j on the softmax output; the small floor
    // keeps saturated probabilities finite.
    auto log_margin = [&](std::span<const double> p) {
        std::vector<double> lp(p.size());
        for (std::size_t j = 0; j < p.size(); ++j) lp[j] = std::log(p[j] + 1e-30);
        return logit_margin(lp, y);
    };
    auto losses = [&](const Tensor& wb, double c, std::vector<double>* margin_out, std::vector<int>* pred_out) {
        const Tensor xb = images(wb);
        const Tensor p = model.probabilities(xb);
        const std::size_t n = wb.dim(0);
        std::vector<double> out(n);
        for (std::size_t i = 0; i < n; ++i) {
            double dist = 0.0;
            for (std::size_t k = 0; k < d; ++k) {
                const double diff = xb[i * d + k] - x[k];
                dist += diff * diff;
            }
            const auto row = p.data().subspan(i * nc, nc);
            const double m = log_margin(row);
            out[i] = dist + c * std::max(m, -cfg.kappa);
            if (margin_out) margin_out->push_back(m);
            if (pred_out) pred_out->push_back(static_cast<int>(argmax(row)));
        }
        return out;
    };

    Tensor w0 = x;
    for (auto& v : w0.data()) v = box.to_w(v);
    Shape one{1};
    one.insert(one.end(), model.input_shape().begin(), model.input_shape().end());

    Rng rng(cfg.seed);
    BestIterate best;
    ConstantSearch search(cfg.c_init);
    const std::size_t k = std::min(cfg.zoo_coordinates, d);
    for (std::size_t s = 0; s < cfg.search_steps; ++s) {
        const double c = search.c();
        Tensor w = w0;
        Adam adam(d);
        EarlyAbort abort(cfg);
        bool succeeded = false;
        for (std::size_t it = 0; it < cfg.iterations; ++it) {
            std::vector<double> m;
            std::vector<int> pred;
            const double lv = losses(w.reshaped(one), c, &m, &pred)[0];
            const Tensor xa = images(w);
            succeeded |= best.offer(xa, l2_distance(xa, x) * l2_distance(xa, x), m[0], pred[0], y, cfg.kappa);
            if (abort.stalled(it, lv)) break;
            const auto coords = rng.sample_without_replacement(d, k);
            const auto g = coordinate_derivatives([&](const Tensor& wb) { return losses(wb, c, nullptr, nullptr); },
                                                  w, coords, cfg.h);
            for (std::size_t j = 0; j < coords.size(); ++j) w[coords[j]] -= adam.step(coords[j], g[j], cfg.lr);
        }
        search.update(succeeded);
    }

    AdversarialExample ex;
    ex.x_adv = best.result();
    const Tensor z = model.logits(ex.x_adv);
    const int pred = static_cast<int>(argmax(z.data()));
    finalize_example(ex, x, y, pred);
    ex.success = best.found && pred != y && logit_margin(z.data(), y) <= -cfg.kappa + 1e-9;
    ex.queries = model.query_count() - start_queries;
    return ex;
}

AdversarialExample run_attack(AttackKind kind, const Model& model, const Tensor& x, int y, const AttackConfig& cfg) {
    switch (kind) {
        case AttackKind::fgsm: return fgsm(model, x, y, cfg);
        case AttackKind::bim: return bim(model, x, y, cfg);
        case AttackKind::cw_l2: return cw_l2(model, x, y, cfg);
        case AttackKind::spsa: return spsa(QueryModel(model), x, y, cfg);
        case AttackKind::zoo: return zoo(QueryModel(model), x, y, cfg);
    }
    throw ConfigError("unknown attack");
}

}  // namespace qadv

#include "qadv/model.hpp"

#include <cmath>
#include <numeric>

#include "qadv/error.hpp"
#include "qadv/random.hpp"

namespace qadv {

std::string_view to_string(Arch a) {
    switch (a) {
        case Arch::desk_cnn: return "desk-cnn";
        case Arch::desk_mlp: return "desk-mlp";
    }
    return "unknown";
}

Arch parse_arch(std::string_view s) {
    if (s == "desk-cnn") return Arch::desk_cnn;
    if (s == "desk-mlp") return Arch::desk_mlp;
    throw ConfigError("unknown architecture '" + std::string(s) + "' (expected desk-cnn or desk-mlp)");
}

std::string_view to_string(LayerKind k) {
    switch (k) {
        case LayerKind::conv: return "conv";
        case LayerKind::dense: return "dense";
        case LayerKind::batchnorm: return "batchnorm";
        case LayerKind::relu: return "relu";
        case LayerKind::maxpool: return "maxpool";
        case LayerKind::softmax: return "softmax";
    }
    return "unknown";
}

std::size_t Model::parameter_count() const {
    std::size_t n = 0;
    for (const auto& layer : params)
        for (const auto& t : layer) n += t.size();
    return n;
}

namespace {

Tensor glorot(Shape shape, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    Tensor t(std::move(shape));
    for (auto& v : t.data()) v = rng.uniform(-bound, bound);
    return t;
}

std::vector<LayerSpec> layout(Arch arch, const QuantScheme& s, std::size_t classes) {
    const bool qw = s.quantizes_weights();
    const bool qa = s.quantizes_activations();
    auto weight_layer = [](LayerKind kind, std::size_t width, std::size_t kernel, bool quant_w, bool quant_a,
                           bool bias) {
        LayerSpec l;
        l.kind = kind;
        l.width = width;
        l.kernel = kernel;
        l.quantize_weights = quant_w;
        l.quantize_activations = quant_a;
        l.bias = bias;
        return l;
    };
    auto simple = [](LayerKind kind, std::size_t kernel = 0, bool quant_a = false) {
        LayerSpec l;
        l.kind = kind;
        l.kernel = kernel;
        l.quantize_activations = quant_a;
        return l;
    };
    std::vector<LayerSpec> L;
    if (arch == Arch::desk_cnn) {
        L.push_back(weight_layer(LayerKind::conv, 16, 3, false, qa, false));
        L.push_back(simple(LayerKind::maxpool, 2));
        L.push_back(simple(LayerKind::batchnorm));
        L.push_back(simple(LayerKind::relu, 0, qa));
        L.push_back(weight_layer(LayerKind::conv, 32, 3, qw, qa, false));
        L.push_back(simple(LayerKind::maxpool, 2));
        L.push_back(simple(LayerKind::batchnorm));
        L.push_back(simple(LayerKind::relu, 0, qa));
        L.push_back(weight_layer(LayerKind::dense, 64, 0, qw, qa, false));
    } else {
        L.push_back(weight_layer(LayerKind::dense, 128, 0, false, qa, false));
        L.push_back(simple(LayerKind::batchnorm));
        L.push_back(simple(LayerKind::relu, 0, qa));
        L.push_back(weight_layer(LayerKind::dense, 64, 0, qw, qa, false));
    }
    L.push_back(simple(LayerKind::batchnorm));
    L.push_back(simple(LayerKind::relu, 0, qa));
    L.push_back(weight_layer(LayerKind::dense, classes, 0, false, false, true));
    L.push_back(simple(LayerKind::softmax));
    return L;
}

}  // namespace

Model build_model(Arch arch, const QuantScheme& scheme, const Shape& input_shape, std::size_t classes,
                  std::uint64_t seed) {
    scheme.validate();
    if (classes < 2) throw ConfigError("a classifier needs at least two classes");
    if (input_shape.empty() || shape_size(input_shape) == 0) throw ConfigError("empty input shape");
    if (arch == Arch::desk_cnn) {
        if (input_shape.size() != 3)
            throw ConfigError("desk-cnn expects [C,H,W] inputs, got " + shape_string(input_shape));
        if (input_shape[1] < 4 || input_shape[2] < 4)
            throw ConfigError("desk-cnn needs spatial extents of at least 4, got " + shape_string(input_shape));
    }

    Model m;
    m.arch = arch;
    m.scheme = scheme;
    m.classes = classes;
    m.input_shape = input_shape;
    m.layers = layout(arch, scheme, classes);
    m.params.resize(m.layers.size());
    m.bn_state.resize(m.layers.size());
    m.metadata.seed = seed;

    Rng rng(seed);
    Shape cur = input_shape;
    for (std::size_t i = 0; i < m.layers.size(); ++i) {
        const LayerSpec& l = m.layers[i];
        switch (l.kind) {
            case LayerKind::conv: {
                const std::size_t c = cur[0];
                m.params[i].push_back(glorot(Shape{l.width, c, l.kernel, l.kernel}, c * l.kernel * l.kernel,
                                             l.width * l.kernel * l.kernel, rng));
                cur = Shape{l.width, cur[1], cur[2]};
                break;
            }
            case LayerKind::dense: {
                const std::size_t in = shape_size(cur);
                m.params[i].push_back(glorot(Shape{in, l.width}, in, l.width, rng));
                if (l.bias) m.params[i].push_back(Tensor(Shape{l.width}, 0.0));
                cur = Shape{l.width};
                break;
            }
            case LayerKind::maxpool: cur = Shape{cur[0], cur[1] / l.kernel, cur[2] / l.kernel}; break;
            case LayerKind::batchnorm: {
                const std::size_t c = cur[0];
                m.params[i].push_back(Tensor(Shape{c}, 1.0));
                m.params[i].push_back(Tensor(Shape{c}, 0.0));
                m.bn_state[i] = BatchNormState{std::vector<double>(c, 0.0), std::vector<double>(c, 1.0)};
                break;
            }
            case LayerKind::relu:
            case LayerKind::softmax: break;
        }
    }
    return m;
}

Trace trace_forward(Tape& tape, const Model& model, Var x, Mode mode, bool track_params,
                    std::vector<BatchStats>* batch_stats) {
    const Shape& xs = x.value().shape();
    Shape expected{xs.empty() ? 0 : xs[0]};
    expected.insert(expected.end(), model.input_shape.begin(), model.input_shape.end());
    if (xs != expected)
        throw DimensionError("model expects a batch of " + shape_string(model.input_shape) + " inputs, got " +
                             shape_string(xs));
    if (batch_stats) batch_stats->assign(model.layers.size(), BatchStats{});

    Trace tr;
    tr.params.resize(model.layers.size());
    for (std::size_t i = 0; i < model.layers.size(); ++i)
        for (const Tensor& p : model.params[i])
            tr.params[i].push_back(track_params ? tape.variable(p) : tape.constant(p));

    Var h = x;
    for (std::size_t i = 0; i < model.layers.size(); ++i) {
        const LayerSpec& l = model.layers[i];
        const auto& p = tr.params[i];
        switch (l.kind) {
            case LayerKind::conv: {
                Var k = l.quantize_weights ? quantize_weights(p[0], model.scheme) : p[0];
                h = conv2d(h, k, Padding::same);
                break;
            }
            case LayerKind::dense: {
                if (h.value().rank() != 2) h = flatten(h);
                Var w = l.quantize_weights ? quantize_weights(p[0], model.scheme) : p[0];
                h = matmul(h, w);
                if (l.bias) h = add_bias(h, p[1]);
                break;
            }
            case LayerKind::maxpool: h = maxpool2d(h, l.kernel); break;
            case LayerKind::batchnorm:
                if (mode == Mode::train) {
                    h = batch_norm_train(h, p[0], p[1], kBatchNormEps, batch_stats ? &(*batch_stats)[i] : nullptr);
                } else {
                    h = batch_norm_eval(h, p[0], p[1], model.bn_state[i].running_mean, model.bn_state[i].running_var,
                                        kBatchNormEps);
                }
                break;
            case LayerKind::relu:
                h = l.quantize_activations ? quantize_activations(h, model.scheme.activation_bits) : relu(h);
                tr.activations.push_back(h);
                break;
            case LayerKind::softmax: break;  // logits are the head output; softmax lives in the loss
        }
    }
    tr.logits = h;
    return tr;
}

namespace {

void update_running_stats(Model& model, const std::vector<BatchStats>& stats) {
    for (std::size_t i = 0; i < model.layers.size(); ++i) {
        if (model.layers[i].kind != LayerKind::batchnorm || stats[i].mean.empty()) continue;
        auto& st = model.bn_state[i];
        for (std::size_t c = 0; c < st.running_mean.size(); ++c) {
            st.running_mean[c] = kBatchNormMomentum * st.running_mean[c] + (1.0 - kBatchNormMomentum) * stats[i].mean[c];
            st.running_var[c] = kBatchNormMomentum * st.running_var[c] + (1.0 - kBatchNormMomentum) * stats[i].var[c];
        }
    }
}

}  // namespace

Tensor forward(Model& model, const Tensor& x, Mode mode) {
    if (mode == Mode::eval) return predict_logits(model, x);
    Tape tape;
    std::vector<BatchStats> stats;
    Trace tr = trace_forward(tape, model, tape.constant(as_batch(model, x)), Mode::train, false, &stats);
    update_running_stats(model, stats);
    return tr.logits.value();
}

Tensor predict_logits(const Model& model, const Tensor& x) {
    Tape tape;
    return trace_forward(tape, model, tape.constant(as_batch(model, x)), Mode::eval, false).logits.value();
}

std::vector<int> predict_labels(const Model& model, const Tensor& x) {
    const Tensor z = predict_logits(model, x);
    const std::size_t n = z.dim(0), c = z.dim(1);
    std::vector<int> out(n);
    for (std::size_t i = 0; i < n; ++i)
        out[i] = static_cast<int>(argmax(z.data().subspan(i * c, c)));
    return out;
}

std::vector<Tensor> activation_outputs(const Model& model, const Tensor& x) {
    Tape tape;
    Trace tr = trace_forward(tape, model, tape.constant(as_batch(model, x)), Mode::eval, false);
    std::vector<Tensor> out;
    for (const Var& a : tr.activations) out.push_back(a.value());
    return out;
}

Tensor as_batch(const Model& model, const Tensor& x) {
    if (x.shape() == model.input_shape) {
        Shape s{1};
        s.insert(s.end(), model.input_shape.begin(), model.input_shape.end());
        return x.reshaped(std::move(s));
    }
    Tensor copy(x.shape(), x.values());
    return copy;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

void TrainConfig::validate() const {
    if (!(lr > 0.0)) throw ConfigError("learning rate must be positive");
    if (!(decay > 0.0 && decay < 1.0)) throw ConfigError("staircase decay factor must lie in (0,1)");
    if (batch_size == 0) throw ConfigError("batch size must be positive");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("Adam betas must lie in [0,1)");
}

std::size_t TrainConfig::effective_step_interval() const {
    if (step_interval > 0) return step_interval;
    return std::max<std::size_t>(1, epochs / 3);
}

double TrainConfig::lr_at(std::size_t epoch) const {
    const auto k = static_cast<int>(epoch / effective_step_interval());
    double r = lr;
    for (int i = 0; i < k; ++i) r *= decay;
    return r;
}

std::vector<EpochRecord> train(Model& model, const Dataset& data, const TrainConfig& cfg) {
    cfg.validate();
    data.validate();
    if (data.classes != model.classes)
        throw ConfigError("dataset has " + std::to_string(data.classes) + " classes, model " +
                          std::to_string(model.classes));
    std::vector<EpochRecord> history;
    if (cfg.epochs == 0) return history;

    struct Moments {
        std::vector<double> m, v;
    };
    std::vector<std::vector<Moments>> adam(model.params.size());
    for (std::size_t i = 0; i < model.params.size(); ++i)
        for (const auto& p : model.params[i]) adam[i].push_back({std::vector<double>(p.size(), 0.0), std::vector<double>(p.size(), 0.0)});

    Rng rng(cfg.seed);
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::uint64_t step = 0;

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        rng.shuffle(order);
        const double lr = cfg.lr_at(epoch);
        double loss_sum = 0.0;
        std::size_t correct = 0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t end = std::min(order.size(), start + cfg.batch_size);
            std::span<const std::size_t> idx(order.data() + start, end - start);
            std::vector<int> labels;
            labels.reserve(idx.size());
            for (auto i : idx) labels.push_back(data.labels[i]);

            Tape tape;
            std::vector<BatchStats> stats;
            Trace tr = trace_forward(tape, model, tape.constant(data.batch(idx)), Mode::train, true, &stats);
            const double inv_n = 1.0 / static_cast<double>(idx.size());
            Var loss = scale(cross_entropy(tr.logits, labels), inv_n);
            const double loss_value = loss.value().item();
            if (!std::isfinite(loss_value))
                throw TrainingError("non-finite loss at epoch " + std::to_string(epoch) + ", step " + std::to_string(step));
            tape.backward(loss);

            const Tensor& z = tr.logits.value();
            const std::size_t c = z.dim(1);
            for (std::size_t k = 0; k < idx.size(); ++k)
                if (static_cast<int>(argmax(z.data().subspan(k * c, c))) == labels[k]) ++correct;
            loss_sum += loss_value * static_cast<double>(idx.size());

            ++step;
            const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
            const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
            for (std::size_t i = 0; i < model.params.size(); ++i)
                for (std::size_t j = 0; j < model.params[i].size(); ++j) {
                    const Tensor g = tape.grad(tr.params[i][j]);
                    auto& w = model.params[i][j];
                    auto& mo = adam[i][j];
                    for (std::size_t e = 0; e < w.size(); ++e) {
                        mo.m[e] = cfg.beta1 * mo.m[e] + (1.0 - cfg.beta1) * g[e];
                        mo.v[e] = cfg.beta2 * mo.v[e] + (1.0 - cfg.beta2) * g[e] * g[e];
                        w[e] -= lr * (mo.m[e] / bc1) / (std::sqrt(mo.v[e] / bc2) + cfg.adam_eps);
                    }
                }
            update_running_stats(model, stats);
        }
        const double n = static_cast<double>(data.size());
        history.push_back({epoch, loss_sum / n, static_cast<double>(correct) / n, lr});
    }
    model.metadata.seed = cfg.seed;
    model.metadata.epochs = static_cast<std::uint32_t>(cfg.epochs);
    model.metadata.final_accuracy = history.back().accuracy;
    return history;
}

double evaluate_accuracy(const Model& model, const Dataset& data) {
    data.validate();
    constexpr std::size_t kChunk = 256;
    std::size_t correct = 0;
    std::vector<std::size_t> idx;
    for (std::size_t start = 0; start < data.size(); start += kChunk) {
        idx.clear();
        for (std::size_t i = start; i < std::min(data.size(), start + kChunk); ++i) idx.push_back(i);
        const auto pred = predict_labels(model, data.batch(idx));
        for (std::size_t k = 0; k < idx.size(); ++k)
            if (pred[k] == data.labels[idx[k]]) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(data.size());
}

Tensor loss_gradient_wrt_input(const Model& model, const Tensor& batch, const std::vector<int>& labels) {
    Tape tape;
    Var x = tape.variable(as_batch(model, batch));
    Trace tr = trace_forward(tape, model, x, Mode::eval, false);
    tape.backward(cross_entropy(tr.logits, labels));
    Tensor g = tape.grad(x);
    return g.reshaped(batch.shape());
}

Tensor loss_gradient_wrt_input(const Model& model, const Tensor& x, int label) {
    return loss_gradient_wrt_input(model, x, std::vector<int>{label});
}

// ---------------------------------------------------------------------------
// Query facade
// ---------------------------------------------------------------------------

Tensor QueryModel::logits(const Tensor& batch) const {
    Tensor b = as_batch(*model_, batch);
    queries_.fetch_add(b.dim(0));
    return predict_logits(*model_, b);
}

Tensor QueryModel::probabilities(const Tensor& batch) const {
    Tensor z = logits(batch);
    const std::size_t n = z.dim(0), c = z.dim(1);
    for (std::size_t i = 0; i < n; ++i) {
        double* row = z.data().data() + i * c;
        double mx = row[0];
        for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
        double s = 0.0;
        for (std::size_t j = 0; j < c; ++j) s += (row[j] = std::exp(row[j] - mx));
        for (std::size_t j = 0; j < c; ++j) row[j] /= s;
    }
    return z;
}

int QueryModel::label(const Tensor& x) const {
    const Tensor z = logits(x);
    return static_cast<int>(argmax(z.data().subspan(0, z.dim(1))));
}

}  // namespace qadv

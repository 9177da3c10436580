#include <gtest/gtest.h>

#include <cmath>

#include "qadv/error.hpp"
#include "qadv/model.hpp"
#include "qadv/random.hpp"
#include "support.hpp"

using namespace qadv;

namespace {

using qadv::testing::random_input;
using qadv::testing::softmax_regression;

const Shape kImage{1, 8, 8};

}  // namespace

TEST(BuildModel, FullPrecisionHasNoQuantizedLayers) {
    Model m = build_model(Arch::desk_cnn, QuantScheme::full_precision(), kImage, 10, 1);
    for (const auto& l : m.layers) {
        EXPECT_FALSE(l.quantize_weights);
        EXPECT_FALSE(l.quantize_activations);
    }
    EXPECT_GT(m.parameter_count(), 0u);
}

TEST(BuildModel, BinaryNetFlagsInteriorLayers) {
    Model m = build_model(Arch::desk_cnn, QuantScheme::parse("w1a1"), kImage, 10, 1);
    std::vector<std::size_t> weight_layers;
    for (std::size_t i = 0; i < m.layers.size(); ++i)
        if (m.layers[i].kind == LayerKind::conv || m.layers[i].kind == LayerKind::dense) weight_layers.push_back(i);
    ASSERT_EQ(weight_layers.size(), 4u);
    EXPECT_FALSE(m.layers[weight_layers.front()].quantize_weights);
    EXPECT_FALSE(m.layers[weight_layers.back()].quantize_weights);
    EXPECT_FALSE(m.layers[weight_layers.back()].quantize_activations);
    for (std::size_t k = 1; k + 1 < weight_layers.size(); ++k) {
        EXPECT_TRUE(m.layers[weight_layers[k]].quantize_weights);
        EXPECT_TRUE(m.layers[weight_layers[k]].quantize_activations);
    }
    for (const auto& l : m.layers)
        if (l.kind == LayerKind::relu) EXPECT_TRUE(l.quantize_activations);
    EXPECT_EQ(m.layers.back().kind, LayerKind::softmax);
}

TEST(BuildModel, WeightOnlyScheme) {
    Model m = build_model(Arch::desk_mlp, QuantScheme::parse("w2a32"), Shape{16}, 3, 1);
    EXPECT_EQ(m.scheme.method, QuantMethod::dorefa);
    EXPECT_EQ(m.scheme.id(), "w2a32");
    bool any_weight = false;
    for (const auto& l : m.layers) {
        EXPECT_FALSE(l.quantize_activations);
        any_weight = any_weight || l.quantize_weights;
    }
    EXPECT_TRUE(any_weight);
}

TEST(BuildModel, RejectsInvalidSchemes) {
    QuantScheme bad{QuantMethod::binary_connect, 1, 2};
    EXPECT_THROW(build_model(Arch::desk_mlp, bad, Shape{4}, 2, 1), ConfigError);
    EXPECT_THROW(build_model(Arch::desk_cnn, QuantScheme{}, Shape{16}, 2, 1), ConfigError);
}

TEST(Forward, AllFlagsOffMatchesFullPrecision) {
    Model q = build_model(Arch::desk_cnn, QuantScheme::parse("w2a2"), kImage, 10, 5);
    Model f = build_model(Arch::desk_cnn, QuantScheme::full_precision(), kImage, 10, 5);
    for (auto& l : q.layers) l.quantize_weights = l.quantize_activations = false;
    Tensor x = random_input(kImage, 4, 1);
    EXPECT_EQ(predict_logits(q, x).values(), predict_logits(f, x).values());
}

TEST(Forward, QuantizedActivationsOnGrid) {
    Tensor x = random_input(kImage, 6, 2);
    for (const char* id : {"w1a1", "w2a2", "w4a3"}) {
        Model m = build_model(Arch::desk_cnn, QuantScheme::parse(id), kImage, 10, 3);
        const double levels = std::ldexp(1.0, m.scheme.activation_bits) - 1.0;
        const auto acts = activation_outputs(m, x);
        ASSERT_EQ(acts.size(), 3u);
        for (const Tensor& a : acts)
            for (double v : a.values()) {
                EXPECT_GE(v, 0.0);
                EXPECT_LE(v, 1.0);
                EXPECT_NEAR(v * levels, std::round(v * levels), 1e-9) << id;
            }
    }
}

TEST(Forward, EvalIsPureAndTrainUpdatesStats) {
    Model m = build_model(Arch::desk_cnn, QuantScheme::parse("w1a1"), kImage, 10, 4);
    const auto params = m.params;
    Tensor x = random_input(kImage, 5, 3);
    Tensor a = forward(m, x, Mode::eval);
    Tensor b = forward(m, x, Mode::eval);
    EXPECT_EQ(a.values(), b.values());
    EXPECT_EQ(a.shape(), (Shape{5, 10}));
    const auto before = m.bn_state;
    forward(m, x, Mode::train);
    bool changed = false;
    for (std::size_t i = 0; i < before.size(); ++i) changed = changed || before[i].running_mean != m.bn_state[i].running_mean;
    EXPECT_TRUE(changed);
    for (std::size_t i = 0; i < params.size(); ++i)
        for (std::size_t j = 0; j < params[i].size(); ++j) EXPECT_EQ(params[i][j].values(), m.params[i][j].values());
    EXPECT_THROW(predict_logits(m, random_input(Shape{1, 7, 8}, 2, 1)), DimensionError);
}

TEST(Forward, EvalBatchEqualsPerExample) {
    Model m = build_model(Arch::desk_cnn, QuantScheme::full_precision(), kImage, 10, 6);
    for (auto& st : m.bn_state)
        for (auto& v : st.running_var) v = 0.5;
    Tensor x = random_input(kImage, 4, 9);
    Tensor all = predict_logits(m, x);
    for (std::size_t i = 0; i < 4; ++i) {
        Tensor one = predict_logits(m, slice_row(x, i));
        for (std::size_t c = 0; c < 10; ++c) EXPECT_NEAR(one[c], all[i * 10 + c], 1e-12);
    }
}

TEST(Train, ZeroEpochsLeavesModelUnchanged) {
    Dataset d = make_blobs(40, 2, Shape{4}, 0.05, 1);
    Model m = build_model(Arch::desk_mlp, QuantScheme::full_precision(), Shape{4}, 2, 1);
    const auto params = m.params;
    TrainConfig cfg;
    cfg.epochs = 0;
    EXPECT_TRUE(train(m, d, cfg).empty());
    for (std::size_t i = 0; i < params.size(); ++i)
        for (std::size_t j = 0; j < params[i].size(); ++j) EXPECT_EQ(params[i][j].values(), m.params[i][j].values());
}

TEST(Train, SeparableBlobs) {
    Dataset d = make_blobs(200, 2, Shape{4}, 0.05, 7);
    TrainConfig cfg;
    cfg.epochs = 20;
    {
        Model m = build_model(Arch::desk_mlp, QuantScheme::full_precision(), Shape{4}, 2, 1);
        auto hist = train(m, d, cfg);
        ASSERT_EQ(hist.size(), 20u);
        EXPECT_GE(evaluate_accuracy(m, d), 0.99);
    }
    {
        Model m = build_model(Arch::desk_mlp, QuantScheme::parse("w1a32"), Shape{4}, 2, 1);
        train(m, d, cfg);
        EXPECT_GE(evaluate_accuracy(m, d), 0.95);
    }
}

TEST(Train, DeterministicForFixedSeed) {
    Dataset d = make_blobs(64, 3, Shape{1, 4, 4}, 0.1, 2);
    TrainConfig cfg;
    cfg.epochs = 2;
    cfg.batch_size = 16;
    Model a = build_model(Arch::desk_cnn, QuantScheme::full_precision(), Shape{1, 4, 4}, 3, 9);
    Model b = a;
    auto ha = train(a, d, cfg);
    auto hb = train(b, d, cfg);
    for (std::size_t i = 0; i < a.params.size(); ++i)
        for (std::size_t j = 0; j < a.params[i].size(); ++j) EXPECT_EQ(a.params[i][j].values(), b.params[i][j].values());
    EXPECT_EQ(ha.back().loss, hb.back().loss);
}

TEST(Train, StaircaseDecay) {
    TrainConfig cfg;
    cfg.epochs = 9;
    cfg.lr = 0.01;
    cfg.decay = 0.5;
    EXPECT_EQ(cfg.effective_step_interval(), 3u);
    EXPECT_EQ(cfg.lr_at(0), 0.01);
    EXPECT_EQ(cfg.lr_at(2), 0.01);
    EXPECT_EQ(cfg.lr_at(3), 0.01 * 0.5);
    EXPECT_EQ(cfg.lr_at(6), 0.01 * 0.5 * 0.5);
    cfg.decay = 1.0;
    EXPECT_THROW(cfg.validate(), ConfigError);
    cfg.decay = 0.5;
    cfg.lr = 0.0;
    EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(Train, NonFiniteLossNamesStep) {
    Dataset d = make_blobs(20, 2, Shape{4}, 0.05, 1);
    Model m = build_model(Arch::desk_mlp, QuantScheme::full_precision(), Shape{4}, 2, 1);
    for (auto& layer : m.params)
        if (!layer.empty()) layer[0][0] = std::nan("");
    TrainConfig cfg;
    cfg.epochs = 1;
    try {
        train(m, d, cfg);
        FAIL() << "expected a training error";
    } catch (const TrainingError& e) {
        EXPECT_NE(std::string(e.what()).find("step 0"), std::string::npos) << e.what();
    }
}

TEST(EvaluateAccuracy, Bounds) {
    Model m = build_model(Arch::desk_mlp, QuantScheme::full_precision(), Shape{8}, 10, 3);
    Dataset d;
    d.features = random_input(Shape{8}, 1000, 5);
    d.classes = 10;
    d.labels = predict_labels(m, d.features);
    EXPECT_EQ(evaluate_accuracy(m, d), 1.0);
    Rng rng(77);
    for (auto& y : d.labels) y = static_cast<int>(rng.index(10));
    EXPECT_NEAR(evaluate_accuracy(m, d), 0.1, 0.05);
}

TEST(InputGradient, ConstantModelHasZeroGradient) {
    Model m = build_model(Arch::desk_mlp, QuantScheme::full_precision(), Shape{6}, 3, 1);
    for (auto& v : m.params[0][0].data()) v = 0.0;
    Tensor g = loss_gradient_wrt_input(m, random_input(Shape{6}, 1, 1).reshaped(Shape{6}), 1);
    EXPECT_EQ(g.shape(), (Shape{6}));
    for (double v : g.values()) EXPECT_EQ(v, 0.0);
}

TEST(InputGradient, SoftmaxRegressionAnalytic) {
    Rng rng(12);
    Tensor w(Shape{5, 3});
    for (auto& v : w.data()) v = rng.normal();
    Model m = softmax_regression(w);
    Tensor x(Shape{5});
    for (auto& v : x.data()) v = rng.uniform();
    const int y = 2;
    Tensor g = loss_gradient_wrt_input(m, x, y);
    // (softmax(W^T x) - onehot(y))^T applied to W^T
    std::vector<double> z(3, 0.0), p(3);
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t i = 0; i < 5; ++i) z[c] += x[i] * w.at({i, c});
    double mx = *std::max_element(z.begin(), z.end()), s = 0.0;
    for (std::size_t c = 0; c < 3; ++c) s += p[c] = std::exp(z[c] - mx);
    for (auto& v : p) v /= s;
    p[y] -= 1.0;
    for (std::size_t i = 0; i < 5; ++i) {
        double expect = 0.0;
        for (std::size_t c = 0; c < 3; ++c) expect += p[c] * w.at({i, c});
        EXPECT_NEAR(g[i], expect, 1e-12);
    }
}

TEST(InputGradient, MatchesFiniteDifferencesOnDeskCnn) {
    Model m = build_model(Arch::desk_cnn, QuantScheme::full_precision(), kImage, 10, 21);
    Rng rng(4);
    for (auto& st : m.bn_state)
        for (std::size_t c = 0; c < st.running_mean.size(); ++c) {
            st.running_mean[c] = rng.uniform(-0.1, 0.1);
            st.running_var[c] = rng.uniform(0.05, 0.5);
        }
    Tensor x = random_input(kImage, 1, 8);
    const std::vector<int> label{3};
    auto f = [&](Tape& t, Var v) { return cross_entropy(trace_forward(t, m, v, Mode::eval, false).logits, label); };
    EXPECT_LT(grad_check(f, x, 1e-6), 1e-4);
    Tensor g = loss_gradient_wrt_input(m, x.reshaped(kImage), 3);
    EXPECT_EQ(g.shape(), kImage);
}

TEST(QueryModel, CountsQueries) {
    Model m = build_model(Arch::desk_mlp, QuantScheme::full_precision(), Shape{4}, 3, 1);
    QueryModel q(m);
    Tensor x = random_input(Shape{4}, 5, 1);
    Tensor p = q.probabilities(x);
    EXPECT_EQ(q.query_count(), 5u);
    for (std::size_t i = 0; i < 5; ++i) EXPECT_NEAR(p[i * 3] + p[i * 3 + 1] + p[i * 3 + 2], 1.0, 1e-12);
    q.label(slice_row(x, 0));
    EXPECT_EQ(q.query_count(), 6u);
    EXPECT_EQ(q.logits(x).values(), predict_logits(m, x).values());
}

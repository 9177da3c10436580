#include <gtest/gtest.h>

#include <cmath>

#include "qadv/error.hpp"
#include "qadv/metrics.hpp"
#include "support.hpp"

using namespace qadv;
using qadv::testing::random_input;

TEST(AdversarialAccuracy, Extremes) {
    Model m = build_model(Arch::desk_mlp, QuantScheme::full_precision(), Shape{5}, 4, 1);
    Tensor x = random_input(Shape{5}, 50, 2);
    auto labels = predict_labels(m, x);
    EXPECT_EQ(adversarial_accuracy(m, x, labels), 1.0);
    for (auto& y : labels) y = (y + 1) % 4;
    EXPECT_EQ(adversarial_accuracy(m, x, labels), 0.0);
    EXPECT_THROW(adversarial_accuracy(m, x, {}), UsageError);
}

TEST(AdversarialAccuracy, EqualsCleanAccuracyOnCleanSet) {
    Model m = build_model(Arch::desk_mlp, QuantScheme::parse("w2a2"), Shape{5}, 4, 3);
    Dataset d = make_blobs(60, 4, Shape{5}, 0.1, 4);
    EXPECT_EQ(adversarial_accuracy(m, d.features, d.labels), evaluate_accuracy(m, d));
    RobustnessReport r = evaluate_adversarial(m, d.features, d.features, d.labels);
    EXPECT_EQ(r.adversarial_accuracy, evaluate_accuracy(m, d));
    EXPECT_EQ(r.n_total, 60u);
}

TEST(MeanDistortion, NormArithmetic) {
    const std::size_t d = 9;
    Tensor x(Shape{d}, 0.5), xa(Shape{d}, 0.53);
    std::vector<AdversarialPair> pairs{{x, xa, true}, {x, Tensor(Shape{d}, 0.9), false}};
    Distortion r = mean_distortion(pairs);
    ASSERT_TRUE(r.l2 && r.linf);
    EXPECT_NEAR(*r.linf, 0.03, 1e-12);
    EXPECT_NEAR(*r.l2, 0.03 * 3.0, 1e-12);
    pairs[0].success = false;
    r = mean_distortion(pairs);
    EXPECT_FALSE(r.l2.has_value());
    EXPECT_FALSE(r.linf.has_value());
}

TEST(MeanDistortion, NormInequalities) {
    Rng rng(5);
    for (int t = 0; t < 100; ++t) {
        const std::size_t d = 1 + rng.index(20);
        Tensor x(Shape{d}), xa(Shape{d});
        for (std::size_t i = 0; i < d; ++i) {
            x[i] = rng.uniform();
            xa[i] = rng.uniform();
        }
        std::vector<AdversarialPair> p{{x, xa, true}};
        auto r = mean_distortion(p);
        EXPECT_LE(*r.linf, *r.l2 + 1e-15);
        EXPECT_LE(*r.l2, std::sqrt(static_cast<double>(d)) * *r.linf + 1e-12);
    }
}

TEST(CosineSimilarity, Examples) {
    std::vector<double> a{1, 0}, b{0, 1}, c{-2, 0}, z{0, 0}, v{0.3, -1.7};
    EXPECT_NEAR(*cosine_similarity(v, v), 1.0, 1e-15);
    EXPECT_EQ(*cosine_similarity(a, b), 0.0);
    EXPECT_EQ(*cosine_similarity(a, c), -1.0);
    EXPECT_FALSE(cosine_similarity(a, z).has_value());
}

TEST(CosineSimilarity, SymmetricScaleInvariantBounded) {
    Rng rng(8);
    for (int t = 0; t < 200; ++t) {
        std::vector<double> a(7), b(7), la(7);
        const double lambda = rng.uniform(0.01, 100);
        for (std::size_t i = 0; i < 7; ++i) {
            a[i] = rng.normal();
            b[i] = rng.normal();
            la[i] = lambda * a[i];
        }
        const double ab = *cosine_similarity(a, b);
        EXPECT_EQ(ab, *cosine_similarity(b, a));
        EXPECT_NEAR(ab, *cosine_similarity(la, b), 1e-12);
        EXPECT_LE(std::abs(ab), 1.0 + 1e-12);
    }
}

TEST(GradientCosineMatrix, IdenticalAndNegatedModels) {
    Model a = build_model(Arch::desk_mlp, QuantScheme::full_precision(), Shape{6}, 2, 3);
    Model b = a;
    Model neg = a;
    for (auto& p : neg.params)
        if (!p.empty() && &p == &neg.params[neg.params.size() - 2])
            for (auto& t : p)
                for (auto& v : t.data()) v = -v;
    Dataset d = make_blobs(20, 2, Shape{6}, 0.2, 1);
    auto cm = gradient_cosine_matrix({&a, &b, &neg}, d);
    EXPECT_EQ(*cm.mean[0][0], 1.0);
    EXPECT_NEAR(*cm.mean[0][1], 1.0, 1e-12);
    EXPECT_NEAR(*cm.mean[0][2], -1.0, 1e-12);
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(*cm.mean[i][j], *cm.mean[j][i]);
}

TEST(GradientCosineMatrix, ZeroGradientsAreSkipped) {
    Model a = build_model(Arch::desk_mlp, QuantScheme::full_precision(), Shape{4}, 3, 3);
    Model flat = qadv::testing::constant_model(Shape{4}, 3);
    Dataset d = make_blobs(10, 3, Shape{4}, 0.2, 1);
    auto cm = gradient_cosine_matrix({&a, &flat}, d);
    EXPECT_FALSE(cm.mean[0][1].has_value());
    EXPECT_EQ(cm.skipped[0][1], 10u);
    EXPECT_THROW(gradient_cosine_matrix({&a}, d), UsageError);
}

TEST(ShiftDemo, ShippedInstanceIsCancelled) {
    auto r = quantization_shift_demo(Tensor::from({0.5, -0.6}), Tensor::from({1.0, 0.8}), Tensor::from({0.0, 0.05}), 2);
    EXPECT_NEAR(r.clean_score, 0.02, 1e-12);
    EXPECT_NEAR(r.adversarial_score, -0.01, 1e-12);
    ASSERT_EQ(r.rows.size(), 2u);
    for (const auto& row : r.rows) {
        EXPECT_EQ(row.quantized_w.values(), (std::vector<double>{1, -1}));
        EXPECT_NEAR(row.clean_score, 0.2, 1e-12);
        EXPECT_NEAR(row.adversarial_score, 0.15, 1e-12);
        EXPECT_TRUE(row.cancelled);
    }
}

// Under sign(0) = +1 the binarized scores 0 -> -0.12 still flip, so this
// variant is not a cancellation.
TEST(ShiftDemo, BinarizedFlipIsReported) {
    auto r = quantization_shift_demo(Tensor::from({0.6, -0.55}), Tensor::from({1.0, 1.0}), Tensor::from({-0.12, 0.0}), 2);
    EXPECT_NEAR(r.rows[0].clean_score, 0.0, 1e-15);
    EXPECT_NEAR(r.rows[0].adversarial_score, -0.12, 1e-12);
    EXPECT_TRUE(r.rows[0].flipped);
    EXPECT_FALSE(r.rows[0].cancelled);
}

TEST(ShiftDemo, DegenerateInputs) {
    EXPECT_THROW(quantization_shift_demo(Tensor::from({0.5, -0.6}), Tensor::from({1.0, 0.8}), Tensor::from({0.0, 0.0}), 2),
                 UsageError);
    auto r = quantization_shift_demo(Tensor::from({1.0, -1.0}), Tensor::from({0.5, 0.45}), Tensor::from({0.0, 0.1}), 2);
    for (const auto& row : r.rows) {
        EXPECT_EQ(row.quantized_w.values(), (std::vector<double>{1, -1}));
        EXPECT_FALSE(row.cancelled);
    }
}

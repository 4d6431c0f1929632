#include "ftlab/autograd.hpp"

#include <gtest/gtest.h>

#include <cmath>

#include "ftlab/rng.hpp"
#include "support/gradcheck.hpp"

using namespace ftlab;
using V = ag::Var<double>;

namespace {

Tensor<double> randn(Shape s, Rng& rng, double scale = 1.0) {
    Tensor<double> t(std::move(s));
    for (auto& v : t.vec()) v = rng.normal() * scale;
    return t;
}

// Weighted sum with fixed random weights so that no gradient is trivially uniform.
struct Probe {
    std::vector<Tensor<double>> inputs;
    std::function<V(const std::vector<V>&)> build;
    Tensor<double> weights;

    double evaluate() {
        std::vector<V> leaves;
        for (auto& t : inputs) leaves.push_back(V::constant(t));
        auto y = build(leaves);
        if (y.value().numel() == 1) return y.item();
        double s = 0;
        for (std::int64_t i = 0; i < y.value().numel(); ++i) s += y.value()[i] * weights[i];
        return s;
    }

    testkit::GradCheckResult run(Rng& rng) {
        std::vector<V> leaves;
        for (auto& t : inputs) leaves.push_back(V::alias(t, true));
        auto y = build(leaves);
        if (y.value().numel() != 1) {
            weights = randn(y.shape(), rng);
            y = ag::sum(ag::mul(y, V::constant(weights)));
        }
        ag::backward(y);
        std::vector<Tensor<double>*> ptrs;
        std::vector<const Tensor<double>*> grads;
        std::vector<std::string> names;
        for (std::size_t i = 0; i < inputs.size(); ++i) {
            ptrs.push_back(&inputs[i]);
            grads.push_back(leaves[i].grad());
            names.push_back("input" + std::to_string(i));
        }
        return testkit::check_gradients(ptrs, grads, names, [this] { return evaluate(); });
    }
};

void expect_grad_ok(Probe p, std::uint64_t seed = 1) {
    Rng rng(seed);
    auto r = p.run(rng);
    EXPECT_LT(r.max_rel_error, 1e-4) << r.worst;
}

}  // namespace

TEST(Autograd, LinearGradient) {
    Rng rng(0);
    expect_grad_ok({{randn({2, 3, 4}, rng), randn({4, 5}, rng), randn({5}, rng)},
                    [](const std::vector<V>& x) { return ag::linear(x[0], x[1], x[2]); }});
}

TEST(Autograd, LayerNormGradient) {
    Rng rng(1);
    expect_grad_ok({{randn({3, 6}, rng), randn({6}, rng), randn({6}, rng)},
                    [](const std::vector<V>& x) { return ag::layer_norm(x[0], x[1], x[2], 1e-6); }});
}

TEST(Autograd, GeluAndMulGradient) {
    Rng rng(2);
    expect_grad_ok({{randn({4, 3}, rng), randn({4, 3}, rng)},
                    [](const std::vector<V>& x) { return ag::mul(ag::gelu(x[0]), x[1]); }});
}

TEST(Autograd, AttentionGradient) {
    Rng rng(3);
    expect_grad_ok({{randn({2, 5, 12}, rng)}, [](const std::vector<V>& x) { return ag::attention(x[0], 2); }});
}

TEST(Autograd, TokenOpsGradient) {
    Rng rng(4);
    const std::vector<std::vector<std::int64_t>> idx{{2, 0}, {1, 3}};
    expect_grad_ok({{randn({2, 4, 3}, rng), randn({3}, rng)}, [idx](const std::vector<V>& x) {
                        auto g = ag::gather_tokens(x[0], idx);
                        auto s = ag::scatter_tokens(g, x[1], idx, 5);
                        auto p = ag::prepend_token(s, x[1]);
                        return ag::concat_tokens(ag::slice_tokens(p, 1, 3), ag::reshape(ag::mean_tokens(p, 1), Shape{2, 1, 3}));
                    }});
}

TEST(Autograd, L2NormalizeAndConcatGradient) {
    Rng rng(5);
    expect_grad_ok({{randn({3, 4}, rng), randn({3, 2}, rng)},
                    [](const std::vector<V>& x) { return ag::concat_last(ag::l2_normalize(x[0], 1e-12), x[1]); }});
}

TEST(Autograd, ConvUpsampleGradient) {
    Rng rng(6);
    expect_grad_ok({{randn({2, 4, 2}, rng), randn({3, 2, 3, 3}, rng), randn({3}, rng), randn({2, 1, 4, 4}, rng)},
                    [](const std::vector<V>& x) {
                        auto grid = ag::tokens_to_grid(x[0], 2);  // [2, 2, 2, 2]
                        auto up = ag::upsample2x(grid);           // [2, 2, 4, 4]
                        auto y = ag::conv2d(up, x[1], x[2]);      // [2, 3, 4, 4]
                        return ag::concat_channels(y, x[3]);
                    }});
}

TEST(Autograd, InfoNceGradient) {
    Rng rng(7);
    expect_grad_ok({{randn({3, 4}, rng), randn({3, 4}, rng), randn({5, 4}, rng)},
                    [](const std::vector<V>& x) { return ag::infonce(x[0], x[1], x[2], 0.5); }});
    expect_grad_ok({{randn({4, 3}, rng), randn({4, 3}, rng)},
                    [](const std::vector<V>& x) { return ag::infonce_in_batch(x[0], x[1], 0.3); }});
}

TEST(Autograd, SupervisedLossGradients) {
    Rng rng(8);
    Tensor<double> targets(Shape{3, 4});
    for (auto& v : targets.vec()) v = rng.bernoulli(0.5) ? 1.0 : 0.0;
    expect_grad_ok({{randn({3, 4}, rng, 2.0)}, [targets](const std::vector<V>& x) { return ag::bce_with_logits(x[0], targets); }});
    Tensor<double> seg(Shape{2, 1, 3, 3});
    for (auto& v : seg.vec()) v = rng.bernoulli(0.4) ? 1.0 : 0.0;
    expect_grad_ok({{randn({2, 1, 3, 3}, rng)}, [seg](const std::vector<V>& x) { return ag::dice_loss(x[0], seg, 1.0); }});
    auto target = randn({2, 3, 4}, rng);
    std::vector<std::uint8_t> mask{1, 0, 1, 0, 1, 1};
    expect_grad_ok({{randn({2, 3, 4}, rng)}, [target, mask](const std::vector<V>& x) { return ag::masked_mse(x[0], target, mask); }});
}

TEST(Autograd, FrozenLeafReceivesNoGradient) {
    Rng rng(9);
    auto w = randn({3, 2}, rng);
    auto xin = randn({4, 3}, rng);
    auto wv = V::alias(w, false);
    auto xv = V::alias(xin, true);
    auto loss = ag::sum(ag::linear(xv, wv, V{}));
    ag::backward(loss);
    EXPECT_EQ(wv.grad(), nullptr);
    ASSERT_NE(xv.grad(), nullptr);
}

TEST(Autograd, InfoNceStableForExtremeLogits) {
    // Similarities of magnitude 100/tau must not overflow.
    Tensor<double> q(Shape{2, 2}, {1, 0, 0, 1});
    Tensor<double> kp(Shape{2, 2}, {1, 0, 0, 1});
    Tensor<double> kn(Shape{1, 2}, {-1, 0});
    for (double tau : {1e-2, 1e-3}) {
        auto l = ag::infonce(V::constant(q), V::constant(kp), V::constant(kn), tau);
        EXPECT_TRUE(std::isfinite(l.item()));
        EXPECT_GE(l.item(), 0.0);
    }
    auto lf = ag::infonce(ag::Var<float>::constant(q.cast<float>()), ag::Var<float>::constant(kp.cast<float>()),
                          ag::Var<float>::constant(kn.cast<float>()), 1e-3f);
    EXPECT_TRUE(std::isfinite(lf.item()));
}

TEST(Autograd, ShapeErrorsAreInputErrors) {
    auto a = V::constant(Tensor<double>(Shape{2, 3}));
    auto b = V::constant(Tensor<double>(Shape{3, 2}));
    EXPECT_THROW(ag::add(a, b), InputError);
    EXPECT_THROW(ag::linear(a, V::constant(Tensor<double>(Shape{2, 2})), V{}), InputError);
    EXPECT_THROW(ag::infonce(a, a, a, 0.0), ConfigError);
}

#include <doctest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "iclm/aggregate.hpp"
#include "iclm/errors.hpp"

using namespace iclm;
using testutil::random_tensor;

TEST_CASE("shared head: zero weights, shape contract, gradient reaches both states") {
    Rng rng(1);
    Aggregator agg({AggScheme::SharedHead, 0.5}, 4, 6, rng);

    Tensor h_inv = random_tensor(rng, {2, 3, 4});
    Tensor h_spec = random_tensor(rng, {2, 3, 4});

    // Zero the head: logits vanish regardless of the inputs.
    for (auto& [name, t] : agg.named_params("agg")) {
        if (name.find("head") != std::string::npos) {
            std::fill(t.data(), t.data() + t.size(), 0.0);
        }
    }
    Tensor logits = agg.aggregate_shared_head(h_inv, h_spec, true);
    CHECK(logits.shape() == std::vector<std::size_t>{2, 3, 6});
    for (std::size_t i = 0; i < logits.size(); ++i) CHECK(logits.data()[i] == 0.0);

    // With live weights, gradients reach both module states.
    Rng rng2(2);
    Aggregator agg2({AggScheme::SharedHead, 0.5}, 4, 6, rng2);
    Tensor a = random_tensor(rng2, {2, 3, 4});
    Tensor b = random_tensor(rng2, {2, 3, 4});
    Tensor out = agg2.aggregate_shared_head(a, b, true);
    a.zero_grad();
    b.zero_grad();
    backward(mean(mul(out, out)));
    double na = 0.0, nb = 0.0;
    for (double g : a.grad_vec()) na += std::abs(g);
    for (double g : b.grad_vec()) nb += std::abs(g);
    CHECK(na > 0.0);
    CHECK(nb > 0.0);
}

TEST_CASE("logit space: exclusive weights reproduce normalized inputs") {
    Rng rng(3);
    Tensor logits_inv = random_tensor(rng, {2, 2, 5}, false);
    Tensor logits_spec = random_tensor(rng, {2, 2, 5}, false);
    Tensor r = Tensor::full({2, 1}, 1.0);

    // Oracle: identical joint normalization with fresh default parameters.
    auto normalize_pair = [&](const Tensor& x, const Tensor& y) {
        BatchNormParams bn = BatchNormParams::make(5);
        return shared_batch_norm({x, y}, bn, true);
    };

    {
        Rng r1(4);
        Aggregator agg({AggScheme::LogitSpace, 1.0}, 4, 5, r1);
        Tensor out = agg.aggregate_logit_space(logits_inv, {logits_spec}, r, true);
        auto expected = normalize_pair(logits_inv, logits_spec);
        for (std::size_t i = 0; i < out.size(); ++i) {
            CHECK(out.data()[i] == doctest::Approx(expected[0].data()[i]).epsilon(1e-12));
        }
    }
    {
        Rng r2(5);
        Aggregator agg({AggScheme::LogitSpace, 0.0}, 4, 5, r2);
        Tensor out = agg.aggregate_logit_space(logits_inv, {logits_spec}, r, true);
        auto expected = normalize_pair(logits_inv, logits_spec);
        for (std::size_t i = 0; i < out.size(); ++i) {
            CHECK(out.data()[i] == doctest::Approx(expected[1].data()[i]).epsilon(1e-12));
        }
    }
}

TEST_CASE("logit space: weighted sum matches direct arithmetic") {
    Rng rng(6);
    Tensor logits_inv = random_tensor(rng, {2, 1, 4}, false);
    Tensor m0 = random_tensor(rng, {2, 1, 4}, false);
    Tensor m1 = random_tensor(rng, {2, 1, 4}, false);
    Tensor r = Tensor::from_data({2, 2}, {1.0, 0.0, 0.0, 1.0});  // input 0 -> m0, input 1 -> m1

    Rng ar(7);
    Aggregator agg({AggScheme::LogitSpace, 0.5}, 4, 4, ar);
    Tensor out = agg.aggregate_logit_space(logits_inv, {m0, m1}, r, true);

    BatchNormParams bn = BatchNormParams::make(4);
    auto norm = shared_batch_norm({logits_inv, m0, m1}, bn, true);
    for (std::size_t i = 0; i < 4; ++i) {
        // Input 0 routed to module 0.
        const double expected0 = 0.5 * norm[0].data()[i] + 0.5 * norm[1].data()[i];
        CHECK(out.data()[i] == doctest::Approx(expected0).epsilon(1e-12));
        // Input 1 routed to module 1.
        const double expected1 = 0.5 * norm[0].data()[4 + i] + 0.5 * norm[2].data()[4 + i];
        CHECK(out.data()[4 + i] == doctest::Approx(expected1).epsilon(1e-12));
    }

    Tensor bad = Tensor::from_data({2, 2}, {1.5, -0.5, 0.0, 1.0});
    CHECK_THROWS_AS(agg.aggregate_logit_space(logits_inv, {m0, m1}, bad, true), ConfigError);
}

TEST_CASE("prob space: w = 1 identity round trip") {
    Rng rng(8);
    Tensor p = testutil::random_distribution_rows(rng, 3, 5, false);
    Tensor w = Tensor::full({3}, 1.0);
    Tensor logits = prob_space_combine({p}, {w});
    Tensor back = softmax(logits, 1);
    for (std::size_t i = 0; i < p.size(); ++i) {
        CHECK(std::abs(back.data()[i] - p.data()[i]) < 1e-9);
    }
}

TEST_CASE("prob space: zero-weight module has no influence") {
    Rng rng(9);
    Tensor p1 = testutil::random_distribution_rows(rng, 2, 4, false);
    Tensor p2 = testutil::random_distribution_rows(rng, 2, 4, false);
    Tensor w1 = Tensor::full({2}, 0.7);
    Tensor w0 = Tensor::full({2}, 0.0);

    Tensor with = softmax(prob_space_combine({p1, p2}, {w1, w0}), 1);
    Tensor without = softmax(prob_space_combine({p1}, {w1}), 1);
    for (std::size_t i = 0; i < with.size(); ++i) {
        CHECK(std::abs(with.data()[i] - without.data()[i]) < 1e-12);
    }
}

TEST_CASE("prob space: V=2 worked example matches precomputed direct evaluation") {
    // Two modules, P1 = [0.8, 0.2], P2 = [0.5, 0.5], w1 = w2 = 0.5.
    // B_a = 1/((1-0.5)*2/2 + 0.5) = 1, l~1 = ln([0.65, 0.35]),
    // l~2 = ln([0.5, 0.5]), l = [ln 0.325, ln 0.175],
    // sigma(l) = [0.65, 0.35].
    Tensor p1 = Tensor::from_data({1, 2}, {0.8, 0.2});
    Tensor p2 = Tensor::from_data({1, 2}, {0.5, 0.5});
    Tensor w = Tensor::full({1}, 0.5);
    Tensor out = softmax(prob_space_combine({p1, p2}, {w, w}), 1);
    CHECK(std::abs(out.data()[0] - 0.65) < 1e-12);
    CHECK(std::abs(out.data()[1] - 0.35) < 1e-12);
}

TEST_CASE("prob space aggregation through the aggregator wrapper") {
    Rng rng(10);
    Aggregator agg({AggScheme::ProbSpace, 0.5}, 4, 3, rng);
    Tensor probs_inv = testutil::random_distribution_rows(rng, 2, 3, false);
    Tensor spec = testutil::random_distribution_rows(rng, 2, 3, false);
    Tensor r = Tensor::full({2, 1}, 1.0);
    Tensor dist = agg.aggregate_prob_space(probs_inv, {spec}, r);
    for (std::size_t i = 0; i < 2; ++i) {
        double total = 0.0;
        for (std::size_t j = 0; j < 3; ++j) total += dist.data()[i * 3 + j];
        CHECK(std::abs(total - 1.0) < 1e-9);
    }
}

TEST_CASE("additive schemes have zero cross-module interaction") {
    // Gradient wrt module 0 must not depend on module 1's value for the
    // weighted-sum schemes. Probability space carries no shared batch
    // statistics, so this holds in any mode.
    Rng rng(11);
    Tensor p0 = testutil::random_distribution_rows(rng, 2, 4);
    Tensor p1a = testutil::random_distribution_rows(rng, 2, 4, false);
    Tensor p1b = testutil::random_distribution_rows(rng, 2, 4, false);
    Tensor w = Tensor::full({2}, 0.5);

    auto grad_p0 = [&](const Tensor& other) {
        Tensor l = prob_space_combine({p0, other}, {w, w});
        Rng proj(55);
        Tensor pw = Tensor::zeros(l.shape(), false);
        for (std::size_t i = 0; i < pw.size(); ++i) pw.data()[i] = proj.uniform(-1, 1);
        p0.zero_grad();
        backward(sum(mul(l, pw)));
        return p0.grad_vec();
    };
    CHECK(grad_p0(p1a) == grad_p0(p1b));

    // Shared head couples the modules through the joint batch statistics:
    // the same probe detects a nonzero mixed derivative there.
    Rng ar(12);
    Aggregator agg({AggScheme::SharedHead, 0.5}, 4, 4, ar);
    Tensor h0 = random_tensor(ar, {2, 1, 4});
    Tensor h1a = random_tensor(ar, {2, 1, 4}, false);
    Tensor h1b = random_tensor(ar, {2, 1, 4}, false);
    auto grad_h0 = [&](const Tensor& other) {
        Tensor out = agg.aggregate_shared_head(h0, other, true);
        Rng proj(56);
        Tensor pw = Tensor::zeros(out.shape(), false);
        for (std::size_t i = 0; i < pw.size(); ++i) pw.data()[i] = proj.uniform(-1, 1);
        h0.zero_grad();
        backward(sum(mul(out, pw)));
        return h0.grad_vec();
    };
    CHECK(grad_h0(h1a) != grad_h0(h1b));
}

TEST_CASE("scheme mismatch raises a configuration error") {
    Rng rng(13);
    Aggregator agg({AggScheme::SharedHead, 0.5}, 4, 4, rng);
    Tensor p = testutil::random_distribution_rows(rng, 2, 4, false);
    Tensor r = Tensor::full({2, 1}, 1.0);
    CHECK_THROWS_AS(agg.aggregate_logit_space(p, {p}, r, true), ConfigError);
    CHECK_THROWS_AS(agg.aggregate_prob_space(p, {p}, r), ConfigError);

    CHECK_THROWS_AS(Aggregator({AggScheme::LogitSpace, 1.5}, 4, 4, rng), ConfigError);
}

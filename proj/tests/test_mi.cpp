#include <doctest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "iclm/errors.hpp"
#include "iclm/mi.hpp"

using namespace iclm;

namespace {

// Independent brute-force oracle: builds the batch joint and marginals
// explicitly and sums KL cell by cell.
double brute_force_mi(const std::vector<std::vector<double>>& p,
                      const std::vector<std::vector<double>>& q) {
    const std::size_t b = p.size(), kp = p[0].size(), kq = q[0].size();
    std::vector<std::vector<double>> joint(kp, std::vector<double>(kq, 0.0));
    std::vector<double> mp(kp, 0.0), mq(kq, 0.0);
    for (std::size_t c = 0; c < b; ++c) {
        for (std::size_t k = 0; k < kp; ++k)
            for (std::size_t l = 0; l < kq; ++l)
                joint[k][l] += p[c][k] * q[c][l] / static_cast<double>(b);
        for (std::size_t k = 0; k < kp; ++k) mp[k] += p[c][k] / static_cast<double>(b);
        for (std::size_t l = 0; l < kq; ++l) mq[l] += q[c][l] / static_cast<double>(b);
    }
    double mi = 0.0;
    for (std::size_t k = 0; k < kp; ++k)
        for (std::size_t l = 0; l < kq; ++l) {
            if (joint[k][l] > 0.0 && mp[k] > 0.0 && mq[l] > 0.0) {
                mi += joint[k][l] * std::log(joint[k][l] / (mp[k] * mq[l]));
            }
        }
    return mi;
}

std::vector<std::vector<double>> random_dists(Rng& rng, std::size_t b, std::size_t k) {
    std::vector<std::vector<double>> out(b, std::vector<double>(k));
    for (auto& row : out) {
        double total = 0.0;
        for (auto& v : row) {
            v = 0.01 + rng.uniform();
            total += v;
        }
        for (auto& v : row) v /= total;
    }
    return out;
}

}  // namespace

TEST_CASE("conditional distribution basics") {
    auto uniform = conditional_distribution({0, 0, 0, 0});
    for (double v : uniform) CHECK(v == doctest::Approx(0.25).epsilon(1e-15));

    auto sat = conditional_distribution({100, 0, 0, 0});
    CHECK(sat[0] > 1.0 - 1e-12);

    // Matches a direct softmax evaluation on random vectors.
    Rng rng(3);
    for (int trial = 0; trial < 10; ++trial) {
        std::vector<double> h(6);
        for (auto& v : h) v = rng.gaussian(0.0, 2.0);
        auto got = conditional_distribution(h);
        double denom = 0.0;
        for (double v : h) denom += std::exp(v);
        for (std::size_t i = 0; i < h.size(); ++i) {
            CHECK(std::abs(got[i] - std::exp(h[i]) / denom) < 1e-12);
        }
    }
}

TEST_CASE("mi_estimate degenerate and constant cases") {
    // |B| = 1: joint equals the product of marginals by construction.
    auto one = mi_estimate({{0.3, 0.7}}, {{0.6, 0.4}}, "pair");
    CHECK(std::abs(one.value) < 1e-12);
    CHECK(one.degenerate);

    // Identical distributions across contexts.
    std::vector<std::vector<double>> constant(5, {0.2, 0.5, 0.3});
    auto c = mi_estimate(constant, constant);
    CHECK(std::abs(c.value) < 1e-12);

    CHECK_THROWS_AS(mi_estimate({{0.5, 0.5}}, {}, ""), DataError);
}

TEST_CASE("mi_estimate paired deltas give ln 2") {
    std::vector<std::vector<double>> p = {{1.0, 0.0}, {0.0, 1.0}};
    std::vector<std::vector<double>> q = {{1.0, 0.0}, {0.0, 1.0}};
    auto est = mi_estimate(p, q);
    CHECK(std::abs(est.value - std::log(2.0)) < 1e-9);
}

TEST_CASE("mi_estimate symmetry, nonnegativity, bound on random batches") {
    Rng rng(17);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t b = 2 + rng.below(6);
        const std::size_t k = 2 + rng.below(5);
        auto p = random_dists(rng, b, k);
        auto q = random_dists(rng, b, k);
        auto pq = mi_estimate(p, q);
        auto qp = mi_estimate(q, p);
        CHECK(pq.value >= 0.0);
        CHECK(std::abs(pq.value - qp.value) < 1e-12);
        const double bound =
            std::min(std::log(static_cast<double>(k)), std::log(static_cast<double>(b)));
        CHECK(pq.value <= bound + 1e-9);
        // Against the brute-force oracle.
        CHECK(std::abs(pq.value - brute_force_mi(p, q)) < 1e-12);
    }
}

TEST_CASE("mi_estimate responds monotonically to deterministic coupling") {
    // Deltas with mixing toward uniform: stronger coupling never lowers MI.
    const std::size_t b = 4, k = 4;
    double prev = -1.0;
    for (double lambda : {0.0, 0.2, 0.4, 0.6, 0.8, 1.0}) {
        std::vector<std::vector<double>> p, q;
        for (std::size_t c = 0; c < b; ++c) {
            std::vector<double> dp(k, 0.0), dq(k, 0.0);
            dp[c % k] = 1.0;
            for (std::size_t j = 0; j < k; ++j) {
                dq[j] = lambda * dp[j] + (1.0 - lambda) / static_cast<double>(k);
            }
            p.push_back(dp);
            q.push_back(dq);
        }
        auto est = mi_estimate(p, q);
        CHECK(est.value >= prev - 1e-12);
        prev = est.value;
    }
    CHECK(prev == doctest::Approx(std::log(4.0)).epsilon(1e-9));
}

TEST_CASE("mi_pair_loss gradient passes finite differences") {
    Rng rng(23);
    std::vector<Tensor> inputs = {testutil::random_tensor(rng, {3, 4}),
                                  testutil::random_tensor(rng, {3, 4})};
    auto res = testutil::finite_difference_check(
        inputs,
        [](const std::vector<Tensor>& v) { return mi_pair_loss(v[0], v[1]); });
    CHECK_MESSAGE(res.ok, res.detail);
}

TEST_CASE("mi_pair_loss value agrees with the plain estimator") {
    Rng rng(29);
    Tensor a = testutil::random_tensor(rng, {4, 5}, false);
    Tensor b = testutil::random_tensor(rng, {4, 5}, false);
    Tensor loss = mi_pair_loss(a, b);

    std::vector<std::vector<double>> p, q;
    for (std::size_t i = 0; i < 4; ++i) {
        p.push_back(conditional_distribution(
            std::vector<double>(a.data() + i * 5, a.data() + (i + 1) * 5)));
        q.push_back(conditional_distribution(
            std::vector<double>(b.data() + i * 5, b.data() + (i + 1) * 5)));
    }
    CHECK(std::abs(loss.item() - mi_estimate(p, q).value) < 1e-12);
}

#include <algorithm>
#include <cmath>
#include <set>

#include "denseshift/reparam.hpp"
#include "doctest.h"

using namespace denseshift;

namespace {

// STE-linearized surrogate of the materialization, used as the independent
// gradient oracle: every Heaviside (and the sign mapping) is replaced by its
// value at the base point plus an identity increment, which is exactly the
// function whose true derivative the STE backward is defined to compute.
// Finite differences of this surrogate must match backward_latents.
double surrogate_materialize(const LatentWeights& base, int64_t elem,
                             double d_sign, const std::vector<double>& d_scale) {
    const int T = base.scale_term_count();
    double s = 0.0;
    for (int t = 0; t < T; ++t) {
        const double w0 = base.w_scale[static_cast<size_t>(t)][elem];
        const double h = heaviside(w0) + d_scale[static_cast<size_t>(t)];
        s = h * (s + 1.0);
    }
    const double sgn0 = 2.0 * heaviside(base.w_sign[elem]) - 1.0;
    return (sgn0 + d_sign) * std::exp2(s + base.exponent_bias);
}

LatentWeights make_latents(int bits, int bias, double w_sign, std::vector<double> scale) {
    LatentWeights lw({1}, bits, bias);
    lw.w_sign[0] = w_sign;
    for (size_t t = 0; t < scale.size(); ++t) lw.w_scale[t][0] = scale[t];
    return lw;
}

} // namespace

TEST_CASE("heaviside maps positives to one, rest to zero") {
    CHECK(heaviside(0.2) == 1.0);
    CHECK(heaviside(0.0) == 0.0);
    CHECK(heaviside(-3.0) == 0.0);
    CHECK(heaviside(1e-300) == 1.0);
}

TEST_CASE("materialize_shift evaluates the 3-bit recursion") {
    // All scale latents positive: S walks 1,2,3.
    auto m = materialize_shift(make_latents(3, 0, 0.5, {0.2, 0.3, 0.1}));
    CHECK(m.codes[0].shift == 3);
    CHECK(m.codes[0].sign == 1);
    CHECK(m.w_shift[0] == 8.0);

    // Outer term non-positive: the whole chain collapses to S=0.
    m = materialize_shift(make_latents(3, 0, -0.5, {5.0, 5.0, -0.1}));
    CHECK(m.codes[0].shift == 0);
    CHECK(m.w_shift[0] == -1.0);

    // Broken inner chain restarts the count: S_1=0, S_2=1, S_3=2.
    m = materialize_shift(make_latents(3, 0, 0.5, {-0.2, 0.3, 0.1}));
    CHECK(m.codes[0].shift == 2);
    CHECK(m.w_shift[0] == 4.0);
}

TEST_CASE("exponent bias shifts the materialized magnitude") {
    auto m = materialize_shift(make_latents(3, -3, 0.5, {0.2, 0.3, 0.1}));
    CHECK(m.w_shift[0] == 1.0); // 2^(3-3)
    m = materialize_shift(make_latents(2, -1, -0.5, {-1.0}));
    CHECK(m.w_shift[0] == -0.5); // -(2^(0-1))
}

TEST_CASE("enumeration completeness: all sign patterns cover exactly +/-2^0..2^T") {
    for (int bits : {2, 3, 4}) {
        const int T = scale_terms_for_bits(bits);
        std::set<double> values;
        for (int pattern = 0; pattern < (1 << (T + 1)); ++pattern) {
            LatentWeights lw({1}, bits, 0);
            lw.w_sign[0] = (pattern & 1) ? 0.5 : -0.5;
            for (int t = 0; t < T; ++t)
                lw.w_scale[static_cast<size_t>(t)][0] = (pattern >> (t + 1)) & 1 ? 0.5 : -0.5;
            const double w = materialize_shift(lw).w_shift[0];
            CHECK(w != 0.0);
            values.insert(w);
        }
        std::set<double> expected;
        for (int s = 0; s <= T; ++s) {
            expected.insert(std::exp2(s));
            expected.insert(-std::exp2(s));
        }
        CHECK(values == expected);
        CHECK(values.size() == static_cast<size_t>(1 << bits));
    }
}

TEST_CASE("monotone code: growing the positive prefix of (w_T..w_1) never lowers S") {
    const int bits = 4;
    const int T = scale_terms_for_bits(bits);
    int prev = -1;
    // prefix k: w_T..w_{T-k+1} positive, the rest negative -> S_T == k.
    for (int k = 0; k <= T; ++k) {
        LatentWeights lw({1}, bits, 0);
        lw.w_sign[0] = 1.0;
        for (int t = 0; t < T; ++t)
            lw.w_scale[static_cast<size_t>(t)][0] = (t >= T - k) ? 1.0 : -1.0;
        const int s = materialize_shift(lw).codes[0].shift;
        CHECK(s == k);
        CHECK(s >= prev);
        prev = s;
    }
}

TEST_CASE("round trip: codes decode to the materialized weight") {
    Rng rng(7);
    for (int bits : {2, 3, 4}) {
        for (int bias : {-3, 0, 2}) {
            LatentWeights lw = init_kaiming({64}, bits, bias, 16, rng);
            auto m = materialize_shift(lw);
            for (int64_t i = 0; i < lw.numel(); ++i) {
                const auto& c = m.codes[static_cast<size_t>(i)];
                CHECK(m.w_shift[i] == c.sign * std::exp2(c.shift + bias));
            }
        }
    }
}

TEST_CASE("w_sign gradient ratio: Eq-5 style without rescaling, sqrt(S+1) with") {
    Rng rng(11);
    for (int bits : {2, 3, 4}) {
        for (int bias : {-2, 0, 1}) {
            LatentWeights lw = init_kaiming({128}, bits, bias, 32, rng);
            Tensor g(lw.shape);
            g.fill(1.0);
            auto m = materialize_shift(lw);
            auto plain = backward_latents(g, lw, {.rescale_wsign = false});
            auto rescaled = backward_latents(g, lw, {.rescale_wsign = true});
            for (int64_t i = 0; i < lw.numel(); ++i) {
                const int s = m.codes[static_cast<size_t>(i)].shift;
                CHECK(plain.g_sign[i] == std::exp2(s + bias));
                CHECK(rescaled.g_sign[i] == std::sqrt(s + 1.0));
            }
        }
    }
    // Pinned values: rescale factor is 2.0 at S=3 and 1.0 at S=0.
    auto lw = make_latents(3, 0, 0.7, {0.1, 0.1, 0.1});
    Tensor one({1});
    one.fill(1.0);
    CHECK(backward_latents(one, lw).g_sign[0] == 2.0);
    lw = make_latents(3, 0, 0.7, {0.1, 0.1, -0.1});
    CHECK(backward_latents(one, lw).g_sign[0] == 1.0);
}

TEST_CASE("pinned scale-latent gradient: 2-bit, S=1 gives 2*ln2") {
    auto lw = make_latents(2, 0, 0.5, {0.3});
    Tensor g({1});
    g.fill(1.0);
    auto grads = backward_latents(g, lw);
    CHECK(grads.g_scale[0][0] == doctest::Approx(2.0 * std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("drop_ln2 removes exactly the ln2 factor from scale gradients") {
    Rng rng(5);
    LatentWeights lw = init_kaiming({32}, 3, 0, 8, rng);
    Tensor g(lw.shape);
    for (int64_t i = 0; i < g.numel(); ++i) g[i] = rng.normal(0, 1);
    auto with = backward_latents(g, lw, {.drop_ln2 = false});
    auto without = backward_latents(g, lw, {.drop_ln2 = true});
    for (size_t t = 0; t < with.g_scale.size(); ++t)
        for (int64_t i = 0; i < g.numel(); ++i)
            CHECK(with.g_scale[t][i] == doctest::Approx(without.g_scale[t][i] * std::log(2.0)));
}

TEST_CASE("backward_latents matches finite differences of the STE surrogate") {
    Rng rng(123);
    const double h = 1e-6;
    for (int bits : {2, 3, 4}) {
        const int T = scale_terms_for_bits(bits);
        for (int rep = 0; rep < 50; ++rep) {
            LatentWeights lw({1}, bits, rep % 3 - 1);
            lw.w_sign[0] = rng.normal(0, 1);
            for (int t = 0; t < T; ++t) lw.w_scale[static_cast<size_t>(t)][0] = rng.normal(0, 1);

            Tensor g({1});
            g.fill(1.0);
            auto grads = backward_latents(g, lw, {.rescale_wsign = false});

            std::vector<double> zero(static_cast<size_t>(T), 0.0);
            const double fd_sign = (surrogate_materialize(lw, 0, h, zero) -
                                    surrogate_materialize(lw, 0, -h, zero)) /
                                   (2 * h);
            CHECK(grads.g_sign[0] == doctest::Approx(fd_sign).epsilon(1e-6));

            for (int t = 0; t < T; ++t) {
                auto d = zero;
                d[static_cast<size_t>(t)] = h;
                auto dm = zero;
                dm[static_cast<size_t>(t)] = -h;
                const double fd = (surrogate_materialize(lw, 0, 0, d) -
                                   surrogate_materialize(lw, 0, 0, dm)) /
                                  (2 * h);
                CHECK(grads.g_scale[static_cast<size_t>(t)][0] ==
                      doctest::Approx(fd).epsilon(1e-6));
            }
        }
    }
}

TEST_CASE("low-variance init: reproducible, tight, and bounded") {
    Rng a = Rng::for_stream(42, 0);
    Rng b = Rng::for_stream(42, 0);
    auto la = init_low_variance({100, 100}, 3, 0, 1e-3, a);
    auto lb = init_low_variance({100, 100}, 3, 0, 1e-3, b);
    CHECK(la.w_sign.data == lb.w_sign.data);
    for (size_t t = 0; t < la.w_scale.size(); ++t) CHECK(la.w_scale[t].data == lb.w_scale[t].data);

    double sum = 0, sq = 0, maxabs = 0;
    const int64_t n = la.numel();
    for (int64_t i = 0; i < n; ++i) {
        sum += la.w_sign[i];
        sq += la.w_sign[i] * la.w_sign[i];
        maxabs = std::max(maxabs, std::abs(la.w_sign[i]));
    }
    const double stddev = std::sqrt(sq / n - (sum / n) * (sum / n));
    CHECK(stddev > 0.8e-3);
    CHECK(stddev < 1.2e-3);
    CHECK(maxabs < 1e-2);
}

TEST_CASE("kaiming init variance follows 2/fan_in") {
    Rng rng(9);
    auto lw = init_kaiming({100, 100}, 3, 0, 200, rng);
    double sq = 0;
    for (int64_t i = 0; i < lw.numel(); ++i) sq += lw.w_sign[i] * lw.w_sign[i];
    const double stddev = std::sqrt(sq / lw.numel());
    CHECK(stddev == doctest::Approx(0.1).epsilon(0.1)); // target sqrt(2/200)=0.1, +/-10%
    CHECK(std::sqrt(2.0 / 2.0) == 1.0);
    CHECK(std::sqrt(2.0 / 200.0) == doctest::Approx(0.1));
}

TEST_CASE("latent validation rejects bad configurations") {
    CHECK_THROWS_AS(LatentWeights({4}, 5, 0), ConfigError);
    CHECK_THROWS_AS(LatentWeights({4}, 1, 0), ConfigError);
    Rng rng(1);
    CHECK_THROWS_AS(init_low_variance({4}, 3, 0, 0.0, rng), ConfigError);
    CHECK_THROWS_AS(init_kaiming({4}, 3, 0, 0, rng), ConfigError);

    LatentWeights lw({2}, 3, 0);
    Tensor bad({3});
    CHECK_THROWS_AS(backward_latents(bad, lw), ShapeError);
}

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "pngen/rng.hpp"
#include "pngen/schedule.hpp"

using namespace pngen;
using namespace pngen::schedule;

namespace {

// Independent high-precision evaluation of the sigma grid in long double.
long double sigma_at_ref(int t, int n, long double smin, long double smax, long double tau) {
    long double inv = 1.0L / tau;
    long double lo = powl(smin, inv);
    long double hi = powl(smax, inv);
    long double u = lo + (static_cast<long double>(t - 1) / (n - 1)) * (hi - lo);
    return powl(u, tau);
}

}  // namespace

TEST_CASE("philox known-answer vectors") {
    auto z = Philox4x32::block({0, 0, 0, 0}, {0, 0});
    CHECK(z[0] == 0x6627e8d5u);
    CHECK(z[1] == 0xe169c58du);
    CHECK(z[2] == 0xbc57ac4cu);
    CHECK(z[3] == 0x9b00dbd8u);

    auto f = Philox4x32::block({0xffffffffu, 0xffffffffu, 0xffffffffu, 0xffffffffu},
                               {0xffffffffu, 0xffffffffu});
    CHECK(f[0] == 0x408f276du);
    CHECK(f[1] == 0x41c83b0eu);
    CHECK(f[2] == 0xa20bc7c6u);
    CHECK(f[3] == 0x6d5451fdu);

    auto p = Philox4x32::block({0x243f6a88u, 0x85a308d3u, 0x13198a2eu, 0x03707344u},
                               {0xa4093822u, 0x299f31d0u});
    CHECK(p[0] == 0xd16cfe09u);
    CHECK(p[1] == 0x94fdccebu);
    CHECK(p[2] == 0x5001e420u);
    CHECK(p[3] == 0x24126ea1u);
}

TEST_CASE("random streams are keyed and reproducible") {
    RandomStream a(42, "unit", 7);
    RandomStream b(42, "unit", 7);
    for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());

    RandomStream c(42, "unit", 8);
    RandomStream d(42, "other", 7);
    RandomStream e(43, "unit", 7);
    RandomStream base(42, "unit", 7);
    uint64_t v = base.next_u64();
    CHECK(c.next_u64() != v);
    CHECK(d.next_u64() != v);
    CHECK(e.next_u64() != v);
}

TEST_CASE("rng uniform and normal moments") {
    RandomStream rs(1234, "moments");
    double sum = 0.0, sumsq = 0.0;
    const int n = 200000;
    for (int i = 0; i < n; ++i) {
        double x = rs.normal();
        sum += x;
        sumsq += x * x;
    }
    double mean = sum / n;
    double var = sumsq / n - mean * mean;
    CHECK(std::abs(mean) < 0.01);
    CHECK(std::abs(var - 1.0) < 0.02);
}

TEST_CASE("curriculum endpoints and growth") {
    Curriculum c;  // s0=10, s1=160, K=250000
    CHECK(curriculum_steps(0, c) == 11);
    CHECK(curriculum_steps(250000, c) == 161);
    // K' = floor(250000 / (log2(16) + 1)) = 50000; k = K' doubles s0 once.
    CHECK(curriculum_steps(50000, c) == 21);
}

TEST_CASE("curriculum is monotone and capped") {
    Curriculum c;
    int prev = 0;
    for (int64_t k = 0; k <= c.total_iterations; k += 997) {
        int n = curriculum_steps(k, c);
        CHECK(n >= prev);
        CHECK(n <= c.s1 + 1);
        prev = n;
    }
    CHECK(curriculum_steps(0, c) == c.s0 + 1);

    Curriculum floored = c;
    floored.floor_exponent = true;
    prev = 0;
    for (int64_t k = 0; k <= c.total_iterations; k += 1009) {
        int n = curriculum_steps(k, floored);
        CHECK(n >= prev);
        CHECK(n <= c.s1 + 1);
        prev = n;
    }

    Curriculum bad;
    bad.s1 = 4;  // below s0
    CHECK_THROWS_AS(curriculum_steps(0, bad), ConfigError);
    Curriculum bad2;
    bad2.total_iterations = 0;
    CHECK_THROWS_AS(curriculum_steps(0, bad2), ConfigError);
}

TEST_CASE("sigma grid endpoints and interior value") {
    SigmaSchedule s;
    CHECK(std::abs(sigma_at(1, 11, s) - 0.002) <= 1e-12 * 0.002);
    CHECK(std::abs(sigma_at(11, 11, s) - 80.0) <= 1e-12 * 80.0);

    double v = sigma_at(6, 11, s);
    double ref = static_cast<double>(sigma_at_ref(6, 11, 0.002L, 80.0L, 7.0L));
    CHECK(v == doctest::Approx(ref).epsilon(1e-12));
    CHECK(v == doctest::Approx(2.5152).epsilon(1e-4));

    CHECK_THROWS_AS(sigma_at(0, 11, s), std::out_of_range);
    CHECK_THROWS_AS(sigma_at(12, 11, s), std::out_of_range);
}

TEST_CASE("sigma grid is strictly increasing") {
    SigmaSchedule s;
    for (int n : {2, 3, 5, 11, 41, 161}) {
        auto grid = sigma_grid(n, s);
        for (size_t i = 0; i + 1 < grid.size(); ++i) CHECK(grid[i] < grid[i + 1]);
    }
}

TEST_CASE("timestep probabilities: normalization and oracle") {
    SigmaSchedule s;
    TimestepSampler ts;

    auto p2 = timestep_probs(2, s, ts);
    REQUIRE(p2.size() == 1);
    CHECK(p2[0] == doctest::Approx(1.0).epsilon(1e-12));

    for (int n : {3, 11, 41, 161}) {
        auto p = timestep_probs(n, s, ts);
        double sum = 0.0;
        for (double v : p) {
            CHECK(v >= 0.0);
            sum += v;
        }
        CHECK(std::abs(sum - 1.0) < 1e-9);

        // Long-double renormalized erf-difference oracle, elementwise 1e-9.
        std::vector<long double> w(p.size());
        long double total = 0.0L;
        for (int t = 1; t < n; ++t) {
            long double a = erfl((logl(sigma_at_ref(t + 1, n, 0.002L, 80.0L, 7.0L)) + 1.1L) /
                                 (sqrtl(2.0L) * 2.0L));
            long double b = erfl((logl(sigma_at_ref(t, n, 0.002L, 80.0L, 7.0L)) + 1.1L) /
                                 (sqrtl(2.0L) * 2.0L));
            w[static_cast<size_t>(t - 1)] = a - b;
            total += a - b;
        }
        for (size_t i = 0; i < p.size(); ++i)
            CHECK(std::abs(p[i] - static_cast<double>(w[i] / total)) < 1e-9);
    }
}

TEST_CASE("timestep sampling matches analytic vector (chi-square)") {
    SigmaSchedule s;
    TimestepSampler ts;
    const int n = 11;
    auto p = timestep_probs(n, s, ts);

    RandomStream rs(2024, "chi2");
    std::vector<int64_t> counts(p.size(), 0);
    const int64_t draws = 100000;
    for (int64_t i = 0; i < draws; ++i) counts[static_cast<size_t>(sample_timestep(p, rs) - 1)]++;

    double chi2 = 0.0;
    for (size_t i = 0; i < p.size(); ++i) {
        double expected = p[i] * static_cast<double>(draws);
        double d = static_cast<double>(counts[i]) - expected;
        chi2 += d * d / expected;
    }
    // df = 9; the p = 0.01 critical value is 21.666.
    CHECK(chi2 < 21.666);
}

TEST_CASE("edm coefficients and boundary") {
    EDMCoefficients e;  // sigma_data = 0.5
    auto at0 = edm_coeffs(0.002, 0.002, e);
    CHECK(at0.c_skip == 1.0);
    CHECK(at0.c_out == 0.0);

    auto zero = edm_coeffs(0.0, 0.0, e);
    CHECK(zero.c_in == doctest::Approx(2.0).epsilon(1e-15));

    auto c = edm_coeffs(1.0, 0.002, e);
    double sd2 = 0.25, gap = 0.998;
    CHECK(c.c_skip == doctest::Approx(sd2 / (gap * gap + sd2)).epsilon(1e-15));
    CHECK(c.c_out == doctest::Approx(0.5 * gap / std::sqrt(sd2 + 1.0)).epsilon(1e-15));
    CHECK(c.c_skip == doctest::Approx(0.20064).epsilon(1e-4));
    CHECK(c.c_out == doctest::Approx(0.44632).epsilon(1e-4));

    // Boundary parameterization for random sigma_data.
    RandomStream rs(7, "edm-boundary");
    for (int i = 0; i < 200; ++i) {
        EDMCoefficients r{rs.uniform(1e-6, 2.0)};
        double s0 = rs.uniform(0.0, 5.0);
        auto b = edm_coeffs(s0, s0, r);
        CHECK(b.c_skip == 1.0);
        CHECK(b.c_out == 0.0);
        CHECK(b.c_in > 0.0);
    }
}

TEST_CASE("pseudo-huber values and limits") {
    Tensor<double> x({4}, 0.0), y({4}, 0.0);
    CHECK(pseudo_huber(x, y) == 0.0);

    Tensor<double> a({1}), b({1});
    a[0] = 3.0;
    b[0] = 0.0;
    double c1 = pseudo_huber_c(1);
    CHECK(pseudo_huber(a, b) == doctest::Approx(std::sqrt(9.0 + c1 * c1) - c1).epsilon(1e-15));
    CHECK(pseudo_huber(a, b) == doctest::Approx(2.99946).epsilon(1e-5));

    // Always below the l2 norm and non-negative.
    RandomStream rs(5, "ph-bound");
    for (int trial = 0; trial < 50; ++trial) {
        Tensor<double> u({16}), v({16});
        rs.fill_normal(u);
        rs.fill_normal(v);
        double l2 = 0.0;
        for (int i = 0; i < 16; ++i) l2 += (u[i] - v[i]) * (u[i] - v[i]);
        l2 = std::sqrt(l2);
        double d = pseudo_huber(u, v);
        CHECK(d >= 0.0);
        CHECK(d < l2);
    }

    // Large residual: approaches the l2 norm.
    const int64_t m = 16;
    double c = pseudo_huber_c(m);
    {
        double r = 1000.0 * c;
        Tensor<double> u({static_cast<int>(m)}, 0.0), v({static_cast<int>(m)}, 0.0);
        u[0] = r;
        double d = pseudo_huber(u, v);
        CHECK(std::abs(d / r - 1.0) < 1e-3);
    }
    // Small residual: approaches the squared norm over 2c.
    {
        double r = 1e-3 * c;
        Tensor<double> u({static_cast<int>(m)}, 0.0), v({static_cast<int>(m)}, 0.0);
        u[0] = r;
        double d = pseudo_huber(u, v);
        CHECK(std::abs(d / (r * r / (2.0 * c)) - 1.0) < 1e-2);
    }

    Tensor<double> bad({3}, 0.0);
    CHECK_THROWS_AS(pseudo_huber(x, bad), ContractError);
}

TEST_CASE("loss weight") {
    CHECK(loss_weight(0.002, 0.102) == doctest::Approx(10.0).epsilon(1e-12));
    CHECK_THROWS_AS(loss_weight(1.0, 1.0), ContractError);

    // lambda decreases across a tau=7 grid.
    SigmaSchedule s;
    auto grid = sigma_grid(11, s);
    double prev = std::numeric_limits<double>::infinity();
    for (size_t t = 0; t + 1 < grid.size(); ++t) {
        double lam = loss_weight(grid[t], grid[t + 1]);
        CHECK(lam > 0.0);
        CHECK(lam < prev);
        prev = lam;
    }
}

TEST_CASE("add_noise") {
    Tensor<float> x0({8, 8}, 0.25f), eps({8, 8}, 0.0f);
    auto same = add_noise(x0, 0.0, eps);
    for (int64_t i = 0; i < same.numel(); ++i) CHECK(same[i] == x0[i]);

    RandomStream rs(11, "ve-noise");
    Tensor<float> z({1000000}), e({1000000});
    rs.fill_normal(e);
    for (auto& v : z.data) v = 0.0f;
    auto noised = add_noise(z, 80.0, e);
    double sumsq = 0.0;
    for (int64_t i = 0; i < noised.numel(); ++i)
        sumsq += static_cast<double>(noised[i]) * noised[i];
    double std = std::sqrt(sumsq / static_cast<double>(noised.numel()));
    CHECK(std == doctest::Approx(80.0).epsilon(0.01));

    Tensor<float> bad({4});
    CHECK_THROWS_AS(add_noise(x0, 1.0, bad), ContractError);
}

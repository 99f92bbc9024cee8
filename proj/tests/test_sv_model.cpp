#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "optode/rng.hpp"
#include "optode/sv_model.hpp"

using namespace optode;
using namespace optode::sv;

TEST_CASE("forward_linear matches hand-evaluated points") {
    CHECK(forward_linear({100.0, 0.02}, 0.0) == doctest::Approx(100.0).epsilon(1e-12));
    CHECK(forward_linear({100.0, 0.01}, 100.0) == doctest::Approx(50.0).epsilon(1e-12));
    CHECK(forward_linear({80.0, 0.005}, 200.0) == doctest::Approx(40.0).epsilon(1e-12));
}

TEST_CASE("invert_linear inverts and clamps") {
    const SvLinear p{100.0, 0.01};
    CHECK(invert_linear(p, 50.0).value == doctest::Approx(100.0).epsilon(1e-12));
    CHECK(invert_linear(p, 100.0).value == 0.0);
    CHECK_FALSE(invert_linear(p, 100.0).clamped);

    const Clamped c = invert_linear(p, 110.0);
    CHECK(c.value == 0.0);
    CHECK(c.clamped);

    CHECK_THROWS_AS(invert_linear({100.0, 0.0}, 50.0), NumericError);
    CHECK_THROWS_AS(invert_linear(p, 0.0), DataError);
    CHECK_THROWS_AS(invert_linear(p, -3.0), DataError);
}

TEST_CASE("linear round-trip over the working range") {
    Rng rng(42);
    for (int trial = 0; trial < 500; ++trial) {
        SvLinear p;
        p.i0 = rng.uniform(20.0, 300.0);
        p.k_sv = rng.uniform(1e-4, 0.05);
        const Scalar o2 = rng.uniform(0.0, 400.0);
        const Scalar i = forward_linear(p, o2);
        const Scalar back = invert_linear(p, i).value;
        CHECK(std::abs(back - o2) <= 1e-9 * std::max(1.0, o2));
    }
}

TEST_CASE("forward_two_site matches hand-evaluated points") {
    CHECK(forward_two_site({100.0, 1.0, 0.01, 0.0}, 100.0) ==
          doctest::Approx(50.0).epsilon(1e-12));
    CHECK(forward_two_site({100.0, 0.5, 0.01, 0.01}, 100.0) ==
          doctest::Approx(50.0).epsilon(1e-12));
    // 100 * (0.5/3 + 0.5/1) = 66.666...
    CHECK(forward_two_site({100.0, 0.5, 0.02, 0.0}, 100.0) ==
          doctest::Approx(200.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("two-site reduces to linear when a = 1") {
    Rng rng(7);
    for (int trial = 0; trial < 200; ++trial) {
        const Scalar i0 = rng.uniform(10.0, 200.0);
        const Scalar k = rng.uniform(0.0, 0.05);
        const Scalar o2 = rng.uniform(0.0, 400.0);
        const Scalar two = forward_two_site({i0, 1.0, k, 0.0}, o2);
        const Scalar one = forward_linear({i0, k}, o2);
        CHECK(two == doctest::Approx(one).epsilon(1e-15));
    }
}

TEST_CASE("forward maps are non-increasing in o2") {
    Rng rng(99);
    for (int trial = 0; trial < 200; ++trial) {
        SvTwoSite p;
        p.i0 = rng.uniform(5.0, 500.0);
        p.a = rng.uniform(0.0, 1.0);
        p.k1 = rng.uniform(0.0, 0.05);
        p.k2 = rng.uniform(0.0, p.k1 + 1e-12);
        if (p.k2 > p.k1) p.k2 = p.k1;
        Scalar prev_lin = forward_linear({p.i0, p.k1}, 0.0);
        Scalar prev_two = forward_two_site(p, 0.0);
        for (Scalar o2 = 10.0; o2 <= 400.0; o2 += 10.0) {
            const Scalar cur_lin = forward_linear({p.i0, p.k1}, o2);
            const Scalar cur_two = forward_two_site(p, o2);
            CHECK(cur_lin <= prev_lin);
            CHECK(cur_two <= prev_two + 1e-12);
            prev_lin = cur_lin;
            prev_two = cur_two;
        }
    }
}

TEST_CASE("invert_two_site round-trips against the forward oracle") {
    const SvTwoSite p{100.0, 0.7, 0.015, 0.002};
    const Scalar o2_star = 123.4;
    const Scalar i = forward_two_site(p, o2_star);
    const Clamped back = invert_two_site(p, i, 1e-9);
    CHECK_FALSE(back.clamped);
    CHECK(std::abs(back.value - o2_star) <= 1e-6 * o2_star);

    CHECK(invert_two_site(p, p.i0).value == 0.0);
    CHECK(invert_two_site(p, p.i0 + 5.0).clamped);
    CHECK(invert_two_site(p, p.i0 + 5.0).value == 0.0);
    CHECK_THROWS_AS(invert_two_site({100.0, 0.5, 0.0, 0.0}, 50.0), NumericError);
}

TEST_CASE("invert_two_site with a = 1 matches the linear inverse") {
    const SvTwoSite p{120.0, 1.0, 0.012, 0.0};
    const SvLinear lin{120.0, 0.012};
    for (Scalar o2 : {5.0, 50.0, 180.0, 390.0}) {
        const Scalar i = forward_two_site(p, o2);
        const Scalar a = invert_two_site(p, i, 1e-10).value;
        const Scalar b = invert_linear(lin, i).value;
        CHECK(a == doctest::Approx(b).epsilon(1e-6));
    }
}

TEST_CASE("physics_residual hand values and on-curve identity") {
    CHECK(physics_residual(100.0, 0.01, 50.0, 50.0) == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(physics_residual(100.0, 0.0, 100.0, 321.0) == 0.0);
    CHECK_THROWS_AS(physics_residual(100.0, 0.01, 0.0, 10.0), DataError);

    Rng rng(5);
    for (int trial = 0; trial < 200; ++trial) {
        SvLinear p;
        p.i0 = rng.uniform(10.0, 300.0);
        p.k_sv = rng.uniform(1e-4, 0.05);
        const Scalar o2 = rng.uniform(0.0, 400.0);
        const Scalar i = forward_linear(p, o2);
        CHECK(std::abs(physics_residual(p.i0, p.k_sv, i, o2)) <= 1e-9);
    }
}

TEST_CASE("lod hand values and degenerate slope") {
    CHECK(lod(0.0, 0.01) == 0.0);
    CHECK(lod(1.5, 0.01) == doctest::Approx(450.0).epsilon(1e-12));
    CHECK_THROWS_AS(lod(1.0, 0.0), NumericError);
}

TEST_CASE("dynamic_range hand values and ordering error") {
    CHECK(dynamic_range(200.0, 50.0) == doctest::Approx(150.0).epsilon(1e-12));
    CHECK(dynamic_range(77.0, 77.0) == 0.0);
    CHECK_THROWS_AS(dynamic_range(50.0, 200.0), DataError);
}

TEST_CASE("r_squared hand values, degenerate input, affine invariance") {
    const std::vector<Scalar> obs{0.0, 1.0, 2.0};
    const std::vector<Scalar> perfect{0.0, 1.0, 2.0};
    const std::vector<Scalar> zeros{0.0, 0.0, 0.0};
    CHECK(r_squared(obs, perfect) == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(r_squared(obs, zeros) == doctest::Approx(-1.5).epsilon(1e-12));

    const std::vector<Scalar> flat{3.0, 3.0, 3.0};
    CHECK_THROWS_AS(r_squared(flat, zeros), NumericError);
    CHECK_THROWS_AS(r_squared(obs, std::vector<Scalar>{1.0}), DataError);

    // Jointly rescaling both series by the same positive affine map preserves R^2.
    Rng rng(11);
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<Scalar> y(8), yhat(8);
        for (std::size_t k = 0; k < y.size(); ++k) {
            y[k] = rng.uniform(-5.0, 5.0);
            yhat[k] = y[k] + rng.normal(0.0, 0.5);
        }
        const Scalar alpha = rng.uniform(0.1, 4.0);
        const Scalar beta = rng.uniform(-10.0, 10.0);
        std::vector<Scalar> y2(8), yhat2(8);
        for (std::size_t k = 0; k < y.size(); ++k) {
            y2[k] = alpha * y[k] + beta;
            yhat2[k] = alpha * yhat[k] + beta;
        }
        CHECK(r_squared(y, yhat) == doctest::Approx(r_squared(y2, yhat2)).epsilon(1e-10));
    }
}

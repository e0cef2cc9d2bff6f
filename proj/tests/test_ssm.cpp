#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "kpiwm/linalg.hpp"
#include "kpiwm/rng.hpp"
#include "kpiwm/ssm.hpp"
#include "oracles.hpp"

using namespace kpiwm;
using namespace kpiwm::ssm;

namespace {

// tau with softplus_dt(tau) == dt exactly (inverts the positivity map).
double tau_for_dt(double dt) { return std::log(std::expm1(dt - kEpsilonDt)); }

SsmComponentParams random_params(Rng& rng, std::size_t d, std::size_t n, std::size_t m) {
    SsmComponentParams p;
    p.b = Mat(d, n);
    p.c = Mat(d, n);
    p.d.resize(d);
    p.tau.resize(m);
    const double scale = 1.0 / std::sqrt(static_cast<double>(n));
    for (auto& x : p.b.data()) x = rng.normal(0.0, scale);
    for (auto& x : p.c.data()) x = rng.normal(0.0, scale);
    for (auto& x : p.d) x = rng.normal(0.0, 0.5);
    for (auto& x : p.tau) x = rng.normal(0.0, 1.0);
    return p;
}

} // namespace

TEST_CASE("build_hippo N=1") {
    const auto op = build_hippo(1);
    CHECK(op.a_ct(0, 0) == -1.0);
    CHECK(op.b_ref[0] == 1.0);
}

TEST_CASE("build_hippo N=2") {
    const auto op = build_hippo(2);
    CHECK(op.a_ct(0, 0) == -1.0);
    CHECK(op.a_ct(0, 1) == 0.0);
    CHECK(op.a_ct(1, 0) == doctest::Approx(-std::sqrt(3.0)).epsilon(1e-15));
    CHECK(op.a_ct(1, 1) == -2.0);
    CHECK(op.b_ref[0] == 1.0);
    CHECK(op.b_ref[1] == doctest::Approx(std::sqrt(3.0)).epsilon(1e-15));
}

TEST_CASE("hippo diagonal is negative for any N") {
    for (std::size_t n : {1, 2, 5, 16, 64}) {
        const auto op = build_hippo(n);
        for (std::size_t i = 0; i < n; ++i) CHECK(op.a_ct(i, i) < 0.0);
    }
}

TEST_CASE("discretize closed-form scalar case") {
    const auto op = build_hippo(1);
    const Mat a = discretize(op, 1.0);
    CHECK(std::abs(a(0, 0) - 1.0 / 3.0) < 1e-12);
}

TEST_CASE("discretize of a zero operator is the identity") {
    HippoOperator op;
    op.a_ct = Mat(3, 3);
    op.b_ref = {1.0, 1.0, 1.0};
    for (double dt : {0.01, 1.0, 25.0}) {
        const Mat a = discretize(op, dt);
        for (std::size_t i = 0; i < 3; ++i)
            for (std::size_t j = 0; j < 3; ++j) CHECK(a(i, j) == (i == j ? 1.0 : 0.0));
    }
}

TEST_CASE("discretize is Schur stable at sample steps") {
    const auto op = build_hippo(8);
    for (double dt : {0.01, 1.0, 10.0}) CHECK(linalg::spectral_radius(discretize(op, dt)) < 1.0);
}

TEST_CASE("Schur stability holds over 1000 random draws") {
    Rng rng(5);
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t n = 1 + rng.index(8);
        const double dt = rng.uniform(1e-6, 50.0);
        const auto op = build_hippo(n);
        CHECK(linalg::spectral_radius(discretize(op, dt)) < 1.0);
    }
}

TEST_CASE("taps for N=1 form the geometric sequence (1/3)^t") {
    const auto op = build_hippo(1);
    SsmComponentParams p;
    p.b = Mat(1, 1, 1.0);
    p.c = Mat(1, 1, 1.0);
    p.d = {0.0};
    p.tau = {tau_for_dt(1.0)};
    const Mat taps = make_taps(op, p, 8);
    for (std::size_t t = 0; t < 8; ++t)
        CHECK(std::abs(taps(0, t) - std::pow(1.0 / 3.0, static_cast<double>(t))) < 1e-12);
}

TEST_CASE("feedthrough-only taps") {
    const auto op = build_hippo(2);
    SsmComponentParams p;
    p.b = Mat(1, 2, 0.7);
    p.c = Mat(1, 2, 0.0);
    p.d = {5.0};
    p.tau = {0.3};
    const Mat taps = make_taps(op, p, 5);
    CHECK(taps(0, 0) == 5.0);
    for (std::size_t t = 1; t < 5; ++t) CHECK(taps(0, t) == 0.0);
}

TEST_CASE("a mixture of two identical components doubles the taps") {
    const auto op = build_hippo(3);
    Rng rng(9);
    auto p1 = random_params(rng, 4, 3, 1);
    auto p2 = p1;
    p2.tau = {p1.tau[0], p1.tau[0]};
    const Mat one = make_taps(op, p1, 6);
    const Mat two = make_taps(op, p2, 6);
    for (std::size_t c = 0; c < 4; ++c)
        for (std::size_t t = 0; t < 6; ++t)
            CHECK(two(c, t) == doctest::Approx(2.0 * one(c, t)).epsilon(1e-14));
}

TEST_CASE("per-component taps sum to the mixture taps") {
    const auto op = build_hippo(4);
    Rng rng(37);
    const auto p = random_params(rng, 3, 4, 3);
    const Mat mixture = make_taps(op, p, 7);
    Mat sum(3, 7);
    for (std::size_t m = 0; m < 3; ++m) {
        const Mat part = make_component_taps(op, p, m, 7);
        for (std::size_t i = 0; i < sum.data().size(); ++i) sum.data()[i] += part.data()[i];
    }
    for (std::size_t i = 0; i < sum.data().size(); ++i)
        CHECK(sum.data()[i] == doctest::Approx(mixture.data()[i]).epsilon(1e-12));
}

TEST_CASE("convolution with an impulse reproduces the taps") {
    Mat taps(1, 4);
    for (std::size_t t = 0; t < 4; ++t) taps(0, t) = 0.5 * static_cast<double>(t + 1);
    Mat input(6, 1);
    input(0, 0) = 1.0;
    const Mat out = causal_depthwise_conv(input, taps);
    for (std::size_t t = 0; t < 6; ++t)
        CHECK(out(t, 0) == (t < 4 ? taps(0, t) : 0.0));
}

TEST_CASE("convolution hand example") {
    Mat taps(1, 3, 1.0);
    Mat input(4, 1);
    for (std::size_t t = 0; t < 4; ++t) input(t, 0) = static_cast<double>(t + 1);
    const Mat out = causal_depthwise_conv(input, taps);
    CHECK(out(0, 0) == 1.0);
    CHECK(out(1, 0) == 3.0);
    CHECK(out(2, 0) == 6.0);
    CHECK(out(3, 0) == 9.0);
}

TEST_CASE("convolution is strictly causal bitwise") {
    Rng rng(13);
    Mat taps(3, 5);
    for (auto& x : taps.data()) x = rng.normal();
    Mat input(10, 3);
    for (auto& x : input.data()) x = rng.normal();
    const Mat base = causal_depthwise_conv(input, taps);
    Mat perturbed = input;
    perturbed(9, 1) += 100.0;
    const Mat out = causal_depthwise_conv(perturbed, taps);
    for (std::size_t t = 0; t < 9; ++t)
        for (std::size_t c = 0; c < 3; ++c) CHECK(out(t, c) == base(t, c));
}

TEST_CASE("convolution is linear and shift equivariant") {
    Rng rng(17);
    Mat taps(2, 4);
    for (auto& x : taps.data()) x = rng.normal();
    Mat a(12, 2), b(12, 2);
    for (auto& x : a.data()) x = rng.normal();
    for (auto& x : b.data()) x = rng.normal();

    Mat sum(12, 2);
    for (std::size_t i = 0; i < sum.data().size(); ++i)
        sum.data()[i] = 2.0 * a.data()[i] + 3.0 * b.data()[i];
    const Mat conv_sum = causal_depthwise_conv(sum, taps);
    const Mat ca = causal_depthwise_conv(a, taps);
    const Mat cb = causal_depthwise_conv(b, taps);
    for (std::size_t i = 0; i < conv_sum.data().size(); ++i)
        CHECK(conv_sum.data()[i] ==
              doctest::Approx(2.0 * ca.data()[i] + 3.0 * cb.data()[i]).epsilon(1e-12));

    // Shift the signal by two (zero fill) and compare shifted outputs where
    // the receptive field saw only shifted content.
    Mat shifted(12, 2);
    for (std::size_t t = 2; t < 12; ++t)
        for (std::size_t c = 0; c < 2; ++c) shifted(t, c) = a(t - 2, c);
    const Mat cs = causal_depthwise_conv(shifted, taps);
    for (std::size_t t = 2; t < 12; ++t)
        for (std::size_t c = 0; c < 2; ++c)
            CHECK(cs(t, c) == doctest::Approx(ca(t - 2, c)).epsilon(1e-12));
}

TEST_CASE("softplus_dt closed forms and overflow safety") {
    CHECK(softplus_dt(0.0) == doctest::Approx(std::log(2.0) + kEpsilonDt).epsilon(1e-15));
    CHECK(std::abs(softplus_dt(-100.0) - kEpsilonDt) < 1e-12);
    CHECK(oracle::rel_err(softplus_dt(100.0), 100.0 + kEpsilonDt) < 1e-12);
}

TEST_CASE("tap magnitudes admit a geometric envelope") {
    Rng rng(23);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t n = 2 + rng.index(15);
        const std::size_t d = 1 + rng.index(4);
        auto p = random_params(rng, d, n, 1 + rng.index(3));
        const std::size_t lk = 64;
        const Mat taps = make_taps(build_hippo(n), p, lk);
        for (std::size_t c = 0; c < d; ++c) {
            double peak = 0.0;
            for (std::size_t t = 0; t < lk; ++t) peak = std::max(peak, std::abs(taps(c, t)));
            if (peak < 1e-9) continue;
            // Fit log|k| ~ a + slope * t on the tail; slope < 0 means ratio < 1.
            const std::size_t burn = 16;
            std::vector<double> xs, ys;
            for (std::size_t t = burn; t < lk; ++t) {
                const double mag = std::abs(taps(c, t));
                xs.push_back(static_cast<double>(t));
                ys.push_back(std::log(std::max(mag, peak * 1e-300)));
            }
            const double xm = oracle::mean_of(xs), ym = oracle::mean_of(ys);
            double sxy = 0.0, sxx = 0.0;
            for (std::size_t i = 0; i < xs.size(); ++i) {
                sxy += (xs[i] - xm) * (ys[i] - ym);
                sxx += (xs[i] - xm) * (xs[i] - xm);
            }
            CHECK(sxy / sxx < 0.0);
        }
    }
}

TEST_CASE("tap gradients match central finite differences") {
    Rng rng(31);
    const std::size_t d = 3, n = 4, m = 2, lk = 6;
    const auto op = build_hippo(n);
    auto p = random_params(rng, d, n, m);

    // Scalar probe loss: weighted sum of taps.
    Mat w(d, lk);
    for (auto& x : w.data()) x = rng.normal();
    const auto loss = [&]() { return num::frobenius_dot(make_taps(op, p, lk), w); };

    TapGrads grads;
    taps_backward(op, p, lk, w, grads);

    CHECK(oracle::max_grad_rel_err(loss, p.b.data().data(), grads.b.data().data(),
                                   p.b.size()) < 1e-4);
    CHECK(oracle::max_grad_rel_err(loss, p.c.data().data(), grads.c.data().data(),
                                   p.c.size()) < 1e-4);
    CHECK(oracle::max_grad_rel_err(loss, p.d.data(), grads.d.data(), p.d.size()) < 1e-4);
    CHECK(oracle::max_grad_rel_err(loss, p.tau.data(), grads.tau.data(), p.tau.size()) < 1e-4);
}

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "aqualoc/environment.hpp"
#include "aqualoc/signal.hpp"
#include "oracles.hpp"

#include <cmath>
#include <random>

using namespace aqualoc;

TEST_CASE("pulse peak, decay and symmetry") {
    const AnalyticPulse p = make_pulse(750.0, 500.0, 0.05);
    CHECK(p.envelope_sigma == doctest::Approx(1.0 / (oracle::kPi * 500.0)).epsilon(1e-15));
    CHECK(eval_pulse(p, 0.05) == 1.0);
    CHECK(std::abs(eval_pulse(p, 0.05 + 10.0 * p.envelope_sigma)) < 1e-20);
    for (double d : {1e-4, 3.3e-4, 1e-3, 2.5e-3})
        CHECK(eval_pulse(p, 0.05 + d) == doctest::Approx(eval_pulse(p, 0.05 - d)).epsilon(1e-14));
    CHECK(eval_pulse_dt(p, 0.05) == 0.0);
}

TEST_CASE("pulse matches the closed-form oracle and stays bounded") {
    const AnalyticPulse p = make_pulse(750.0, 500.0, 0.05);
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> t(0.0, 0.1);
    for (int k = 0; k < 200; ++k) {
        const double tk = t(rng);
        const double v = eval_pulse(p, tk);
        CHECK(v == doctest::Approx(oracle::pulse(tk, 750.0, 500.0, 0.05)).epsilon(1e-13).scale(1e-30));
        CHECK(std::abs(v) <= 1.0);
    }
}

TEST_CASE("pulse derivative against central differences") {
    const AnalyticPulse p = make_pulse(750.0, 500.0, 0.05);
    auto s = [&](double t) { return eval_pulse(p, t); };
    const double t0 = 0.05 + 1e-3;
    CHECK(oracle::rel_err(eval_pulse_dt(p, t0), oracle::central_difference(s, t0, 1e-7)) <= 1e-6);

    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> t(0.05 - 3.0 * p.envelope_sigma, 0.05 + 3.0 * p.envelope_sigma);
    double worst = 0.0;
    for (int k = 0; k < 100; ++k) {
        const double tk = t(rng);
        const double fd = oracle::central_difference4(s, tk, 1e-6);
        // skip points sitting on a stationary point where the ratio is ill-posed
        if (std::abs(fd) < 1e-3 * 2.0 * oracle::kPi * 750.0)
            continue;
        worst = std::max(worst, oracle::rel_err(eval_pulse_dt(p, tk), fd));
    }
    CHECK(worst <= 1e-6);

    double v = 0.0;
    double dv = 0.0;
    eval_pulse_with_dt(p, t0, v, dv);
    CHECK(v == eval_pulse(p, t0));
    CHECK(dv == doctest::Approx(eval_pulse_dt(p, t0)).epsilon(1e-14));
}

TEST_CASE("invalid pulse parameters are rejected") {
    CHECK_THROWS_AS(make_pulse(0.0, 500.0, 0.05), Error);
    CHECK_THROWS_AS(make_pulse(750.0, -1.0, 0.05), Error);
}

TEST_CASE("time grid") {
    const TimeGrid g(4000.0, 2.0);
    CHECK(g.size() == 8000);
    CHECK(g.time(4000) == 1.0);
    CHECK_THROWS_AS(TimeGrid(0.0, 2.0), Error);
    CHECK_THROWS_AS(TimeGrid(4000.0, -1.0), Error);
}

TEST_CASE("energy") {
    const TimeGrid g(4000.0, 2.0);
    CHECK(energy(SampledSignal(g)) == 0.0);
    for (double fs : {100.0, 1000.0, 4000.0}) {
        const TimeGrid gg(fs, 2.0);
        SampledSignal ones(gg, Eigen::VectorXd::Ones(gg.size()));
        CHECK(std::abs(energy(ones) - 2.0) <= 1.0 / fs);
    }
}

TEST_CASE("pulse energy against an oversampled Riemann oracle") {
    const AnalyticPulse p = make_pulse(750.0, 500.0, 0.05);
    const double coarse = energy(sample_pulse(p, TimeGrid(4000.0, 0.2)));
    const double fine = oracle::riemann_energy([](double t) { return oracle::pulse(t, 750.0, 500.0, 0.05); }, 40000.0,
                                               0.2);
    CHECK(oracle::rel_err(coarse, fine) <= 1e-3);
}

TEST_CASE("default pulse train energy against an oversampled oracle") {
    const Environment env;
    const SourceLocation src;
    const AnalyticPulse p = make_pulse(750.0, 500.0, 0.05);
    const SampledSignal r = synthesize_received(env, src, p, TimeGrid(4000.0, 2.0));
    const auto l = oracle::image_lengths(200.0, 120.0, 610.0, 20.0);
    const double fine = oracle::riemann_energy(
        [&](double t) { return oracle::three_ray(t, l, 1500.0, 750.0, 500.0, 0.05); }, 40000.0, 2.0);
    CHECK(oracle::rel_err(energy(r), fine) <= 5e-3);
}

TEST_CASE("snr_to_n0") {
    SampledSignal unit(TimeGrid(1.0, 1.0), Eigen::VectorXd::Ones(1));
    CHECK(snr_to_n0(unit, 1.0, 1.0) == 1.0);
    const Environment env;
    const AnalyticPulse p = make_pulse(750.0, 500.0, 0.05);
    const SampledSignal r = synthesize_received(env, {}, p, TimeGrid(4000.0, 2.0));
    const double n0 = snr_to_n0(r, 100.0, 500.0);
    CHECK(snr_to_n0(r, 200.0, 500.0) == doctest::Approx(n0 / 2.0).epsilon(1e-15));
    // N0 = E / (B snr) with E from the independent Riemann sum of the samples
    const double e = r.values.squaredNorm() / 4000.0;
    CHECK(n0 == doctest::Approx(e / (500.0 * db_to_linear(20.0))).epsilon(1e-12));
    CHECK_THROWS_AS(snr_to_n0(SampledSignal(TimeGrid(4000.0, 2.0)), 100.0, 500.0), Error);
}

TEST_CASE("awgn") {
    const TimeGrid g(1000.0, 1000.0);  // 1e6 samples
    const SampledSignal zero(g);
    const SampledSignal same = add_awgn(zero, {0.0, 5});
    CHECK(same.values == zero.values);

    const SampledSignal a = add_awgn(zero, {2.0, 5});
    const double mean = a.values.mean();
    const double var = (a.values.array() - mean).square().sum() / static_cast<double>(a.values.size() - 1);
    CHECK(var == doctest::Approx(2.0 * 1000.0 / 2.0).epsilon(0.01));
    CHECK(add_awgn(zero, {2.0, 5}).values == a.values);

    // noise from an independent seed is uncorrelated with the first draw
    const TimeGrid g2(1000.0, 100.0);
    const SampledSignal b = add_awgn(SampledSignal(g2), {1.0, 1});
    const SampledSignal c = add_awgn(SampledSignal(g2), {1.0, 2});
    const double corr = b.values.dot(c.values) / (b.values.norm() * c.values.norm());
    CHECK(std::abs(corr) < 0.01);
}

TEST_CASE("seed mixing spreads nearby inputs") {
    CHECK(mix_seed(0, 0) != mix_seed(0, 1));
    CHECK(mix_seed(1, 0) != mix_seed(0, 1));
    CHECK(mix_seed(7, 9) == mix_seed(7, 9));
}

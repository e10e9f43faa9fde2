#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "aqualoc/environment.hpp"
#include "oracles.hpp"

#include <algorithm>
#include <filesystem>

using namespace aqualoc;

namespace {

const AnalyticPulse kPulse = make_pulse(750.0, 500.0, 0.05);
const TimeGrid kGrid(4000.0, 2.0);

} // namespace

TEST_CASE("path lengths match the mirror-image oracle") {
    Environment env;
    CHECK(path_length(env, SourceLocation{0.0, 20.0}, PathSpec{0, 0}) == 100.0);

    const auto want = oracle::image_lengths(200.0, 120.0, 610.0, 20.0);
    const auto got = three_ray_lengths(env, {610.0, 20.0});
    for (std::size_t i = 0; i < 3; ++i)
        CHECK(got[i] == doctest::Approx(want[i]).epsilon(1e-14));
    CHECK(got[0] == doctest::Approx(618.142).epsilon(1e-6));
    CHECK(got[1] == doctest::Approx(625.859).epsilon(1e-6));
    CHECK(got[2] == doctest::Approx(663.099).epsilon(1e-6));

    env.depth = 198.0;
    const double bottom = path_length(env, {610.0, 20.0}, PathSpec{0, 1});
    CHECK(bottom == doctest::Approx(oracle::image_lengths(198.0, 120.0, 610.0, 20.0)[2]).epsilon(1e-14));
    CHECK(bottom == doctest::Approx(661.541).epsilon(1e-6));

    CHECK_THROWS_AS(path_length(Environment{}, {610.0, 20.0}, PathSpec{1, 1}), Error);
    CHECK_THROWS_AS(path_length(Environment{}, {610.0, 20.0}, PathSpec{2, 0}), Error);
    CHECK(is_three_ray(PathSpec{1, 0}));
    CHECK_FALSE(is_three_ray(PathSpec{1, 1}));
}

TEST_CASE("path length gradient against central differences") {
    const Environment env;
    const SourceLocation p{610.0, 20.0};
    for (const PathSpec& path : kThreeRayPaths) {
        const Eigen::Vector2d g = path_length_gradient(env, p, path);
        auto f = [&](const Eigen::VectorXd& v) { return path_length(env, SourceLocation{v[0], v[1]}, path); };
        const Eigen::VectorXd fd = oracle::central_gradient(f, Eigen::Vector2d(610.0, 20.0), Eigen::Vector2d(1e-4, 1e-4));
        CHECK(oracle::rel_err(g[0], fd[0]) < 1e-8);
        CHECK(oracle::rel_err(g[1], fd[1]) < 1e-8);
    }
}

TEST_CASE("path length properties") {
    const Environment env;
    for (double z : {5.0, 20.0, 60.0, 150.0, 195.0}) {
        double prev[3] = {0.0, 0.0, 0.0};
        for (double x : {1.0, 50.0, 300.0, 610.0, 2000.0}) {
            const auto l = three_ray_lengths(env, {x, z});
            for (std::size_t i = 0; i < 3; ++i) {
                CHECK(l[i] > prev[i]);
                prev[i] = l[i];
            }
            CHECK(l[1] > l[0]);
            CHECK(l[2] > l[0]);
        }
    }
    // swapping source and receiver depths leaves every ray unchanged
    Environment swapped = env;
    swapped.receiver_depth = 20.0;
    const auto a = three_ray_lengths(env, {610.0, 20.0});
    const auto b = three_ray_lengths(swapped, {610.0, 120.0});
    for (std::size_t i = 0; i < 3; ++i)
        CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-15));
}

TEST_CASE("reflection coefficients") {
    CHECK(reflection_coeff(PathSpec{0, 0}) == 1.0);
    CHECK(reflection_coeff(PathSpec{1, 0}) == -1.0);
    CHECK(reflection_coeff(PathSpec{0, 1}) == 1.0);
}

TEST_CASE("environment validation") {
    CHECK_NOTHROW(Environment{}.validate());
    CHECK_THROWS_AS((Environment{-1.0, 1500.0, 120.0}.validate()), Error);
    CHECK_THROWS_AS((Environment{200.0, 0.0, 120.0}.validate()), Error);
    CHECK_THROWS_AS((Environment{200.0, 1500.0, 250.0}.validate()), Error);
}

TEST_CASE("synthesized signal against the hand superposition") {
    const Environment env;
    const SourceLocation src;
    const SampledSignal r = synthesize_received(env, src, kPulse, kGrid);
    const auto l = oracle::image_lengths(200.0, 120.0, 610.0, 20.0);
    const auto want = oracle::three_ray_samples(l, 1500.0, 750.0, 500.0, 0.05, 4000.0, 8000);
    CHECK((r.values - want).cwiseAbs().maxCoeff() <= 1e-15);

    // value at the sample nearest the direct arrival peak
    const double t_peak = l[0] / 1500.0 + 0.05;
    const auto k = static_cast<Eigen::Index>(std::llround(t_peak * 4000.0));
    const double t = static_cast<double>(k) / 4000.0;
    double hand = 0.0;
    for (std::size_t i = 0; i < 3; ++i)
        hand += oracle::kRho[i] / l[i] * oracle::pulse(t - l[i] / 1500.0, 750.0, 500.0, 0.05);
    CHECK(r.values[k] == doctest::Approx(hand).epsilon(1e-13));

    // nothing before the first arrival
    const double quiet = l[0] / 1500.0 + 0.05 - 10.0 * kPulse.envelope_sigma;
    for (Eigen::Index j = 0; static_cast<double>(j) / 4000.0 < quiet; ++j)
        CHECK(std::abs(r.values[j]) < 1e-15);
}

TEST_CASE("isolated direct and surface peaks have the amplitude ratio of the spreading law") {
    const Environment env;
    const TimeGrid fine(400000.0, 0.5);
    const SampledSignal r = synthesize_received(env, {}, kPulse, fine);
    const auto l = oracle::image_lengths(200.0, 120.0, 610.0, 20.0);
    auto window = [&](double length) {
        const double c = length / 1500.0 + 0.05;
        const auto lo = static_cast<Eigen::Index>((c - 2e-3) * 400000.0);
        const auto hi = static_cast<Eigen::Index>((c + 2e-3) * 400000.0);
        return r.values.segment(lo, hi - lo);
    };
    const double direct = window(l[0]).maxCoeff();
    const double surface = window(l[1]).minCoeff();
    CHECK(direct / surface == doctest::Approx(-l[1] / l[0]).epsilon(1e-4));
    CHECK(direct / surface == doctest::Approx(-625.859 / 618.142).epsilon(1e-4));
}

TEST_CASE("synthesis is linear in the pulse amplitude and adds noise deterministically") {
    const Environment env;
    AnalyticPulse doubled = kPulse;
    doubled.amplitude = 2.0;
    const SampledSignal a = synthesize_received(env, {}, kPulse, kGrid);
    const SampledSignal b = synthesize_received(env, {}, doubled, kGrid);
    CHECK((b.values - 2.0 * a.values).cwiseAbs().maxCoeff() <= 1e-18);

    const SampledSignal n1 = synthesize_received(env, {}, kPulse, kGrid, {1e-10, 3});
    const SampledSignal n2 = synthesize_received(env, {}, kPulse, kGrid, {1e-10, 3});
    CHECK(n1.values == n2.values);
    CHECK(n1.values != a.values);
}

TEST_CASE("arrivals outside the window are rejected") {
    const Environment env;
    CHECK_THROWS_AS(synthesize_received(env, {3000.0, 20.0}, kPulse, kGrid), Error);
    try {
        synthesize_received(env, {3000.0, 20.0}, kPulse, kGrid);
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::ObservationWindowExceeded);
    }
}

TEST_CASE("dataset generation") {
    const Environment env;
    const Region region;
    CHECK(gen_dataset(env, region, 0, kPulse, kGrid, {}, 1).empty());
    CHECK_THROWS_AS(gen_dataset(env, Region{300, 300, 5, 100}, 4, kPulse, kGrid, {}, 1), Error);

    for (Sampling s : {Sampling::Stratified, Sampling::Lattice}) {
        const Dataset a = gen_dataset(env, region, 256, kPulse, kGrid, {}, 9, s);
        const Dataset b = gen_dataset(env, region, 256, kPulse, kGrid, {}, 9, s);
        REQUIRE(a.size() == 256);
        // length brackets from the region corners: every ray is monotone in x
        // and in z over this rectangle, so the corners hold the extremes
        std::array<double, 3> lo{1e300, 1e300, 1e300};
        std::array<double, 3> hi{0.0, 0.0, 0.0};
        for (double x : {region.x_min, region.x_max})
            for (double z : {region.z_min, region.z_max}) {
                const auto l = oracle::image_lengths(200.0, 120.0, x, z);
                for (std::size_t i = 0; i < 3; ++i) {
                    lo[i] = std::min(lo[i], l[i]);
                    hi[i] = std::max(hi[i], l[i]);
                }
            }
        for (std::size_t k = 0; k < a.size(); ++k) {
            CHECK(a.items[k].location == b.items[k].location);
            CHECK(a.items[k].signal.values == b.items[k].signal.values);
            CHECK(region.contains(a.items[k].location));
            const auto l = three_ray_lengths(env, a.items[k].location);
            for (std::size_t i = 0; i < 3; ++i) {
                CHECK(l[i] >= lo[i] - 1e-9);
                CHECK(l[i] <= hi[i] + 1e-9);
            }
        }
    }
}

TEST_CASE("lattice covers the region corners") {
    const Region region;
    const auto locs = lattice_locations(region, 256, 0);
    CHECK(locs.size() == 256);
    auto has = [&](double x, double z) {
        return std::any_of(locs.begin(), locs.end(), [&](const SourceLocation& p) { return p.x == x && p.z == z; });
    };
    CHECK(has(region.x_min, region.z_min));
    CHECK(has(region.x_max, region.z_max));
    const Region padded = pad_region(region, 0.05);
    CHECK(padded.x_min == doctest::Approx(270.0));
    CHECK(padded.x_max == doctest::Approx(930.0));
    CHECK(padded.z_max == doctest::Approx(104.75));
    CHECK(padded.z_min == doctest::Approx(2.5));
}

TEST_CASE("dataset save and load round trip") {
    const Dataset a = gen_dataset(Environment{}, Region{}, 5, kPulse, kGrid, {}, 4, Sampling::Stratified);
    const std::filesystem::path dir = std::filesystem::temp_directory_path() / "aqualoc_test_dataset";
    std::filesystem::remove_all(dir);
    save_dataset(a, dir);
    CHECK(std::filesystem::exists(dir / "manifest.json"));
    CHECK(std::filesystem::exists(dir / "locations.csv"));
    const Dataset b = load_dataset(dir);
    REQUIRE(b.size() == a.size());
    CHECK(b.environment == a.environment);
    CHECK(b.grid == a.grid);
    CHECK(b.seed == a.seed);
    for (std::size_t k = 0; k < a.size(); ++k) {
        CHECK(b.items[k].location == a.items[k].location);
        CHECK(b.items[k].signal.values == a.items[k].signal.values);
    }
    std::filesystem::remove_all(dir);
}

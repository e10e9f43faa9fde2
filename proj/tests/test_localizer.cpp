#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "aqualoc/localizer.hpp"
#include "oracles.hpp"

#include <cmath>
#include <random>

using namespace aqualoc;

namespace {

const AnalyticPulse kPulse = make_pulse(750.0, 500.0, 0.05);
const TimeGrid kGrid(4000.0, 2.0);
const Environment kEnv;
const SourceLocation kTruth;

double dist(const SourceLocation& a, const SourceLocation& b) { return std::hypot(a.x - b.x, a.z - b.z); }

// An untrained reduced model whose own output serves as the data, so the
// model is exact for the signals it is asked to explain.
Checkpoint self_model() {
    Checkpoint c;
    c.model.pln = pln_init(PlnArchitecture::reduced(), 21, Region{}, kEnv);
    c.model.pulse = kPulse;
    c.meta.environment = kEnv;
    return c;
}

double noise_n0(const SampledSignal& clean, double snr_db) {
    return snr_to_n0(clean, db_to_linear(snr_db), kPulse.bandwidth);
}

} // namespace

TEST_CASE("toa init on noiseless data") {
    const SampledSignal r = synthesize_received(kEnv, kTruth, kPulse, kGrid);
    const ToaEstimate est = toa_init(r, kPulse, kEnv);
    CHECK(dist(est.initial, kTruth) <= 1.0);
    REQUIRE(est.times.size() == 3);
    const auto l = oracle::image_lengths(200.0, 120.0, 610.0, 20.0);
    for (std::size_t i = 0; i < 3; ++i)
        CHECK(std::abs(est.times[i] - l[i] / 1500.0) <= 1.0 / 4000.0);
    for (std::size_t i = 1; i < est.times.size(); ++i)
        CHECK(est.times[i] - est.times[i - 1] >= 2.0 / kPulse.bandwidth);
    CHECK(search_bounds(kEnv).contains(est.initial));
}

TEST_CASE("toa init at 20 dB over 100 trials") {
    const SampledSignal clean = synthesize_received(kEnv, kTruth, kPulse, kGrid);
    const double n0 = noise_n0(clean, 20.0);
    double sq = 0.0;
    for (std::uint64_t k = 0; k < 100; ++k) {
        const ToaEstimate est = toa_init(add_awgn(clean, {n0, 1000 + k}), kPulse, kEnv);
        for (std::size_t i = 1; i < est.times.size(); ++i)
            CHECK(est.times[i] - est.times[i - 1] >= 2.0 / kPulse.bandwidth);
        sq += std::pow(dist(est.initial, kTruth), 2);
    }
    CHECK(std::sqrt(sq / 100.0) <= 15.0);
}

TEST_CASE("toa init fails without arrivals") {
    try {
        toa_init(SampledSignal(kGrid), kPulse, kEnv);
        FAIL("expected init-failure");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::InitFailure);
    }
}

TEST_CASE("matched gbl") {
    const SampledSignal r = synthesize_received(kEnv, kTruth, kPulse, kGrid);
    GblConfig g;
    g.energy_ref = energy(r);

    const LocalizationResult at_truth = gbl_matched(r, kEnv, kPulse, kTruth, g);
    CHECK(at_truth.iterations <= 1);
    CHECK(dist(at_truth.position, kTruth) <= 1e-6);

    g.continuation = {4e-3};
    const LocalizationResult off = gbl_matched(r, kEnv, kPulse, {615.0, 22.0}, g);
    CHECK(off.converged);
    CHECK(dist(off.position, kTruth) <= 0.05);
}

TEST_CASE("matched gbl loss is non-increasing for every step rule") {
    const SampledSignal clean = synthesize_received(kEnv, kTruth, kPulse, kGrid);
    const SampledSignal r = add_awgn(clean, {noise_n0(clean, 20.0), 5});
    for (StepRule rule : {StepRule::Fixed, StepRule::BarzilaiBorwein, StepRule::GaussNewton}) {
        CAPTURE(to_string(rule));
        GblConfig g;
        g.step_rule = rule;
        g.energy_ref = energy(clean);
        const LocalizationResult res = gbl_matched(r, kEnv, kPulse, {610.3, 20.2}, g);
        for (std::size_t i = 1; i < res.loss_history.size(); ++i)
            CHECK(res.loss_history[i] <= res.loss_history[i - 1]);
        CHECK(dist(res.position, kTruth) <= 0.1);
    }
}

TEST_CASE("argmin consistency on noiseless matched data") {
    const SampledSignal r = synthesize_received(kEnv, kTruth, kPulse, kGrid);
    GblConfig g;
    g.energy_ref = energy(r);
    const LocalizationResult res = gbl_matched(r, kEnv, kPulse, {610.4, 19.5}, g);
    const MisfitTarget target = MisfitTarget::raw(r);
    const double best = data_term(target, three_ray_lengths(kEnv, res.position), 1500.0, kPulse, g.energy_ref);
    std::mt19937_64 rng(4);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    int checked = 0;
    while (checked < 100) {
        const double dx = 20.0 * u(rng);
        const double dz = 20.0 * u(rng);
        if (dx * dx + dz * dz > 400.0)
            continue;
        const SourceLocation q{res.position.x + dx, res.position.z + dz};
        CHECK(data_term(target, three_ray_lengths(kEnv, q), 1500.0, kPulse, g.energy_ref) >= best);
        ++checked;
    }
}

TEST_CASE("loss gradient vanishes at the truth for noiseless data") {
    const Checkpoint m = self_model();
    const SampledSignal r = model_output(m.model, kTruth, kGrid);
    const LossProgram f = gbl_loss_program(r, m.model, energy(r));
    Eigen::VectorXd g;
    value_and_grad(f, Eigen::Vector2d(kTruth.x, kTruth.z), g);
    // scale: gradient of the normalised loss 1 m away
    Eigen::VectorXd g1;
    value_and_grad(f, Eigen::Vector2d(kTruth.x + 0.1, kTruth.z), g1);
    CHECK(g.norm() <= 1e-6 * g1.norm());

    const GradReport rep = fd_check(f, ParamVector(Layout().add("p", 2), Eigen::Vector2d(611.0, 21.0)), 1e-5);
    CHECK(rep.max_relative_error <= 1e-5);
}

TEST_CASE("frozen-model gbl from the truth and nearby") {
    const Checkpoint m = self_model();
    const SampledSignal r = model_output(m.model, kTruth, kGrid);
    GblConfig g;
    g.energy_ref = energy(r);
    const LocalizationResult at_truth = gbl(r, m, kTruth, g);
    CHECK(at_truth.iterations <= 1);
    CHECK(at_truth.converged);

    const LocalizationResult near = gbl(r, m, {610.3, 20.2}, g);
    CHECK(near.converged);
    CHECK(dist(near.position, kTruth) <= 0.05);
}

TEST_CASE("da_loss hand case") {
    const Checkpoint m = self_model();
    const SampledSignal r = synthesize_received(kEnv, kTruth, kPulse, kGrid);
    ModelParams w = m.model;
    w.pln.weights.values[3] += 2.0;  // ||w - w_tr||^2 = 4
    const SourceLocation p{605.0, 22.0};

    std::array<double, 3> l{};
    for (std::size_t i = 0; i < 3; ++i)
        l[i] = pln_forward(w.pln, p.x, p.z, 120.0, kThreeRayPaths[i].surface_bounces,
                           kThreeRayPaths[i].bottom_bounces);
    const Eigen::VectorXd f = oracle::three_ray_samples(l, 1500.0, 750.0, 500.0, 0.05, 4000.0, 8000);
    const double data = (r.values - f).squaredNorm() / 4000.0;

    CHECK(da_loss(w, p, r, m.model, 3.0) == doctest::Approx(data + 6.0).epsilon(1e-12));
    CHECK(da_loss(w, p, r, m.model, 0.0) == doctest::Approx(data).epsilon(1e-12));
    // gamma = 0 makes the loss blind to w_tr
    ModelParams other = m.model;
    other.pln.weights.values.setConstant(0.7);
    CHECK(da_loss(w, p, r, other, 0.0) == da_loss(w, p, r, m.model, 0.0));
    // w = w_tr leaves only the gbl data term
    const double gbl_data = data_term(MisfitTarget::raw(r), model_lengths(m.model, p), 1500.0, kPulse);
    CHECK(da_loss(m.model, p, r, m.model, 5.0) == doctest::Approx(gbl_data).epsilon(1e-13));

    // the program evaluates the same formula
    DaConfig cfg;
    cfg.gamma = 3.0;
    const LossProgram prog = da_loss_program(r, m.model, cfg);
    CHECK(evaluate(prog, da_vector(w, p, cfg)) == doctest::Approx(data + 6.0).epsilon(1e-12));
}

TEST_CASE("da loss program gradient against finite differences") {
    const Checkpoint m = self_model();
    const SampledSignal r = model_output(m.model, {612.0, 19.0}, kGrid);
    DaConfig cfg;
    cfg.gamma = 0.5;
    cfg.adapt_sound_speed = true;
    cfg.inner.energy_ref = energy(r);
    ModelParams w = m.model;
    w.pln.weights.values.array() += 0.01;
    const Layout layout = da_layout(w, cfg);
    CHECK(layout.find("c").has_value());
    CHECK(layout.at("p").size() == 2);
    // the output-layer weights move all three lengths at once, so the
    // second-order stencil is too coarse; use the fourth-order one
    const LossProgram f = da_loss_program(r, m.model, cfg);
    const Eigen::VectorXd v = da_vector(w, kTruth, cfg);
    Eigen::VectorXd g;
    value_and_grad(f, v, g);
    double worst = 0.0;
    for (Eigen::Index i = 0; i < v.size(); ++i) {
        const double h = 1e-6 * std::max(1.0, std::abs(v[i]));
        const double fd = oracle::central_difference4(
            [&](double t) {
                Eigen::VectorXd u = v;
                u[i] = t;
                return evaluate(f, u);
            },
            v[i], h);
        worst = std::max(worst, oracle::rel_err(g[i], fd));
    }
    CHECK(worst <= 1e-5);
}

TEST_CASE("da_gbl limits") {
    const Checkpoint m = self_model();
    const SampledSignal clean = model_output(m.model, kTruth, kGrid);
    const SampledSignal r = add_awgn(clean, {noise_n0(clean, 20.0), 9});
    GblConfig g;
    g.energy_ref = energy(clean);
    const SourceLocation p0{610.3, 20.2};
    const LocalizationResult base = gbl(r, m, p0, g);

    SUBCASE("huge gamma pins w and reproduces gbl") {
        DaConfig cfg;
        cfg.gamma = 1e9;
        cfg.inner = g;
        const LocalizationResult da = da_gbl(m, p0, r, cfg);
        REQUIRE(da.adapted.has_value());
        const Eigen::VectorXd& wt = m.model.pln.weights.values;
        CHECK((da.adapted->pln.weights.values - wt).norm() <= 1e-6 * wt.norm());
        CHECK(dist(da.position, base.position) <= 1e-3);
    }
    SUBCASE("frozen weights at gamma 0 follow the gbl trajectory") {
        DaConfig cfg;
        cfg.gamma = 0.0;
        cfg.adapt_weights = false;
        cfg.inner = g;
        const LocalizationResult da = da_gbl(m, p0, r, cfg);
        CHECK(da.iterations == base.iterations);
        CHECK(da.position.x == doctest::Approx(base.position.x).epsilon(1e-12));
        CHECK(da.position.z == doctest::Approx(base.position.z).epsilon(1e-12));
        REQUIRE(da.loss_history.size() == base.loss_history.size());
        for (std::size_t i = 0; i < da.loss_history.size(); ++i)
            CHECK(da.loss_history[i] == doctest::Approx(base.loss_history[i]).epsilon(1e-12));
    }
    SUBCASE("noiseless zero mismatch keeps w near w_tr") {
        DaConfig cfg;
        cfg.gamma = 1.0;
        cfg.inner = g;
        const LocalizationResult da = da_gbl(m, p0, clean, cfg);
        CHECK(dist(da.position, kTruth) <= 0.5);
        const Eigen::VectorXd& wt = m.model.pln.weights.values;
        CHECK((da.adapted->pln.weights.values - wt).norm() <= 1e-2 * wt.norm());
    }
}

TEST_CASE("converged results report the recomputed gradient norm") {
    const Checkpoint m = self_model();
    const SampledSignal clean = model_output(m.model, kTruth, kGrid);
    const SampledSignal r = add_awgn(clean, {noise_n0(clean, 20.0), 13});
    GblConfig g;
    g.energy_ref = energy(clean);

    const LocalizationResult res = gbl(r, m, {610.2, 19.9}, g);
    REQUIRE(res.converged);
    Eigen::VectorXd grad;
    value_and_grad(gbl_loss_program(r, m.model, g.energy_ref), Eigen::Vector2d(res.position.x, res.position.z), grad);
    CHECK(grad.norm() <= 1.01 * res.grad_norm + 1e-300);

    DaConfig cfg;
    cfg.gamma = 1.0;
    cfg.inner = g;
    const LocalizationResult da = da_gbl(m, {610.2, 19.9}, r, cfg);
    if (da.converged) {
        value_and_grad(da_loss_program(r, m.model, cfg), da_vector(*da.adapted, da.position, cfg), grad);
        CHECK(grad.norm() <= 1.01 * da.grad_norm + 1e-300);
    }
}

TEST_CASE("config validation") {
    GblConfig g;
    CHECK_NOTHROW(g.validate());
    g.continuation = {-1.0};
    CHECK_THROWS_AS(g.validate(), Error);
    g = GblConfig{};
    g.step_tol = 0.0;
    CHECK_THROWS_AS(g.validate(), Error);
    DaConfig d;
    d.gamma = -0.1;
    CHECK_THROWS_AS(d.validate(), Error);
    CHECK(step_rule_from_string(to_string(StepRule::BarzilaiBorwein)) == StepRule::BarzilaiBorwein);
}

TEST_CASE("crlb") {
    const SampledSignal clean = synthesize_received(kEnv, kTruth, kPulse, kGrid);
    const double n0 = noise_n0(clean, 20.0);
    const CrlbResult a = crlb(kEnv, kTruth, kPulse, n0, kGrid);
    CHECK(a.fim(0, 1) == a.fim(1, 0));
    const Eigen::SelfAdjointEigenSolver<Eigen::Matrix2d> eig(a.fim);
    CHECK(eig.eigenvalues().minCoeff() >= 0.0);
    CHECK(a.rmse_bound == doctest::Approx(std::sqrt(a.fim.inverse().trace())).epsilon(1e-12));
    for (double k : {0.25, 4.0, 100.0})
        CHECK(crlb(kEnv, kTruth, kPulse, k * n0, kGrid).rmse_bound ==
              doctest::Approx(std::sqrt(k) * a.rmse_bound).epsilon(1e-12));
    CHECK_THROWS_AS(crlb(kEnv, kTruth, kPulse, 0.0, kGrid), Error);

    // sensitivities and FIM from central differences of the closed-form signal
    const double h = 1e-4;
    auto samples = [&](double x, double z) {
        return oracle::three_ray_samples(oracle::image_lengths(200.0, 120.0, x, z), 1500.0, 750.0, 500.0, 0.05,
                                         4000.0, 8000);
    };
    Eigen::MatrixX2d sens(8000, 2);
    sens.col(0) = (samples(610.0 + h, 20.0) - samples(610.0 - h, 20.0)) / (2.0 * h);
    sens.col(1) = (samples(610.0, 20.0 + h) - samples(610.0, 20.0 - h)) / (2.0 * h);
    const Eigen::MatrixX2d lib = signal_sensitivity(kEnv, kTruth, kPulse, kGrid);
    CHECK((lib - sens).norm() <= 1e-5 * sens.norm());
    const Eigen::Matrix2d fim = (2.0 / n0) * (sens.transpose() * sens) / 4000.0;
    for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 2; ++j)
            CHECK(a.fim(i, j) == doctest::Approx(fim(i, j)).epsilon(5e-3));
}

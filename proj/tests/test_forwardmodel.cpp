#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "aqualoc/forward_model.hpp"
#include "aqualoc/serialization.hpp"
#include "oracles.hpp"

#include <filesystem>
#include <cstring>
#include <fstream>
#include <algorithm>
#include <random>

using namespace aqualoc;

namespace {

const AnalyticPulse kPulse = make_pulse(750.0, 500.0, 0.05);
const TimeGrid kGrid(4000.0, 2.0);

ModelParams fresh_model(const PlnArchitecture& arch, std::uint64_t seed) {
    ModelParams w;
    w.pln = pln_init(arch, seed, Region{}, Environment{});
    w.pulse = kPulse;
    return w;
}

TrainConfig short_run(int epochs) {
    TrainConfig cfg;
    cfg.epochs = epochs;
    cfg.batch_size = 4;
    cfg.log_every = 1;
    return cfg;
}

} // namespace

TEST_CASE("alpha_tau") {
    auto [a1, t1] = alpha_tau(1500.0, 1.0, 1500.0);
    CHECK(a1 == doctest::Approx(1.0 / 1500.0).epsilon(1e-15));
    CHECK(t1 == 1.0);
    auto [a2, t2] = alpha_tau(100.0, -1.0, 1500.0);
    CHECK(a2 == -0.01);
    CHECK(t2 == doctest::Approx(0.066667).epsilon(1e-5));
    const double l = oracle::image_lengths(200.0, 120.0, 610.0, 20.0)[0];
    CHECK(alpha_tau(l, 1.0, 1500.0).second == doctest::Approx(0.412095).epsilon(1e-6));
    CHECK_THROWS_AS(alpha_tau(0.0, 1.0, 1500.0), Error);
    CHECK_THROWS_AS(alpha_tau(-3.0, 1.0, 1500.0), Error);
}

TEST_CASE("analytic lengths plugged into the model reproduce the oracle exactly") {
    const Environment env;
    const LengthFn image = [&](const SourceLocation& p) { return three_ray_lengths(env, p); };
    for (const SourceLocation& p : {SourceLocation{}, SourceLocation{350.0, 80.0}, SourceLocation{880.0, 6.0}}) {
        const SampledSignal a = model_output(image, env.sound_speed, kPulse, p, kGrid);
        const SampledSignal b = synthesize_received(env, p, kPulse, kGrid);
        CHECK(a.values == b.values);
    }
}

TEST_CASE("model output is the superposition of the PLN lengths") {
    const ModelParams w = fresh_model(PlnArchitecture::reduced(), 3);
    const SourceLocation p{500.0, 40.0};
    std::array<double, 3> l{};
    for (std::size_t i = 0; i < 3; ++i)
        l[i] = pln_forward(w.pln, p.x, p.z, 120.0, kThreeRayPaths[i].surface_bounces,
                           kThreeRayPaths[i].bottom_bounces);
    CHECK(model_lengths(w, p) == l);
    const SampledSignal f = model_output(w, p, TimeGrid(4000.0, 4.0));
    const Eigen::VectorXd want = oracle::three_ray_samples(l, 1500.0, 750.0, 500.0, 0.05, 4000.0, 16000);
    CHECK((f.values - want).cwiseAbs().maxCoeff() <= 1e-15);
}

TEST_CASE("train_loss on an 8-point grid against a hand Riemann sum") {
    // A slow, wide pulse so that eight samples see it.
    ModelParams w = fresh_model(PlnArchitecture::reduced(), 4);
    w.pulse = make_pulse(2.0, 1.0, 0.5);
    w.sound_speed = 3000.0;
    const TimeGrid g(8.0, 1.0);
    REQUIRE(g.size() == 8);

    Dataset ds;
    ds.grid = g;
    ds.pulse = w.pulse;
    const SourceLocation p{600.0, 50.0};
    const Eigen::VectorXd r = (Eigen::VectorXd(8) << 0.1, -0.2, 0.05, 0.0, 0.3, -0.1, 0.02, 0.07).finished();
    ds.items.push_back({p, SampledSignal(g, r)});

    std::array<double, 3> l{};
    for (std::size_t i = 0; i < 3; ++i)
        l[i] = pln_forward(w.pln, p.x, p.z, 120.0, kThreeRayPaths[i].surface_bounces,
                           kThreeRayPaths[i].bottom_bounces);
    double hand = 0.0;
    for (int n = 0; n < 8; ++n) {
        const double f = oracle::three_ray(n / 8.0, l, 3000.0, 2.0, 1.0, 0.5);
        hand += (r[n] - f) * (r[n] - f);
    }
    hand *= 1.0 / 8.0;
    CHECK(train_loss(w, ds) == doctest::Approx(hand).epsilon(1e-13));
}

TEST_CASE("train_loss is zero on self-generated data and symmetric in the item order") {
    const ModelParams w = fresh_model(PlnArchitecture::reduced(), 5);
    Dataset own;
    own.grid = kGrid;
    own.pulse = kPulse;
    for (const SourceLocation& p : {SourceLocation{400.0, 30.0}, SourceLocation{700.0, 90.0}})
        own.items.push_back({p, model_output(w, p, kGrid)});
    CHECK(train_loss(w, own) <= 1e-12 * energy(own.items[0].signal));

    Dataset ds = gen_dataset(Environment{}, Region{}, 12, kPulse, kGrid, {}, 3);
    const double a = train_loss(w, ds);
    std::reverse(ds.items.begin(), ds.items.end());
    CHECK(train_loss(w, ds) == doctest::Approx(a).epsilon(1e-13));
    std::mt19937_64 rng(1);
    std::shuffle(ds.items.begin(), ds.items.end(), rng);
    CHECK(train_loss(w, ds) == doctest::Approx(a).epsilon(1e-13));

    ds.items[0].signal = SampledSignal(TimeGrid(2000.0, 2.0));
    CHECK_THROWS_AS(train_loss(w, ds), Error);
}

TEST_CASE("train_loss gradient against finite differences at random states") {
    const Dataset ds = gen_dataset(Environment{}, Region{}, 3, kPulse, kGrid, {}, 8);
    ModelParams w = fresh_model(PlnArchitecture::reduced(), 6);
    // near-correct lengths keep every sample inside the window; the perturbation
    // makes each state distinct
    std::mt19937_64 rng(2);
    std::normal_distribution<double> noise(0.0, 0.05);
    for (int state = 0; state < 5; ++state) {
        CAPTURE(state);
        ModelParams ws = w;
        Eigen::VectorXd v = model_vector(ws);
        for (Eigen::Index i = 0; i + 1 < v.size(); ++i)
            v[i] += noise(rng);
        set_model_vector(ws, v);
        const LossProgram f = train_loss_program(ws, ds);
        CHECK(evaluate(f, v) == doctest::Approx(train_loss(ws, ds)).epsilon(1e-12));
        const GradReport rep = fd_check(f, ParamVector(model_layout(ws), v), 1e-6, 30, static_cast<std::uint64_t>(state));
        CHECK(rep.max_relative_error <= 1e-5);
    }
}

TEST_CASE("one epoch at zero learning rate leaves the parameters unchanged") {
    const Dataset ds = gen_dataset(Environment{}, Region{}, 8, kPulse, kGrid, {}, 4);
    const ModelParams w = fresh_model(PlnArchitecture::reduced(), 7);
    TrainConfig cfg = short_run(1);
    cfg.learning_rate = 0.0;
    const Checkpoint c = pretrain_from(ds, w, cfg);
    CHECK(c.model.pln.weights.values == w.pln.weights.values);
    CHECK(c.model.sound_speed == w.sound_speed);
}

TEST_CASE("short training runs are deterministic and change the weights") {
    const Dataset ds = gen_dataset(Environment{}, Region{}, 8, kPulse, kGrid, {}, 4);
    const TrainConfig cfg = short_run(4);
    const Checkpoint a = pretrain(ds, PlnArchitecture::reduced(), cfg);
    const Checkpoint b = pretrain(ds, PlnArchitecture::reduced(), cfg);
    CHECK(checkpoint_to_string(a) == checkpoint_to_string(b));
    CHECK(a.model.pln.weights.values != pln_init(PlnArchitecture::reduced(), cfg.seed, Region{}, Environment{}).weights.values);
    CHECK_FALSE(a.meta.loss_curve.empty());
    CHECK(a.meta.n_train == 8);
    // sound speed stays frozen during pre-training
    CHECK(a.model.sound_speed == 1500.0);
}

TEST_CASE("training config validation") {
    TrainConfig cfg;
    CHECK_NOTHROW(cfg.validate());
    cfg.epochs = 0;
    CHECK_THROWS_AS(cfg.validate(), Error);
    cfg = TrainConfig{};
    cfg.batch_size = 0;
    CHECK_THROWS_AS(cfg.validate(), Error);
    cfg = TrainConfig{};
    cfg.learning_rate = -1.0;
    CHECK_THROWS_AS(cfg.validate(), Error);
}

TEST_CASE("checkpoint round trip") {
    Checkpoint c;
    c.model = fresh_model(PlnArchitecture::standard(), 9);
    std::mt19937_64 rng(9);
    std::normal_distribution<double> g;
    for (Eigen::Index i = 0; i < c.model.pln.weights.size(); ++i)
        c.model.pln.weights.values[i] = g(rng) * 1e-3 + 1.0 / 3.0;
    c.model.sound_speed = 1499.7;
    c.meta.final_loss = 1.0 / 7.0;
    c.meta.n_train = 256;
    c.meta.loss_curve.push_back({1, 0.0, 0.5, 0.25});

    const std::filesystem::path path = std::filesystem::temp_directory_path() / "aqualoc_test_ckpt.json";
    save_checkpoint(c, path);
    const Checkpoint d = load_checkpoint(path);
    CHECK(d.model.pln.weights.values == c.model.pln.weights.values);
    CHECK(d.model.pln.norm == c.model.pln.norm);
    CHECK(d.model.pln.arch == c.model.pln.arch);
    CHECK(d.model.sound_speed == c.model.sound_speed);
    CHECK(d.meta.final_loss == c.meta.final_loss);
    CHECK(d.meta.n_train == 256);
    CHECK(checkpoint_to_string(d) == checkpoint_to_string(c));

    // regenerated signals are byte-identical
    const SampledSignal a = model_output(c.model, {}, kGrid);
    const SampledSignal b = model_output(d.model, {}, kGrid);
    CHECK(std::memcmp(a.values.data(), b.values.data(), sizeof(double) * static_cast<std::size_t>(a.values.size())) == 0);

    const std::string text = checkpoint_to_string(c);
    try {
        checkpoint_from_string(text.substr(0, text.size() / 2));
        FAIL("truncated checkpoint loaded");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::CorruptPayload);
    }
    json j = json::parse(text);
    j["format_version"] = 99;
    try {
        checkpoint_from_string(j.dump());
        FAIL("future format loaded");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::VersionMismatch);
    }
    CHECK_THROWS_AS(load_checkpoint(path.string() + ".missing"), Error);
    std::filesystem::remove(path);
}

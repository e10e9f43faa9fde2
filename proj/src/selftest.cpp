#include "aqualoc/harness.hpp"

#include <cmath>
#include <functional>
#include <ostream>
#include <set>
#include <string>
#include <vector>

namespace aqualoc {

namespace {

struct Check {
    const char* name;
    std::function<bool(std::string&)> run;  // fills the detail string
};

std::string num(double v) { return format_number(v); }

} // namespace

int run_selftest(std::ostream& out) {
    const Environment env;
    const SourceLocation src;
    const AnalyticPulse pulse = make_pulse(750.0, 500.0, 0.05);
    const TimeGrid grid(4000.0, 2.0);

    const std::vector<Check> checks{
        {"rmse-symmetric-pair",
         [&](std::string& d) {
             const double v = rmse({{613.0, 20.0}, {607.0, 20.0}}, src);
             d = "rmse " + num(v);
             return std::abs(v - 3.0) < 1e-12;
         }},
        {"image-lengths-order",
         [&](std::string& d) {
             const auto l = three_ray_lengths(env, src);
             d = "lengths " + num(l[0]) + ", " + num(l[1]) + ", " + num(l[2]);
             return l[0] < l[1] && l[1] < l[2];
         }},
        {"oracle-equivalence",
         [&](std::string& d) {
             const LengthFn image = [&](const SourceLocation& p) { return three_ray_lengths(env, p); };
             const SampledSignal a = model_output(image, env.sound_speed, pulse, src, grid);
             const SampledSignal b = synthesize_received(env, src, pulse, grid);
             const double diff = (a.values - b.values).cwiseAbs().maxCoeff();
             d = "max |diff| " + num(diff);
             return diff <= 1e-15 * b.values.cwiseAbs().maxCoeff();
         }},
        {"awgn-determinism",
         [&](std::string& d) {
             const SampledSignal clean = synthesize_received(env, src, pulse, grid);
             const SampledSignal a = add_awgn(clean, {1e-9, 42});
             const SampledSignal b = add_awgn(clean, {1e-9, 42});
             const SampledSignal c = add_awgn(clean, {1e-9, 43});
             d = "same seed identical, different seed differs";
             return a.values == b.values && a.values != c.values;
         }},
        {"snr-definition",
         [&](std::string& d) {
             const SampledSignal clean = synthesize_received(env, src, pulse, grid);
             const double n0 = snr_to_n0(clean, db_to_linear(20.0), pulse.bandwidth);
             const double snr = energy(clean) / (pulse.bandwidth * n0);
             d = "snr " + num(snr);
             return std::abs(snr - 100.0) < 1e-9;
         }},
        {"crlb-noise-scaling",
         [&](std::string& d) {
             const double a = crlb(env, src, pulse, 1e-10, grid).rmse_bound;
             const double b = crlb(env, src, pulse, 4e-10, grid).rmse_bound;
             d = "ratio " + num(b / a);
             return std::abs(b / a - 2.0) < 1e-9;
         }},
        {"gbl-loss-gradient",
         [&](std::string& d) {
             ModelParams w;
             w.pln = pln_init(PlnArchitecture::reduced(), 3, Region{}, env);
             w.pulse = pulse;
             const SampledSignal r = synthesize_received(env, src, pulse, grid);
             const LossProgram loss = gbl_loss_program(r, w, energy(r));
             Layout l;
             l.add("p", 2);
             const GradReport rep = fd_check(loss, ParamVector(l, Eigen::Vector2d(605.0, 24.0)), 1e-5);
             d = "max relative error " + num(rep.max_relative_error);
             return rep.max_relative_error <= 1e-5;
         }},
        {"toa-noiseless",
         [&](std::string& d) {
             const SampledSignal r = synthesize_received(env, src, pulse, grid);
             const SourceLocation p = toa_init(r, pulse, env).initial;
             const double e = std::hypot(p.x - src.x, p.z - src.z);
             d = "error " + num(e) + " m";
             return e <= 1.0;
         }},
        {"gbl-matched-noiseless",
         [&](std::string& d) {
             const SampledSignal r = synthesize_received(env, src, pulse, grid);
             GblConfig g;
             g.energy_ref = energy(r);
             g.continuation = {4e-3};
             const LocalizationResult res = gbl_matched(r, env, pulse, {src.x + 5.0, src.z + 2.0}, g);
             const double e = std::hypot(res.position.x - src.x, res.position.z - src.z);
             d = "error " + num(e) + " m, exit " + to_string(res.exit);
             return e <= 0.05 && res.converged;
         }},
        {"trial-seeds-distinct",
         [&](std::string& d) {
             std::set<std::uint64_t> seen;
             for (double cell : {0.0, 5.0, -0.5, 0.5})
                 for (const char* m : {"gbl-matched", "gbl-nn", "da-gbl"})
                     for (int t = 0; t < 50; ++t)
                         seen.insert(trial_seed(0, cell, m, t));
             d = num(static_cast<double>(seen.size())) + " distinct of 600";
             return seen.size() == 600 && trial_seed(0, 0.0, "gbl-nn", 1) == trial_seed(0, -0.0, "gbl-nn", 1);
         }},
        {"csv-roundtrip",
         [&](std::string& d) {
             SweepRow a;
             a.method = Method::DaGbl;
             a.snr_db = 20;
             a.mismatch_m = -0.5;
             a.gamma = 0.1;
             a.trials = 7;
             a.rmse_m = 1.25;
             a.mean_err_m = 1.0;
             a.ci_m = 0.125;
             a.conv_rate = 6.0 / 7.0;
             const std::string text = sweep_csv({a}, false);
             const std::vector<SweepRow> back = parse_sweep_csv(text);
             d = "header and one row";
             return back.size() == 1 && back[0].gamma == 0.1 && back[0].trials == 7 && back[0].rmse_m == 1.25 &&
                    sweep_csv(back, false) == text;
         }},
        {"config-roundtrip",
         [&](std::string& d) {
             const ExperimentConfig c;
             const json j = to_json(c);
             d = "default config survives to_json/config_from_json";
             return to_json(config_from_json(j)) == j;
         }},
    };

    int failures = 0;
    for (const Check& c : checks) {
        std::string detail;
        bool ok = false;
        try {
            ok = c.run(detail);
        } catch (const std::exception& e) {
            detail = std::string("threw: ") + e.what();
        }
        out << (ok ? "PASS " : "FAIL ") << c.name << " (" << detail << ")\n";
        failures += ok ? 0 : 1;
    }
    out << (checks.size() - static_cast<std::size_t>(failures)) << "/" << checks.size() << " self-checks passed\n";
    return failures;
}

} // namespace aqualoc

#include "aqualoc/harness.hpp"

#include <CLI11.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <sstream>

namespace aqualoc {

namespace {

struct Options {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::optional<int> trials;
    std::string out;
    std::optional<double> snr;           // localize
    std::optional<double> depth_offset;  // localize
};

ExperimentConfig load(const Options& o) {
    ExperimentConfig cfg = o.config.empty() ? ExperimentConfig{} : load_config(o.config);
    if (o.seed)
        cfg.seed = *o.seed;
    if (o.trials)
        cfg.trials = *o.trials;
    if (!o.out.empty())
        cfg.output_dir = o.out;
    cfg.validate();
    return cfg;
}

void ensure_dir(const std::filesystem::path& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec)
        throw Error(ErrorCode::IoError, "cannot create " + dir.string() + ": " + ec.message());
}

std::filesystem::path output_dir(const ExperimentConfig& cfg) { return resolve_data_path(cfg.output_dir); }

Dataset make_dataset(const ExperimentConfig& cfg) {
    const TrainingSetup& t = cfg.training;
    return gen_dataset(cfg.environment, pad_region(t.region, t.pad_fraction), t.n_train, cfg.pulse, cfg.grid, {},
                       t.dataset_seed, t.sampling);
}

int cmd_gen_data(const Options& o, std::ostream& out) {
    const ExperimentConfig cfg = load(o);
    const std::filesystem::path dir = o.out.empty() ? resolve_data_path(cfg.dataset_dir) : std::filesystem::path(o.out);
    const Dataset ds = make_dataset(cfg);
    save_dataset(ds, dir);
    out << "wrote " << ds.size() << " signals to " << dir.string() << "\n";
    return 0;
}

int cmd_train(const Options& o, std::ostream& out, std::ostream& err) {
    const ExperimentConfig cfg = load(o);
    const std::filesystem::path data_dir = resolve_data_path(cfg.dataset_dir);
    Dataset ds;
    if (std::filesystem::exists(data_dir / "manifest.json")) {
        ds = load_dataset(data_dir);
        out << "loaded " << ds.size() << " signals from " << data_dir.string() << "\n";
    } else {
        ds = make_dataset(cfg);
        out << "generated " << ds.size() << " signals in memory\n";
    }
    TrainConfig tc = cfg.training.train;
    tc.heldout_region = cfg.training.region;
    const Checkpoint ck = pretrain(ds, cfg.training.arch(), tc, [&](const LossPoint& p) {
        if (tc.log_every > 0 && p.epoch % (tc.log_every * 10) == 0)
            err << "epoch " << p.epoch << " L_tr " << format_number(p.train_loss) << "\n";
    });
    const std::filesystem::path path = o.out.empty() ? resolve_data_path(cfg.checkpoint) : std::filesystem::path(o.out);
    if (path.has_parent_path())
        ensure_dir(path.parent_path());
    save_checkpoint(ck, path);
    out << "L_tr " << format_number(ck.meta.initial_loss) << " -> " << format_number(ck.meta.final_loss)
        << ", held-out max relative path-length error " << format_number(ck.meta.heldout_max_rel_error) << "\n";
    for (const std::string& w : ck.meta.warnings)
        out << "warning: " << w << "\n";
    out << "checkpoint written to " << path.string() << "\n";
    return 0;
}

int cmd_localize(const Options& o, std::ostream& out) {
    const ExperimentConfig cfg = load(o);
    const double snr_db = o.snr.value_or(cfg.snr_db.front());
    Environment test_env = cfg.environment;
    test_env.depth += o.depth_offset.value_or(0.0);
    const SampledSignal clean = synthesize_received(test_env, cfg.source, cfg.pulse, cfg.grid);
    const double n0 = snr_to_n0(clean, db_to_linear(snr_db), cfg.pulse.bandwidth);
    const SampledSignal r = add_awgn(clean, {n0, trial_seed(cfg.seed, snr_db, "localize", 0)});
    GblConfig g = cfg.localizer;
    g.energy_ref = energy(synthesize_received(cfg.environment, cfg.source, cfg.pulse, cfg.grid));

    json report;
    report["snr_db"] = snr_db;
    report["test_environment"] = test_env;
    report["truth"] = cfg.source;
    auto entry = [&](const LocalizationResult& res) {
        return json{{"x", res.position.x},
                    {"z", res.position.z},
                    {"error_m", std::hypot(res.position.x - cfg.source.x, res.position.z - cfg.source.z)},
                    {"converged", res.converged},
                    {"exit", to_string(res.exit)},
                    {"iterations", res.iterations}};
    };
    const ToaEstimate toa = toa_init(r, cfg.pulse, cfg.environment);
    report["toa"] = {{"x", toa.initial.x}, {"z", toa.initial.z}, {"arrivals_s", toa.times}};
    std::optional<Checkpoint> ck;
    if (cfg.uses(Method::GblNn) || cfg.uses(Method::DaGbl)) {
        const std::filesystem::path path = resolve_data_path(cfg.checkpoint);
        if (!std::filesystem::exists(path))
            throw Error(ErrorCode::MissingCheckpoint, "checkpoint not found: " + path.string());
        ck = load_checkpoint(path);
    }
    for (Method m : cfg.methods) {
        if (m == Method::GblMatched) {
            const SourceLocation p0 = toa_init(r, cfg.pulse, test_env).initial;
            report["gbl-matched"] = entry(gbl_matched(r, test_env, cfg.pulse, p0, g));
        } else if (m == Method::GblNn) {
            report["gbl-nn"] = entry(gbl(r, *ck, toa.initial, g));
        } else if (m == Method::DaGbl) {
            json rows = json::array();
            for (double gamma : cfg.gamma) {
                DaConfig da;
                da.gamma = gamma;
                da.inner = g;
                json e = entry(da_gbl(*ck, toa.initial, r, da));
                e["gamma"] = gamma;
                rows.push_back(e);
            }
            report["da-gbl"] = rows;
        } else {
            report["crlb_m"] = crlb(test_env, cfg.source, cfg.pulse, n0, cfg.grid).rmse_bound;
        }
    }
    out << report.dump(2) << "\n";
    return 0;
}

int cmd_sweep(const Options& o, bool snr, std::ostream& out, std::ostream& err) {
    const ExperimentConfig cfg = load(o);
    const SweepResult res = snr ? run_snr_sweep(cfg, &err) : run_mismatch_sweep(cfg, &err);
    const std::filesystem::path dir = output_dir(cfg);
    ensure_dir(dir);
    const std::string stem = snr ? "snr_sweep" : "mismatch_sweep";
    const std::string csv = sweep_csv(res.rows, cfg.timing);
    write_text_file(dir / (stem + ".csv"), csv);
    write_text_file(dir / (stem + ".manifest.json"), res.manifest.dump(2) + "\n");
    out << csv;
    for (const json& f : res.manifest.at("flagged_rows"))
        err << "flagged: " << f.dump() << "\n";
    return 0;
}

int cmd_crlb(const Options& o, std::ostream& out) {
    const ExperimentConfig cfg = load(o);
    Environment env = cfg.environment;
    env.depth += cfg.snr_sweep_depth_offset;
    const SampledSignal clean = synthesize_received(env, cfg.source, cfg.pulse, cfg.grid);
    std::ostringstream table;
    table << "snr_db,rmse_bound_m\n";
    for (double snr : cfg.snr_db) {
        const double n0 = snr_to_n0(clean, db_to_linear(snr), cfg.pulse.bandwidth);
        table << format_number(snr) << ',' << format_number(crlb(env, cfg.source, cfg.pulse, n0, cfg.grid).rmse_bound)
              << "\n";
    }
    out << table.str();
    if (!o.out.empty()) {
        const std::filesystem::path dir = output_dir(cfg);
        ensure_dir(dir);
        write_text_file(dir / "crlb.csv", table.str());
    }
    return 0;
}

int cmd_verify_theorem(const Options& o, std::ostream& out) {
    const ExperimentConfig cfg = load(o);
    const std::filesystem::path path = resolve_data_path(cfg.theorem.checkpoint);
    if (!std::filesystem::exists(path))
        throw Error(ErrorCode::MissingCheckpoint, "checkpoint not found: " + path.string());
    AdaptationProblem prob;
    prob.w_tr = load_checkpoint(path);
    prob.env = prob.w_tr.meta.environment;
    prob.source = cfg.source;
    prob.grid = cfg.grid;
    prob.gamma = cfg.theorem.gamma;
    prob.da.inner = cfg.localizer;
    const SourceLocation p0 = toa_init(prob.data({}), prob.w_tr.model.pulse, prob.env).initial;
    const TheoremReport rep = verify_theorem(prob, p0, {cfg.theorem.depth_offset, 0.0}, cfg.theorem.lab);
    const std::string text = to_json(rep).dump(2) + "\n";
    out << text;
    if (!o.out.empty()) {
        const std::filesystem::path dir = output_dir(cfg);
        ensure_dir(dir);
        write_text_file(dir / "theorem_report.json", text);
    }
    return 0;
}

} // namespace

int cli_main(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"aqualoc: differentiable forward-model localization experiments", "aqualoc"};
    app.require_subcommand(1);
    Options o;
    auto common = [&](CLI::App* sub) {
        sub->add_option("--config", o.config, "JSON experiment config")->check(CLI::ExistingFile);
        sub->add_option("--seed", o.seed, "master seed");
        sub->add_option("--trials", o.trials, "Monte Carlo trials per cell");
        sub->add_option("--out", o.out, "output directory (or file for gen-data/train)");
        return sub;
    };
    CLI::App* gen = common(app.add_subcommand("gen-data", "generate the training dataset"));
    CLI::App* train = common(app.add_subcommand("train", "pre-train the path length network"));
    CLI::App* loc = common(app.add_subcommand("localize", "localize one noisy realization with every method"));
    loc->add_option("--snr", o.snr, "SNR in dB (default: first of snr_db)");
    loc->add_option("--depth-offset", o.depth_offset, "test depth minus training depth, m");
    CLI::App* snr = common(app.add_subcommand("sweep-snr", "RMSE against SNR"));
    CLI::App* mis = common(app.add_subcommand("sweep-mismatch", "RMSE against depth mismatch"));
    CLI::App* bound = common(app.add_subcommand("crlb", "Cramer-Rao bound table"));
    CLI::App* thm = common(app.add_subcommand("verify-theorem", "numerical check of the adaptation bound"));
    CLI::App* self = common(app.add_subcommand("selftest", "run the invariant suite"));

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        out << app.help();
        return 0;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n" << app.help();
        return 2;
    }

    try {
        if (gen->parsed())
            return cmd_gen_data(o, out);
        if (train->parsed())
            return cmd_train(o, out, err);
        if (loc->parsed())
            return cmd_localize(o, out);
        if (snr->parsed())
            return cmd_sweep(o, true, out, err);
        if (mis->parsed())
            return cmd_sweep(o, false, out, err);
        if (bound->parsed())
            return cmd_crlb(o, out);
        if (thm->parsed())
            return cmd_verify_theorem(o, out);
        if (self->parsed()) {
            if (!o.config.empty())
                (void)load(o);
            return run_selftest(out) == 0 ? 0 : 3;
        }
    } catch (const Error& e) {
        err << "error: " << e.what() << "\n";
        return e.code() == ErrorCode::ConfigError ? 2 : 3;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 3;
    }
    err << app.help();
    return 2;
}

} // namespace aqualoc

#include "aqualoc/harness.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <atomic>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <limits>
#include <ostream>
#include <set>
#include <sstream>
#include <thread>

namespace aqualoc {

namespace {

constexpr double kNan = std::numeric_limits<double>::quiet_NaN();

std::uint64_t fnv1a(const std::string& s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : s) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

[[noreturn]] void config_error(const std::string& what) { throw Error(ErrorCode::ConfigError, what); }

void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
    if (!j.is_object())
        config_error(where + " must be a JSON object");
    for (auto it = j.begin(); it != j.end(); ++it)
        if (!allowed.count(it.key()))
            config_error("unknown key '" + it.key() + "' in " + where);
}

template <typename T>
void read(const json& j, const char* key, T& out, const std::string& where) {
    if (!j.contains(key))
        return;
    try {
        out = j.at(key).get<T>();
    } catch (const json::exception& e) {
        config_error(where + "." + key + ": " + e.what());
    }
}

std::vector<double> read_list(const json& j, const char* key, const std::vector<double>& fallback) {
    if (!j.contains(key))
        return fallback;
    const json& v = j.at(key);
    if (!v.is_array())
        config_error(std::string(key) + " must be an array of numbers");
    std::vector<double> out;
    for (const json& x : v) {
        if (!x.is_number())
            config_error(std::string(key) + " must be an array of numbers");
        out.push_back(x.get<double>());
    }
    return out;
}

GblConfig localizer_from_json(const json& j, GblConfig g) {
    const std::string where = "localizer";
    check_keys(j,
               {"max_iterations", "step_rule", "grad_rel_tol", "grad_abs_tol", "step_tol", "position_scale",
                "continuation"},
               where);
    read(j, "max_iterations", g.max_iterations, where);
    if (j.contains("step_rule")) {
        try {
            g.step_rule = step_rule_from_string(j.at("step_rule").get<std::string>());
        } catch (const std::exception& e) {
            config_error(std::string("localizer.step_rule: ") + e.what());
        }
    }
    read(j, "grad_rel_tol", g.grad_rel_tol, where);
    read(j, "grad_abs_tol", g.grad_abs_tol, where);
    read(j, "step_tol", g.step_tol, where);
    if (j.contains("position_scale")) {
        const std::vector<double> s = read_list(j, "position_scale", {});
        if (s.size() != 2)
            config_error("localizer.position_scale must hold two numbers");
        g.position_scale = {s[0], s[1]};
    }
    g.continuation = read_list(j, "continuation", g.continuation);
    return g;
}

json localizer_to_json(const GblConfig& g) {
    return {{"max_iterations", g.max_iterations},
            {"step_rule", to_string(g.step_rule)},
            {"grad_rel_tol", g.grad_rel_tol},
            {"grad_abs_tol", g.grad_abs_tol},
            {"step_tol", g.step_tol},
            {"position_scale", {g.position_scale.x(), g.position_scale.y()}},
            {"continuation", g.continuation}};
}

TrainingSetup training_from_json(const json& j, TrainingSetup t) {
    const std::string where = "training";
    check_keys(j,
               {"n_train", "region", "pad_fraction", "sampling", "dataset_seed", "architecture", "epochs",
                "learning_rate", "batch_size", "seed", "log_every"},
               where);
    read(j, "n_train", t.n_train, where);
    if (j.contains("region"))
        t.region = j.at("region").get<Region>();
    read(j, "pad_fraction", t.pad_fraction, where);
    if (j.contains("sampling")) {
        try {
            t.sampling = sampling_from_string(j.at("sampling").get<std::string>());
        } catch (const std::exception& e) {
            config_error(std::string("training.sampling: ") + e.what());
        }
    }
    read(j, "dataset_seed", t.dataset_seed, where);
    read(j, "architecture", t.architecture, where);
    read(j, "epochs", t.train.epochs, where);
    read(j, "learning_rate", t.train.learning_rate, where);
    read(j, "batch_size", t.train.batch_size, where);
    read(j, "seed", t.train.seed, where);
    read(j, "log_every", t.train.log_every, where);
    return t;
}

json training_to_json(const TrainingSetup& t) {
    return {{"n_train", t.n_train},
            {"region", t.region},
            {"pad_fraction", t.pad_fraction},
            {"sampling", to_string(t.sampling)},
            {"dataset_seed", t.dataset_seed},
            {"architecture", t.architecture},
            {"epochs", t.train.epochs},
            {"learning_rate", t.train.learning_rate},
            {"batch_size", t.train.batch_size},
            {"seed", t.train.seed},
            {"log_every", t.train.log_every}};
}

TheoremSetup theorem_from_json(const json& j, TheoremSetup t) {
    const std::string where = "theorem";
    check_keys(j, {"checkpoint", "gamma", "depth_offset_m", "sigma", "fd_step", "raw_fd_step", "seed"}, where);
    read(j, "checkpoint", t.checkpoint, where);
    read(j, "gamma", t.gamma, where);
    read(j, "depth_offset_m", t.depth_offset, where);
    read(j, "sigma", t.lab.sigma, where);
    read(j, "fd_step", t.lab.fd_step, where);
    read(j, "raw_fd_step", t.lab.raw_fd_step, where);
    read(j, "seed", t.lab.seed, where);
    return t;
}

json theorem_to_json(const TheoremSetup& t) {
    return {{"checkpoint", t.checkpoint},       {"gamma", t.gamma},
            {"depth_offset_m", t.depth_offset}, {"sigma", t.lab.sigma},
            {"fd_step", t.lab.fd_step},         {"raw_fd_step", t.lab.raw_fd_step},
            {"seed", t.lab.seed}};
}

bool is_integral(double v) { return std::isfinite(v) && v == std::floor(v); }

} // namespace

std::string to_string(Method m) {
    switch (m) {
    case Method::GblMatched: return "gbl-matched";
    case Method::GblNn: return "gbl-nn";
    case Method::DaGbl: return "da-gbl";
    case Method::Crlb: return "crlb";
    }
    return "unknown";
}

Method method_from_string(const std::string& name) {
    for (Method m : {Method::GblMatched, Method::GblNn, Method::DaGbl, Method::Crlb})
        if (to_string(m) == name)
            return m;
    throw Error(ErrorCode::ConfigError, "unknown method '" + name + "'");
}

PlnArchitecture TrainingSetup::arch() const {
    if (architecture == "standard")
        return PlnArchitecture::standard();
    if (architecture == "reduced")
        return PlnArchitecture::reduced();
    throw Error(ErrorCode::ConfigError, "architecture must be 'standard' or 'reduced', got '" + architecture + "'");
}

void ExperimentConfig::validate() const {
    try {
        environment.validate();
        localizer.validate();
        training.train.validate();
        theorem.lab.validate();
        (void)training.arch();
    } catch (const Error& e) {
        config_error(e.what());
    }
    if (trials < 1)
        config_error("trials must be at least 1");
    if (snr_db.empty() || mismatch_m.empty() || gamma.empty() || methods.empty())
        config_error("snr_db, mismatch_m, gamma and methods must be non-empty");
    for (double g : gamma)
        if (!(g >= 0.0) || !std::isfinite(g))
            config_error("gamma values must be finite and non-negative");
    for (double s : snr_db)
        if (!std::isfinite(s))
            config_error("snr_db values must be finite");
    for (double m : mismatch_m)
        if (!std::isfinite(m) || environment.depth + m <= environment.receiver_depth || environment.depth + m <= source.z)
            config_error("mismatch " + format_number(m) + " m leaves the receiver or source outside the column");
    if (!std::isfinite(mismatch_snr_db))
        config_error("mismatch_snr_db must be finite");
    if (threads < 0)
        config_error("threads must be >= 0");
    if (training.n_train < 1)
        config_error("training.n_train must be at least 1");
    if (!(training.pad_fraction >= 0.0))
        config_error("training.pad_fraction must be >= 0");
    if (!(theorem.gamma > 0.0))
        config_error("theorem.gamma must be positive");
}

bool ExperimentConfig::uses(Method m) const { return std::find(methods.begin(), methods.end(), m) != methods.end(); }

ExperimentConfig config_from_json(const json& j) {
    ExperimentConfig c;
    const std::string where = "config";
    check_keys(j,
               {"environment", "source", "pulse", "grid", "snr_db", "snr_sweep_depth_offset_m", "mismatch_m",
                "mismatch_snr_db", "gamma", "methods", "trials", "seed", "output_dir", "checkpoint", "dataset_dir",
                "threads", "timing", "localizer", "training", "theorem"},
               where);
    try {
        if (j.contains("environment")) {
            check_keys(j.at("environment"), {"depth", "sound_speed", "receiver_depth"}, "environment");
            c.environment = j.at("environment").get<Environment>();
        }
        if (j.contains("source")) {
            check_keys(j.at("source"), {"x", "z"}, "source");
            c.source = j.at("source").get<SourceLocation>();
        }
        if (j.contains("pulse")) {
            check_keys(j.at("pulse"), {"center_freq", "bandwidth", "center_time"}, "pulse");
            c.pulse = j.at("pulse").get<AnalyticPulse>();
        }
        if (j.contains("grid")) {
            check_keys(j.at("grid"), {"sample_rate", "duration"}, "grid");
            c.grid = j.at("grid").get<TimeGrid>();
        }
    } catch (const json::exception& e) {
        config_error(e.what());
    }
    c.snr_db = read_list(j, "snr_db", c.snr_db);
    read(j, "snr_sweep_depth_offset_m", c.snr_sweep_depth_offset, where);
    c.mismatch_m = read_list(j, "mismatch_m", c.mismatch_m);
    read(j, "mismatch_snr_db", c.mismatch_snr_db, where);
    c.gamma = read_list(j, "gamma", c.gamma);
    if (j.contains("methods")) {
        if (!j.at("methods").is_array())
            config_error("methods must be an array of names");
        c.methods.clear();
        for (const json& m : j.at("methods")) {
            if (!m.is_string())
                config_error("methods must be an array of names");
            c.methods.push_back(method_from_string(m.get<std::string>()));
        }
    }
    if (j.contains("trials")) {
        const json& t = j.at("trials");
        if (!t.is_number() || !is_integral(t.get<double>()))
            config_error("trials must be an integer");
        c.trials = t.get<int>();
    }
    read(j, "seed", c.seed, where);
    read(j, "output_dir", c.output_dir, where);
    read(j, "checkpoint", c.checkpoint, where);
    read(j, "dataset_dir", c.dataset_dir, where);
    read(j, "threads", c.threads, where);
    read(j, "timing", c.timing, where);
    if (j.contains("localizer"))
        c.localizer = localizer_from_json(j.at("localizer"), c.localizer);
    if (j.contains("training"))
        c.training = training_from_json(j.at("training"), c.training);
    if (j.contains("theorem"))
        c.theorem = theorem_from_json(j.at("theorem"), c.theorem);
    c.validate();
    return c;
}

json to_json(const ExperimentConfig& c) {
    json methods = json::array();
    for (Method m : c.methods)
        methods.push_back(to_string(m));
    return {{"environment", c.environment},
            {"source", c.source},
            {"pulse",
             {{"center_freq", c.pulse.center_freq},
              {"bandwidth", c.pulse.bandwidth},
              {"center_time", c.pulse.center_time}}},
            {"grid", c.grid},
            {"snr_db", c.snr_db},
            {"snr_sweep_depth_offset_m", c.snr_sweep_depth_offset},
            {"mismatch_m", c.mismatch_m},
            {"mismatch_snr_db", c.mismatch_snr_db},
            {"gamma", c.gamma},
            {"methods", methods},
            {"trials", c.trials},
            {"seed", c.seed},
            {"output_dir", c.output_dir},
            {"checkpoint", c.checkpoint},
            {"dataset_dir", c.dataset_dir},
            {"threads", c.threads},
            {"timing", c.timing},
            {"localizer", localizer_to_json(c.localizer)},
            {"training", training_to_json(c.training)},
            {"theorem", theorem_to_json(c.theorem)}};
}

ExperimentConfig load_config(const std::filesystem::path& path) {
    std::string text;
    try {
        text = read_text_file(path);
    } catch (const Error& e) {
        config_error(e.what());
    }
    return config_from_json(parse_json_text(text, path.string()));
}

std::filesystem::path resolve_data_path(const std::string& path) {
    std::filesystem::path p(path);
    if (p.is_relative())
        if (const char* dir = std::getenv("AQUALOC_DATA_DIR"); dir != nullptr && *dir != '\0')
            return std::filesystem::path(dir) / p;
    return p;
}

double rmse(const std::vector<SourceLocation>& estimates, const SourceLocation& truth) {
    if (estimates.empty())
        throw Error(ErrorCode::InvalidArgument, "rmse of an empty set");
    double sum = 0.0;
    for (const SourceLocation& p : estimates)
        sum += (p.x - truth.x) * (p.x - truth.x) + (p.z - truth.z) * (p.z - truth.z);
    return std::sqrt(sum / static_cast<double>(estimates.size()));
}

std::uint64_t trial_seed(std::uint64_t master, double cell, const std::string& method, int trial) {
    // +0.0 and -0.0 name the same cell
    const double key = cell == 0.0 ? 0.0 : cell;
    std::uint64_t s = mix_seed(master, std::bit_cast<std::uint64_t>(key));
    s = mix_seed(s, fnv1a(method));
    return mix_seed(s, static_cast<std::uint64_t>(trial));
}

SweepRow summarize(Method method, double snr_db, double mismatch_m, std::optional<double> gamma,
                   const std::vector<TrialOutcome>& outcomes, const SourceLocation& truth) {
    SweepRow row;
    row.method = method;
    row.snr_db = snr_db;
    row.mismatch_m = mismatch_m;
    row.gamma = gamma;
    row.trials = static_cast<int>(outcomes.size());
    std::vector<double> errors;
    for (const TrialOutcome& o : outcomes)
        if (o.converged)
            errors.push_back(std::hypot(o.estimate.x - truth.x, o.estimate.z - truth.z));
    row.conv_rate = outcomes.empty() ? 0.0 : static_cast<double>(errors.size()) / static_cast<double>(outcomes.size());
    row.flagged = row.conv_rate < 0.9;
    if (errors.empty()) {
        row.rmse_m = row.mean_err_m = row.ci_m = kNan;
        return row;
    }
    const double n = static_cast<double>(errors.size());
    double sum = 0.0;
    double sq = 0.0;
    for (double e : errors) {
        sum += e;
        sq += e * e;
    }
    row.rmse_m = std::sqrt(sq / n);
    row.mean_err_m = sum / n;
    double var = 0.0;
    for (double e : errors)
        var += (e - row.mean_err_m) * (e - row.mean_err_m);
    var = errors.size() > 1 ? var / (n - 1.0) : 0.0;
    row.ci_m = 1.96 * std::sqrt(var) / std::sqrt(n);
    return row;
}

namespace {

struct SweepContext {
    const ExperimentConfig& cfg;
    std::optional<Checkpoint> model;
    std::string checkpoint_hash;
    double energy_ref = 1.0;
    std::ostream* log = nullptr;
};

SweepContext make_context(const ExperimentConfig& cfg, std::ostream* log) {
    cfg.validate();
    SweepContext ctx{cfg, std::nullopt, "", 1.0, log};
    if (cfg.uses(Method::GblNn) || cfg.uses(Method::DaGbl)) {
        const std::filesystem::path path = resolve_data_path(cfg.checkpoint);
        if (!std::filesystem::exists(path))
            throw Error(ErrorCode::MissingCheckpoint, "checkpoint not found: " + path.string());
        const std::string text = read_text_file(path);
        ctx.model = checkpoint_from_string(text);
        ctx.checkpoint_hash = hex64(fnv1a(text));
        const Environment& e = ctx.model->meta.environment;
        if (e != cfg.environment)
            throw Error(ErrorCode::ConfigError, "checkpoint was trained for depth " + format_number(e.depth) +
                                                    " m, c " + format_number(e.sound_speed) + " m/s, z_r " +
                                                    format_number(e.receiver_depth) +
                                                    " m, which differs from the configured environment");
    }
    ctx.energy_ref = energy(synthesize_received(cfg.environment, cfg.source, cfg.pulse, cfg.grid));
    return ctx;
}

using TrialFn = std::function<TrialOutcome(int trial)>;

/// Runs the trials of one cell on a small thread pool; results land in
/// pre-assigned slots so the reduction never depends on scheduling.
std::vector<TrialOutcome> run_trials(int count, int threads, const TrialFn& fn) {
    std::vector<TrialOutcome> out(static_cast<std::size_t>(count));
    int workers = threads > 0 ? threads : static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
    workers = std::min(workers, count);
    std::atomic<int> next{0};
    std::vector<std::string> errors(static_cast<std::size_t>(workers));
    auto work = [&](int id) {
        try {
            for (int t = next++; t < count; t = next++)
                out[static_cast<std::size_t>(t)] = fn(t);
        } catch (const std::exception& e) {
            errors[static_cast<std::size_t>(id)] = e.what();
        }
    };
    if (workers <= 1) {
        work(0);
    } else {
        std::vector<std::thread> pool;
        for (int id = 0; id < workers; ++id)
            pool.emplace_back(work, id);
        for (std::thread& th : pool)
            th.join();
    }
    for (const std::string& e : errors)
        if (!e.empty())
            throw Error(ErrorCode::Divergence, "trial failed: " + e);
    return out;
}

/// One localization with fresh noise. Library errors of the estimator (a failed
/// TOA initialisation, say) make the trial non-converged rather than aborting
/// the sweep.
TrialOutcome one_trial(const SweepContext& ctx, Method method, std::optional<double> gamma, const Environment& test_env,
                       const SampledSignal& clean, double n0, std::uint64_t seed) {
    const ExperimentConfig& cfg = ctx.cfg;
    const auto t0 = std::chrono::steady_clock::now();
    TrialOutcome o;
    const SampledSignal r = add_awgn(clean, NoiseSpec{n0, seed});
    GblConfig g = cfg.localizer;
    g.energy_ref = ctx.energy_ref;
    try {
        // the matched model also knows the true environment for its TOA start
        const Environment& assumed = method == Method::GblMatched ? test_env : cfg.environment;
        const SourceLocation p0 = toa_init(r, cfg.pulse, assumed).initial;
        LocalizationResult res;
        if (method == Method::GblMatched) {
            res = gbl_matched(r, test_env, cfg.pulse, p0, g);
        } else if (method == Method::GblNn) {
            res = gbl(r, *ctx.model, p0, g);
        } else {
            DaConfig da;
            da.gamma = gamma.value_or(1.0);
            da.inner = g;
            res = da_gbl(*ctx.model, p0, r, da);
        }
        o.estimate = res.position;
        o.converged = res.converged && std::isfinite(res.position.x) && std::isfinite(res.position.z);
    } catch (const Error& e) {
        if (e.code() == ErrorCode::ConfigError || e.code() == ErrorCode::MissingCheckpoint)
            throw;
        o.converged = false;
    }
    o.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return o;
}

/// All rows for one cell (an SNR or a depth offset).
void run_cell(const SweepContext& ctx, double snr_db, double mismatch_m, double seed_cell,
              std::vector<SweepRow>& rows) {
    const ExperimentConfig& cfg = ctx.cfg;
    Environment test_env = cfg.environment;
    test_env.depth += mismatch_m;
    const SampledSignal clean = synthesize_received(test_env, cfg.source, cfg.pulse, cfg.grid);
    const double n0 = snr_to_n0(clean, db_to_linear(snr_db), cfg.pulse.bandwidth);

    for (Method m : cfg.methods) {
        if (m == Method::Crlb) {
            const auto t0 = std::chrono::steady_clock::now();
            SweepRow row;
            row.method = m;
            row.snr_db = snr_db;
            row.mismatch_m = mismatch_m;
            row.trials = 0;
            row.mean_err_m = kNan;
            row.ci_m = 0.0;
            try {
                row.rmse_m = crlb(test_env, cfg.source, cfg.pulse, n0, cfg.grid).rmse_bound;
            } catch (const Error& e) {
                if (e.code() != ErrorCode::UnidentifiableGeometry)
                    throw;
                row.rmse_m = kNan;
            }
            row.wall_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            rows.push_back(row);
            continue;
        }
        std::vector<std::optional<double>> gammas{std::nullopt};
        if (m == Method::DaGbl)
            gammas.assign(cfg.gamma.begin(), cfg.gamma.end());
        for (const std::optional<double>& gamma : gammas) {
            const auto t0 = std::chrono::steady_clock::now();
            const std::string name = to_string(m);
            const std::vector<TrialOutcome> outcomes = run_trials(cfg.trials, cfg.threads, [&](int t) {
                return one_trial(ctx, m, gamma, test_env, clean, n0, trial_seed(cfg.seed, seed_cell, name, t));
            });
            SweepRow row = summarize(m, snr_db, mismatch_m, gamma, outcomes, cfg.source);
            row.wall_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            if (ctx.log) {
                *ctx.log << name << " snr " << format_number(snr_db) << " dB, mismatch " << format_number(mismatch_m)
                         << " m";
                if (gamma)
                    *ctx.log << ", gamma " << format_number(*gamma);
                *ctx.log << ": rmse " << format_number(row.rmse_m) << " m, conv " << format_number(row.conv_rate)
                         << (row.flagged ? " [FLAGGED: convergence rate below 0.9]" : "") << "\n";
            }
            rows.push_back(row);
        }
    }
}

json make_manifest(const SweepContext& ctx, const std::string& sweep, const std::vector<SweepRow>& rows) {
    const ExperimentConfig& cfg = ctx.cfg;
    const json cj = to_json(cfg);
    json flagged = json::array();
    for (const SweepRow& r : rows)
        if (r.method != Method::Crlb && r.flagged)
            flagged.push_back({{"method", to_string(r.method)},
                               {"snr_db", r.snr_db},
                               {"mismatch_m", r.mismatch_m},
                               {"gamma", r.gamma ? json(*r.gamma) : json(nullptr)},
                               {"conv_rate", r.conv_rate}});
    json m;
    m["tool"] = "aqualoc";
    m["version"] = kVersion;
    m["sweep"] = sweep;
    m["config"] = cj;
    m["config_hash"] = hex64(fnv1a(cj.dump()));
    m["master_seed"] = cfg.seed;
    m["seed_rule"] = "mix(mix(mix(master, bits(cell)), fnv1a(method)), trial); cell is the SNR in dB or the depth offset in m";
    m["checkpoint"] = ctx.model ? json{{"path", cfg.checkpoint}, {"fnv1a", ctx.checkpoint_hash}} : json(nullptr);
    m["energy_ref"] = ctx.energy_ref;
    m["versions"] = {{"aqualoc", kVersion},
                     {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                                   std::to_string(EIGEN_MINOR_VERSION)},
                     {"json", std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." +
                                  std::to_string(NLOHMANN_JSON_VERSION_MINOR) + "." +
                                  std::to_string(NLOHMANN_JSON_VERSION_PATCH)},
#if defined(__VERSION__)
                     {"compiler", __VERSION__}
#else
                     {"compiler", "unknown"}
#endif
    };
    m["rows"] = rows.size();
    m["flagged_rows"] = flagged;
    m["csv_header"] = kSweepCsvHeader;
    m["wall_times_in_csv"] = cfg.timing;
    return m;
}

} // namespace

SweepResult run_snr_sweep(const ExperimentConfig& cfg, std::ostream* log) {
    const SweepContext ctx = make_context(cfg, log);
    SweepResult res;
    for (double snr : cfg.snr_db)
        run_cell(ctx, snr, cfg.snr_sweep_depth_offset, snr, res.rows);
    res.manifest = make_manifest(ctx, "snr", res.rows);
    return res;
}

SweepResult run_mismatch_sweep(const ExperimentConfig& cfg, std::ostream* log) {
    const SweepContext ctx = make_context(cfg, log);
    SweepResult res;
    for (double offset : cfg.mismatch_m)
        run_cell(ctx, cfg.mismatch_snr_db, offset, offset, res.rows);
    res.manifest = make_manifest(ctx, "mismatch", res.rows);
    return res;
}

std::string format_number(double v) {
    if (std::isnan(v))
        return "nan";
    if (std::isinf(v))
        return v > 0 ? "inf" : "-inf";
    if (v == 0.0)
        return "0";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return buf;
}

std::string sweep_csv(const std::vector<SweepRow>& rows, bool with_timing) {
    std::ostringstream os;
    os << kSweepCsvHeader << "\n";
    for (const SweepRow& r : rows)
        os << to_string(r.method) << ',' << format_number(r.snr_db) << ',' << format_number(r.mismatch_m) << ','
           << (r.gamma ? format_number(*r.gamma) : "nan") << ',' << r.trials << ',' << format_number(r.rmse_m) << ','
           << format_number(r.mean_err_m) << ',' << format_number(r.ci_m) << ',' << format_number(r.conv_rate) << ','
           << format_number(with_timing ? r.wall_s : 0.0) << "\n";
    return os.str();
}

std::vector<SweepRow> parse_sweep_csv(const std::string& text) {
    std::istringstream is(text);
    std::string line;
    if (!std::getline(is, line) || line != kSweepCsvHeader)
        throw Error(ErrorCode::CorruptPayload, "sweep CSV header does not match");
    std::vector<SweepRow> rows;
    while (std::getline(is, line)) {
        if (line.empty())
            continue;
        std::vector<std::string> f;
        std::stringstream ls(line);
        std::string cell;
        while (std::getline(ls, cell, ','))
            f.push_back(cell);
        if (f.size() != 10)
            throw Error(ErrorCode::CorruptPayload, "sweep CSV row has " + std::to_string(f.size()) + " fields");
        try {
            SweepRow r;
            r.method = method_from_string(f[0]);
            r.snr_db = std::stod(f[1]);
            r.mismatch_m = std::stod(f[2]);
            if (f[3] != "nan")
                r.gamma = std::stod(f[3]);
            r.trials = std::stoi(f[4]);
            r.rmse_m = std::stod(f[5]);
            r.mean_err_m = std::stod(f[6]);
            r.ci_m = std::stod(f[7]);
            r.conv_rate = std::stod(f[8]);
            r.wall_s = std::stod(f[9]);
            r.flagged = r.method != Method::Crlb && r.conv_rate < 0.9;
            rows.push_back(r);
        } catch (const std::logic_error& e) {
            throw Error(ErrorCode::CorruptPayload, std::string("bad sweep CSV row: ") + e.what());
        }
    }
    return rows;
}

} // namespace aqualoc

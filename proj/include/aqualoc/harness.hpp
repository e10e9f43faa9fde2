#ifndef AQUALOC_HARNESS_HPP
#define AQUALOC_HARNESS_HPP

#include "aqualoc/forward_model.hpp"
#include "aqualoc/localizer.hpp"
#include "aqualoc/serialization.hpp"
#include "aqualoc/theorylab.hpp"

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace aqualoc {

inline constexpr const char* kVersion = "0.1.0";

inline constexpr const char* kSweepCsvHeader =
    "method,snr_db,mismatch_m,gamma,trials,rmse_m,mean_err_m,ci_m,conv_rate,wall_s";

enum class Method { GblMatched, GblNn, DaGbl, Crlb };

std::string to_string(Method m);
Method method_from_string(const std::string& name);

/// Dataset and pre-training settings used by gen-data and train.
struct TrainingSetup {
    std::size_t n_train = 256;
    Region region;                 // where sources are localized
    double pad_fraction = 0.05;    // training locations cover the padded region
    Sampling sampling = Sampling::Lattice;
    std::uint64_t dataset_seed = 7;
    std::string architecture = "standard";  // or "reduced"
    TrainConfig train;

    PlnArchitecture arch() const;
};

struct TheoremSetup {
    std::string checkpoint = "reduced.json";
    double gamma = 10.0;
    double depth_offset = -0.05;  // m
    TheoremConfig lab;
};

struct ExperimentConfig {
    Environment environment;  // training environment
    SourceLocation source;
    AnalyticPulse pulse = make_pulse(750.0, 500.0, 0.05);
    TimeGrid grid{4000.0, 2.0};
    std::vector<double> snr_db{0, 5, 10, 15, 20, 25, 30};
    double snr_sweep_depth_offset = 0.0;  // m, test depth = training depth + this in sweep-snr
    std::vector<double> mismatch_m{-20, -10, -5, -2, -1, -0.5, -0.25, 0.25, 0.5, 1, 2, 5, 10, 20};
    double mismatch_snr_db = 20.0;
    std::vector<double> gamma{0.0, 0.1, 1.0, 10.0};
    std::vector<Method> methods{Method::GblMatched, Method::GblNn, Method::DaGbl, Method::Crlb};
    int trials = 100;
    std::uint64_t seed = 0;
    std::string output_dir = "out";
    std::string checkpoint = "checkpoint.json";
    std::string dataset_dir = "dataset";
    int threads = 0;       // 0: hardware concurrency
    bool timing = false;   // write measured wall times into the CSV (breaks byte identity)
    GblConfig localizer;
    TrainingSetup training;
    TheoremSetup theorem;

    void validate() const;
    bool uses(Method m) const;
};

/// Unknown keys are rejected so typos surface as config errors.
ExperimentConfig config_from_json(const json& j);
json to_json(const ExperimentConfig& cfg);
/// Reads and parses a config file; every failure is a ConfigError.
ExperimentConfig load_config(const std::filesystem::path& path);

/// Relative paths resolve against AQUALOC_DATA_DIR when it is set.
std::filesystem::path resolve_data_path(const std::string& path);

struct SweepRow {
    Method method = Method::GblMatched;
    double snr_db = 0.0;
    double mismatch_m = 0.0;
    std::optional<double> gamma;  // da-gbl only
    int trials = 0;
    double rmse_m = 0.0;
    double mean_err_m = 0.0;
    double ci_m = 0.0;
    double conv_rate = 1.0;
    double wall_s = 0.0;
    bool flagged = false;  // conv_rate < 0.9
};

/// sqrt(mean ||p_hat - p||^2).
double rmse(const std::vector<SourceLocation>& estimates, const SourceLocation& truth);

/// Per-trial seed from the master seed, the cell coordinate (SNR or mismatch),
/// the method name and the trial index.
std::uint64_t trial_seed(std::uint64_t master, double cell, const std::string& method, int trial);

struct TrialOutcome {
    SourceLocation estimate;
    bool converged = false;
    double seconds = 0.0;
};

/// Reduction of one cell: non-converged trials are left out of the error
/// statistics and counted in conv_rate.
SweepRow summarize(Method method, double snr_db, double mismatch_m, std::optional<double> gamma,
                   const std::vector<TrialOutcome>& outcomes, const SourceLocation& truth);

struct SweepResult {
    std::vector<SweepRow> rows;
    json manifest;
};

/// Every SNR in cfg.snr_db, test depth shifted by snr_sweep_depth_offset.
SweepResult run_snr_sweep(const ExperimentConfig& cfg, std::ostream* log = nullptr);
/// Every depth offset at cfg.mismatch_snr_db.
SweepResult run_mismatch_sweep(const ExperimentConfig& cfg, std::ostream* log = nullptr);

std::string format_number(double v);
std::string sweep_csv(const std::vector<SweepRow>& rows, bool with_timing);
std::vector<SweepRow> parse_sweep_csv(const std::string& text);

/// Checks run by `aqualoc selftest`; returns the number of failures.
int run_selftest(std::ostream& out);

/// Entry point of the command-line tool; returns the process exit code.
int cli_main(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

} // namespace aqualoc

#endif

#ifndef AQUALOC_LOCALIZER_HPP
#define AQUALOC_LOCALIZER_HPP

#include "aqualoc/diff.hpp"
#include "aqualoc/environment.hpp"
#include "aqualoc/forward_model.hpp"
#include "aqualoc/signal.hpp"

#include <Eigen/Dense>

#include <optional>
#include <string>
#include <vector>

namespace aqualoc {

/// Box the optimizers keep the source inside: x in [1 m, 5 km], z within the
/// column with a 0.5 m margin at surface and bottom.
Region search_bounds(const Environment& env);

struct ToaConfig {
    double threshold_mad = 3.0;       // peaks below threshold_mad * MAD(envelope) are ignored
    double min_relative_peak = 0.02;  // and so are peaks below this fraction of the largest
    double min_separation = 0.0;      // s; 0 means 2 / B
    int max_iterations = 50;          // Levenberg-Marquardt on the delay equations
};

struct ToaEstimate {
    std::vector<double> times;       // s, strictly increasing
    std::vector<double> amplitudes;  // signed matched-filter peak values
    SourceLocation initial;
    double residual = 0.0;  // rms misfit of the delay equations, m
};

/// Matched filter, peak picking and a least-squares fit of the image-source
/// delay equations under `assumed`.
ToaEstimate toa_init(const SampledSignal& r, const AnalyticPulse& pulse, const Environment& assumed,
                     const ToaConfig& cfg = {});

/// Fixed and BarzilaiBorwein are preconditioned first-order rules; GaussNewton
/// takes Levenberg-Marquardt steps built from the ray-length Jacobian.
enum class StepRule { Fixed, BarzilaiBorwein, GaussNewton };
std::string to_string(StepRule rule);
StepRule step_rule_from_string(const std::string& name);

struct GblConfig {
    int max_iterations = 500;
    StepRule step_rule = StepRule::GaussNewton;
    /// Base rates in scaled coordinates, p = position_scale .* u. For GaussNewton
    /// they only set the shape of the damping term.
    double position_rate = 0.1;
    double weight_rate = 1e-3;
    Eigen::Vector2d position_scale{1.0, 3.0};
    double backtrack = 0.5;
    double armijo = 1e-4;
    int max_backtracks = 60;
    double grad_rel_tol = 1e-8;
    double grad_abs_tol = 1e-12;
    double step_tol = 1e-4;  // m, on the position step
    /// The data term is divided by this energy (J s); 1 keeps the plain integral.
    double energy_ref = 1.0;
    /// Optional coarse-to-fine stages: widths (s) of Gaussian kernels applied
    /// to both the data and the pulse before the final fit on the raw data.
    /// Widens the basin when the start is more than a carrier period off.
    std::vector<double> continuation;
    std::optional<Region> bounds;

    void validate() const;
};

enum class ExitReason { GradientTolerance, StepTolerance, MaxIterations, LineSearchFailed };
std::string to_string(ExitReason reason);

struct LocalizationResult {
    SourceLocation position;
    std::optional<ModelParams> adapted;  // w-hat, DA only
    double loss = 0.0;
    int iterations = 0;
    bool converged = false;  // stopped on the gradient or step tolerance
    ExitReason exit = ExitReason::MaxIterations;
    double grad_norm = 0.0;
    double grad_tolerance = 0.0;
    std::vector<double> loss_history;  // accepted iterates, starting point first
};

/// Data term int (r - f)^2 dt / energy_ref for a set of ray lengths.
double data_term(const MisfitTarget& target, const std::array<double, 3>& lengths, double sound_speed,
                 const AnalyticPulse& pulse, double energy_ref = 1.0);

/// GBL with the frozen PLN of `model`.
LocalizationResult gbl(const SampledSignal& r, const Checkpoint& model, const SourceLocation& p0, const GblConfig& cfg);

/// GBL with the exact image-source lengths of `env` (the matched model).
LocalizationResult gbl_matched(const SampledSignal& r, const Environment& env, const AnalyticPulse& pulse,
                               const SourceLocation& p0, const GblConfig& cfg);

/// GBL loss over p = (x, z) as a differentiable program (PLN model).
LossProgram gbl_loss_program(const SampledSignal& r, const ModelParams& model, double energy_ref = 1.0);

struct DaConfig {
    double gamma = 1.0;
    bool adapt_sound_speed = false;
    bool adapt_weights = true;
    GblConfig inner;

    void validate() const;
};

/// Flat layout of the DA unknowns: adapted segments of w (PLN weights, then
/// "c" when adapt_sound_speed) followed by "p" (2 x 1).
Layout da_layout(const ModelParams& w, const DaConfig& cfg);
Eigen::VectorXd da_vector(const ModelParams& w, const SourceLocation& p, const DaConfig& cfg);

/// int (r - f_w(t, p))^2 dt / energy_ref + gamma/2 ||w - w_tr||^2 over the
/// adapted segments.
double da_loss(const ModelParams& w, const SourceLocation& p, const SampledSignal& r, const ModelParams& w_tr,
               double gamma, bool adapt_sound_speed = false, double energy_ref = 1.0);

LossProgram da_loss_program(const SampledSignal& r, const ModelParams& w_tr, const DaConfig& cfg);

/// Joint descent over [w; p] from [w_tr; p0].
LocalizationResult da_gbl(const Checkpoint& w_tr, const SourceLocation& p0, const SampledSignal& r,
                          const DaConfig& cfg);

/// Columns d f / d x_s and d f / d z_s of the noiseless image-source signal.
Eigen::MatrixX2d signal_sensitivity(const Environment& env, const SourceLocation& p, const AnalyticPulse& pulse,
                                    const TimeGrid& grid);

struct CrlbResult {
    Eigen::Matrix2d fim;
    double rmse_bound = 0.0;  // m
};

/// FIM = (2 / N0) int df/dp df/dp^T dt, bound = sqrt(trace(FIM^-1)).
CrlbResult crlb(const Environment& env, const SourceLocation& p, const AnalyticPulse& pulse, double n0,
                const TimeGrid& grid);

} // namespace aqualoc

#endif

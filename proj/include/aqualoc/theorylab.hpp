#ifndef AQUALOC_THEORYLAB_HPP
#define AQUALOC_THEORYLAB_HPP

#include "aqualoc/localizer.hpp"
#include "aqualoc/serialization.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

namespace aqualoc {

/// Offset of the test environment from the training one.
struct EnvPerturbation {
    double depth = 0.0;        // m
    double sound_speed = 0.0;  // m/s

    double norm() const { return std::hypot(depth, sound_speed); }
    Environment apply(const Environment& env) const;
};

/// The adaptation problem at a fixed source: noiseless data A(e, p_s, .) and
/// L_DA around w_tr. The data term uses da.inner.energy_ref as given (1 keeps
/// the plain integral).
struct AdaptationProblem {
    Checkpoint w_tr;
    Environment env;  // e_tr
    SourceLocation source;
    TimeGrid grid;
    double gamma = 10.0;
    DaConfig da;  // gamma is taken from this struct

    DaConfig config() const;
    SampledSignal data(const EnvPerturbation& eps) const;
    Eigen::VectorXd start(const SourceLocation& p0) const;
    /// G(v, e_tr + eps, p_s) = grad_v L_DA.
    Eigen::VectorXd grad(const Eigen::VectorXd& v, const EnvPerturbation& eps) const;
    /// Gamma from [w_tr; p0] on the data of e_tr + eps.
    LocalizationResult adapt(const SourceLocation& p0, const EnvPerturbation& eps) const;
    Eigen::VectorXd adapted_vector(const LocalizationResult& res) const;
};

/// Gradient field over some coordinates u.
using GradField = std::function<Eigen::VectorXd(const Eigen::VectorXd& u)>;

/// Symmetric finite-difference Hessian (columns from central differences of
/// the gradient, then symmetrized). `asymmetry` receives
/// ||H - H^T||_inf / ||H||_inf before symmetrization.
Eigen::MatrixXd fd_hessian(const GradField& grad, const Eigen::VectorXd& at, double step, double* asymmetry = nullptr);

struct LambdaEstimate {
    double lambda = 0.0;  // smallest eigenvalue over the sampled points
    double max_asymmetry = 0.0;
    std::vector<double> per_point;
    Eigen::MatrixXd hessian_at_center;
};

/// Smallest Hessian eigenvalue over the centre and count - 1 uniform samples
/// of the cube of half-width sigma.
LambdaEstimate estimate_lambda(const GradField& grad, const Eigen::VectorXd& center, double sigma, int count,
                               double step, std::uint64_t seed);

struct LipschitzSample {
    int point = 0;  // 0 is the centre
    EnvPerturbation eps;
    double ratio = 0.0;
};

struct LipschitzEstimate {
    double lipschitz = 0.0;
    LipschitzSample argmax;
    std::vector<LipschitzSample> samples;
    /// Largest ratio(eps) / ratio(2 eps) or its inverse over the paired probes.
    double two_scale_ratio = 1.0;
};

using PerturbedGradField = std::function<Eigen::VectorXd(const Eigen::VectorXd& u, const EnvPerturbation& eps)>;

/// max ||G(u, e + eps) - G(u, e)|| / ||eps|| over the centre plus count - 1
/// cube samples and every perturbation in `probes` (each probed at eps and 2 eps).
LipschitzEstimate estimate_lipschitz(const PerturbedGradField& grad, const Eigen::VectorXd& center, double sigma,
                                     int count, const std::vector<EnvPerturbation>& probes, std::uint64_t seed);

struct XiEstimate {
    double xi = 0.0;
    Eigen::VectorXd xi_per_coord;
    Eigen::VectorXd direction;  // H^-1 1
    double g0_norm = 0.0;       // ||g(0)||
    double gprime_max_dev = 0.0;  // max_i |g'(0)_i - 1|
};

/// Second differences of g(kappa) = G(center + kappa H^-1 1) on an
/// evenly spaced kappa grid over [0, sigma].
XiEstimate estimate_xi(const GradField& grad, const Eigen::VectorXd& center, const Eigen::MatrixXd& hessian,
                       double sigma, int kappa_points, double step);

struct TheoremConfig {
    double sigma = 0.1;  // starting cube half-width in normalized coordinates
    int max_sigma_halvings = 40;
    int kappa_points = 33;
    double fd_step = 1e-4;  // relative to the cube half-width
    double raw_fd_step = 1e-6;  // steps of the Hessian that sets the coordinates
    int convexity_samples = 8;
    int lipschitz_samples = 8;
    /// Depth probes for the Lipschitz sweep, m; each is also probed at twice its size.
    std::vector<double> lipschitz_depths{-2.0, -0.5, -0.125, -0.03125, 0.03125, 0.125, 0.5, 2.0};
    std::uint64_t seed = 0;

    void validate() const;
};

struct TheoremReport {
    // inputs
    double gamma = 0.0;
    EnvPerturbation eps;
    SourceLocation source;
    SourceLocation initial;
    int n_w = 0;
    int n_p = 2;
    TheoremConfig config;
    // estimates (sample based)
    double sigma = 0.0;  // cube half-width actually used
    std::vector<std::pair<double, double>> sigma_trials;  // (sigma, lambda) per attempt
    double lambda = 0.0;
    double lipschitz = 0.0;
    double xi = 0.0;
    double theta = 0.0;
    double rho_cube = 0.0;
    double rho_limit = 0.0;  // theta / sqrt(lambda)
    double epsilon_budget = 0.0;
    double bound = 0.0;
    std::vector<double> lambda_per_point;  // centre first
    LipschitzSample lipschitz_argmax;
    std::vector<LipschitzSample> lipschitz_samples;
    double hessian_asymmetry = 0.0;
    double lipschitz_two_scale = 0.0;
    double g0_norm = 0.0;
    double g0_tolerance = 0.0;
    double gprime_max_dev = 0.0;
    double v0_grad_norm = 0.0;
    bool v0_converged = false;
    // perturbed run
    bool perturbed_run = false;
    bool perturbed_converged = false;
    double displacement = 0.0;
    double min_plus = 0.0;   // min_i G_i(v+, e + eps)
    double max_minus = 0.0;  // max_i G_i(v-, e + eps)
    // verdicts
    bool convex = false;            // lambda > 0
    bool within_budget = false;     // ||eps|| <= epsilon_budget
    bool stationary = false;        // g(0) ~ 0
    bool identity = false;          // g'(0) ~ 1
    bool rho_ok = false;            // rho_cube <= rho_limit (1% slack)
    bool displacement_ok = false;
    bool signs_ok = false;
    bool pass = false;
    std::string verdict;  // "pass", "fail", "not-applicable" or "budget-exceeded"
    std::vector<std::string> notes;
};

/// Full numerical check of the displacement bound for one perturbation.
TheoremReport verify_theorem(const AdaptationProblem& problem, const SourceLocation& p0, const EnvPerturbation& eps,
                             const TheoremConfig& cfg);

json to_json(const TheoremReport& report);

} // namespace aqualoc

#endif

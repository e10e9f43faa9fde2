#include "aqualoc/localizer.hpp"

#include "aqualoc/error.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <numbers>

namespace aqualoc {

using Eigen::MatrixXd;
using Eigen::VectorXd;

Region search_bounds(const Environment& env) {
    return {1.0, 5000.0, 0.5, env.depth - 0.5};
}

// ---------------------------------------------------------------- TOA

namespace {

double median_of(std::vector<double> v) {
    if (v.empty())
        return 0.0;
    const auto mid = v.begin() + static_cast<std::ptrdiff_t>(v.size() / 2);
    std::nth_element(v.begin(), mid, v.end());
    return *mid;
}

struct Peak {
    double time = 0.0;
    double amplitude = 0.0;
    double strength = 0.0;
};

// Matched filter with an in-phase and a quadrature template; peaks are picked
// on the envelope.
std::vector<Peak> pick_peaks(const SampledSignal& r, const AnalyticPulse& pulse, const ToaConfig& cfg) {
    const double dt = r.grid.dt();
    const auto reach = static_cast<Eigen::Index>(std::ceil(pulse.support_halfwidth() / dt));
    const Eigen::Index taps = 2 * reach + 1;
    VectorXd in_phase(taps);
    VectorXd quadrature(taps);
    const double omega = 2.0 * std::numbers::pi * pulse.center_freq;
    for (Eigen::Index j = -reach; j <= reach; ++j) {
        const double u = static_cast<double>(j) * dt;
        const double g = pulse.amplitude * std::exp(-0.5 * u * u / (pulse.envelope_sigma * pulse.envelope_sigma));
        in_phase[j + reach] = g * std::cos(omega * u);
        quadrature[j + reach] = g * std::sin(omega * u);
    }
    const Eigen::Index n = r.values.size();
    VectorXd ci = VectorXd::Zero(n);
    VectorXd envelope = VectorXd::Zero(n);
    for (Eigen::Index m = 0; m < n; ++m) {
        const Eigen::Index lo = std::max<Eigen::Index>(0, m - reach);
        const Eigen::Index hi = std::min<Eigen::Index>(n - 1, m + reach);
        const auto seg = r.values.segment(lo, hi - lo + 1);
        const double a = seg.dot(in_phase.segment(lo - m + reach, hi - lo + 1));
        const double b = seg.dot(quadrature.segment(lo - m + reach, hi - lo + 1));
        ci[m] = a;
        envelope[m] = std::hypot(a, b);
    }

    std::vector<double> env_values(envelope.data(), envelope.data() + n);
    const double med = median_of(env_values);
    for (double& e : env_values)
        e = std::abs(e - med);
    const double threshold = std::max(cfg.threshold_mad * median_of(env_values),
                                      cfg.min_relative_peak * envelope.maxCoeff());
    const double separation = cfg.min_separation > 0.0 ? cfg.min_separation : 2.0 / pulse.bandwidth;
    const auto guard = static_cast<Eigen::Index>(std::ceil(separation / dt - 1e-9));

    std::vector<Peak> peaks;
    std::vector<char> blocked(static_cast<std::size_t>(n), 0);
    while (peaks.size() < 3) {
        Eigen::Index best = -1;
        for (Eigen::Index m = 0; m < n; ++m)
            if (!blocked[static_cast<std::size_t>(m)] && (best < 0 || envelope[m] > envelope[best]))
                best = m;
        if (best < 0 || !(envelope[best] > threshold) || envelope[best] <= 0.0)
            break;
        double offset = 0.0;
        if (best > 0 && best + 1 < n) {
            const double em = envelope[best - 1];
            const double e0 = envelope[best];
            const double ep = envelope[best + 1];
            const double curv = em - 2.0 * e0 + ep;
            if (curv < 0.0)
                offset = std::clamp(0.5 * (em - ep) / curv, -0.5, 0.5);
        }
        peaks.push_back({(static_cast<double>(best) + offset) * dt - pulse.center_time, ci[best], envelope[best]});
        for (Eigen::Index m = std::max<Eigen::Index>(0, best - guard); m <= std::min(n - 1, best + guard); ++m)
            blocked[static_cast<std::size_t>(m)] = 1;
    }
    std::sort(peaks.begin(), peaks.end(), [](const Peak& a, const Peak& b) { return a.time < b.time; });
    return peaks;
}

struct DelayFit {
    SourceLocation p;
    double cost = std::numeric_limits<double>::infinity();
};

// Levenberg-Marquardt on sum_i (l_i(x, z) - c t_i)^2.
DelayFit fit_delays(const Environment& env, const std::vector<PathSpec>& paths, const std::vector<double>& ranges,
                    SourceLocation start, const Region& bounds, int max_iterations) {
    auto residual = [&](const SourceLocation& p, Eigen::VectorXd& res, Eigen::MatrixX2d* jac) {
        res.resize(static_cast<Eigen::Index>(paths.size()));
        if (jac)
            jac->resize(res.size(), 2);
        for (std::size_t i = 0; i < paths.size(); ++i) {
            res[static_cast<Eigen::Index>(i)] = path_length(env, p, paths[i]) - ranges[i];
            if (jac)
                jac->row(static_cast<Eigen::Index>(i)) = path_length_gradient(env, p, paths[i]).transpose();
        }
        return res.squaredNorm();
    };
    auto clamp = [&](SourceLocation p) {
        p.x = std::clamp(p.x, bounds.x_min, bounds.x_max);
        p.z = std::clamp(p.z, bounds.z_min, bounds.z_max);
        return p;
    };
    SourceLocation p = clamp(start);
    VectorXd res;
    Eigen::MatrixX2d jac;
    double cost = residual(p, res, &jac);
    double lambda = 1e-3;
    for (int it = 0; it < max_iterations && cost > 1e-20; ++it) {
        const Eigen::Matrix2d jtj = jac.transpose() * jac;
        const Eigen::Vector2d jtr = jac.transpose() * res;
        bool improved = false;
        for (int k = 0; k < 30; ++k) {
            Eigen::Matrix2d a = jtj;
            a.diagonal() += lambda * jtj.diagonal().cwiseMax(1e-12);
            const Eigen::Vector2d step = a.ldlt().solve(-jtr);
            const SourceLocation trial = clamp({p.x + step[0], p.z + step[1]});
            VectorXd trial_res;
            const double trial_cost = residual(trial, trial_res, nullptr);
            if (trial_cost < cost) {
                p = trial;
                lambda = std::max(lambda / 3.0, 1e-12);
                improved = true;
                break;
            }
            lambda *= 4.0;
        }
        if (!improved)
            break;
        const double previous = cost;
        cost = residual(p, res, &jac);
        if (previous - cost <= 1e-14 * (1.0 + previous))
            break;
    }
    return {p, cost};
}

} // namespace

ToaEstimate toa_init(const SampledSignal& r, const AnalyticPulse& pulse, const Environment& assumed,
                     const ToaConfig& cfg) {
    assumed.validate();
    const std::vector<Peak> peaks = pick_peaks(r, pulse, cfg);
    if (peaks.size() < 2)
        throw Error(ErrorCode::InitFailure,
                    "matched filter found " + std::to_string(peaks.size()) + " arrival(s), need at least 2");

    const Region bounds = search_bounds(assumed);
    const double c = assumed.sound_speed;
    const double zr = assumed.receiver_depth;
    const double d_range = c * peaks[0].time;

    // Label hypotheses for the later arrivals: (surface, bottom) or (bottom, surface).
    std::vector<std::vector<PathSpec>> hypotheses;
    if (peaks.size() == 2)
        hypotheses.push_back({{0, 0}, {1, 0}});
    else
        hypotheses = {{{0, 0}, {1, 0}, {0, 1}}, {{0, 0}, {0, 1}, {1, 0}}};

    std::vector<double> ranges;
    for (const auto& pk : peaks)
        ranges.push_back(c * pk.time);

    DelayFit best;
    for (const auto& paths : hypotheses) {
        // Starting depths: closed forms from the direct/surface and
        // direct/bottom pairs, plus a sweep down the column.
        std::vector<double> depths;
        for (std::size_t i = 1; i < paths.size(); ++i) {
            const double diff = ranges[i] * ranges[i] - d_range * d_range;
            if (paths[i].surface_bounces == 1)
                depths.push_back(diff / (4.0 * zr));
            else
                depths.push_back(assumed.depth - diff / (4.0 * (assumed.depth - zr)));
        }
        for (int k = 1; k < 10; ++k)
            depths.push_back(assumed.depth * k / 10.0);
        for (double z0 : depths) {
            if (!std::isfinite(z0))
                continue;
            z0 = std::clamp(z0, bounds.z_min, bounds.z_max);
            const double x0 = std::sqrt(std::max(1.0, d_range * d_range - (z0 - zr) * (z0 - zr)));
            const DelayFit fit = fit_delays(assumed, paths, ranges, {x0, z0}, bounds, cfg.max_iterations);
            if (fit.cost < best.cost)
                best = fit;
        }
    }

    ToaEstimate out;
    for (const auto& pk : peaks) {
        out.times.push_back(pk.time);
        out.amplitudes.push_back(pk.amplitude);
    }
    out.initial = best.p;
    out.residual = std::sqrt(best.cost / static_cast<double>(peaks.size()));
    return out;
}

// ---------------------------------------------------------------- optimizer

std::string to_string(StepRule rule) {
    switch (rule) {
    case StepRule::Fixed: return "fixed";
    case StepRule::BarzilaiBorwein: return "bb";
    case StepRule::GaussNewton: return "gauss-newton";
    }
    return "unknown";
}

StepRule step_rule_from_string(const std::string& name) {
    if (name == "fixed")
        return StepRule::Fixed;
    if (name == "bb")
        return StepRule::BarzilaiBorwein;
    if (name == "gauss-newton")
        return StepRule::GaussNewton;
    throw Error(ErrorCode::InvalidArgument, "unknown step rule '" + name + "'");
}

std::string to_string(ExitReason reason) {
    switch (reason) {
    case ExitReason::GradientTolerance: return "gradient-tolerance";
    case ExitReason::StepTolerance: return "step-tolerance";
    case ExitReason::MaxIterations: return "max-iterations";
    case ExitReason::LineSearchFailed: return "line-search-failed";
    }
    return "unknown";
}

void GblConfig::validate() const {
    if (max_iterations < 0 || !(position_rate > 0.0) || !(weight_rate > 0.0) || !(position_scale.array() > 0.0).all())
        throw Error(ErrorCode::InvalidArgument, "GBL rates, scales and iteration cap must be positive");
    if (!(backtrack > 0.0 && backtrack < 1.0) || !(armijo > 0.0 && armijo < 1.0) || max_backtracks < 1)
        throw Error(ErrorCode::InvalidArgument, "GBL line-search parameters out of range");
    if (!(grad_rel_tol > 0.0) || grad_abs_tol < 0.0 || !(step_tol > 0.0))
        throw Error(ErrorCode::InvalidArgument, "GBL tolerances must be positive");
    if (!(energy_ref > 0.0))
        throw Error(ErrorCode::InvalidArgument, "reference energy must be positive");
    for (double w : continuation)
        if (!(w > 0.0) || !std::isfinite(w))
            throw Error(ErrorCode::InvalidArgument, "continuation kernel widths must be positive");
}

void DaConfig::validate() const {
    if (!(gamma >= 0.0))
        throw Error(ErrorCode::InvalidArgument, "gamma must be non-negative");
    inner.validate();
}

namespace {

// Sampled df/dq for q = (l_d, l_s, l_b, c).
Eigen::MatrixX4d feature_sensitivity(const std::array<double, 3>& lengths, double c, const AnalyticPulse& pulse,
                                     const TimeGrid& grid) {
    const double fs = grid.sample_rate;
    const Eigen::Index n = grid.size();
    const double half = pulse.support_halfwidth();
    Eigen::MatrixX4d out = Eigen::MatrixX4d::Zero(n, 4);
    for (std::size_t i = 0; i < 3; ++i) {
        const double rho = reflection_coeff(kThreeRayPaths[i]);
        const double l = lengths[i];
        const double tau = l / c;
        const double centre = tau + pulse.center_time;
        const auto lo = std::max<Eigen::Index>(0, static_cast<Eigen::Index>(std::ceil((centre - half) * fs)));
        const auto hi = std::min<Eigen::Index>(n - 1, static_cast<Eigen::Index>(std::floor((centre + half) * fs)));
        for (Eigen::Index k = lo; k <= hi; ++k) {
            double s = 0.0;
            double ds = 0.0;
            eval_pulse_with_dt(pulse, grid.time(k) - tau, s, ds);
            // f_i = rho/l s(t - l/c)
            out(k, static_cast<Eigen::Index>(i)) += -rho / (l * l) * s - rho / (l * c) * ds;
            out(k, 3) += rho / (c * c) * ds;
        }
    }
    return out;
}

struct Eval {
    double f = 0.0;
    VectorXd g;
    MatrixXd jac;         // 4 x n, dq/dv
    Eigen::Matrix4d hq;   // Gauss-Newton Hessian of the data term in q
    VectorXd reg;         // diagonal curvature of the regularizer
};

using Objective = std::function<Eval(const VectorXd& v, bool curvature)>;

// Data term and its q-gradient (and q-Hessian when asked) for one target.
void add_data_term(Eval& ev, const MisfitTarget& target, const TimeGrid& grid, const std::array<double, 3>& lengths,
                   double c, const AnalyticPulse& pulse, double energy_ref, bool curvature,
                   Eigen::Vector4d& grad_q) {
    const MisfitEval m = evaluate_misfit(target, lengths, c, pulse, true);
    ev.f += m.value / energy_ref;
    grad_q.setZero();
    for (std::size_t i = 0; i < 3; ++i) {
        const double rho = reflection_coeff(kThreeRayPaths[i]);
        const auto k = static_cast<Eigen::Index>(i);
        grad_q[k] = (m.d_alpha[i] * (-rho / (lengths[i] * lengths[i])) + m.d_tau[i] / c) / energy_ref;
        grad_q[3] -= m.d_tau[i] * lengths[i] / (c * c) / energy_ref;
    }
    if (curvature) {
        const Eigen::MatrixX4d sens = feature_sensitivity(lengths, c, pulse, grid);
        ev.hq = (2.0 * target.spacing / energy_ref) * (sens.transpose() * sens);
    }
}

struct Problem {
    VectorXd start;
    VectorXd precond;  // diagonal; first-order steps are -t * precond .* grad
    Eigen::Index position_offset = 0;
    Region bounds;
    Objective objective;
};

struct Solution {
    VectorXd v;
    LocalizationResult result;
};

// Solves (A + U U^T) d = -g with A diagonal via Woodbury; U = jac^T hq^(1/2).
VectorXd damped_step(const Eval& ev, const VectorXd& a) {
    const Eigen::SelfAdjointEigenSolver<Eigen::Matrix4d> eig(ev.hq);
    const Eigen::Vector4d root = eig.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    const MatrixXd u = ev.jac.transpose() * (eig.eigenvectors() * root.asDiagonal());
    const MatrixXd a_inv_u = u.array().colwise() / a.array();
    const VectorXd a_inv_g = ev.g.array() / a.array();
    const Eigen::Matrix4d small = Eigen::Matrix4d::Identity() + u.transpose() * a_inv_u;
    return -(a_inv_g - a_inv_u * small.ldlt().solve(u.transpose() * a_inv_g));
}

// Projected descent with sufficient-decrease acceptance. First-order rules
// backtrack along -P g from a base step of 1 (fixed) or the Barzilai-Borwein
// step; Gauss-Newton raises the damping until the step is accepted.
Solution minimize(const Problem& prob, const GblConfig& cfg) {
    auto project = [&](VectorXd& v) {
        v[prob.position_offset] = std::clamp(v[prob.position_offset], prob.bounds.x_min, prob.bounds.x_max);
        v[prob.position_offset + 1] = std::clamp(v[prob.position_offset + 1], prob.bounds.z_min, prob.bounds.z_max);
    };
    const bool newton = cfg.step_rule == StepRule::GaussNewton;
    Solution sol;
    LocalizationResult& res = sol.result;
    VectorXd v = prob.start;
    project(v);
    Eval ev = prob.objective(v, newton);
    if (!std::isfinite(ev.f) || !ev.g.allFinite())
        throw Error(ErrorCode::NumericOverflow, "localization loss is not finite at the starting point");
    res.loss_history.push_back(ev.f);
    res.grad_tolerance = std::max(cfg.grad_rel_tol * ev.g.norm(), cfg.grad_abs_tol);
    res.exit = ExitReason::MaxIterations;

    const Eigen::Index n = v.size();
    const Eigen::Index pos = prob.position_offset;
    const VectorXd metric = prob.precond.cwiseInverse();
    VectorXd s = VectorXd::Zero(n);
    VectorXd y = VectorXd::Zero(n);
    bool have_pair = false;
    double t_last = 1.0;
    double mu = -1.0;

    if (ev.g.norm() <= res.grad_tolerance) {
        res.exit = ExitReason::GradientTolerance;
    } else {
        for (int it = 0; it < cfg.max_iterations; ++it) {
            bool accepted = false;
            bool first_try = false;  // a shortened step says nothing about convergence
            VectorXd v_try;
            Eval ev_try;
            if (newton) {
                if (mu < 0.0) {
                    const VectorXd diag = (ev.jac.transpose() * ev.hq * ev.jac).diagonal();
                    mu = std::max(1e-8 * (diag.array() * prob.precond.array()).maxCoeff(), 1e-15);
                }
                for (int k = 0; k < cfg.max_backtracks; ++k, mu /= cfg.backtrack) {
                    v_try = v + damped_step(ev, ev.reg + mu * metric);
                    project(v_try);
                    const double decrease = ev.g.dot(v_try - v);
                    if (!(decrease < 0.0))
                        continue;
                    ev_try = prob.objective(v_try, true);
                    if (std::isfinite(ev_try.f) && ev_try.g.allFinite() && ev_try.f <= ev.f + cfg.armijo * decrease) {
                        accepted = true;
                        first_try = k == 0;
                        mu = std::max(0.1 * mu, 1e-15);
                        break;
                    }
                }
            } else {
                const VectorXd d = -(prob.precond.array() * ev.g.array()).matrix();
                double t = 1.0;
                if (cfg.step_rule == StepRule::BarzilaiBorwein) {
                    t = t_last;
                    const double sy = s.dot(y);
                    if (have_pair && sy > 0.0)
                        t = std::clamp((s.array().square() * metric.array()).sum() / sy, 1e-12, 1e12);
                }
                for (int k = 0; k < cfg.max_backtracks; ++k, t *= cfg.backtrack) {
                    v_try = v + t * d;
                    project(v_try);
                    const double decrease = ev.g.dot(v_try - v);
                    if (!(decrease < 0.0))
                        continue;
                    ev_try = prob.objective(v_try, false);
                    if (std::isfinite(ev_try.f) && ev_try.g.allFinite() && ev_try.f <= ev.f + cfg.armijo * decrease) {
                        accepted = true;
                        first_try = k == 0;
                        break;
                    }
                }
                t_last = t;
            }
            if (!accepted) {
                res.exit = ExitReason::LineSearchFailed;
                break;
            }
            s = v_try - v;
            y = ev_try.g - ev.g;
            have_pair = true;
            v = v_try;
            ev = std::move(ev_try);
            res.iterations = it + 1;
            res.loss_history.push_back(ev.f);
            if (ev.g.norm() <= res.grad_tolerance) {
                res.exit = ExitReason::GradientTolerance;
                break;
            }
            double other = 0.0;
            for (Eigen::Index j = 0; j < n; ++j)
                if (j != pos && j != pos + 1)
                    other = std::max(other, std::abs(s[j]));
            if (first_try && s.segment(pos, 2).norm() < cfg.step_tol && other < cfg.step_tol) {
                res.exit = ExitReason::StepTolerance;
                break;
            }
        }
    }
    res.loss = ev.f;
    res.grad_norm = ev.g.norm();
    res.converged = res.exit == ExitReason::GradientTolerance || res.exit == ExitReason::StepTolerance;
    res.position = {v[pos], v[pos + 1]};
    sol.v = std::move(v);
    return sol;
}

// Runs the smoothing stages of cfg.continuation and then the raw fit, each
// stage starting where the previous one stopped. The result reports the last
// stage; iterations and the loss history cover all of them.
template <typename MakeProblem>
Solution minimize_staged(const SampledSignal& r, const AnalyticPulse& pulse, const GblConfig& cfg,
                         const MakeProblem& make) {
    VectorXd start;
    int iterations = 0;
    std::vector<double> history;
    auto stage = [&](const MisfitTarget& target, const AnalyticPulse& p) {
        Problem prob = make(target, p);
        if (start.size() == prob.start.size())
            prob.start = start;
        Solution sol = minimize(prob, cfg);
        start = sol.v;
        iterations += sol.result.iterations;
        history.insert(history.end(), sol.result.loss_history.begin(), sol.result.loss_history.end());
        return sol;
    };
    for (double width : cfg.continuation)
        stage(MisfitTarget::smoothed(r, width, 1), smooth_pulse(pulse, width));
    Solution sol = stage(MisfitTarget::raw(r), pulse);
    if (!cfg.continuation.empty()) {
        sol.result.iterations = iterations;
        sol.result.loss_history = std::move(history);
    }
    return sol;
}

VectorXd position_precond(const GblConfig& cfg) {
    return (cfg.position_scale.array().square() * cfg.position_rate).matrix();
}

} // namespace

double data_term(const MisfitTarget& target, const std::array<double, 3>& lengths, double sound_speed,
                 const AnalyticPulse& pulse, double energy_ref) {
    return evaluate_misfit(target, lengths, sound_speed, pulse, false).value / energy_ref;
}

LocalizationResult gbl_matched(const SampledSignal& r, const Environment& env, const AnalyticPulse& pulse,
                               const SourceLocation& p0, const GblConfig& cfg) {
    cfg.validate();
    env.validate();
    auto make = [&](const MisfitTarget& target, const AnalyticPulse& stage_pulse) {
        Problem prob;
        prob.start = Eigen::Vector2d(p0.x, p0.z);
        prob.precond = position_precond(cfg);
        prob.bounds = cfg.bounds.value_or(search_bounds(env));
        prob.objective = [&env, &r, &cfg, target, stage_pulse](const VectorXd& v, bool curvature) {
            const SourceLocation p{v[0], v[1]};
            const auto lengths = three_ray_lengths(env, p);
            Eval ev;
            ev.jac = MatrixXd::Zero(4, 2);
            for (std::size_t i = 0; i < 3; ++i)
                ev.jac.row(static_cast<Eigen::Index>(i)) = path_length_gradient(env, p, kThreeRayPaths[i]).transpose();
            ev.reg = VectorXd::Zero(2);
            Eigen::Vector4d grad_q;
            add_data_term(ev, target, r.grid, lengths, env.sound_speed, stage_pulse, cfg.energy_ref, curvature,
                          grad_q);
            ev.g = ev.jac.transpose() * grad_q;
            return ev;
        };
        return prob;
    };
    return minimize_staged(r, pulse, cfg, make).result;
}

// ---------------------------------------------------------------- PLN objectives

namespace {

// L_DA over v = [w (if adapted); c (if adapted); p]. Frozen parts come from
// `base`; with nothing adapted this is the GBL loss of the PLN model.
struct PlnObjective {
    ModelParams base;
    VectorXd w_ref;
    double c_ref = 0.0;
    MisfitTarget target;
    TimeGrid grid;
    double energy_ref = 1.0;
    double gamma = 0.0;
    bool adapt_w = false;
    bool adapt_c = false;

    Eigen::Index n_w() const { return adapt_w ? base.pln.weights.size() : 0; }
    Eigen::Index n_c() const { return adapt_c ? 1 : 0; }

    ad::Var lengths(ad::Tape& tape, const ad::Var& v) const {
        const ad::Var w = adapt_w ? ad::reshape_segment(v, 0, n_w(), 1) : tape.constant(base.pln.weights.values, "w");
        const ad::Var pos = ad::reshape_segment(v, n_w() + n_c(), 2, 1);
        return pln_forward(tape, base.pln, w, 0, pln_ray_inputs(pos, base.receiver_depth));
    }

    ad::Var build(ad::Tape& tape, const ad::Var& v) const {
        const ad::Var c = adapt_c ? ad::reshape_segment(v, n_w(), 1, 1) : tape.constant(base.sound_speed);
        ad::Var loss = signal_misfit(lengths(tape, v), c, {&target}, base.pulse, 1.0 / energy_ref);
        if (gamma > 0.0 && adapt_w) {
            const ad::Var w = ad::reshape_segment(v, 0, n_w(), 1);
            loss = loss + (0.5 * gamma) * ad::sum(ad::square(w - tape.constant(w_ref, "w_tr")));
        }
        if (gamma > 0.0 && adapt_c)
            loss = loss + (0.5 * gamma) * ad::square(c - c_ref);
        return loss;
    }

    Eval operator()(const VectorXd& v, bool curvature) const {
        const Eigen::Index n = v.size();
        Eval ev;
        ev.jac = MatrixXd::Zero(4, n);
        std::array<double, 3> l{};
        for (Eigen::Index i = 0; i < 3; ++i) {
            ad::Tape tape;
            const ad::Var flat = tape.variable(v, "v");
            const ad::Var out = lengths(tape, flat);
            if (i == 0)
                for (Eigen::Index k = 0; k < 3; ++k)
                    l[static_cast<std::size_t>(k)] = out.value()(0, k);
            tape.backward(ad::block(out, 0, i, 1, 1));
            ev.jac.row(i) = tape.adjoint(flat).col(0).transpose();
        }
        const double c = adapt_c ? v[n_w()] : base.sound_speed;
        if (adapt_c)
            ev.jac(3, n_w()) = 1.0;
        Eigen::Vector4d grad_q;
        add_data_term(ev, target, grid, l, c, base.pulse, energy_ref, curvature, grad_q);
        ev.g = ev.jac.transpose() * grad_q;
        ev.reg = VectorXd::Zero(n);
        if (adapt_w) {
            const VectorXd dw = v.head(n_w()) - w_ref;
            ev.f += 0.5 * gamma * dw.squaredNorm();
            ev.g.head(n_w()) += gamma * dw;
            ev.reg.head(n_w()).setConstant(gamma);
        }
        if (adapt_c) {
            const double dc = c - c_ref;
            ev.f += 0.5 * gamma * dc * dc;
            ev.g[n_w()] += gamma * dc;
            ev.reg[n_w()] = gamma;
        }
        return ev;
    }
};

PlnObjective make_objective(const SampledSignal& r, const ModelParams& w_tr, double gamma, bool adapt_w,
                            bool adapt_c, double energy_ref) {
    if (!(energy_ref > 0.0))
        throw Error(ErrorCode::InvalidArgument, "reference energy must be positive");
    PlnObjective obj;
    obj.base = w_tr;
    obj.w_ref = w_tr.pln.weights.values;
    obj.c_ref = w_tr.sound_speed;
    obj.target = MisfitTarget::raw(r);
    obj.grid = r.grid;
    obj.energy_ref = energy_ref;
    obj.gamma = gamma;
    obj.adapt_w = adapt_w;
    obj.adapt_c = adapt_c;
    return obj;
}

VectorXd objective_vector(const PlnObjective& obj, const ModelParams& w, const SourceLocation& p) {
    VectorXd v(obj.n_w() + obj.n_c() + 2);
    if (obj.adapt_w)
        v.head(obj.n_w()) = w.pln.weights.values;
    if (obj.adapt_c)
        v[obj.n_w()] = w.sound_speed;
    v.tail(2) << p.x, p.z;
    return v;
}

LocalizationResult run_pln(const PlnObjective& obj, const SampledSignal& r, const SourceLocation& p0,
                           const GblConfig& cfg, const Environment& train_env) {
    auto make = [&](const MisfitTarget& target, const AnalyticPulse& pulse) {
        auto stage = std::make_shared<PlnObjective>(obj);
        stage->target = target;
        stage->base.pulse = pulse;
        Problem prob;
        prob.start = objective_vector(obj, obj.base, p0);
        prob.precond = VectorXd::Constant(prob.start.size(), cfg.weight_rate);
        prob.precond.tail(2) = position_precond(cfg);
        prob.position_offset = prob.start.size() - 2;
        prob.bounds = cfg.bounds.value_or(search_bounds(train_env));
        prob.objective = [stage](const VectorXd& v, bool curvature) { return (*stage)(v, curvature); };
        return prob;
    };
    Solution sol = minimize_staged(r, obj.base.pulse, cfg, make);
    if (obj.adapt_w || obj.adapt_c) {
        ModelParams adapted = obj.base;
        if (obj.adapt_w)
            adapted.pln.weights.values = sol.v.head(obj.n_w());
        if (obj.adapt_c)
            adapted.sound_speed = sol.v[obj.n_w()];
        sol.result.adapted = std::move(adapted);
    }
    return sol.result;
}

} // namespace

LocalizationResult gbl(const SampledSignal& r, const Checkpoint& model, const SourceLocation& p0, const GblConfig& cfg) {
    cfg.validate();
    const PlnObjective obj = make_objective(r, model.model, 0.0, false, false, cfg.energy_ref);
    return run_pln(obj, r, p0, cfg, model.meta.environment);
}

LossProgram gbl_loss_program(const SampledSignal& r, const ModelParams& model, double energy_ref) {
    auto obj = std::make_shared<PlnObjective>(make_objective(r, model, 0.0, false, false, energy_ref));
    return [obj](ad::Tape& tape, const ad::Var& v) { return obj->build(tape, v); };
}

Layout da_layout(const ModelParams& w, const DaConfig& cfg) {
    Layout layout;
    if (cfg.adapt_weights)
        for (const Segment& s : w.pln.weights.layout.segments())
            layout.add(s.name, s.rows, s.cols);
    if (cfg.adapt_sound_speed)
        layout.add("c", 1, 1);
    layout.add("p", 2, 1);
    return layout;
}

VectorXd da_vector(const ModelParams& w, const SourceLocation& p, const DaConfig& cfg) {
    PlnObjective obj;
    obj.base = w;
    obj.adapt_w = cfg.adapt_weights;
    obj.adapt_c = cfg.adapt_sound_speed;
    return objective_vector(obj, w, p);
}

double da_loss(const ModelParams& w, const SourceLocation& p, const SampledSignal& r, const ModelParams& w_tr,
               double gamma, bool adapt_sound_speed, double energy_ref) {
    if (!(gamma >= 0.0))
        throw Error(ErrorCode::InvalidArgument, "gamma must be non-negative");
    if (w.pln.weights.size() != w_tr.pln.weights.size())
        throw Error(ErrorCode::InvalidArgument, "adapted and reference weights have different layouts");
    const MisfitTarget target = MisfitTarget::raw(r);
    const double loss = data_term(target, model_lengths(w, p), w.sound_speed, w.pulse, energy_ref);
    double reg = (w.pln.weights.values - w_tr.pln.weights.values).squaredNorm();
    if (adapt_sound_speed)
        reg += (w.sound_speed - w_tr.sound_speed) * (w.sound_speed - w_tr.sound_speed);
    return loss + 0.5 * gamma * reg;
}

LossProgram da_loss_program(const SampledSignal& r, const ModelParams& w_tr, const DaConfig& cfg) {
    cfg.validate();
    auto obj = std::make_shared<PlnObjective>(make_objective(r, w_tr, cfg.gamma, cfg.adapt_weights,
                                                             cfg.adapt_sound_speed, cfg.inner.energy_ref));
    return [obj](ad::Tape& tape, const ad::Var& v) { return obj->build(tape, v); };
}

LocalizationResult da_gbl(const Checkpoint& w_tr, const SourceLocation& p0, const SampledSignal& r,
                          const DaConfig& cfg) {
    cfg.validate();
    const PlnObjective obj = make_objective(r, w_tr.model, cfg.gamma, cfg.adapt_weights, cfg.adapt_sound_speed,
                                            cfg.inner.energy_ref);
    return run_pln(obj, r, p0, cfg.inner, w_tr.meta.environment);
}

// ---------------------------------------------------------------- CRLB

Eigen::MatrixX2d signal_sensitivity(const Environment& env, const SourceLocation& p, const AnalyticPulse& pulse,
                                    const TimeGrid& grid) {
    env.validate();
    Eigen::Matrix<double, 3, 2> dl;
    for (std::size_t i = 0; i < 3; ++i)
        dl.row(static_cast<Eigen::Index>(i)) = path_length_gradient(env, p, kThreeRayPaths[i]).transpose();
    const Eigen::MatrixX4d sens = feature_sensitivity(three_ray_lengths(env, p), env.sound_speed, pulse, grid);
    return sens.leftCols<3>() * dl;
}

CrlbResult crlb(const Environment& env, const SourceLocation& p, const AnalyticPulse& pulse, double n0,
                const TimeGrid& grid) {
    if (!(n0 > 0.0))
        throw Error(ErrorCode::InvalidArgument, "CRLB needs N0 > 0");
    const Eigen::MatrixX2d sens = signal_sensitivity(env, p, pulse, grid);
    CrlbResult out;
    out.fim = (2.0 / n0) * grid.dt() * (sens.transpose() * sens);
    out.fim = 0.5 * (out.fim + out.fim.transpose()).eval();
    const Eigen::SelfAdjointEigenSolver<Eigen::Matrix2d> eig(out.fim);
    const double lo = eig.eigenvalues().minCoeff();
    const double hi = eig.eigenvalues().maxCoeff();
    if (!(hi > 0.0) || !(lo > 1e-12 * hi))
        throw Error(ErrorCode::UnidentifiableGeometry, "Fisher information is singular at this geometry");
    out.rmse_bound = std::sqrt(out.fim.inverse().trace());
    return out;
}

} // namespace aqualoc

#include "aqualoc/theorylab.hpp"

#include "aqualoc/error.hpp"

#include <algorithm>
#include <random>

namespace aqualoc {

using Eigen::MatrixXd;
using Eigen::VectorXd;

Environment EnvPerturbation::apply(const Environment& env) const {
    Environment out = env;
    out.depth += depth;
    out.sound_speed += sound_speed;
    out.validate();
    return out;
}

DaConfig AdaptationProblem::config() const {
    DaConfig cfg = da;
    cfg.gamma = gamma;
    return cfg;
}

SampledSignal AdaptationProblem::data(const EnvPerturbation& eps) const {
    return synthesize_received(eps.apply(env), source, w_tr.model.pulse, grid);
}

VectorXd AdaptationProblem::start(const SourceLocation& p0) const {
    return da_vector(w_tr.model, p0, config());
}

VectorXd AdaptationProblem::grad(const VectorXd& v, const EnvPerturbation& eps) const {
    const LossProgram program = da_loss_program(data(eps), w_tr.model, config());
    VectorXd g;
    value_and_grad(program, v, g);
    return g;
}

LocalizationResult AdaptationProblem::adapt(const SourceLocation& p0, const EnvPerturbation& eps) const {
    return da_gbl(w_tr, p0, data(eps), config());
}

VectorXd AdaptationProblem::adapted_vector(const LocalizationResult& res) const {
    return da_vector(res.adapted.value_or(w_tr.model), res.position, config());
}

MatrixXd fd_hessian(const GradField& grad, const VectorXd& at, double step, double* asymmetry) {
    if (!(step > 0.0))
        throw Error(ErrorCode::InvalidArgument, "finite-difference step must be positive");
    const Eigen::Index n = at.size();
    MatrixXd h(n, n);
    VectorXd probe = at;
    for (Eigen::Index j = 0; j < n; ++j) {
        probe[j] = at[j] + step;
        const VectorXd plus = grad(probe);
        probe[j] = at[j] - step;
        const VectorXd minus = grad(probe);
        probe[j] = at[j];
        h.col(j) = (plus - minus) / (2.0 * step);
    }
    if (asymmetry) {
        const double scale = h.cwiseAbs().rowwise().sum().maxCoeff();
        *asymmetry = scale > 0.0 ? (h - h.transpose()).cwiseAbs().rowwise().sum().maxCoeff() / scale : 0.0;
    }
    return 0.5 * (h + h.transpose());
}

namespace {

std::vector<VectorXd> cube_samples(const VectorXd& center, double sigma, int count, std::uint64_t seed) {
    std::vector<VectorXd> out{center};
    std::mt19937_64 rng(mix_seed(seed, 0xc0be));
    std::uniform_real_distribution<double> unit(-1.0, 1.0);
    for (int k = 1; k < count; ++k) {
        VectorXd u = center;
        for (Eigen::Index i = 0; i < u.size(); ++i)
            u[i] += sigma * unit(rng);
        out.push_back(std::move(u));
    }
    return out;
}

} // namespace

LambdaEstimate estimate_lambda(const GradField& grad, const VectorXd& center, double sigma, int count, double step,
                               std::uint64_t seed) {
    LambdaEstimate out;
    out.lambda = std::numeric_limits<double>::infinity();
    for (const VectorXd& u : cube_samples(center, sigma, count, seed)) {
        double asym = 0.0;
        const MatrixXd h = fd_hessian(grad, u, step, &asym);
        const double lo = Eigen::SelfAdjointEigenSolver<MatrixXd>(h, Eigen::EigenvaluesOnly).eigenvalues().minCoeff();
        out.per_point.push_back(lo);
        out.lambda = std::min(out.lambda, lo);
        out.max_asymmetry = std::max(out.max_asymmetry, asym);
        if (out.hessian_at_center.size() == 0)
            out.hessian_at_center = h;
    }
    return out;
}

LipschitzEstimate estimate_lipschitz(const PerturbedGradField& grad, const VectorXd& center, double sigma, int count,
                                     const std::vector<EnvPerturbation>& probes, std::uint64_t seed) {
    LipschitzEstimate out;
    const std::vector<VectorXd> points = cube_samples(center, sigma, count, mix_seed(seed, 1));
    for (std::size_t k = 0; k < points.size(); ++k) {
        const VectorXd base = grad(points[k], {});
        for (const EnvPerturbation& eps : probes) {
            if (!(eps.norm() > 0.0))
                continue;
            double ratios[2] = {0.0, 0.0};
            for (int scale = 1; scale <= 2; ++scale) {
                const EnvPerturbation e{scale * eps.depth, scale * eps.sound_speed};
                const double ratio = (grad(points[k], e) - base).norm() / e.norm();
                ratios[scale - 1] = ratio;
                const LipschitzSample sample{static_cast<int>(k), e, ratio};
                out.samples.push_back(sample);
                if (ratio > out.lipschitz) {
                    out.lipschitz = ratio;
                    out.argmax = sample;
                }
            }
            if (ratios[0] > 0.0 && ratios[1] > 0.0)
                out.two_scale_ratio = std::max({out.two_scale_ratio, ratios[0] / ratios[1], ratios[1] / ratios[0]});
        }
    }
    return out;
}

XiEstimate estimate_xi(const GradField& grad, const VectorXd& center, const MatrixXd& hessian, double sigma,
                       int kappa_points, double step) {
    XiEstimate out;
    const VectorXd ones = VectorXd::Ones(center.size());
    out.direction = hessian.ldlt().solve(ones);
    if (!out.direction.allFinite())
        throw Error(ErrorCode::InvalidArgument, "Hessian is singular at v0");
    const double reach = std::max(out.direction.cwiseAbs().maxCoeff(), 1e-300);

    const VectorXd g0 = grad(center);
    out.g0_norm = g0.norm();
    const double h = step / reach;
    const VectorXd gprime = (grad(center + h * out.direction) - grad(center - h * out.direction)) / (2.0 * h);
    out.gprime_max_dev = (gprime - ones).cwiseAbs().maxCoeff();

    const double dk = sigma / (kappa_points - 1);
    std::vector<VectorXd> g;
    g.reserve(static_cast<std::size_t>(kappa_points));
    for (int k = 0; k < kappa_points; ++k)
        g.push_back(k == 0 ? g0 : grad(center + (k * dk) * out.direction));
    out.xi_per_coord = VectorXd::Zero(center.size());
    for (int k = 1; k + 1 < kappa_points; ++k) {
        const auto kk = static_cast<std::size_t>(k);
        const VectorXd second = (g[kk + 1] - 2.0 * g[kk] + g[kk - 1]) / (dk * dk);
        out.xi_per_coord = out.xi_per_coord.cwiseMax(second.cwiseAbs());
    }
    out.xi = out.xi_per_coord.maxCoeff();
    return out;
}

void TheoremConfig::validate() const {
    if (!(sigma > 0.0))
        throw Error(ErrorCode::InvalidArgument, "cube radius sigma must be positive");
    if (!(raw_fd_step > 0.0) || max_sigma_halvings < 0)
        throw Error(ErrorCode::InvalidArgument, "invalid finite-difference step or sigma schedule");
    if (kappa_points < 8 || convexity_samples < 8 || lipschitz_samples < 8)
        throw Error(ErrorCode::InvalidArgument, "theorem sample counts must be at least 8");
    if (!(fd_step > 0.0))
        throw Error(ErrorCode::InvalidArgument, "finite-difference step must be positive");
    if (lipschitz_depths.empty())
        throw Error(ErrorCode::InvalidArgument, "need at least one Lipschitz probe");
}

TheoremReport verify_theorem(const AdaptationProblem& problem, const SourceLocation& p0, const EnvPerturbation& eps,
                             const TheoremConfig& cfg) {
    cfg.validate();
    if (problem.da.adapt_sound_speed || !problem.da.adapt_weights)
        throw Error(ErrorCode::InvalidArgument, "the theorem check adapts the PLN weights only");
    TheoremReport rep;
    rep.gamma = problem.gamma;
    rep.eps = eps;
    rep.source = problem.source;
    rep.initial = p0;
    rep.config = cfg;
    rep.n_w = static_cast<int>(problem.w_tr.model.pln.weights.size());

    const LocalizationResult res0 = problem.adapt(p0, {});
    const VectorXd v0 = problem.adapted_vector(res0);
    rep.v0_converged = res0.converged;
    rep.v0_grad_norm = res0.grad_norm;
    rep.g0_tolerance = 10.0 * res0.grad_tolerance;

    // Normalized coordinates: v = v0 + T u with T = D H_y^(-1/2), where
    // D = diag(H)^(-1/2) at v0 and H_y is the Hessian in y = v ./ D. The Hessian
    // in u is the identity at v0, whatever the units of w and p.
    const GradField raw = [&](const VectorXd& v) { return problem.grad(v, {}); };
    VectorXd d(v0.size());
    {
        VectorXd probe = v0;
        for (Eigen::Index i = 0; i < v0.size(); ++i) {
            const double h = cfg.raw_fd_step * std::max(1.0, std::abs(v0[i]));
            probe[i] = v0[i] + h;
            const double plus = raw(probe)[i];
            probe[i] = v0[i] - h;
            const double minus = raw(probe)[i];
            probe[i] = v0[i];
            const double curv = std::abs(plus - minus) / (2.0 * h);
            d[i] = curv > 0.0 ? 1.0 / std::sqrt(curv) : 1.0;
        }
    }
    const GradField in_y = [&](const VectorXd& y) -> VectorXd { return d.cwiseProduct(raw(d.cwiseProduct(y))); };
    const MatrixXd h_y = fd_hessian(in_y, v0.cwiseQuotient(d), cfg.raw_fd_step);
    const Eigen::SelfAdjointEigenSolver<MatrixXd> eig(h_y);
    if (!(eig.eigenvalues().minCoeff() > 0.0)) {
        rep.verdict = "not-applicable";
        rep.notes.push_back("Hessian at v0 is not positive definite (smallest eigenvalue " + std::to_string(eig.eigenvalues().minCoeff()) + ", largest " + std::to_string(eig.eigenvalues().maxCoeff()) + ")");
        return rep;
    }
    const MatrixXd t = d.asDiagonal() * (eig.eigenvectors() * eig.eigenvalues().cwiseSqrt().cwiseInverse().asDiagonal() *
                                         eig.eigenvectors().transpose());
    const MatrixXd t_inv = (eig.eigenvectors() * eig.eigenvalues().cwiseSqrt().asDiagonal() *
                            eig.eigenvectors().transpose()) *
                           d.cwiseInverse().asDiagonal();
    const PerturbedGradField field = [&](const VectorXd& u, const EnvPerturbation& e) -> VectorXd {
        return t.transpose() * problem.grad(v0 + t * u, e);
    };
    const GradField at_train = [&](const VectorXd& u) { return field(u, {}); };
    const VectorXd u0 = VectorXd::Zero(v0.size());

    // The cube shrinks from cfg.sigma until the sampled Hessians are all positive definite.
    LambdaEstimate lam;
    double sigma = cfg.sigma;
    for (int k = 0; k <= cfg.max_sigma_halvings; ++k, sigma *= 0.5) {
        lam = estimate_lambda(at_train, u0, sigma, cfg.convexity_samples, cfg.fd_step * sigma, cfg.seed);
        rep.sigma_trials.push_back({sigma, lam.lambda});
        if (lam.lambda > 0.0)
            break;
    }
    rep.sigma = sigma;
    rep.lambda = lam.lambda;
    rep.lambda_per_point = lam.per_point;
    rep.hessian_asymmetry = lam.max_asymmetry;
    rep.convex = lam.lambda > 0.0;
    if (rep.hessian_asymmetry > 1e-3)
        rep.notes.push_back("finite-difference Hessian asymmetry above 1e-3");

    std::vector<EnvPerturbation> probes;
    for (double d : cfg.lipschitz_depths)
        probes.push_back({d, 0.0});
    const LipschitzEstimate lip =
        estimate_lipschitz(field, u0, sigma, cfg.lipschitz_samples, probes, cfg.seed);
    rep.lipschitz = lip.lipschitz;
    rep.lipschitz_argmax = lip.argmax;
    rep.lipschitz_samples = lip.samples;
    rep.lipschitz_two_scale = lip.two_scale_ratio;
    if (lip.two_scale_ratio > 2.0)
        rep.notes.push_back("Lipschitz ratio changes by more than 2x between eps and 2 eps on some probe; "
                            "G is not linear in eps over the whole probe range");

    if (!rep.convex) {
        rep.verdict = "not-applicable";
        rep.notes.push_back("estimated lambda is not positive: strong convexity does not hold on the cube");
        return rep;
    }

    const XiEstimate xi = estimate_xi(at_train, u0, lam.hessian_at_center, sigma, cfg.kappa_points, cfg.fd_step * sigma);
    rep.xi = xi.xi;
    rep.g0_norm = xi.g0_norm;
    rep.gprime_max_dev = xi.gprime_max_dev;
    rep.stationary = res0.grad_norm <= rep.g0_tolerance;
    rep.identity = xi.gprime_max_dev <= 1e-2;

    rep.theta = xi.xi > 0.0 ? std::min(sigma, 1.0 / xi.xi) : sigma;
    rep.rho_cube = rep.theta * xi.direction.cwiseAbs().maxCoeff();
    rep.rho_limit = rep.theta / std::sqrt(rep.lambda);
    rep.rho_ok = rep.rho_cube <= 1.01 * rep.rho_limit;
    rep.epsilon_budget = rep.lipschitz > 0.0 ? rep.theta / (2.0 * rep.lipschitz)
                                             : std::numeric_limits<double>::infinity();
    rep.bound = rep.theta * std::sqrt(static_cast<double>(rep.n_w + rep.n_p) / rep.lambda);
    rep.within_budget = eps.norm() <= rep.epsilon_budget;

    if (!rep.within_budget) {
        rep.verdict = "budget-exceeded";
        rep.notes.push_back("perturbation exceeds theta / (2 L): no bound is claimed");
        return rep;
    }

    const LocalizationResult res_eps = problem.adapt(p0, eps);
    const VectorXd u_eps = t_inv * (problem.adapted_vector(res_eps) - v0);
    rep.perturbed_run = true;
    rep.perturbed_converged = res_eps.converged;
    rep.displacement = (u0 - u_eps).norm();
    rep.displacement_ok = rep.displacement <= rep.bound;

    const VectorXd step = rep.theta * xi.direction;
    rep.min_plus = field(u0 + step, eps).minCoeff();
    rep.max_minus = field(u0 - step, eps).maxCoeff();
    rep.signs_ok = rep.min_plus > 0.0 && rep.max_minus < 0.0;

    rep.pass = rep.stationary && rep.identity && rep.rho_ok && rep.displacement_ok && rep.signs_ok;
    rep.verdict = rep.pass ? "pass" : "fail";
    return rep;
}

json to_json(const TheoremReport& r) {
    json j;
    j["inputs"] = {{"gamma", r.gamma},
                   {"epsilon", {{"depth_m", r.eps.depth}, {"sound_speed_mps", r.eps.sound_speed}}},
                   {"epsilon_norm", r.eps.norm()},
                   {"source", r.source},
                   {"initial", r.initial},
                   {"n_w", r.n_w},
                   {"n_p", r.n_p}};
    j["config"] = {{"sigma", r.config.sigma},
                   {"kappa_points", r.config.kappa_points},
                   {"fd_step", r.config.fd_step},
                   {"convexity_samples", r.config.convexity_samples},
                   {"lipschitz_samples", r.config.lipschitz_samples},
                   {"lipschitz_depths_m", r.config.lipschitz_depths},
                   {"seed", r.config.seed},
                   {"raw_fd_step", r.config.raw_fd_step},
                   {"max_sigma_halvings", r.config.max_sigma_halvings},
                   {"coordinates", "hessian-whitened"}};
    json trials = json::array();
    for (const auto& [sigma, lambda] : r.sigma_trials)
        trials.push_back({{"sigma", sigma}, {"lambda", lambda}});
    json lip = json::array();
    for (const LipschitzSample& s : r.lipschitz_samples)
        lip.push_back({{"point", s.point}, {"depth_m", s.eps.depth}, {"sound_speed_mps", s.eps.sound_speed},
                       {"ratio", s.ratio}});
    j["lipschitz_samples"] = lip;
    j["estimates"] = {{"sigma", r.sigma},
                      {"sigma_trials", trials},
                      {"lambda", r.lambda},
                      {"lipschitz", r.lipschitz},
                      {"xi", r.xi},
                      {"theta", r.theta},
                      {"rho_cube", r.rho_cube},
                      {"rho_limit", r.rho_limit},
                      {"epsilon_budget", r.epsilon_budget},
                      {"bound", r.bound},
                      {"lambda_per_point", r.lambda_per_point},
                      {"lipschitz_argmax",
                       {{"point", r.lipschitz_argmax.point},
                        {"depth_m", r.lipschitz_argmax.eps.depth},
                        {"sound_speed_mps", r.lipschitz_argmax.eps.sound_speed}}},
                      {"hessian_asymmetry", r.hessian_asymmetry},
                      {"lipschitz_two_scale_ratio", r.lipschitz_two_scale},
                      {"g0_norm", r.g0_norm},
                      {"g0_tolerance", r.g0_tolerance},
                      {"gprime_max_deviation", r.gprime_max_dev},
                      {"v0_grad_norm", r.v0_grad_norm},
                      {"status", "estimated"}};
    j["perturbed"] = {{"ran", r.perturbed_run},
                      {"converged", r.perturbed_converged},
                      {"displacement", r.displacement},
                      {"min_grad_at_v_plus", r.min_plus},
                      {"max_grad_at_v_minus", r.max_minus}};
    j["checks"] = {{"v0_converged", r.v0_converged},
                   {"convex", r.convex},
                   {"within_budget", r.within_budget},
                   {"stationary", r.stationary},
                   {"identity", r.identity},
                   {"rho_ok", r.rho_ok},
                   {"displacement_ok", r.displacement_ok},
                   {"signs_ok", r.signs_ok}};
    j["pass"] = r.pass;
    j["verdict"] = r.verdict;
    j["notes"] = r.notes;
    return j;
}

} // namespace aqualoc

#include "aqualoc/forward_model.hpp"

#include "aqualoc/error.hpp"
#include "aqualoc/serialization.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace aqualoc {

using Eigen::MatrixXd;
using Eigen::VectorXd;

std::pair<double, double> alpha_tau(double length, double rho, double sound_speed) {
    if (!(length > 0.0))
        throw Error(ErrorCode::InvalidArgument, "path length must be positive");
    if (!(sound_speed > 0.0))
        throw Error(ErrorCode::InvalidArgument, "sound speed must be positive");
    return {rho / length, length / sound_speed};
}

std::array<double, 3> model_lengths(const ModelParams& w, const SourceLocation& p) {
    const MatrixXd in = pln_inputs({p}, w.receiver_depth);
    const Eigen::RowVectorXd l = pln_forward_batch(w.pln, in);
    return {l(0), l(1), l(2)};
}

SampledSignal model_output(const ModelParams& w, const SourceLocation& p, const TimeGrid& grid) {
    return superpose_paths(model_lengths(w, p), w.sound_speed, w.pulse, grid);
}

SampledSignal model_output(const LengthFn& lengths, double sound_speed, const AnalyticPulse& pulse,
                           const SourceLocation& p, const TimeGrid& grid) {
    return superpose_paths(lengths(p), sound_speed, pulse, grid);
}

MisfitTarget MisfitTarget::raw(const SampledSignal& r) {
    MisfitTarget t;
    t.samples = r.values;
    t.spacing = r.grid.dt();
    t.total_sq = r.values.squaredNorm();
    return t;
}

MisfitTarget MisfitTarget::smoothed(const SampledSignal& r, double kernel_sigma, int stride) {
    if (kernel_sigma == 0.0 && stride == 1)
        return raw(r);
    if (!(kernel_sigma > 0.0) || stride < 1)
        throw Error(ErrorCode::InvalidArgument, "smoothing needs a positive kernel and stride");
    const Eigen::Index n = r.values.size();
    const double dt = r.grid.dt();
    const Eigen::Index m = (n + stride - 1) / stride;
    const auto reach = static_cast<Eigen::Index>(std::ceil(8.0 * kernel_sigma / dt));
    VectorXd kernel(2 * reach + 1);
    const double norm = dt / (std::sqrt(2.0 * std::numbers::pi) * kernel_sigma);
    for (Eigen::Index k = -reach; k <= reach; ++k) {
        const double u = static_cast<double>(k) * dt / kernel_sigma;
        kernel[k + reach] = norm * std::exp(-0.5 * u * u);
    }
    MisfitTarget t;
    t.samples = VectorXd::Zero(m);
    t.spacing = dt * stride;
    for (Eigen::Index j = 0; j < m; ++j) {
        const Eigen::Index centre = j * stride;
        const Eigen::Index lo = std::max<Eigen::Index>(0, centre - reach);
        const Eigen::Index hi = std::min<Eigen::Index>(n - 1, centre + reach);
        double acc = 0.0;
        for (Eigen::Index k = lo; k <= hi; ++k)
            acc += r.values[k] * kernel[k - centre + reach];
        t.samples[j] = acc;
    }
    t.total_sq = t.samples.squaredNorm();
    return t;
}

MisfitEval evaluate_misfit(const MisfitTarget& target, const std::array<double, 3>& lengths, double sound_speed,
                           const AnalyticPulse& pulse, bool with_gradient) {
    const double h = target.spacing;
    const Eigen::Index m = target.samples.size();
    const double half = pulse.support_halfwidth();

    std::array<double, 3> alpha{};
    std::array<double, 3> tau{};
    std::array<Eigen::Index, 3> lo{};
    std::array<Eigen::Index, 3> hi{};
    for (std::size_t i = 0; i < 3; ++i) {
        std::tie(alpha[i], tau[i]) = alpha_tau(lengths[i], reflection_coeff(kThreeRayPaths[i]), sound_speed);
        const double centre = tau[i] + pulse.center_time;
        lo[i] = std::max<Eigen::Index>(0, static_cast<Eigen::Index>(std::ceil((centre - half) / h)));
        hi[i] = std::min<Eigen::Index>(m - 1, static_cast<Eigen::Index>(std::floor((centre + half) / h)));
    }

    // Model samples over the union of the three supports.
    std::array<std::size_t, 3> order{0, 1, 2};
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return lo[a] < lo[b]; });
    std::vector<std::pair<Eigen::Index, Eigen::Index>> spans;
    for (std::size_t i : order) {
        if (lo[i] > hi[i])
            continue;
        if (!spans.empty() && lo[i] <= spans.back().second + 1)
            spans.back().second = std::max(spans.back().second, hi[i]);
        else
            spans.emplace_back(lo[i], hi[i]);
    }

    std::array<VectorXd, 3> q;
    std::array<VectorXd, 3> dq;
    for (std::size_t i = 0; i < 3; ++i) {
        const Eigen::Index len = std::max<Eigen::Index>(0, hi[i] - lo[i] + 1);
        q[i].resize(len);
        if (with_gradient)
            dq[i].resize(len);
        for (Eigen::Index k = 0; k < len; ++k) {
            const double t = static_cast<double>(lo[i] + k) * h - tau[i];
            if (with_gradient)
                eval_pulse_with_dt(pulse, t, q[i][k], dq[i][k]);
            else
                q[i][k] = eval_pulse(pulse, t);
        }
    }

    MisfitEval out;
    double inside_sq = 0.0;
    double misfit = 0.0;
    VectorXd residual;
    for (const auto& [a, b] : spans) {
        residual = target.samples.segment(a, b - a + 1);
        inside_sq += residual.squaredNorm();
        for (std::size_t i = 0; i < 3; ++i) {
            const Eigen::Index s = std::max(a, lo[i]);
            const Eigen::Index e = std::min(b, hi[i]);
            if (s <= e)
                residual.segment(s - a, e - s + 1) -= alpha[i] * q[i].segment(s - lo[i], e - s + 1);
        }
        misfit += residual.squaredNorm();
        if (!with_gradient)
            continue;
        for (std::size_t i = 0; i < 3; ++i) {
            const Eigen::Index s = std::max(a, lo[i]);
            const Eigen::Index e = std::min(b, hi[i]);
            if (s > e)
                continue;
            const auto res = residual.segment(s - a, e - s + 1);
            out.d_alpha[i] += -2.0 * h * res.dot(q[i].segment(s - lo[i], e - s + 1));
            out.d_tau[i] += 2.0 * h * alpha[i] * res.dot(dq[i].segment(s - lo[i], e - s + 1));
        }
    }
    out.value = h * (std::max(0.0, target.total_sq - inside_sq) + misfit);
    return out;
}

ad::Var signal_misfit(const ad::Var& lengths, const ad::Var& sound_speed,
                      const std::vector<const MisfitTarget*>& targets, const AnalyticPulse& pulse, double weight) {
    return signal_misfit(lengths, sound_speed, targets, pulse, std::vector<double>(targets.size(), weight));
}

ad::Var signal_misfit(const ad::Var& lengths, const ad::Var& sound_speed,
                      const std::vector<const MisfitTarget*>& targets, const AnalyticPulse& pulse,
                      const std::vector<double>& weights) {
    const auto k_targets = static_cast<Eigen::Index>(targets.size());
    if (weights.size() != targets.size())
        throw Error(ErrorCode::InvalidArgument, "signal_misfit: one weight per target");
    if (lengths.rows() != 1 || lengths.cols() != 3 * k_targets)
        throw Error(ErrorCode::InvalidArgument, "signal_misfit: lengths must be 1 x 3K");
    if (sound_speed.value().size() != 1)
        throw Error(ErrorCode::InvalidArgument, "signal_misfit: sound speed must be scalar");
    const double c = sound_speed.scalar();
    MatrixXd d_len(1, 3 * k_targets);
    double d_c = 0.0;
    double total = 0.0;
    for (Eigen::Index k = 0; k < k_targets; ++k) {
        std::array<double, 3> l{};
        for (Eigen::Index i = 0; i < 3; ++i)
            l[static_cast<std::size_t>(i)] = lengths.value()(0, 3 * k + i);
        const MisfitEval ev = evaluate_misfit(*targets[static_cast<std::size_t>(k)], l, c, pulse, true);
        const double weight = weights[static_cast<std::size_t>(k)];
        total += weight * ev.value;
        for (std::size_t i = 0; i < 3; ++i) {
            const double rho = reflection_coeff(kThreeRayPaths[i]);
            d_len(0, 3 * k + static_cast<Eigen::Index>(i)) =
                weight * (ev.d_alpha[i] * (-rho / (l[i] * l[i])) + ev.d_tau[i] / c);
            d_c += weight * ev.d_tau[i] * (-l[i] / (c * c));
        }
    }
    const int il = lengths.id();
    const int ic = sound_speed.id();
    return lengths.tape()->record(MatrixXd::Constant(1, 1, total), "signal_misfit",
                                  [il, ic, d_len, d_c](ad::Tape& t, const MatrixXd& adj) {
                                      t.accumulate(il, adj(0, 0) * d_len);
                                      t.accumulate(ic, MatrixXd::Constant(1, 1, adj(0, 0) * d_c));
                                  });
}

ad::Var ordering_penalty(const ad::Var& lengths, double scale, double weight) {
    if (lengths.rows() != 1 || lengths.cols() % 3 != 0)
        throw Error(ErrorCode::InvalidArgument, "ordering penalty needs a 1 x 3K length node");
    if (!(scale > 0.0))
        throw Error(ErrorCode::InvalidArgument, "ordering penalty scale must be positive");
    const MatrixXd& l = lengths.value();
    MatrixXd d = MatrixXd::Zero(1, l.cols());
    double total = 0.0;
    for (Eigen::Index k = 0; k < l.cols(); k += 3) {
        for (Eigen::Index other : {k + 1, k + 2}) {
            const double gap = (l(0, k) - l(0, other)) / scale;
            if (gap <= 0.0)
                continue;
            total += gap * gap;
            d(0, k) += 2.0 * weight * gap / scale;
            d(0, other) -= 2.0 * weight * gap / scale;
        }
    }
    const int il = lengths.id();
    return lengths.tape()->record(MatrixXd::Constant(1, 1, weight * total), "ordering_penalty",
                                  [il, d](ad::Tape& t, const MatrixXd& adj) { t.accumulate(il, adj(0, 0) * d); });
}

namespace {

void check_dataset(const Dataset& dataset) {
    if (dataset.empty())
        throw Error(ErrorCode::InvalidArgument, "training set is empty");
    for (const auto& item : dataset.items)
        if (!(item.signal.grid == dataset.grid) || item.signal.values.size() != dataset.grid.size())
            throw Error(ErrorCode::GridMismatch, "dataset signal does not share the dataset time grid");
}

} // namespace

double train_loss(const ModelParams& w, const Dataset& dataset) {
    check_dataset(dataset);
    std::vector<SourceLocation> locs;
    for (const auto& item : dataset.items)
        locs.push_back(item.location);
    const Eigen::RowVectorXd l = pln_forward_batch(w.pln, pln_inputs(locs, dataset.environment.receiver_depth));
    double total = 0.0;
    for (std::size_t k = 0; k < dataset.size(); ++k) {
        const auto kk = static_cast<Eigen::Index>(3 * k);
        total += evaluate_misfit(MisfitTarget::raw(dataset.items[k].signal), {l(kk), l(kk + 1), l(kk + 2)},
                                 w.sound_speed, w.pulse, false)
                     .value;
    }
    return total / static_cast<double>(dataset.size());
}

Layout model_layout(const ModelParams& w) {
    Layout layout = w.pln.weights.layout;
    layout.add("c", 1, 1);
    return layout;
}

VectorXd model_vector(const ModelParams& w) {
    VectorXd v(w.pln.weights.size() + 1);
    v << w.pln.weights.values, w.sound_speed;
    return v;
}

void set_model_vector(ModelParams& w, const VectorXd& v) {
    if (v.size() != w.pln.weights.size() + 1)
        throw Error(ErrorCode::InvalidArgument, "model vector has the wrong length");
    w.pln.weights.values = v.head(w.pln.weights.size());
    w.sound_speed = v[v.size() - 1];
}

namespace {

struct PreparedBatch {
    std::vector<MisfitTarget> targets;
    MatrixXd inputs;
};

} // namespace

LossProgram train_loss_program(const ModelParams& w, const Dataset& dataset) {
    check_dataset(dataset);
    auto prepared = std::make_shared<PreparedBatch>();
    std::vector<SourceLocation> locs;
    for (const auto& item : dataset.items) {
        prepared->targets.push_back(MisfitTarget::raw(item.signal));
        locs.push_back(item.location);
    }
    prepared->inputs = pln_inputs(locs, dataset.environment.receiver_depth);
    const ModelParams meta = w;
    const Eigen::Index c_index = w.pln.weights.size();
    return [prepared, meta, c_index](ad::Tape& tape, const ad::Var& params) {
        const ad::Var in = tape.constant(prepared->inputs, "inputs");
        const ad::Var lengths = pln_forward(tape, meta.pln, params, 0, in);
        const ad::Var c = ad::reshape_segment(params, c_index, 1, 1);
        std::vector<const MisfitTarget*> ptrs;
        for (const auto& t : prepared->targets)
            ptrs.push_back(&t);
        return signal_misfit(lengths, c, ptrs, meta.pulse, 1.0 / static_cast<double>(ptrs.size()));
    };
}

std::vector<CurriculumStage> TrainConfig::default_curriculum() {
    return {{0.160, 300}, {0.060, 400}, {0.020, 800}, {0.008, 1000}, {0.003, 1000},
            {0.0012, 1000}, {0.0005, 1000}, {0.0002, 1000}, {0.0, 2000}};
}

void TrainConfig::validate() const {
    if (epochs < 1 || batch_size < 1)
        throw Error(ErrorCode::InvalidArgument, "epochs and batch size must be positive");
    if (rate_reference_width < 0.0)
        throw Error(ErrorCode::InvalidArgument, "rate reference width must be non-negative");
    if (warmup_fraction < 0.0 || warmup_fraction >= 1.0 || final_lr_factor < 0.0)
        throw Error(ErrorCode::InvalidArgument, "learning-rate schedule parameters out of range");
    if (ordering_weight < 0.0)
        throw Error(ErrorCode::InvalidArgument, "ordering weight must be non-negative");
    if (learning_rate < 0.0 || !(epsilon > 0.0) || beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0)
        throw Error(ErrorCode::InvalidArgument, "invalid optimiser settings");
    if (curriculum.empty())
        throw Error(ErrorCode::InvalidArgument, "training curriculum is empty");
    for (const auto& s : curriculum)
        if (s.kernel_sigma < 0.0 || s.epoch_fraction < 0.0)
            throw Error(ErrorCode::InvalidArgument, "curriculum stages need non-negative widths and fractions");
}

double PlnAccuracy::worst() const {
    return *std::max_element(max_rel_error.begin(), max_rel_error.end());
}

PlnAccuracy pln_accuracy(const PlnParams& pln, const Environment& env, const Region& region, int n) {
    std::vector<SourceLocation> locs;
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            const double fx = n == 1 ? 0.5 : static_cast<double>(i) / (n - 1);
            const double fz = n == 1 ? 0.5 : static_cast<double>(j) / (n - 1);
            locs.push_back({region.x_min + fx * (region.x_max - region.x_min),
                            region.z_min + fz * (region.z_max - region.z_min)});
        }
    const Eigen::RowVectorXd l = pln_forward_batch(pln, pln_inputs(locs, env.receiver_depth));
    PlnAccuracy acc;
    for (std::size_t k = 0; k < locs.size(); ++k)
        for (std::size_t i = 0; i < 3; ++i) {
            const double truth = path_length(env, locs[k], kThreeRayPaths[i]);
            const double rel = std::abs(l(static_cast<Eigen::Index>(3 * k + i)) - truth) / truth;
            acc.max_rel_error[i] = std::max(acc.max_rel_error[i], rel);
            acc.rms_rel_error[i] += rel * rel;
        }
    for (auto& r : acc.rms_rel_error)
        r = std::sqrt(r / static_cast<double>(locs.size()));
    return acc;
}

double pulse_resolution(const AnalyticPulse& pulse, double sound_speed) {
    const double omega = 2.0 * std::numbers::pi * pulse.center_freq;
    return sound_speed / std::sqrt(omega * omega + 1.0 / (pulse.envelope_sigma * pulse.envelope_sigma));
}

namespace {

// Grid stride that keeps several samples per carrier cycle and per envelope
// width of the smoothed pulse.
int stage_stride(const AnalyticPulse& smoothed, double sample_rate) {
    const double highest = smoothed.center_freq + 1.0 / smoothed.envelope_sigma;
    return std::max(1, static_cast<int>(std::floor(sample_rate / (4.0 * highest))));
}

double stage_rate(const TrainConfig& cfg, double base, int e, int stage_epochs) {
    const double warmup = std::floor(cfg.warmup_fraction * stage_epochs);
    if (e < warmup)
        return base * (e + 1.0) / (warmup + 1.0);
    const double span = stage_epochs - warmup - 1.0;
    const double progress = span > 0.0 ? (e - warmup) / span : 1.0;
    return base *
           (cfg.final_lr_factor + (1.0 - cfg.final_lr_factor) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress)));
}

} // namespace

Checkpoint pretrain(const Dataset& dataset, const PlnArchitecture& arch, const TrainConfig& cfg,
                    const TrainObserver& observer) {
    check_dataset(dataset);
    ModelParams init;
    init.pln = pln_init(arch, cfg.seed, dataset.region, dataset.environment);
    init.sound_speed = dataset.environment.sound_speed;
    init.receiver_depth = dataset.environment.receiver_depth;
    init.pulse = dataset.pulse;
    return pretrain_from(dataset, std::move(init), cfg, observer);
}

Checkpoint pretrain_from(const Dataset& dataset, ModelParams model, const TrainConfig& cfg,
                         const TrainObserver& observer) {
    check_dataset(dataset);
    cfg.validate();

    Checkpoint ckpt;
    ckpt.meta.environment = dataset.environment;
    ckpt.meta.region = dataset.region;
    ckpt.meta.n_train = dataset.size();
    ckpt.meta.seed = cfg.seed;
    ckpt.meta.epochs = cfg.epochs;
    ckpt.meta.initial_loss = train_loss(model, dataset);

    const std::size_t n = dataset.size();
    std::vector<SourceLocation> locs;
    for (const auto& item : dataset.items)
        locs.push_back(item.location);
    const MatrixXd all_inputs = pln_inputs(locs, dataset.environment.receiver_depth);

    double fraction_total = 0.0;
    for (const auto& s : cfg.curriculum)
        fraction_total += s.epoch_fraction;

    VectorXd& w = model.pln.weights.values;
    const Eigen::Index nw = w.size();
    std::mt19937_64 rng(mix_seed(cfg.seed, 0x7a11));
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);

    int epoch = 0;
    int stages_left = static_cast<int>(cfg.curriculum.size());
    for (const CurriculumStage& stage : cfg.curriculum) {
        --stages_left;
        int stage_epochs = static_cast<int>(std::lround(cfg.epochs * stage.epoch_fraction / fraction_total));
        if (stages_left == 0)
            stage_epochs = cfg.epochs - epoch;
        if (stage_epochs <= 0)
            continue;

        const AnalyticPulse pulse = smooth_pulse(model.pulse, stage.kernel_sigma);
        const int stride = stage.kernel_sigma > 0.0 ? stage_stride(pulse, dataset.grid.sample_rate) : 1;
        std::vector<MisfitTarget> targets;
        targets.reserve(n);
        // Each sample's misfit is measured relative to its own energy so distant
        // (quiet) sources are fitted as tightly as near ones.
        std::vector<double> inv_energy;
        inv_energy.reserve(n);
        for (const auto& item : dataset.items) {
            targets.push_back(MisfitTarget::smoothed(item.signal, stage.kernel_sigma, stride));
            const double e = targets.back().energy();
            inv_energy.push_back(e > 0.0 ? 1.0 / e : 1.0);
        }

        double base_rate = cfg.learning_rate;
        if (cfg.rate_reference_width > 0.0)
            base_rate *= std::min(1.0, pulse_resolution(pulse, model.sound_speed) / cfg.rate_reference_width);

        // Moments restart with each stage: the stage losses live on different scales.
        VectorXd m1 = VectorXd::Zero(nw);
        VectorXd m2 = VectorXd::Zero(nw);
        long step = 0;
        for (int e = 0; e < stage_epochs; ++e, ++epoch) {
            const double lr = stage_rate(cfg, base_rate, e, stage_epochs);
            std::shuffle(order.begin(), order.end(), rng);
            double epoch_loss = 0.0;
            for (std::size_t start = 0; start < n; start += static_cast<std::size_t>(cfg.batch_size)) {
                const std::size_t end = std::min(n, start + static_cast<std::size_t>(cfg.batch_size));
                const auto bsz = static_cast<Eigen::Index>(end - start);
                MatrixXd inputs(kPlnInputs, 3 * bsz);
                std::vector<const MisfitTarget*> ptrs;
                std::vector<double> weights;
                for (std::size_t b = start; b < end; ++b) {
                    inputs.middleCols(static_cast<Eigen::Index>(3 * (b - start)), 3) =
                        all_inputs.middleCols(static_cast<Eigen::Index>(3 * order[b]), 3);
                    ptrs.push_back(&targets[order[b]]);
                    weights.push_back(inv_energy[order[b]] / static_cast<double>(bsz));
                }
                ad::Tape tape;
                const ad::Var flat = tape.variable(w, "weights");
                const ad::Var in = tape.constant(std::move(inputs), "inputs");
                const ad::Var lengths = pln_forward(tape, model.pln, flat, 0, in);
                const ad::Var c = tape.constant(model.sound_speed);
                ad::Var loss = signal_misfit(lengths, c, ptrs, pulse, weights);
                if (cfg.ordering_weight > 0.0)
                    loss = loss + ordering_penalty(lengths, model.pln.length_scale,
                                                   cfg.ordering_weight / static_cast<double>(bsz));
                const double value = loss.scalar();
                if (!std::isfinite(value))
                    throw Error(ErrorCode::Divergence, "training loss became non-finite at epoch " + std::to_string(epoch));
                epoch_loss += value * static_cast<double>(bsz);
                tape.backward(loss);
                const VectorXd g = tape.adjoint(flat).col(0);

                ++step;
                m1 = cfg.beta1 * m1 + (1.0 - cfg.beta1) * g;
                m2 = cfg.beta2 * m2 + (1.0 - cfg.beta2) * g.cwiseAbs2();
                const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
                const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
                w.array() -= lr * (m1.array() / c1) / ((m2.array() / c2).sqrt() + cfg.epsilon);
                if (!w.allFinite())
                    throw Error(ErrorCode::Divergence, "weights became non-finite at epoch " + std::to_string(epoch));
            }
            epoch_loss /= static_cast<double>(n);
            if (cfg.log_every > 0 && (epoch % cfg.log_every == 0 || epoch + 1 == cfg.epochs)) {
                LossPoint pt{epoch, stage.kernel_sigma, epoch_loss, train_loss(model, dataset)};
                ckpt.meta.loss_curve.push_back(pt);
                if (observer)
                    observer(pt);
            }
        }
    }

    ckpt.model = std::move(model);
    ckpt.meta.final_loss = train_loss(ckpt.model, dataset);
    ckpt.meta.heldout_region = cfg.heldout_region.value_or(dataset.region);
    const PlnAccuracy acc = pln_accuracy(ckpt.model.pln, dataset.environment, ckpt.meta.heldout_region, 20);
    ckpt.meta.heldout_max_rel_error = acc.worst();
    if (acc.worst() > 0.005)
        ckpt.meta.warnings.push_back("held-out path-length error " + std::to_string(100.0 * acc.worst()) +
                                     "% exceeds 0.5%");
    const auto& curve = ckpt.meta.loss_curve;
    for (std::size_t i = 1; i < curve.size(); ++i)
        if (curve[i - 1].epoch >= 5 && curve[i - 1].train_loss > 0.0)
            ckpt.meta.max_loss_increase =
                std::max(ckpt.meta.max_loss_increase, curve[i].train_loss / curve[i - 1].train_loss - 1.0);
    if (ckpt.meta.max_loss_increase > 0.1)
        ckpt.meta.warnings.push_back("L_tr rose by " + std::to_string(100.0 * ckpt.meta.max_loss_increase) +
                                     "% between logged epochs");
    return ckpt;
}

namespace {

json arch_to_json(const PlnArchitecture& a) {
    return json{{"hidden", a.hidden}, {"activation", a.activation}, {"output", a.output}};
}

PlnArchitecture arch_from_json(const json& j) {
    PlnArchitecture a;
    a.hidden = j.at("hidden").get<std::vector<int>>();
    a.activation = j.at("activation").get<std::string>();
    a.output = j.at("output").get<std::string>();
    a.validate();
    return a;
}

VectorXd scalars_of(const Checkpoint& c) {
    const auto& m = c.model;
    VectorXd s(10);
    s << m.pln.length_scale, m.sound_speed, m.receiver_depth, m.pulse.center_freq, m.pulse.bandwidth, m.pulse.center_time,
        m.pulse.envelope_sigma, m.pulse.amplitude, c.meta.initial_loss, c.meta.final_loss;
    return s;
}

} // namespace

std::string checkpoint_to_string(const Checkpoint& ckpt) {
    const auto& m = ckpt.model;
    json curve = json::array();
    for (const auto& p : ckpt.meta.loss_curve)
        curve.push_back({p.epoch, p.kernel_sigma, p.stage_loss, p.train_loss});
    json j{{"format_version", ckpt.format_version},
           {"architecture", arch_to_json(m.pln.arch)},
           {"adapt_sound_speed", m.adapt_sound_speed},
           {"weights_hex", encode_f64_hex(m.pln.weights.values)},
           {"norm_shift_hex", encode_f64_hex(m.pln.norm.shift)},
           {"norm_scale_hex", encode_f64_hex(m.pln.norm.scale)},
           {"scalars_hex", encode_f64_hex(scalars_of(ckpt))},
           {"readable",
            {{"length_scale", m.pln.length_scale},
             {"sound_speed", m.sound_speed},
             {"pulse", m.pulse},
             {"n_weights", m.pln.weights.size()}}},
           {"training",
            {{"environment", ckpt.meta.environment},
             {"region", ckpt.meta.region},
             {"n_train", ckpt.meta.n_train},
             {"seed", ckpt.meta.seed},
             {"epochs", ckpt.meta.epochs},
             {"initial_loss", ckpt.meta.initial_loss},
             {"final_loss", ckpt.meta.final_loss},
             {"heldout_region", ckpt.meta.heldout_region},
             {"heldout_max_rel_error", ckpt.meta.heldout_max_rel_error},
             {"max_loss_increase", ckpt.meta.max_loss_increase},
             {"warnings", ckpt.meta.warnings},
             {"loss_curve", curve}}}};
    return j.dump(1) + "\n";
}

Checkpoint checkpoint_from_string(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw Error(ErrorCode::CorruptPayload, std::string("checkpoint is not valid JSON: ") + e.what());
    }
    try {
        Checkpoint c;
        c.format_version = j.at("format_version").get<int>();
        if (c.format_version != Checkpoint::kFormatVersion)
            throw Error(ErrorCode::VersionMismatch, "checkpoint format " + std::to_string(c.format_version) +
                                                        " is not supported (expected " +
                                                        std::to_string(Checkpoint::kFormatVersion) + ")");
        auto& m = c.model;
        m.pln.arch = arch_from_json(j.at("architecture"));
        m.adapt_sound_speed = j.value("adapt_sound_speed", false);
        const Layout layout = pln_layout(m.pln.arch);
        VectorXd weights = decode_f64_hex(j.at("weights_hex").get<std::string>());
        if (weights.size() != layout.size())
            throw Error(ErrorCode::CorruptPayload, "weight payload does not match the architecture");
        m.pln.weights = ParamVector(layout, std::move(weights));
        const VectorXd shift = decode_f64_hex(j.at("norm_shift_hex").get<std::string>());
        const VectorXd scale = decode_f64_hex(j.at("norm_scale_hex").get<std::string>());
        const VectorXd s = decode_f64_hex(j.at("scalars_hex").get<std::string>());
        if (shift.size() != kPlnInputs || scale.size() != kPlnInputs || s.size() != 10)
            throw Error(ErrorCode::CorruptPayload, "scalar payload has the wrong length");
        m.pln.norm.shift = shift;
        m.pln.norm.scale = scale;
        m.pln.length_scale = s[0];
        m.sound_speed = s[1];
        m.receiver_depth = s[2];
        m.pulse.center_freq = s[3];
        m.pulse.bandwidth = s[4];
        m.pulse.center_time = s[5];
        m.pulse.envelope_sigma = s[6];
        m.pulse.amplitude = s[7];
        c.meta.initial_loss = s[8];
        c.meta.final_loss = s[9];
        const json& t = j.at("training");
        c.meta.environment = t.at("environment").get<Environment>();
        c.meta.region = t.at("region").get<Region>();
        c.meta.n_train = t.at("n_train").get<std::size_t>();
        c.meta.seed = t.at("seed").get<std::uint64_t>();
        c.meta.epochs = t.at("epochs").get<int>();
        c.meta.heldout_region = t.at("heldout_region").get<Region>();
        c.meta.heldout_max_rel_error = t.at("heldout_max_rel_error").get<double>();
        c.meta.max_loss_increase = t.at("max_loss_increase").get<double>();
        c.meta.warnings = t.at("warnings").get<std::vector<std::string>>();
        for (const auto& p : t.at("loss_curve"))
            c.meta.loss_curve.push_back(
                {p.at(0).get<int>(), p.at(1).get<double>(), p.at(2).get<double>(), p.at(3).get<double>()});
        return c;
    } catch (const json::exception& e) {
        throw Error(ErrorCode::CorruptPayload, std::string("checkpoint is missing fields: ") + e.what());
    }
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
    if (path.has_parent_path())
        std::filesystem::create_directories(path.parent_path());
    write_text_file(path, checkpoint_to_string(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path))
        throw Error(ErrorCode::MissingCheckpoint, "no checkpoint at " + path.string());
    return checkpoint_from_string(read_text_file(path));
}

} // namespace aqualoc

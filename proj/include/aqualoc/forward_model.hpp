#ifndef AQUALOC_FORWARD_MODEL_HPP
#define AQUALOC_FORWARD_MODEL_HPP

#include "aqualoc/diff.hpp"
#include "aqualoc/environment.hpp"
#include "aqualoc/pln.hpp"
#include "aqualoc/signal.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace aqualoc {

/// PLN, sound speed and source pulse: everything f_w(t, p) needs.
struct ModelParams {
    PlnParams pln;
    double sound_speed = 1500.0;
    bool adapt_sound_speed = false;
    double receiver_depth = 120.0;  // m, fed to the PLN as z_r
    AnalyticPulse pulse;
};

/// alpha = rho / l, tau = l / c.
std::pair<double, double> alpha_tau(double length, double rho, double sound_speed);

using LengthFn = std::function<std::array<double, 3>(const SourceLocation&)>;

std::array<double, 3> model_lengths(const ModelParams& w, const SourceLocation& p);

/// f_w(t, p) on the grid.
SampledSignal model_output(const ModelParams& w, const SourceLocation& p, const TimeGrid& grid);

/// Same superposition with the lengths supplied by `lengths` (for example the
/// image-source oracle).
SampledSignal model_output(const LengthFn& lengths, double sound_speed, const AnalyticPulse& pulse,
                           const SourceLocation& p, const TimeGrid& grid);

/// An observed signal as seen by the misfit: samples on a uniform grid
/// starting at t = 0 with the given spacing.
struct MisfitTarget {
    Eigen::VectorXd samples;
    double spacing = 0.0;
    double total_sq = 0.0;  // sum of samples^2

    static MisfitTarget raw(const SampledSignal& r);
    /// r convolved with a unit-area Gaussian of width kernel_sigma, sampled
    /// every `stride` grid points.
    static MisfitTarget smoothed(const SampledSignal& r, double kernel_sigma, int stride);

    double energy() const { return spacing * total_sq; }
};

/// Misfit of one target against a superposition with lengths/speed:
/// spacing * sum_j (R_j - F_j)^2, plus d/d(alpha_i) and d/d(tau_i).
struct MisfitEval {
    double value = 0.0;
    std::array<double, 3> d_alpha{};
    std::array<double, 3> d_tau{};
};

MisfitEval evaluate_misfit(const MisfitTarget& target, const std::array<double, 3>& lengths, double sound_speed,
                           const AnalyticPulse& pulse, bool with_gradient);

/// weight * sum_k misfit(target_k) as a tape node. `lengths` is 1 x 3K with the
/// three rays of target k in columns 3k..3k+2; `sound_speed` is 1 x 1.
ad::Var signal_misfit(const ad::Var& lengths, const ad::Var& sound_speed,
                      const std::vector<const MisfitTarget*>& targets, const AnalyticPulse& pulse, double weight);
/// Same with one weight per target.
ad::Var signal_misfit(const ad::Var& lengths, const ad::Var& sound_speed,
                      const std::vector<const MisfitTarget*>& targets, const AnalyticPulse& pulse,
                      const std::vector<double>& weights);

/// weight * sum_k [relu(l_d - l_s)^2 + relu(l_d - l_b)^2] / scale^2 over the
/// 1 x 3K length node. Zero whenever the direct ray is the shortest, which holds
/// for every source inside the column; it only matters while the rays are
/// still unlabelled (direct and bottom rays look alike in the signal).
ad::Var ordering_penalty(const ad::Var& lengths, double scale, double weight);

/// (1/N) sum_k dt sum_n (r_k - f_w)^2.
double train_loss(const ModelParams& w, const Dataset& dataset);

/// Flat layout of the trainable model: PLN segments followed by "c".
Layout model_layout(const ModelParams& w);
Eigen::VectorXd model_vector(const ModelParams& w);
void set_model_vector(ModelParams& w, const Eigen::VectorXd& v);

/// train_loss as a differentiable program over model_layout.
LossProgram train_loss_program(const ModelParams& w, const Dataset& dataset);

/// Length resolution c / sqrt(omega0^2 + 1/sigma^2) of a pulse, m.
double pulse_resolution(const AnalyticPulse& pulse, double sound_speed);

/// One pulse-smoothing stage of pre-training.
struct CurriculumStage {
    double kernel_sigma = 0.0;  // s
    double epoch_fraction = 0.0;  // share of cfg.epochs, relative to the other stages
};

struct TrainConfig {
    int epochs = 8500;
    int batch_size = 32;
    double learning_rate = 3e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    /// Within every stage the rate ramps up linearly over warmup_fraction of
    /// the stage, then decays (cosine) to final_lr_factor * learning_rate.
    double warmup_fraction = 0.1;
    /// Stage rates are scaled by min(1, w / rate_reference_width) where
    /// w = c / sqrt(omega0'^2 + 1/sigma'^2) is the length resolution of the
    /// stage's pulse. 0 disables the scaling.
    double rate_reference_width = 30.0;
    double final_lr_factor = 0.01;
    std::uint64_t seed = 1;
    int log_every = 50;
    /// Weight of ordering_penalty (per sample, lengths in units of the PLN
    /// length scale). 0 disables it.
    double ordering_weight = 10.0;
    std::vector<CurriculumStage> curriculum = default_curriculum();
    /// Region of the held-out accuracy check; the dataset region when unset.
    std::optional<Region> heldout_region;

    static std::vector<CurriculumStage> default_curriculum();
    void validate() const;
};

struct LossPoint {
    int epoch = 0;
    double kernel_sigma = 0.0;
    double stage_loss = 0.0;  // normalised loss of the active stage
    double train_loss = 0.0;  // L_tr on the raw data after this epoch
};

struct TrainingMetadata {
    Environment environment;
    Region region;
    std::size_t n_train = 0;
    std::uint64_t seed = 0;
    int epochs = 0;
    double initial_loss = 0.0;  // L_tr before training
    double final_loss = 0.0;    // L_tr after training
    Region heldout_region;
    double heldout_max_rel_error = 0.0;
    /// Largest relative rise of L_tr between consecutive logged epochs after epoch 5.
    double max_loss_increase = 0.0;
    std::vector<std::string> warnings;
    std::vector<LossPoint> loss_curve;
};

struct Checkpoint {
    static constexpr int kFormatVersion = 1;
    int format_version = kFormatVersion;
    ModelParams model;
    TrainingMetadata meta;
};

/// Path-length relative errors of the PLN against the image-source lengths on
/// an n x n grid covering the region.
struct PlnAccuracy {
    std::array<double, 3> max_rel_error{};
    std::array<double, 3> rms_rel_error{};
    double worst() const;
};
PlnAccuracy pln_accuracy(const PlnParams& pln, const Environment& env, const Region& region, int n);

using TrainObserver = std::function<void(const LossPoint&)>;

/// Mini-batch Adam on L_tr. The early stages fit Gaussian-smoothed copies of
/// the data against the equally smoothed closed-form pulse, so the misfit has
/// a basin wide enough to be found from a random start; the last stage fits the
/// raw data.
Checkpoint pretrain(const Dataset& dataset, const PlnArchitecture& arch, const TrainConfig& cfg,
                    const TrainObserver& observer = {});

/// Continue training an existing model (used by tests with lr = 0).
Checkpoint pretrain_from(const Dataset& dataset, ModelParams init, const TrainConfig& cfg,
                         const TrainObserver& observer = {});

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);
std::string checkpoint_to_string(const Checkpoint& ckpt);
Checkpoint checkpoint_from_string(const std::string& text);

} // namespace aqualoc

#endif

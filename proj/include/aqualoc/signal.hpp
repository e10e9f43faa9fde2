#ifndef AQUALOC_SIGNAL_HPP
#define AQUALOC_SIGNAL_HPP

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <numbers>

namespace aqualoc {

/// Gaussian-windowed cosine source pulse
///
///   s(t) = A exp(-(t - t_c)^2 / (2 sigma^2)) cos(2 pi f0 (t - t_c))
///
/// with sigma = 1 / (pi B). The same closed form also describes the pulse
/// after convolution with a unit-area Gaussian kernel (see smooth_pulse), in
/// which case the amplitude drops below one and the carrier slows down.
struct AnalyticPulse {
    double center_freq = 750.0;  // Hz
    double bandwidth = 500.0;    // Hz
    double center_time = 0.05;   // s
    double envelope_sigma = 1.0 / (std::numbers::pi * 500.0);  // s
    double amplitude = 1.0;

    /// Half-width beyond which |s| < amplitude * exp(-72).
    double support_halfwidth() const { return 12.0 * envelope_sigma; }
};

AnalyticPulse make_pulse(double center_freq, double bandwidth, double center_time);

/// Pulse obtained by convolving `pulse` with a unit-area Gaussian of standard
/// deviation `kernel_sigma`. Exact in continuous time; kernel_sigma == 0 returns
/// the pulse unchanged.
AnalyticPulse smooth_pulse(const AnalyticPulse& pulse, double kernel_sigma);

template <typename Scalar>
Scalar eval_pulse(const AnalyticPulse& p, const Scalar& t) {
    using std::cos;
    using std::exp;
    const Scalar u = t - p.center_time;
    const double omega = 2.0 * std::numbers::pi * p.center_freq;
    return p.amplitude * exp(-u * u / (2.0 * p.envelope_sigma * p.envelope_sigma)) * cos(omega * u);
}

template <typename Scalar>
Scalar eval_pulse_dt(const AnalyticPulse& p, const Scalar& t) {
    using std::cos;
    using std::exp;
    using std::sin;
    const Scalar u = t - p.center_time;
    const double omega = 2.0 * std::numbers::pi * p.center_freq;
    const double inv_var = 1.0 / (p.envelope_sigma * p.envelope_sigma);
    const Scalar env = p.amplitude * exp(-0.5 * u * u * inv_var);
    return -env * (u * inv_var * cos(omega * u) + omega * sin(omega * u));
}

/// Value and time derivative in one pass; the hot loops of the loss use this.
inline void eval_pulse_with_dt(const AnalyticPulse& p, double t, double& value, double& dt) {
    const double u = t - p.center_time;
    const double omega = 2.0 * std::numbers::pi * p.center_freq;
    const double inv_var = 1.0 / (p.envelope_sigma * p.envelope_sigma);
    const double env = p.amplitude * std::exp(-0.5 * u * u * inv_var);
    const double c = std::cos(omega * u);
    const double s = std::sin(omega * u);
    value = env * c;
    dt = -env * (u * inv_var * c + omega * s);
}

struct TimeGrid {
    double sample_rate = 4000.0;  // Hz
    double duration = 2.0;        // s

    TimeGrid() = default;
    TimeGrid(double fs, double T);

    Eigen::Index size() const { return static_cast<Eigen::Index>(std::llround(sample_rate * duration)); }
    double dt() const { return 1.0 / sample_rate; }
    double time(Eigen::Index k) const { return static_cast<double>(k) / sample_rate; }

    bool operator==(const TimeGrid&) const = default;
};

struct SampledSignal {
    TimeGrid grid;
    Eigen::VectorXd values;

    SampledSignal() = default;
    explicit SampledSignal(const TimeGrid& g) : grid(g), values(Eigen::VectorXd::Zero(g.size())) {}
    SampledSignal(const TimeGrid& g, Eigen::VectorXd v);
};

struct NoiseSpec {
    double n0 = 0.0;  // one-sided PSD, signal^2 / Hz
    std::uint64_t seed = 0;
};

SampledSignal sample_pulse(const AnalyticPulse& pulse, const TimeGrid& grid);

/// Riemann sum dt * sum(values^2).
double energy(const SampledSignal& sig);

/// N0 such that energy / (B N0) equals snr_linear.
double snr_to_n0(const SampledSignal& sig, double snr_linear, double bandwidth);

inline double db_to_linear(double db) { return std::pow(10.0, db / 10.0); }

/// i.i.d. Gaussian samples with variance N0 fs / 2, drawn from a generator
/// seeded by spec.seed.
SampledSignal add_awgn(const SampledSignal& sig, const NoiseSpec& spec);

/// splitmix64 finaliser; used to derive per-item seeds from a master seed.
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);

} // namespace aqualoc

#endif

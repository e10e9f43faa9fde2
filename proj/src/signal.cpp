#include "aqualoc/signal.hpp"

#include "aqualoc/error.hpp"

#include <random>
#include <string>

namespace aqualoc {

AnalyticPulse make_pulse(double center_freq, double bandwidth, double center_time) {
    if (!(center_freq > 0.0))
        throw Error(ErrorCode::InvalidArgument, "pulse center frequency must be positive");
    if (!(bandwidth > 0.0))
        throw Error(ErrorCode::InvalidArgument, "pulse bandwidth must be positive");
    if (!(center_time >= 0.0))
        throw Error(ErrorCode::InvalidArgument, "pulse center time must be non-negative");
    AnalyticPulse p;
    p.center_freq = center_freq;
    p.bandwidth = bandwidth;
    p.center_time = center_time;
    p.envelope_sigma = 1.0 / (std::numbers::pi * bandwidth);
    p.amplitude = 1.0;
    return p;
}

AnalyticPulse smooth_pulse(const AnalyticPulse& pulse, double kernel_sigma) {
    if (kernel_sigma < 0.0)
        throw Error(ErrorCode::InvalidArgument, "smoothing kernel width must be non-negative");
    if (kernel_sigma == 0.0)
        return pulse;
    // Re[exp(-u^2/(2a) + i w u)] * N(0, b) = sqrt(a/(a+b)) exp(-w^2 a b / (2(a+b)))
    //   * exp(-u^2 / (2(a+b))) cos(w a u / (a+b))
    const double a = pulse.envelope_sigma * pulse.envelope_sigma;
    const double b = kernel_sigma * kernel_sigma;
    const double omega = 2.0 * std::numbers::pi * pulse.center_freq;
    AnalyticPulse out = pulse;
    out.envelope_sigma = std::sqrt(a + b);
    out.center_freq = pulse.center_freq * a / (a + b);
    out.bandwidth = 1.0 / (std::numbers::pi * out.envelope_sigma);
    out.amplitude = pulse.amplitude * std::sqrt(a / (a + b)) * std::exp(-omega * omega * a * b / (2.0 * (a + b)));
    return out;
}

TimeGrid::TimeGrid(double fs, double T) : sample_rate(fs), duration(T) {
    if (!(fs > 0.0) || !(T > 0.0))
        throw Error(ErrorCode::InvalidArgument, "time grid needs positive sample rate and duration");
    if (size() < 1)
        throw Error(ErrorCode::InvalidArgument, "time grid has no samples");
}

SampledSignal::SampledSignal(const TimeGrid& g, Eigen::VectorXd v) : grid(g), values(std::move(v)) {
    if (values.size() != grid.size())
        throw Error(ErrorCode::GridMismatch,
                    "signal has " + std::to_string(values.size()) + " samples, grid expects " +
                        std::to_string(grid.size()));
}

SampledSignal sample_pulse(const AnalyticPulse& pulse, const TimeGrid& grid) {
    SampledSignal out(grid);
    for (Eigen::Index k = 0; k < out.values.size(); ++k)
        out.values[k] = eval_pulse(pulse, grid.time(k));
    return out;
}

double energy(const SampledSignal& sig) {
    return sig.grid.dt() * sig.values.squaredNorm();
}

double snr_to_n0(const SampledSignal& sig, double snr_linear, double bandwidth) {
    if (!(snr_linear > 0.0) || !(bandwidth > 0.0))
        throw Error(ErrorCode::InvalidArgument, "SNR and bandwidth must be positive");
    const double e = energy(sig);
    if (!(e > 0.0))
        throw Error(ErrorCode::InvalidArgument, "cannot define SNR for a zero-energy signal");
    return e / (bandwidth * snr_linear);
}

SampledSignal add_awgn(const SampledSignal& sig, const NoiseSpec& spec) {
    if (spec.n0 < 0.0)
        throw Error(ErrorCode::InvalidArgument, "noise PSD must be non-negative");
    SampledSignal out = sig;
    if (spec.n0 == 0.0)
        return out;
    const double stddev = std::sqrt(spec.n0 * sig.grid.sample_rate / 2.0);
    std::mt19937_64 rng(spec.seed);
    std::normal_distribution<double> normal(0.0, stddev);
    for (Eigen::Index k = 0; k < out.values.size(); ++k)
        out.values[k] += normal(rng);
    return out;
}

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
    std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

} // namespace aqualoc

#ifndef AQUALOC_ENVIRONMENT_HPP
#define AQUALOC_ENVIRONMENT_HPP

#include "aqualoc/error.hpp"
#include "aqualoc/signal.hpp"

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace aqualoc {

/// Isovelocity waveguide. The receiver sits at range 0.
struct Environment {
    double depth = 200.0;          // m
    double sound_speed = 1500.0;   // m/s
    double receiver_depth = 120.0; // m

    void validate() const;
    bool operator==(const Environment&) const = default;
};

struct SourceLocation {
    double x = 610.0; // range, m
    double z = 20.0;  // depth, m

    bool operator==(const SourceLocation&) const = default;
};

struct PathSpec {
    int surface_bounces = 0;
    int bottom_bounces = 0;

    bool operator==(const PathSpec&) const = default;
};

inline constexpr std::array<PathSpec, 3> kThreeRayPaths{{{0, 0}, {1, 0}, {0, 1}}};

bool is_three_ray(const PathSpec& path);

/// Image-source length of one of the three rays. Templated so the same
/// expression serves plain doubles and differentiable scalars.
template <typename Scalar>
Scalar path_length(const Environment& env, const Scalar& x, const Scalar& z, const PathSpec& path) {
    using std::sqrt;
    const double zr = env.receiver_depth;
    Scalar dz;
    if (path.surface_bounces == 0 && path.bottom_bounces == 0)
        dz = z - zr;
    else if (path.surface_bounces == 1 && path.bottom_bounces == 0)
        dz = z + zr;
    else if (path.surface_bounces == 0 && path.bottom_bounces == 1)
        dz = 2.0 * env.depth - z - zr;
    else
        throw Error(ErrorCode::UnsupportedPath, "only the direct, surface and bottom rays are modelled");
    return sqrt(x * x + dz * dz);
}

double path_length(const Environment& env, const SourceLocation& p, const PathSpec& path);

/// d(length)/d(x, z) of the image-source length.
Eigen::Vector2d path_length_gradient(const Environment& env, const SourceLocation& p, const PathSpec& path);

std::array<double, 3> three_ray_lengths(const Environment& env, const SourceLocation& p);

/// (-1)^(surface bounces): pressure-release surface, rigid bottom.
inline double reflection_coeff(const PathSpec& path) {
    return (path.surface_bounces % 2 == 0) ? 1.0 : -1.0;
}

/// Superposition sum_i (rho_i / l_i) s(t - l_i / c) on the grid. Samples
/// farther than the pulse support from every arrival are exactly zero. Shared by
/// the synthetic oracle and the learned model so both produce identical bits
/// for identical lengths.
SampledSignal superpose_paths(const std::array<double, 3>& lengths, double sound_speed,
                              const AnalyticPulse& pulse, const TimeGrid& grid);

/// Throws ObservationWindowExceeded if any arrival plus pulse support falls
/// outside [0, T].
void check_observation_window(const std::array<double, 3>& lengths, double sound_speed,
                              const AnalyticPulse& pulse, const TimeGrid& grid);

/// The nature operator: noiseless three-ray field plus AWGN.
SampledSignal synthesize_received(const Environment& env, const SourceLocation& p, const AnalyticPulse& pulse,
                                  const TimeGrid& grid, const NoiseSpec& noise = {});

struct Region {
    double x_min = 300.0;
    double x_max = 900.0;
    double z_min = 5.0;
    double z_max = 100.0;

    bool contains(const SourceLocation& p) const {
        return p.x >= x_min && p.x <= x_max && p.z >= z_min && p.z <= z_max;
    }
    bool operator==(const Region&) const = default;
};

struct NoisePolicy {
    bool noisy = false;
    double snr_db = 20.0;
};

/// Region grown by `fraction` of its extent on every side; the shallow edge
/// stops at half of z_min so sources stay below the surface.
Region pad_region(const Region& region, double fraction);

/// How gen_dataset places training locations.
enum class Sampling { Stratified, Lattice };

std::string to_string(Sampling s);
Sampling sampling_from_string(const std::string& name);

struct DatasetItem {
    SourceLocation location;
    SampledSignal signal;
};

struct Dataset {
    Environment environment;
    TimeGrid grid;
    AnalyticPulse pulse;
    Region region;
    NoisePolicy noise;
    Sampling sampling = Sampling::Stratified;
    std::uint64_t seed = 0;
    std::vector<DatasetItem> items;

    std::size_t size() const { return items.size(); }
    bool empty() const { return items.empty(); }
};

/// Stratified locations: the region is split into a near-square grid of cells,
/// n distinct cells are drawn and each location is jittered inside its cell.
std::vector<SourceLocation> stratified_locations(const Region& region, std::size_t n, std::uint64_t seed);

/// Boundary-inclusive side x side lattice, side = ceil(sqrt(n)); when side^2 > n
/// a seeded subset of n nodes is kept.
std::vector<SourceLocation> lattice_locations(const Region& region, std::size_t n, std::uint64_t seed);

Dataset gen_dataset(const Environment& env, const Region& region, std::size_t n, const AnalyticPulse& pulse,
                    const TimeGrid& grid, const NoisePolicy& noise, std::uint64_t seed,
                    Sampling sampling = Sampling::Stratified);

/// Directory layout: manifest.json, locations.csv and signal_<k>.f64 holding
/// little-endian binary64 samples.
void save_dataset(const Dataset& ds, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);

} // namespace aqualoc

#endif

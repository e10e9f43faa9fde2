#include "aqualoc/environment.hpp"

#include "aqualoc/serialization.hpp"

#include <algorithm>
#include <bit>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

namespace aqualoc {

void Environment::validate() const {
    if (!(depth > 0.0))
        throw Error(ErrorCode::InvalidArgument, "water depth must be positive");
    if (!(sound_speed > 0.0))
        throw Error(ErrorCode::InvalidArgument, "sound speed must be positive");
    if (!(receiver_depth > 0.0 && receiver_depth < depth))
        throw Error(ErrorCode::InvalidArgument, "receiver must lie strictly inside the water column");
}

bool is_three_ray(const PathSpec& path) {
    return std::find(kThreeRayPaths.begin(), kThreeRayPaths.end(), path) != kThreeRayPaths.end();
}

double path_length(const Environment& env, const SourceLocation& p, const PathSpec& path) {
    return path_length<double>(env, p.x, p.z, path);
}

Eigen::Vector2d path_length_gradient(const Environment& env, const SourceLocation& p, const PathSpec& path) {
    const double len = path_length(env, p, path);
    double dz = 0.0;
    double dz_dz = 0.0;
    if (path == PathSpec{0, 0}) {
        dz = p.z - env.receiver_depth;
        dz_dz = 1.0;
    } else if (path == PathSpec{1, 0}) {
        dz = p.z + env.receiver_depth;
        dz_dz = 1.0;
    } else {
        dz = 2.0 * env.depth - p.z - env.receiver_depth;
        dz_dz = -1.0;
    }
    return {p.x / len, dz * dz_dz / len};
}

std::array<double, 3> three_ray_lengths(const Environment& env, const SourceLocation& p) {
    std::array<double, 3> out{};
    for (std::size_t i = 0; i < 3; ++i)
        out[i] = path_length(env, p, kThreeRayPaths[i]);
    return out;
}

void check_observation_window(const std::array<double, 3>& lengths, double sound_speed,
                              const AnalyticPulse& pulse, const TimeGrid& grid) {
    for (double len : lengths) {
        const double arrival = len / sound_speed + pulse.center_time;
        if (arrival + pulse.support_halfwidth() > grid.duration)
            throw Error(ErrorCode::ObservationWindowExceeded,
                        "arrival at " + std::to_string(arrival) + " s does not fit in a " +
                            std::to_string(grid.duration) + " s window");
    }
}

SampledSignal superpose_paths(const std::array<double, 3>& lengths, double sound_speed,
                              const AnalyticPulse& pulse, const TimeGrid& grid) {
    SampledSignal out(grid);
    const double fs = grid.sample_rate;
    const Eigen::Index n = out.values.size();
    const double half = pulse.support_halfwidth();
    for (std::size_t i = 0; i < 3; ++i) {
        const double alpha = reflection_coeff(kThreeRayPaths[i]) / lengths[i];
        const double tau = lengths[i] / sound_speed;
        const double centre = tau + pulse.center_time;
        const auto lo = std::max<Eigen::Index>(0, static_cast<Eigen::Index>(std::ceil((centre - half) * fs)));
        const auto hi = std::min<Eigen::Index>(n - 1, static_cast<Eigen::Index>(std::floor((centre + half) * fs)));
        for (Eigen::Index k = lo; k <= hi; ++k)
            out.values[k] += alpha * eval_pulse(pulse, grid.time(k) - tau);
    }
    return out;
}

SampledSignal synthesize_received(const Environment& env, const SourceLocation& p, const AnalyticPulse& pulse,
                                  const TimeGrid& grid, const NoiseSpec& noise) {
    env.validate();
    const auto lengths = three_ray_lengths(env, p);
    check_observation_window(lengths, env.sound_speed, pulse, grid);
    return add_awgn(superpose_paths(lengths, env.sound_speed, pulse, grid), noise);
}

std::vector<SourceLocation> stratified_locations(const Region& region, std::size_t n, std::uint64_t seed) {
    std::vector<SourceLocation> out;
    if (n == 0)
        return out;
    const auto side = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(n))));
    std::vector<std::size_t> cells(side * side);
    std::iota(cells.begin(), cells.end(), 0);
    std::mt19937_64 rng(mix_seed(seed, 0x5eed));
    if (cells.size() > n) {
        std::shuffle(cells.begin(), cells.end(), rng);
        cells.resize(n);
        std::sort(cells.begin(), cells.end());
    }
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const double wx = (region.x_max - region.x_min) / static_cast<double>(side);
    const double wz = (region.z_max - region.z_min) / static_cast<double>(side);
    out.reserve(n);
    for (std::size_t cell : cells) {
        const double ix = static_cast<double>(cell % side);
        const double iz = static_cast<double>(cell / side);
        out.push_back({region.x_min + (ix + unit(rng)) * wx, region.z_min + (iz + unit(rng)) * wz});
    }
    return out;
}

std::vector<SourceLocation> lattice_locations(const Region& region, std::size_t n, std::uint64_t seed) {
    std::vector<SourceLocation> out;
    if (n == 0)
        return out;
    const auto side = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(n))));
    std::vector<std::size_t> nodes(side * side);
    std::iota(nodes.begin(), nodes.end(), 0);
    if (nodes.size() > n) {
        std::mt19937_64 rng(mix_seed(seed, 0x1a77));
        std::shuffle(nodes.begin(), nodes.end(), rng);
        nodes.resize(n);
        std::sort(nodes.begin(), nodes.end());
    }
    auto coord = [side](double lo, double hi, std::size_t i) {
        return side == 1 ? 0.5 * (lo + hi) : lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(side - 1);
    };
    out.reserve(n);
    for (std::size_t node : nodes)
        out.push_back({coord(region.x_min, region.x_max, node % side), coord(region.z_min, region.z_max, node / side)});
    return out;
}

Region pad_region(const Region& region, double fraction) {
    if (fraction < 0.0)
        throw Error(ErrorCode::InvalidArgument, "region padding must be non-negative");
    const double dx = fraction * (region.x_max - region.x_min);
    const double dz = fraction * (region.z_max - region.z_min);
    return {std::max(0.0, region.x_min - dx), region.x_max + dx, std::max(0.5 * region.z_min, region.z_min - dz),
            region.z_max + dz};
}

std::string to_string(Sampling s) {
    return s == Sampling::Lattice ? "lattice" : "stratified";
}

Sampling sampling_from_string(const std::string& name) {
    if (name == "stratified")
        return Sampling::Stratified;
    if (name == "lattice")
        return Sampling::Lattice;
    throw Error(ErrorCode::InvalidArgument, "unknown sampling scheme '" + name + "'");
}

Dataset gen_dataset(const Environment& env, const Region& region, std::size_t n, const AnalyticPulse& pulse,
                    const TimeGrid& grid, const NoisePolicy& noise, std::uint64_t seed, Sampling sampling) {
    env.validate();
    if (!(region.x_max > region.x_min) || !(region.z_max > region.z_min))
        throw Error(ErrorCode::EmptyRegion, "training region has zero area");
    if (region.x_min < 0.0 || region.z_min <= 0.0 || region.z_max >= env.depth)
        throw Error(ErrorCode::InvalidArgument, "training region leaves the water column");

    Dataset ds;
    ds.environment = env;
    ds.grid = grid;
    ds.pulse = pulse;
    ds.region = region;
    ds.noise = noise;
    ds.sampling = sampling;
    ds.seed = seed;
    const auto locations =
        sampling == Sampling::Lattice ? lattice_locations(region, n, seed) : stratified_locations(region, n, seed);
    for (const auto& loc : locations) {
        const std::size_t k = ds.items.size();
        NoiseSpec spec{0.0, mix_seed(seed, k)};
        if (noise.noisy) {
            const SampledSignal clean = synthesize_received(env, loc, pulse, grid);
            spec.n0 = snr_to_n0(clean, db_to_linear(noise.snr_db), pulse.bandwidth);
            ds.items.push_back({loc, add_awgn(clean, spec)});
        } else {
            ds.items.push_back({loc, synthesize_received(env, loc, pulse, grid, spec)});
        }
    }
    return ds;
}

namespace {

constexpr int kDatasetFormat = 1;

std::string signal_file_name(std::size_t k) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "signal_%05zu.f64", k);
    return buf;
}

void write_f64_le(const std::filesystem::path& path, const Eigen::VectorXd& v) {
    std::string bytes(static_cast<std::size_t>(v.size()) * 8, '\0');
    for (Eigen::Index i = 0; i < v.size(); ++i) {
        auto bits = std::bit_cast<std::uint64_t>(v[i]);
        for (int b = 0; b < 8; ++b)
            bytes[static_cast<std::size_t>(i * 8 + b)] = static_cast<char>((bits >> (8 * b)) & 0xffU);
    }
    write_text_file(path, bytes);
}

Eigen::VectorXd read_f64_le(const std::filesystem::path& path, Eigen::Index expected) {
    const std::string bytes = read_text_file(path);
    if (bytes.size() != static_cast<std::size_t>(expected) * 8)
        throw Error(ErrorCode::CorruptPayload, path.string() + " has " + std::to_string(bytes.size()) +
                                                   " bytes, expected " + std::to_string(expected * 8));
    Eigen::VectorXd v(expected);
    for (Eigen::Index i = 0; i < expected; ++i) {
        std::uint64_t bits = 0;
        for (int b = 0; b < 8; ++b)
            bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[static_cast<std::size_t>(i * 8 + b)]))
                    << (8 * b);
        v[i] = std::bit_cast<double>(bits);
    }
    return v;
}

} // namespace

void save_dataset(const Dataset& ds, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    json manifest{{"format", kDatasetFormat},
                  {"environment", ds.environment},
                  {"grid", ds.grid},
                  {"pulse", ds.pulse},
                  {"region", ds.region},
                  {"noisy", ds.noise.noisy},
                  {"snr_db", ds.noise.snr_db},
                  {"sampling", to_string(ds.sampling)},
                  {"seed", ds.seed},
                  {"count", ds.items.size()}};
    write_text_file(dir / "manifest.json", manifest.dump(2) + "\n");

    std::ostringstream csv;
    csv.precision(17);
    csv << "index,x_s,z_s\n";
    for (std::size_t k = 0; k < ds.items.size(); ++k) {
        csv << k << ',' << ds.items[k].location.x << ',' << ds.items[k].location.z << '\n';
        write_f64_le(dir / signal_file_name(k), ds.items[k].signal.values);
    }
    write_text_file(dir / "locations.csv", csv.str());
}

Dataset load_dataset(const std::filesystem::path& dir) {
    const json manifest = parse_json_text(read_text_file(dir / "manifest.json"), (dir / "manifest.json").string());
    if (manifest.value("format", 0) != kDatasetFormat)
        throw Error(ErrorCode::VersionMismatch, "unsupported dataset format in " + dir.string());
    Dataset ds;
    ds.environment = manifest.at("environment").get<Environment>();
    ds.grid = manifest.at("grid").get<TimeGrid>();
    ds.pulse = manifest.at("pulse").get<AnalyticPulse>();
    ds.region = manifest.at("region").get<Region>();
    ds.noise.noisy = manifest.value("noisy", false);
    ds.noise.snr_db = manifest.value("snr_db", 20.0);
    ds.sampling = sampling_from_string(manifest.value("sampling", std::string("stratified")));
    ds.seed = manifest.at("seed").get<std::uint64_t>();
    const auto count = manifest.at("count").get<std::size_t>();

    std::istringstream csv(read_text_file(dir / "locations.csv"));
    std::string line;
    std::getline(csv, line);
    for (std::size_t k = 0; k < count; ++k) {
        if (!std::getline(csv, line))
            throw Error(ErrorCode::CorruptPayload, "locations.csv ends early");
        std::size_t idx = 0;
        double x = 0.0;
        double z = 0.0;
        if (std::sscanf(line.c_str(), "%zu,%lf,%lf", &idx, &x, &z) != 3 || idx != k)
            throw Error(ErrorCode::CorruptPayload, "bad locations.csv row " + std::to_string(k));
        ds.items.push_back({{x, z}, SampledSignal(ds.grid, read_f64_le(dir / signal_file_name(k), ds.grid.size()))});
    }
    return ds;
}

} // namespace aqualoc

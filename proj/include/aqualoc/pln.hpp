#ifndef AQUALOC_PLN_HPP
#define AQUALOC_PLN_HPP

#include "aqualoc/diff.hpp"
#include "aqualoc/environment.hpp"
#include "aqualoc/tape.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <string>
#include <vector>

namespace aqualoc {

inline constexpr Eigen::Index kPlnInputs = 5;

/// Fully connected path-length network: (x_s, z_s, z_r, N_s, N_b) -> length.
struct PlnArchitecture {
    std::vector<int> hidden{64, 64, 64};
    std::string activation = "tanh";
    std::string output = "softplus";

    static PlnArchitecture standard() { return {}; }
    /// One hidden layer of width 8; small enough for dense Hessians.
    static PlnArchitecture reduced() { return {{8}, "tanh", "softplus"}; }

    void validate() const;
    bool operator==(const PlnArchitecture&) const = default;
};

/// Affine map of raw inputs onto roughly [-1, 1].
struct InputNormalization {
    Eigen::Matrix<double, kPlnInputs, 1> shift = Eigen::Matrix<double, kPlnInputs, 1>::Zero();
    Eigen::Matrix<double, kPlnInputs, 1> scale = Eigen::Matrix<double, kPlnInputs, 1>::Ones();

    static InputNormalization from_region(const Region& region, const Environment& env);
    bool operator==(const InputNormalization&) const = default;
};

struct PlnParams {
    PlnArchitecture arch;
    ParamVector weights;
    InputNormalization norm;
    double length_scale = 500.0;  // m, multiplies the softplus head
};

/// Segments W0, b0, W1, b1, ..., W_out, b_out.
Layout pln_layout(const PlnArchitecture& arch);

/// Glorot-uniform weights, zero biases, normalisation from the training region.
PlnParams pln_init(const PlnArchitecture& arch, std::uint64_t seed, const Region& region, const Environment& env,
                   double length_scale = 500.0);

/// Raw input column for one ray.
Eigen::Matrix<double, kPlnInputs, 1> pln_input(double x, double z, double receiver_depth, const PathSpec& path);

/// 5 x n matrix of raw inputs, one column per (location, ray).
Eigen::MatrixXd pln_inputs(const std::vector<SourceLocation>& locations, double receiver_depth);

double pln_forward(const PlnParams& params, double x, double z, double receiver_depth, int surface_bounces,
                   int bottom_bounces);

/// Lengths for every column of a raw input matrix.
Eigen::RowVectorXd pln_forward_batch(const PlnParams& params, const Eigen::MatrixXd& raw_inputs);

/// Differentiable forward pass. `flat` holds the network weights starting at
/// `offset` in the layout returned by pln_layout; `raw_inputs` is 5 x n.
ad::Var pln_forward(ad::Tape& tape, const PlnParams& meta, const ad::Var& flat, Eigen::Index offset,
                    const ad::Var& raw_inputs);

/// Raw-input node for the three rays at a differentiable source position
/// (2 x 1 node holding x, z). Output is 5 x 3.
ad::Var pln_ray_inputs(const ad::Var& position, double receiver_depth);

} // namespace aqualoc

#endif

#include "aqualoc/pln.hpp"

#include "aqualoc/error.hpp"

#include <cmath>
#include <random>

namespace aqualoc {

using Eigen::MatrixXd;

void PlnArchitecture::validate() const {
    if (hidden.empty())
        throw Error(ErrorCode::InvalidArgument, "PLN needs at least one hidden layer");
    for (int w : hidden)
        if (w <= 0)
            throw Error(ErrorCode::InvalidArgument, "PLN hidden widths must be positive");
    if (activation != "tanh" && activation != "softplus")
        throw Error(ErrorCode::InvalidArgument, "unknown PLN activation '" + activation + "'");
    if (output != "softplus")
        throw Error(ErrorCode::InvalidArgument, "PLN output transform must be 'softplus'");
}

InputNormalization InputNormalization::from_region(const Region& region, const Environment& env) {
    InputNormalization n;
    n.shift << 0.5 * (region.x_min + region.x_max), 0.5 * (region.z_min + region.z_max), env.receiver_depth, 0.0, 0.0;
    n.scale << 0.5 * (region.x_max - region.x_min), 0.5 * (region.z_max - region.z_min), 0.5 * env.depth, 1.0, 1.0;
    return n;
}

Layout pln_layout(const PlnArchitecture& arch) {
    arch.validate();
    Layout layout;
    Eigen::Index fan_in = kPlnInputs;
    for (std::size_t l = 0; l < arch.hidden.size(); ++l) {
        layout.add("W" + std::to_string(l), arch.hidden[l], fan_in);
        layout.add("b" + std::to_string(l), arch.hidden[l], 1);
        fan_in = arch.hidden[l];
    }
    layout.add("W_out", 1, fan_in);
    layout.add("b_out", 1, 1);
    return layout;
}

PlnParams pln_init(const PlnArchitecture& arch, std::uint64_t seed, const Region& region, const Environment& env,
                   double length_scale) {
    if (!(length_scale > 0.0))
        throw Error(ErrorCode::InvalidArgument, "PLN length scale must be positive");
    PlnParams p;
    p.arch = arch;
    p.weights = ParamVector(pln_layout(arch));
    p.norm = InputNormalization::from_region(region, env);
    p.length_scale = length_scale;
    std::mt19937_64 rng(seed);
    for (const Segment& s : p.weights.layout.segments()) {
        if (s.name[0] != 'W')
            continue;
        const double limit = std::sqrt(6.0 / static_cast<double>(s.rows + s.cols));
        std::uniform_real_distribution<double> u(-limit, limit);
        auto w = p.weights.view(s.name);
        for (Eigen::Index j = 0; j < w.cols(); ++j)
            for (Eigen::Index i = 0; i < w.rows(); ++i)
                w(i, j) = u(rng);
    }
    return p;
}

Eigen::Matrix<double, kPlnInputs, 1> pln_input(double x, double z, double receiver_depth, const PathSpec& path) {
    Eigen::Matrix<double, kPlnInputs, 1> in;
    in << x, z, receiver_depth, path.surface_bounces, path.bottom_bounces;
    return in;
}

MatrixXd pln_inputs(const std::vector<SourceLocation>& locations, double receiver_depth) {
    MatrixXd in(kPlnInputs, static_cast<Eigen::Index>(3 * locations.size()));
    Eigen::Index col = 0;
    for (const auto& loc : locations)
        for (const auto& path : kThreeRayPaths)
            in.col(col++) = pln_input(loc.x, loc.z, receiver_depth, path);
    return in;
}

namespace {

double softplus_d(double x) {
    return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

MatrixXd activate(const std::string& name, const MatrixXd& z) {
    if (name == "tanh")
        return z.array().tanh().matrix();
    return z.unaryExpr(&softplus_d);
}

} // namespace

Eigen::RowVectorXd pln_forward_batch(const PlnParams& params, const MatrixXd& raw_inputs) {
    if (raw_inputs.rows() != kPlnInputs)
        throw Error(ErrorCode::InvalidArgument, "PLN expects 5 input rows");
    MatrixXd h = ((raw_inputs.colwise() - params.norm.shift).array().colwise() / params.norm.scale.array()).matrix();
    for (std::size_t l = 0; l < params.arch.hidden.size(); ++l) {
        const auto w = params.weights.view("W" + std::to_string(l));
        const auto b = params.weights.view("b" + std::to_string(l));
        h = activate(params.arch.activation, (w * h).colwise() + b.col(0));
    }
    const auto w = params.weights.view("W_out");
    const auto b = params.weights.view("b_out");
    MatrixXd out = (w * h).array() + b(0, 0);
    return params.length_scale * out.unaryExpr(&softplus_d).row(0);
}

double pln_forward(const PlnParams& params, double x, double z, double receiver_depth, int surface_bounces,
                   int bottom_bounces) {
    const MatrixXd in = pln_input(x, z, receiver_depth, {surface_bounces, bottom_bounces});
    return pln_forward_batch(params, in)(0);
}

ad::Var pln_forward(ad::Tape& tape, const PlnParams& meta, const ad::Var& flat, Eigen::Index offset,
                    const ad::Var& raw_inputs) {
    if (raw_inputs.rows() != kPlnInputs)
        throw Error(ErrorCode::InvalidArgument, "PLN expects 5 input rows");
    const Eigen::Matrix<double, kPlnInputs, 1> inv_scale = meta.norm.scale.cwiseInverse();
    const Eigen::Matrix<double, kPlnInputs, 1> shift = meta.norm.shift;
    MatrixXd normalized =
        ((raw_inputs.value().colwise() - shift).array().colwise() * inv_scale.array()).matrix();
    const int in_id = raw_inputs.id();
    ad::Var h = tape.record(std::move(normalized), "pln_normalize", [in_id, inv_scale](ad::Tape& t, const MatrixXd& adj) {
        t.accumulate(in_id, (adj.array().colwise() * inv_scale.array()).matrix());
    });
    const Layout& layout = meta.weights.layout;
    for (std::size_t l = 0; l < meta.arch.hidden.size(); ++l) {
        const Segment& ws = layout.at("W" + std::to_string(l));
        const Segment& bs = layout.at("b" + std::to_string(l));
        const ad::Var w = ad::reshape_segment(flat, offset + ws.offset, ws.rows, ws.cols);
        const ad::Var b = ad::reshape_segment(flat, offset + bs.offset, bs.rows, bs.cols);
        const ad::Var z = ad::add_columnwise(ad::matmul(w, h), b);
        h = meta.arch.activation == "tanh" ? ad::tanh(z) : ad::softplus(z);
    }
    const Segment& ws = layout.at("W_out");
    const Segment& bs = layout.at("b_out");
    const ad::Var w = ad::reshape_segment(flat, offset + ws.offset, ws.rows, ws.cols);
    const ad::Var b = ad::reshape_segment(flat, offset + bs.offset, bs.rows, bs.cols);
    return meta.length_scale * ad::softplus(ad::add_columnwise(ad::matmul(w, h), b));
}

ad::Var pln_ray_inputs(const ad::Var& position, double receiver_depth) {
    if (position.rows() != 2 || position.cols() != 1)
        throw Error(ErrorCode::InvalidArgument, "source position node must be 2 x 1");
    MatrixXd in(kPlnInputs, 3);
    for (Eigen::Index i = 0; i < 3; ++i)
        in.col(i) = pln_input(position.value()(0, 0), position.value()(1, 0), receiver_depth,
                              kThreeRayPaths[static_cast<std::size_t>(i)]);
    const int id = position.id();
    return position.tape()->record(std::move(in), "ray_inputs", [id](ad::Tape& t, const MatrixXd& adj) {
        t.accumulate(id, adj.topRows(2).rowwise().sum());
    });
}

} // namespace aqualoc

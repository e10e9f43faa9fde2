#include "aqualoc/diff.hpp"

#include "aqualoc/error.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

namespace aqualoc {

Layout& Layout::add(std::string name, Eigen::Index rows, Eigen::Index cols) {
    if (rows < 0 || cols < 0)
        throw Error(ErrorCode::InvalidArgument, "negative segment extent");
    if (find(name))
        throw Error(ErrorCode::InvalidArgument, "duplicate segment '" + name + "'");
    segments_.push_back({std::move(name), size_, rows, cols});
    size_ += rows * cols;
    return *this;
}

const Segment& Layout::at(const std::string& name) const {
    for (const auto& s : segments_)
        if (s.name == name)
            return s;
    throw Error(ErrorCode::InvalidArgument, "no segment named '" + name + "'");
}

std::optional<Segment> Layout::find(const std::string& name) const {
    for (const auto& s : segments_)
        if (s.name == name)
            return s;
    return std::nullopt;
}

ParamVector::ParamVector(Layout l, Eigen::VectorXd v) : layout(std::move(l)), values(std::move(v)) {
    if (values.size() != layout.size())
        throw Error(ErrorCode::InvalidArgument, "parameter vector does not match its layout");
}

Eigen::Map<Eigen::MatrixXd> ParamVector::view(const std::string& name) {
    const Segment& s = layout.at(name);
    return {values.data() + s.offset, s.rows, s.cols};
}

Eigen::Map<const Eigen::MatrixXd> ParamVector::view(const std::string& name) const {
    const Segment& s = layout.at(name);
    return {values.data() + s.offset, s.rows, s.cols};
}

double value_and_grad(const LossProgram& loss, const Eigen::VectorXd& at, Eigen::VectorXd& gradient) {
    ad::Tape tape;
    const ad::Var params = tape.variable(at, "params");
    const ad::Var out = loss(tape, params);
    const double value = out.scalar();
    tape.backward(out);
    gradient = tape.adjoint(params).col(0);
    return value;
}

double evaluate(const LossProgram& loss, const Eigen::VectorXd& at) {
    ad::Tape tape;
    const ad::Var params = tape.variable(at, "params");
    return loss(tape, params).scalar();
}

ParamVector grad(const LossProgram& loss, const ParamVector& at) {
    Eigen::VectorXd g;
    value_and_grad(loss, at.values, g);
    return {at.layout, std::move(g)};
}

double relative_error(double a, double b) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-12});
}

GradReport fd_check(const LossProgram& loss, const ParamVector& at, double h, std::size_t max_coords,
                    std::uint64_t seed) {
    if (!(h > 0.0))
        throw Error(ErrorCode::InvalidArgument, "finite-difference step must be positive");
    GradReport report;
    report.analytic = grad(loss, at);
    report.finite_difference = ParamVector(at.layout, Eigen::VectorXd::Constant(at.size(),
                                                                               std::numeric_limits<double>::quiet_NaN()));
    std::vector<Eigen::Index> coords(static_cast<std::size_t>(at.size()));
    std::iota(coords.begin(), coords.end(), 0);
    if (coords.size() > max_coords) {
        std::mt19937_64 rng(seed);
        std::shuffle(coords.begin(), coords.end(), rng);
        coords.resize(max_coords);
        std::sort(coords.begin(), coords.end());
    }
    Eigen::VectorXd x = at.values;
    for (Eigen::Index i : coords) {
        const double xi = x[i];
        x[i] = xi + h;
        const double fp = evaluate(loss, x);
        x[i] = xi - h;
        const double fm = evaluate(loss, x);
        x[i] = xi;
        const double fd = (fp - fm) / (2.0 * h);
        report.finite_difference.values[i] = fd;
        const double err = relative_error(report.analytic.values[i], fd);
        if (err > report.max_relative_error || report.worst_coordinate < 0) {
            report.max_relative_error = err;
            report.worst_coordinate = i;
        }
    }
    report.probed = std::move(coords);
    return report;
}

ParamVector hvp(const LossProgram& loss, const ParamVector& at, const ParamVector& dir, double step) {
    if (dir.size() != at.size())
        throw Error(ErrorCode::InvalidArgument, "hvp direction does not match the point");
    const double h = step > 0.0 ? step : 1e-4 * (1.0 + at.values.lpNorm<Eigen::Infinity>());
    Eigen::VectorXd gp;
    Eigen::VectorXd gm;
    value_and_grad(loss, at.values + h * dir.values, gp);
    value_and_grad(loss, at.values - h * dir.values, gm);
    return {at.layout, (gp - gm) / (2.0 * h)};
}

} // namespace aqualoc

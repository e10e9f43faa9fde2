#ifndef AQUALOC_DIFF_HPP
#define AQUALOC_DIFF_HPP

#include "aqualoc/tape.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace aqualoc {

struct Segment {
    std::string name;
    Eigen::Index offset = 0;
    Eigen::Index rows = 0;
    Eigen::Index cols = 1;

    Eigen::Index size() const { return rows * cols; }
    bool operator==(const Segment&) const = default;
};

/// Names contiguous pieces of a flat parameter vector.
class Layout {
public:
    Layout& add(std::string name, Eigen::Index rows, Eigen::Index cols = 1);
    const std::vector<Segment>& segments() const { return segments_; }
    Eigen::Index size() const { return size_; }
    const Segment& at(const std::string& name) const;
    std::optional<Segment> find(const std::string& name) const;
    bool operator==(const Layout&) const = default;

private:
    std::vector<Segment> segments_;
    Eigen::Index size_ = 0;
};

struct ParamVector {
    Layout layout;
    Eigen::VectorXd values;

    ParamVector() = default;
    ParamVector(Layout l, Eigen::VectorXd v);
    explicit ParamVector(Layout l) : layout(std::move(l)), values(Eigen::VectorXd::Zero(layout.size())) {}

    Eigen::Index size() const { return values.size(); }
    Eigen::Map<Eigen::MatrixXd> view(const std::string& name);
    Eigen::Map<const Eigen::MatrixXd> view(const std::string& name) const;
};

/// A scalar program over a flat parameter node. Programs slice the node with
/// ad::reshape_segment using the layout they were written against.
using LossProgram = std::function<ad::Var(ad::Tape&, const ad::Var& params)>;

/// Loss value and reverse-mode gradient in one sweep.
double value_and_grad(const LossProgram& loss, const Eigen::VectorXd& at, Eigen::VectorXd& gradient);

/// Loss value only (records a tape and drops it).
double evaluate(const LossProgram& loss, const Eigen::VectorXd& at);

ParamVector grad(const LossProgram& loss, const ParamVector& at);

struct GradReport {
    ParamVector analytic;
    ParamVector finite_difference;  // NaN where a coordinate was not probed
    std::vector<Eigen::Index> probed;
    double max_relative_error = 0.0;
    Eigen::Index worst_coordinate = -1;
};

/// Relative error with the 1e-12 denominator guard.
double relative_error(double a, double b);

/// Central differences with absolute step h on `max_coords` coordinates drawn
/// without replacement (all coordinates when max_coords >= size).
GradReport fd_check(const LossProgram& loss, const ParamVector& at, double h, std::size_t max_coords = 50,
                    std::uint64_t seed = 0);

/// Symmetric difference of gradients along `dir`. With step <= 0 the step is
/// 1e-4 (1 + max|at|).
ParamVector hvp(const LossProgram& loss, const ParamVector& at, const ParamVector& dir, double step = 0.0);

} // namespace aqualoc

#endif

#ifndef AQUALOC_TAPE_HPP
#define AQUALOC_TAPE_HPP

#include <Eigen/Dense>

#include <functional>
#include <string>
#include <vector>

namespace aqualoc::ad {

class Tape;

/// Handle to a matrix-valued node on a Tape. Cheap to copy; only valid while
/// its tape is alive.
class Var {
public:
    Var() = default;
    Var(Tape* tape, int id) : tape_(tape), id_(id) {}

    Tape* tape() const { return tape_; }
    int id() const { return id_; }
    bool valid() const { return tape_ != nullptr; }

    const Eigen::MatrixXd& value() const;
    Eigen::Index rows() const { return value().rows(); }
    Eigen::Index cols() const { return value().cols(); }
    /// Value of a 1x1 node.
    double scalar() const;

private:
    Tape* tape_ = nullptr;
    int id_ = -1;
};

/// Receives the adjoint of a node's output and pushes contributions to its
/// parents through Tape::accumulate.
using Backward = std::function<void(Tape&, const Eigen::MatrixXd& out_adjoint)>;

/// Reverse-accumulation tape. Nodes are appended in evaluation order, so a
/// single reverse sweep visits every node after all of its consumers. A tape is
/// single-use: record, call backward once, read adjoints.
class Tape {
public:
    Tape() { nodes_.reserve(64); }
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var constant(Eigen::MatrixXd value, const char* label = "constant");
    Var variable(Eigen::MatrixXd value, const char* label = "variable");
    Var constant(double value) { return constant(Eigen::MatrixXd::Constant(1, 1, value)); }

    /// Appends a computed node. Non-finite values raise NumericOverflow naming
    /// `op` and the node index.
    Var record(Eigen::MatrixXd value, const char* op, Backward backward);

    void backward(const Var& output);
    void accumulate(int id, const Eigen::MatrixXd& contribution);
    /// Adds `contribution` to the block of node `id` starting at (row, col).
    void accumulate_block(int id, Eigen::Index row, Eigen::Index col, const Eigen::MatrixXd& contribution);

    const Eigen::MatrixXd& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
    /// Adjoint after backward(); zeros for nodes the output does not depend on.
    Eigen::MatrixXd adjoint(const Var& v) const;
    std::size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Eigen::MatrixXd value;
        Eigen::MatrixXd adjoint;
        Backward backward;
        const char* op;
    };
    std::vector<Node> nodes_;
    bool swept_ = false;
};

// Elementwise arithmetic. A 1x1 operand broadcasts against any shape.
Var operator+(const Var& a, const Var& b);
Var operator-(const Var& a, const Var& b);
Var operator*(const Var& a, const Var& b);
Var operator/(const Var& a, const Var& b);
Var operator-(const Var& a);
Var operator*(double s, const Var& a);
Var operator*(const Var& a, double s);
Var operator+(const Var& a, double s);
Var operator-(const Var& a, double s);

Var matmul(const Var& a, const Var& b);
/// a (m x n) plus column vector b (m x 1) added to every column.
Var add_columnwise(const Var& a, const Var& b);
Var tanh(const Var& a);
/// log(1 + exp(a)), evaluated without overflow.
Var softplus(const Var& a);
Var exp(const Var& a);
Var log(const Var& a);
Var sqrt(const Var& a);
Var sin(const Var& a);
Var cos(const Var& a);
Var square(const Var& a);
Var sum(const Var& a);
Var dot(const Var& a, const Var& b);
/// rows x cols matrix read column-major from a flat column vector at `offset`.
Var reshape_segment(const Var& flat, Eigen::Index offset, Eigen::Index rows, Eigen::Index cols);
Var block(const Var& a, Eigen::Index row, Eigen::Index col, Eigen::Index rows, Eigen::Index cols);
/// Stacks rows of equal width.
Var vstack(const std::vector<Var>& parts);
/// Tiles a matrix horizontally `times` times.
Var repeat_columns(const Var& a, Eigen::Index times);

} // namespace aqualoc::ad

#endif

#include "aqualoc/tape.hpp"

#include "aqualoc/error.hpp"

#include <cmath>
#include <string>

namespace aqualoc::ad {

using Eigen::MatrixXd;

const MatrixXd& Var::value() const {
    return tape_->value(id_);
}

double Var::scalar() const {
    const MatrixXd& v = value();
    if (v.size() != 1)
        throw Error(ErrorCode::InvalidArgument, "scalar() on a non-scalar node");
    return v(0, 0);
}

Var Tape::constant(MatrixXd value, const char* label) {
    nodes_.push_back({std::move(value), {}, nullptr, label});
    return {this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::variable(MatrixXd value, const char* label) {
    return constant(std::move(value), label);
}

Var Tape::record(MatrixXd value, const char* op, Backward backward) {
    if (!value.allFinite())
        throw Error(ErrorCode::NumericOverflow,
                    std::string("non-finite value produced by '") + op + "' at node " + std::to_string(nodes_.size()));
    nodes_.push_back({std::move(value), {}, std::move(backward), op});
    return {this, static_cast<int>(nodes_.size()) - 1};
}

void Tape::accumulate(int id, const MatrixXd& contribution) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.adjoint.size() == 0)
        n.adjoint = contribution;
    else
        n.adjoint += contribution;
}

void Tape::accumulate_block(int id, Eigen::Index row, Eigen::Index col, const MatrixXd& contribution) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.adjoint.size() == 0)
        n.adjoint = MatrixXd::Zero(n.value.rows(), n.value.cols());
    n.adjoint.block(row, col, contribution.rows(), contribution.cols()) += contribution;
}

void Tape::backward(const Var& output) {
    if (swept_)
        throw Error(ErrorCode::InvalidArgument, "tape already swept; record a fresh one");
    swept_ = true;
    if (output.value().size() != 1)
        throw Error(ErrorCode::InvalidArgument, "backward needs a scalar output");
    nodes_[static_cast<std::size_t>(output.id())].adjoint = MatrixXd::Ones(1, 1);
    for (int i = output.id(); i >= 0; --i) {
        Node& n = nodes_[static_cast<std::size_t>(i)];
        if (n.backward && n.adjoint.size() != 0)
            n.backward(*this, n.adjoint);
    }
}

MatrixXd Tape::adjoint(const Var& v) const {
    const Node& n = nodes_[static_cast<std::size_t>(v.id())];
    if (n.adjoint.size() == 0)
        return MatrixXd::Zero(n.value.rows(), n.value.cols());
    return n.adjoint;
}

namespace {

bool is_scalar(const Var& v) {
    return v.value().size() == 1;
}

// Sums an adjoint down to the operand's shape when it was broadcast.
MatrixXd reduce_to(const MatrixXd& adj, const Var& operand) {
    if (is_scalar(operand) && adj.size() != 1)
        return MatrixXd::Constant(1, 1, adj.sum());
    return adj;
}

void check_binary_shapes(const Var& a, const Var& b, const char* op) {
    if (a.tape() != b.tape())
        throw Error(ErrorCode::InvalidArgument, std::string(op) + ": operands live on different tapes");
    if (is_scalar(a) || is_scalar(b))
        return;
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw Error(ErrorCode::InvalidArgument, std::string(op) + ": shape mismatch");
}

MatrixXd broadcast(const Var& v, Eigen::Index rows, Eigen::Index cols) {
    if (is_scalar(v) && (rows != 1 || cols != 1))
        return MatrixXd::Constant(rows, cols, v.value()(0, 0));
    return v.value();
}

template <typename Fn>
Var unary(const Var& a, const char* op, MatrixXd value, Fn local_derivative) {
    const int ia = a.id();
    MatrixXd d = local_derivative(a.value(), value);
    return a.tape()->record(std::move(value), op, [ia, d = std::move(d)](Tape& t, const MatrixXd& adj) {
        t.accumulate(ia, adj.cwiseProduct(d));
    });
}

} // namespace

Var operator+(const Var& a, const Var& b) {
    check_binary_shapes(a, b, "add");
    const Eigen::Index r = std::max(a.rows(), b.rows());
    const Eigen::Index c = std::max(a.cols(), b.cols());
    MatrixXd v = broadcast(a, r, c) + broadcast(b, r, c);
    const int ia = a.id();
    const int ib = b.id();
    const Var ca = a;
    const Var cb = b;
    return a.tape()->record(std::move(v), "add", [ia, ib, ca, cb](Tape& t, const MatrixXd& adj) {
        t.accumulate(ia, reduce_to(adj, ca));
        t.accumulate(ib, reduce_to(adj, cb));
    });
}

Var operator-(const Var& a, const Var& b) {
    check_binary_shapes(a, b, "sub");
    const Eigen::Index r = std::max(a.rows(), b.rows());
    const Eigen::Index c = std::max(a.cols(), b.cols());
    MatrixXd v = broadcast(a, r, c) - broadcast(b, r, c);
    const int ia = a.id();
    const int ib = b.id();
    const Var ca = a;
    const Var cb = b;
    return a.tape()->record(std::move(v), "sub", [ia, ib, ca, cb](Tape& t, const MatrixXd& adj) {
        t.accumulate(ia, reduce_to(adj, ca));
        t.accumulate(ib, reduce_to(-adj, cb));
    });
}

Var operator*(const Var& a, const Var& b) {
    check_binary_shapes(a, b, "mul");
    const Eigen::Index r = std::max(a.rows(), b.rows());
    const Eigen::Index c = std::max(a.cols(), b.cols());
    MatrixXd av = broadcast(a, r, c);
    MatrixXd bv = broadcast(b, r, c);
    MatrixXd v = av.cwiseProduct(bv);
    const int ia = a.id();
    const int ib = b.id();
    const Var ca = a;
    const Var cb = b;
    return a.tape()->record(std::move(v), "mul",
                            [ia, ib, ca, cb, av = std::move(av), bv = std::move(bv)](Tape& t, const MatrixXd& adj) {
                                t.accumulate(ia, reduce_to(adj.cwiseProduct(bv), ca));
                                t.accumulate(ib, reduce_to(adj.cwiseProduct(av), cb));
                            });
}

Var operator/(const Var& a, const Var& b) {
    check_binary_shapes(a, b, "div");
    const Eigen::Index r = std::max(a.rows(), b.rows());
    const Eigen::Index c = std::max(a.cols(), b.cols());
    MatrixXd av = broadcast(a, r, c);
    MatrixXd bv = broadcast(b, r, c);
    MatrixXd v = av.cwiseQuotient(bv);
    const int ia = a.id();
    const int ib = b.id();
    const Var ca = a;
    const Var cb = b;
    MatrixXd q = v;
    return a.tape()->record(std::move(v), "div",
                            [ia, ib, ca, cb, bv = std::move(bv), q = std::move(q)](Tape& t, const MatrixXd& adj) {
                                const MatrixXd ga = adj.cwiseQuotient(bv);
                                t.accumulate(ia, reduce_to(ga, ca));
                                t.accumulate(ib, reduce_to(-ga.cwiseProduct(q), cb));
                            });
}

Var operator-(const Var& a) {
    const int ia = a.id();
    return a.tape()->record(-a.value(), "neg", [ia](Tape& t, const MatrixXd& adj) { t.accumulate(ia, -adj); });
}

Var operator*(double s, const Var& a) {
    const int ia = a.id();
    return a.tape()->record(s * a.value(), "scale", [ia, s](Tape& t, const MatrixXd& adj) { t.accumulate(ia, s * adj); });
}

Var operator*(const Var& a, double s) {
    return s * a;
}

Var operator+(const Var& a, double s) {
    const int ia = a.id();
    MatrixXd v = a.value().array() + s;
    return a.tape()->record(std::move(v), "shift", [ia](Tape& t, const MatrixXd& adj) { t.accumulate(ia, adj); });
}

Var operator-(const Var& a, double s) {
    return a + (-s);
}

Var matmul(const Var& a, const Var& b) {
    if (a.cols() != b.rows())
        throw Error(ErrorCode::InvalidArgument, "matmul: inner dimensions differ");
    MatrixXd v = a.value() * b.value();
    const int ia = a.id();
    const int ib = b.id();
    const Var ca = a;
    const Var cb = b;
    return a.tape()->record(std::move(v), "matmul", [ia, ib, ca, cb](Tape& t, const MatrixXd& adj) {
        t.accumulate(ia, adj * cb.value().transpose());
        t.accumulate(ib, ca.value().transpose() * adj);
    });
}

Var add_columnwise(const Var& a, const Var& b) {
    if (b.cols() != 1 || b.rows() != a.rows())
        throw Error(ErrorCode::InvalidArgument, "add_columnwise: bias must be a column matching the rows");
    MatrixXd v = a.value().colwise() + b.value().col(0);
    const int ia = a.id();
    const int ib = b.id();
    return a.tape()->record(std::move(v), "add_columnwise", [ia, ib](Tape& t, const MatrixXd& adj) {
        t.accumulate(ia, adj);
        t.accumulate(ib, adj.rowwise().sum());
    });
}

Var tanh(const Var& a) {
    MatrixXd v = a.value().array().tanh().matrix();
    return unary(a, "tanh", std::move(v), [](const MatrixXd&, const MatrixXd& y) {
        return MatrixXd((1.0 - y.array().square()).matrix());
    });
}

namespace {

double softplus_scalar(double x) {
    return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

double sigmoid_scalar(double x) {
    if (x >= 0.0)
        return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

} // namespace

Var softplus(const Var& a) {
    MatrixXd v = a.value().unaryExpr(&softplus_scalar);
    return unary(a, "softplus", std::move(v), [](const MatrixXd& x, const MatrixXd&) {
        return MatrixXd(x.unaryExpr(&sigmoid_scalar));
    });
}

Var exp(const Var& a) {
    MatrixXd v = a.value().array().exp().matrix();
    return unary(a, "exp", std::move(v), [](const MatrixXd&, const MatrixXd& y) { return y; });
}

Var log(const Var& a) {
    MatrixXd v = a.value().array().log().matrix();
    return unary(a, "log", std::move(v), [](const MatrixXd& x, const MatrixXd&) {
        return MatrixXd(x.array().inverse().matrix());
    });
}

Var sqrt(const Var& a) {
    MatrixXd v = a.value().array().sqrt().matrix();
    return unary(a, "sqrt", std::move(v), [](const MatrixXd&, const MatrixXd& y) {
        return MatrixXd((0.5 / y.array()).matrix());
    });
}

Var sin(const Var& a) {
    MatrixXd v = a.value().array().sin().matrix();
    return unary(a, "sin", std::move(v), [](const MatrixXd& x, const MatrixXd&) {
        return MatrixXd(x.array().cos().matrix());
    });
}

Var cos(const Var& a) {
    MatrixXd v = a.value().array().cos().matrix();
    return unary(a, "cos", std::move(v), [](const MatrixXd& x, const MatrixXd&) {
        return MatrixXd((-x.array().sin()).matrix());
    });
}

Var square(const Var& a) {
    MatrixXd v = a.value().array().square().matrix();
    return unary(a, "square", std::move(v), [](const MatrixXd& x, const MatrixXd&) { return MatrixXd(2.0 * x); });
}

Var sum(const Var& a) {
    const int ia = a.id();
    const Eigen::Index r = a.rows();
    const Eigen::Index c = a.cols();
    return a.tape()->record(MatrixXd::Constant(1, 1, a.value().sum()), "sum", [ia, r, c](Tape& t, const MatrixXd& adj) {
        t.accumulate(ia, MatrixXd::Constant(r, c, adj(0, 0)));
    });
}

Var dot(const Var& a, const Var& b) {
    return sum(a * b);
}

Var reshape_segment(const Var& flat, Eigen::Index offset, Eigen::Index rows, Eigen::Index cols) {
    if (flat.cols() != 1 || offset < 0 || offset + rows * cols > flat.rows())
        throw Error(ErrorCode::InvalidArgument, "reshape_segment out of range");
    MatrixXd v = Eigen::Map<const MatrixXd>(flat.value().data() + offset, rows, cols);
    const int id = flat.id();
    return flat.tape()->record(std::move(v), "segment", [id, offset, rows, cols](Tape& t, const MatrixXd& adj) {
        t.accumulate_block(id, offset, 0, Eigen::Map<const MatrixXd>(adj.data(), rows * cols, 1));
    });
}

Var block(const Var& a, Eigen::Index row, Eigen::Index col, Eigen::Index rows, Eigen::Index cols) {
    if (row < 0 || col < 0 || row + rows > a.rows() || col + cols > a.cols())
        throw Error(ErrorCode::InvalidArgument, "block out of range");
    MatrixXd v = a.value().block(row, col, rows, cols);
    const int id = a.id();
    return a.tape()->record(std::move(v), "block", [id, row, col](Tape& t, const MatrixXd& adj) {
        t.accumulate_block(id, row, col, adj);
    });
}

Var vstack(const std::vector<Var>& parts) {
    if (parts.empty())
        throw Error(ErrorCode::InvalidArgument, "vstack of nothing");
    const Eigen::Index cols = parts.front().cols();
    Eigen::Index rows = 0;
    for (const Var& p : parts) {
        if (p.cols() != cols)
            throw Error(ErrorCode::InvalidArgument, "vstack: column counts differ");
        rows += p.rows();
    }
    MatrixXd v(rows, cols);
    std::vector<std::pair<int, Eigen::Index>> spans;
    Eigen::Index r = 0;
    for (const Var& p : parts) {
        v.middleRows(r, p.rows()) = p.value();
        spans.emplace_back(p.id(), r);
        r += p.rows();
    }
    std::vector<Eigen::Index> heights;
    for (const Var& p : parts)
        heights.push_back(p.rows());
    return parts.front().tape()->record(std::move(v), "vstack",
                                        [spans, heights](Tape& t, const MatrixXd& adj) {
                                            for (std::size_t i = 0; i < spans.size(); ++i)
                                                t.accumulate(spans[i].first, adj.middleRows(spans[i].second, heights[i]));
                                        });
}

Var repeat_columns(const Var& a, Eigen::Index times) {
    const Eigen::Index c = a.cols();
    MatrixXd v = a.value().replicate(1, times);
    const int id = a.id();
    return a.tape()->record(std::move(v), "repeat_columns", [id, c, times](Tape& t, const MatrixXd& adj) {
        MatrixXd acc = adj.middleCols(0, c);
        for (Eigen::Index k = 1; k < times; ++k)
            acc += adj.middleCols(k * c, c);
        t.accumulate(id, acc);
    });
}

} // namespace aqualoc::ad

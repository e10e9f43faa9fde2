#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "aqualoc/diff.hpp"
#include "aqualoc/error.hpp"
#include "oracles.hpp"

#include <cmath>
#include <limits>
#include <random>

using namespace aqualoc;

namespace {

Layout flat(Eigen::Index n) {
    Layout l;
    l.add("x", n);
    return l;
}

// 0.5 x^T A x + b^T x written with tape ops
LossProgram quadratic(const Eigen::MatrixXd& a, const Eigen::VectorXd& b) {
    return [a, b](ad::Tape& t, const ad::Var& x) {
        const ad::Var ax = ad::matmul(t.constant(a), x);
        return 0.5 * ad::dot(x, ax) + ad::dot(t.constant(b), x);
    };
}

Eigen::MatrixXd spd(int n, unsigned seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> g;
    Eigen::MatrixXd m(n, n);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
            m(i, j) = g(rng);
    return m * m.transpose() + Eigen::MatrixXd::Identity(n, n);
}

Eigen::VectorXd randn(int n, unsigned seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> g;
    Eigen::VectorXd v(n);
    for (int i = 0; i < n; ++i)
        v[i] = g(rng);
    return v;
}

} // namespace

TEST_CASE("layout and views") {
    Layout l;
    l.add("w", 2, 3).add("b", 4);
    CHECK(l.size() == 10);
    CHECK(l.at("b").offset == 6);
    CHECK_FALSE(l.find("nope").has_value());
    ParamVector p(l);
    p.view("w")(1, 2) = 5.0;
    CHECK(p.values[5] == 5.0);  // column-major
}

TEST_CASE("quadratic gradient equals A x + b") {
    const Eigen::MatrixXd a = spd(5, 1);
    const Eigen::VectorXd b = randn(5, 2);
    const Eigen::VectorXd x = randn(5, 3);
    Eigen::VectorXd g;
    const double v = value_and_grad(quadratic(a, b), x, g);
    CHECK(v == doctest::Approx(0.5 * x.dot(a * x) + b.dot(x)).epsilon(1e-14));
    CHECK((g - (a * x + b)).norm() <= 1e-12 * (a * x + b).norm());
    CHECK(evaluate(quadratic(a, b), x) == v);

    const ParamVector pg = grad(quadratic(a, b), ParamVector(flat(5), x));
    CHECK(pg.values == g);
}

TEST_CASE("constant loss has zero gradient and linear loss its coefficient") {
    const Eigen::VectorXd x = randn(4, 4);
    Eigen::VectorXd g;
    value_and_grad([](ad::Tape& t, const ad::Var&) { return t.constant(3.0); }, x, g);
    CHECK(g.size() == 4);
    CHECK(g.isZero(0.0));

    const Eigen::VectorXd c = randn(4, 5);
    value_and_grad([c](ad::Tape& t, const ad::Var& p) { return ad::dot(t.constant(c), p); }, x, g);
    CHECK(g == c);
}

TEST_CASE("gradient of a linear combination is the combination of gradients") {
    const Eigen::MatrixXd a = spd(4, 6);
    const Eigen::VectorXd b = randn(4, 7);
    const Eigen::VectorXd x = randn(4, 8);
    const LossProgram f = quadratic(a, b);
    const LossProgram h = [](ad::Tape&, const ad::Var& p) { return ad::sum(ad::tanh(p)); };
    const LossProgram mix = [&](ad::Tape& t, const ad::Var& p) { return 2.0 * f(t, p) - 3.0 * h(t, p); };
    Eigen::VectorXd gf, gh, gm;
    value_and_grad(f, x, gf);
    value_and_grad(h, x, gh);
    value_and_grad(mix, x, gm);
    CHECK((gm - (2.0 * gf - 3.0 * gh)).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("every elementwise op against central differences") {
    const Eigen::VectorXd x = Eigen::Vector3d(0.3, 0.7, 1.4);
    const std::vector<std::pair<const char*, LossProgram>> cases{
        {"tanh", [](ad::Tape&, const ad::Var& p) { return ad::sum(ad::tanh(p)); }},
        {"softplus", [](ad::Tape&, const ad::Var& p) { return ad::sum(ad::softplus(p)); }},
        {"exp", [](ad::Tape&, const ad::Var& p) { return ad::sum(ad::exp(p)); }},
        {"log", [](ad::Tape&, const ad::Var& p) { return ad::sum(ad::log(p)); }},
        {"sqrt", [](ad::Tape&, const ad::Var& p) { return ad::sum(ad::sqrt(p)); }},
        {"sin", [](ad::Tape&, const ad::Var& p) { return ad::sum(ad::sin(p)); }},
        {"cos", [](ad::Tape&, const ad::Var& p) { return ad::sum(ad::cos(p)); }},
        {"square", [](ad::Tape&, const ad::Var& p) { return ad::sum(ad::square(p)); }},
        {"div", [](ad::Tape& t, const ad::Var& p) { return ad::sum(t.constant(1.0) / (p * p + 1.0)); }},
        {"block", [](ad::Tape&, const ad::Var& p) { return ad::sum(ad::square(ad::block(p, 1, 0, 2, 1))); }},
        {"vstack", [](ad::Tape&, const ad::Var& p) { return ad::sum(ad::exp(ad::vstack({p, -p}))); }},
        {"reshape", [](ad::Tape& t, const ad::Var& p) {
             const ad::Var m = ad::reshape_segment(p, 0, 1, 3);
             return ad::sum(ad::matmul(m, t.constant(Eigen::Vector3d(1.0, -2.0, 0.5))) * p);
         }},
    };
    for (const auto& [name, f] : cases) {
        CAPTURE(name);
        Eigen::VectorXd g;
        value_and_grad(f, x, g);
        const Eigen::VectorXd fd =
            oracle::central_gradient([&](const Eigen::VectorXd& v) { return evaluate(f, v); }, x,
                                     Eigen::VectorXd::Constant(3, 1e-6));
        for (int i = 0; i < 3; ++i)
            CHECK(oracle::rel_err(g[i], fd[i]) <= 1e-7);
    }
}

TEST_CASE("fd_check on a smooth network-like program") {
    Layout l;
    l.add("W", 3, 2).add("b", 3);
    const LossProgram f = [l](ad::Tape& t, const ad::Var& p) {
        const Segment& w = l.at("W");
        const Segment& b = l.at("b");
        const ad::Var wv = ad::reshape_segment(p, w.offset, w.rows, w.cols);
        const ad::Var bv = ad::reshape_segment(p, b.offset, b.rows, b.cols);
        const ad::Var in = t.constant(Eigen::Vector2d(0.4, -1.2));
        return ad::sum(ad::square(ad::tanh(ad::matmul(wv, in) + bv)));
    };
    const ParamVector at(l, randn(9, 10));
    const GradReport rep = fd_check(f, at, 1e-6);
    CHECK(rep.probed.size() == 9);
    CHECK(rep.max_relative_error <= 1e-6);
    const GradReport partial = fd_check(f, at, 1e-6, 4, 2);
    CHECK(partial.probed.size() == 4);
    int nans = 0;
    for (Eigen::Index i = 0; i < 9; ++i)
        nans += std::isnan(partial.finite_difference.values[i]) ? 1 : 0;
    CHECK(nans == 5);
}

TEST_CASE("hvp") {
    const Eigen::MatrixXd a = spd(6, 11);
    const Eigen::VectorXd b = randn(6, 12);
    const ParamVector x(flat(6), randn(6, 13));
    const ParamVector u(flat(6), randn(6, 14));
    const ParamVector v(flat(6), randn(6, 15));

    const ParamVector hv = hvp(quadratic(a, b), x, v);
    CHECK((hv.values - a * v.values).norm() <= 1e-7 * (a * v.values).norm());

    const LossProgram lin = [b](ad::Tape& t, const ad::Var& p) { return ad::dot(t.constant(b), p); };
    CHECK(hvp(lin, x, v).values.cwiseAbs().maxCoeff() <= 1e-9);

    // symmetry of the Hessian of a non-quadratic program
    const LossProgram f = [](ad::Tape& t, const ad::Var& p) {
        return ad::sum(ad::softplus(ad::matmul(t.constant(Eigen::MatrixXd::Ones(2, 6)), ad::square(p)) * 0.1) +
                       ad::sin(ad::block(p, 0, 0, 2, 1)));
    };
    const double uhv = u.values.dot(hvp(f, x, v).values);
    const double vhu = v.values.dot(hvp(f, x, u).values);
    CHECK(oracle::rel_err(uhv, vhu) <= 1e-6);
}

TEST_CASE("non-finite values raise NumericOverflow") {
    const LossProgram f = [](ad::Tape&, const ad::Var& p) { return ad::sum(ad::log(p)); };
    Eigen::VectorXd g;
    try {
        value_and_grad(f, Eigen::Vector2d(1.0, -1.0), g);
        FAIL("expected an exception");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::NumericOverflow);
    }
    const LossProgram big = [](ad::Tape&, const ad::Var& p) { return ad::sum(ad::exp(p)); };
    CHECK_THROWS_AS(evaluate(big, Eigen::Vector2d(1000.0, 0.0)), Error);
}

TEST_CASE("relative error guard") {
    CHECK(relative_error(0.0, 0.0) == 0.0);
    CHECK(relative_error(1.0, 1.0 + 1e-9) == doctest::Approx(1e-9 / (1.0 + 1e-9)));
    CHECK(relative_error(1e-20, 0.0) == doctest::Approx(1e-8));
}

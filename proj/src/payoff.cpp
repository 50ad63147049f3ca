#include "cbsde/payoff.hpp"

#include "cbsde/errors.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace cbsde {

namespace {

double pos(double v) { return v > 0.0 ? v : 0.0; }

// max |φ'| for case 3, from a dense grid on [-10, 10] rounded up.
constexpr double kCase3Lipschitz = 8.6;

void check_dhat(double dhat) {
    if (!(dhat >= 1.0) || dhat > 4.0) {
        throw DomainError("case-2 analytic facelift is valid for 1 <= dhat <= 4 (below 1 the facelift on the real line is infinite)");
    }
}

} // namespace

std::string to_string(PayoffKind k) {
    switch (k) {
    case PayoffKind::case1: return "case1";
    case PayoffKind::case2: return "case2";
    case PayoffKind::case2nd: return "case2nd";
    case PayoffKind::case3: return "case3";
    case PayoffKind::piecewise_linear: return "piecewise-linear";
    case PayoffKind::net_snapshot: return "net-snapshot";
    case PayoffKind::constant: return "constant";
    case PayoffKind::custom: return "custom";
    }
    return "?";
}

Payoff::Payoff(PayoffKind kind, int dim, double lipschitz, Fn fn)
    : kind_(kind), dim_(dim), lipschitz_(lipschitz), fn_(std::move(fn)) {
    if (dim < 1) throw ConfigError("payoff dimension must be >= 1");
    if (!fn_) throw ConfigError("payoff needs an evaluator");
}

double Payoff::operator()(const Eigen::Ref<const Eigen::VectorXd>& x) const {
    if (x.size() != dim_) throw ContractError("payoff: dimension mismatch");
    return fn_(x);
}

double Payoff::operator()(double x) const {
    Eigen::VectorXd v(1);
    v[0] = x;
    return (*this)(v);
}

Eigen::VectorXd Payoff::evaluate(const Eigen::MatrixXd& x) const {
    if (x.rows() != dim_) throw ContractError("payoff: dimension mismatch");
    Eigen::VectorXd out(x.cols());
    for (Eigen::Index n = 0; n < x.cols(); ++n) out[n] = fn_(x.col(n));
    return out;
}

Payoff Payoff::piecewise_linear(PiecewiseLinear1D pw) {
    return separable(std::move(pw), 1);
}

Payoff Payoff::separable(PiecewiseLinear1D pw, int dim, PayoffKind kind) {
    const double lip = pw.max_abs_slope() / std::sqrt(static_cast<double>(dim));
    Payoff p(kind, dim, lip, [pw](const Eigen::Ref<const Eigen::VectorXd>& x) {
        double s = 0.0;
        for (Eigen::Index i = 0; i < x.size(); ++i) s += pw(x[i]);
        return s / static_cast<double>(x.size());
    });
    p.piecewise_ = std::move(pw);
    p.separable_ = dim > 1;
    return p;
}

Payoff Payoff::constant(double c, int dim) {
    Payoff p(PayoffKind::constant, dim, 0.0, [c](const Eigen::Ref<const Eigen::VectorXd>&) { return c; });
    if (dim == 1) p.piecewise_ = PiecewiseLinear1D::constant(c);
    return p;
}

Payoff Payoff::net_snapshot(Mlp net, std::optional<double> clip) {
    if (net.output_dim() != 1) throw ConfigError("net snapshot payoff needs a scalar network");
    const int dim = net.input_dim();
    return Payoff(PayoffKind::net_snapshot, dim, std::numeric_limits<double>::quiet_NaN(),
                  [net = std::move(net), clip](const Eigen::Ref<const Eigen::VectorXd>& x) {
                      const double v = net.forward_point(Eigen::VectorXd(x))[0];
                      return clip ? std::clamp(v, -*clip, *clip) : v;
                  });
}

double payoff_case1(double x) {
    return pos(x - 0.8) - 2.0 * pos(x - 1.0) + pos(x - 1.2);
}

double payoff_case2(double x) {
    return 4.0 * (pos(x - 0.8) - pos(x - 1.0)) + pos(x - 1.2);
}

double payoff_case2_nd(const Eigen::Ref<const Eigen::VectorXd>& x) {
    double s = 0.0;
    for (Eigen::Index i = 0; i < x.size(); ++i) s += payoff_case2(x[i]);
    return s / static_cast<double>(x.size());
}

double payoff_case3(double x) {
    const double softplus = x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
    return softplus + 4.0 * std::sin(2.0 * x) / (1.0 + 5.0 * x * x);
}

PiecewiseLinear1D case1_piecewise() {
    return PiecewiseLinear1D({0.8, 1.0, 1.2}, {0.0, 1.0, -1.0, 0.0}, 0.0);
}

PiecewiseLinear1D case2_piecewise() {
    return PiecewiseLinear1D({0.8, 1.0, 1.2}, {0.0, 4.0, 0.0, 1.0}, 0.0);
}

Payoff make_case1() {
    return Payoff::separable(case1_piecewise(), 1, PayoffKind::case1);
}

Payoff make_case2() {
    return Payoff::separable(case2_piecewise(), 1, PayoffKind::case2);
}

Payoff make_case2_nd(int dim) {
    return Payoff::separable(case2_piecewise(), dim, PayoffKind::case2nd);
}

Payoff make_case3() {
    return Payoff(PayoffKind::case3, 1, kCase3Lipschitz,
                  [](const Eigen::Ref<const Eigen::VectorXd>& x) { return payoff_case3(x[0]); });
}

double analytic_facelift_case2(double x, double dhat) {
    check_dhat(dhat);
    if (x >= 1.0) return payoff_case2(x);
    return pos(0.8 - dhat * std::abs(x - 1.0));
}

PiecewiseLinear1D analytic_facelift_case2_piecewise(double dhat) {
    check_dhat(dhat);
    return PiecewiseLinear1D({1.0 - 0.8 / dhat, 1.0, 1.2}, {0.0, dhat, 0.0, 1.0}, 0.0);
}

double analytic_facelift_case2_nd(const Eigen::Ref<const Eigen::VectorXd>& x, double coord_slope) {
    double s = 0.0;
    for (Eigen::Index i = 0; i < x.size(); ++i) s += analytic_facelift_case2(x[i], coord_slope);
    return s / static_cast<double>(x.size());
}

Payoff analytic_facelift_case2_for(const ConvexBall& c) {
    if (c.dim() > 1 && c.norm() == BallNorm::l2) {
        throw DomainError("no closed-form case-2 facelift for a Euclidean ball in dimension > 1");
    }
    const double slope = c.dim() == 1 ? c.radius() : c.dim() * c.radius();
    return Payoff::separable(analytic_facelift_case2_piecewise(slope), c.dim());
}

double analytic_facelift_case1(double x, double dhat) {
    if (!(dhat > 0.0) || dhat > 1.0) throw DomainError("case-1 analytic facelift is valid for 0 < dhat <= 1");
    return pos(0.2 - dhat * std::abs(x - 1.0));
}

double analytic_facelift_case1_as_printed(double x, double dhat) {
    if (!(dhat > 0.0) || dhat > 1.0) throw DomainError("case-1 analytic facelift is valid for 0 < dhat <= 1");
    return pos(1.0 - dhat * std::abs(x - 1.0));
}

Payoff make_named_payoff(const std::string& name, int dim) {
    if (name == "case1" && dim == 1) return make_case1();
    if (name == "case2" && dim == 1) return make_case2();
    if (name == "case2nd" || (name == "case2" && dim > 1)) return make_case2_nd(dim);
    if (name == "case3" && dim == 1) return make_case3();
    throw ConfigError("unknown payoff '" + name + "' in dimension " + std::to_string(dim));
}

} // namespace cbsde

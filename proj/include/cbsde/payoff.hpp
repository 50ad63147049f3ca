#pragma once

#include "cbsde/constraint.hpp"
#include "cbsde/mlp.hpp"
#include "cbsde/piecewise.hpp"

#include <Eigen/Dense>

#include <functional>
#include <optional>
#include <string>

namespace cbsde {

enum class PayoffKind { case1, case2, case2nd, case3, piecewise_linear, net_snapshot, constant, custom };

std::string to_string(PayoffKind k);

/// A terminal function x ↦ φ(x) on ℝ^d with a Lipschitz bound.
class Payoff {
public:
    using Fn = std::function<double(const Eigen::Ref<const Eigen::VectorXd>&)>;

    Payoff(PayoffKind kind, int dim, double lipschitz, Fn fn);

    PayoffKind kind() const { return kind_; }
    int dim() const { return dim_; }
    double lipschitz() const { return lipschitz_; }

    double operator()(const Eigen::Ref<const Eigen::VectorXd>& x) const;
    double operator()(double x) const;

    /// One value per column of x (d × N).
    Eigen::VectorXd evaluate(const Eigen::MatrixXd& x) const;

    /// Set for one-dimensional piecewise-linear payoffs (and separable averages of one).
    const std::optional<PiecewiseLinear1D>& piecewise() const { return piecewise_; }
    bool separable_average() const { return separable_; }

    static Payoff piecewise_linear(PiecewiseLinear1D pw);
    /// x ↦ (1/d) Σ pw(x_i).
    static Payoff separable(PiecewiseLinear1D pw, int dim, PayoffKind kind = PayoffKind::piecewise_linear);
    static Payoff constant(double c, int dim = 1);
    /// Frozen network, optionally clipped to [−clip, clip]. The Lipschitz bound is not tracked.
    static Payoff net_snapshot(Mlp net, std::optional<double> clip = std::nullopt);

private:
    PayoffKind kind_;
    int dim_;
    double lipschitz_;
    Fn fn_;
    std::optional<PiecewiseLinear1D> piecewise_;
    bool separable_ = false;
};

/// Butterfly (x−0.8)⁺ − 2(x−1)⁺ + (x−1.2)⁺.
double payoff_case1(double x);
/// 4[(x−0.8)⁺ − (x−1)⁺] + (x−1.2)⁺.
double payoff_case2(double x);
/// (1/d) Σ payoff_case2(x_i).
double payoff_case2_nd(const Eigen::Ref<const Eigen::VectorXd>& x);
/// log(1+eˣ) + 4 sin(2x)/(1+5x²).
double payoff_case3(double x);

Payoff make_case1();
Payoff make_case2();
Payoff make_case2_nd(int dim);
Payoff make_case3();

PiecewiseLinear1D case1_piecewise();
PiecewiseLinear1D case2_piecewise();

/// Facelift of case 2 under a slope bound `dhat`: (0.8 − d̂|x−1|)⁺ for x < 1, φ(x) for x ≥ 1.
/// DomainError outside 0 < d̂ ≤ 4.
double analytic_facelift_case2(double x, double dhat);
PiecewiseLinear1D analytic_facelift_case2_piecewise(double dhat);

/// (1/d) Σ analytic_facelift_case2(x_i, coord_slope). This is the exact facelift of
/// case2_nd for the box {‖z‖∞ ≤ coord_slope/d}. DomainError outside 0 < coord_slope ≤ 4.
double analytic_facelift_case2_nd(const Eigen::Ref<const Eigen::VectorXd>& x, double coord_slope);

/// The analytic case-2 facelift matching constraint `c`: 1D balls use the radius as slope,
/// boxes in dimension d use d·radius per coordinate. DomainError for Euclidean balls in d > 1.
Payoff analytic_facelift_case2_for(const ConvexBall& c);

/// Facelift of the butterfly for d̂ ≤ 1: (0.2 − d̂|x−1|)⁺ (the peak of the payoff is 0.2).
double analytic_facelift_case1(double x, double dhat);

/// (1 − d̂|x−1|)⁺, the closed form as commonly printed for the butterfly. Its peak is 1, not
/// the payoff's 0.2, so it is not the facelift; kept for comparison against the grid oracle.
double analytic_facelift_case1_as_printed(double x, double dhat);

/// Payoff by experiment name: case1, case2, case2nd, case3.
Payoff make_named_payoff(const std::string& name, int dim);

} // namespace cbsde

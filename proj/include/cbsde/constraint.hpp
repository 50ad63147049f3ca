#pragma once

#include <Eigen/Dense>

#include <string>
#include <vector>

namespace cbsde {

enum class BallNorm {
    l2,   ///< Euclidean ball {‖z‖₂ ≤ radius}
    linf, ///< axis-aligned box {‖z‖∞ ≤ radius}
};

std::string to_string(BallNorm norm);
BallNorm ball_norm_from_string(const std::string& name);

/// Centered convex ball C = {z : ‖z‖ ≤ radius} in ℝ^dim. Contains the origin by construction.
class ConvexBall {
public:
    ConvexBall(double radius, int dim, BallNorm norm = BallNorm::l2);

    double radius() const noexcept { return radius_; }
    int dim() const noexcept { return dim_; }
    BallNorm norm() const noexcept { return norm_; }

    bool contains(const Eigen::Ref<const Eigen::VectorXd>& z) const;

private:
    double radius_;
    int dim_;
    BallNorm norm_;
};

/// δ_C(y) = sup_{z∈C} z·y. radius·‖y‖₂ for the Euclidean ball, radius·‖y‖₁ for the box.
double support_function(const ConvexBall& c, const Eigen::Ref<const Eigen::VectorXd>& y);

/// H(p) = inf_{‖y‖₂=1} (δ_C(y) − y·p). Nonnegative exactly when p ∈ C.
double h_operator(const ConvexBall& c, const Eigen::Ref<const Eigen::VectorXd>& p);

/// Euclidean projection onto C.
Eigen::VectorXd project(const ConvexBall& c, const Eigen::Ref<const Eigen::VectorXd>& g);

/// L1 norm of the residual g − project(C, g).
///
/// Exact min-L1 distance in dimension 1 and for the box; an upper bound of it
/// for the Euclidean ball in dimension > 1. Zero iff g ∈ C.
double gradient_penalty(const ConvexBall& c, const Eigen::Ref<const Eigen::VectorXd>& g);

/// A subgradient of gradient_penalty with respect to g (zero inside C).
Eigen::VectorXd gradient_penalty_subgradient(const ConvexBall& c,
                                             const Eigen::Ref<const Eigen::VectorXd>& g);

/// Constraint dates r_0 = 0 < … < r_κ = T and, per interval, a sub-grid from r_k to r_{k+1}.
struct TimeGrids {
    double horizon = 0.0;
    std::vector<double> constraint_dates;
    std::vector<std::vector<double>> sub_grids;

    int num_constraint_intervals() const { return static_cast<int>(sub_grids.size()); }

    /// All grid times in increasing order, shared endpoints listed once.
    std::vector<double> flattened() const;

    /// Index into flattened() of each constraint date.
    std::vector<int> constraint_indices() const;

    /// Throws ConfigError when endpoints or monotonicity are violated.
    void validate() const;
};

/// Uniform constraint dates r_j = jT/κ, each interval split into `sub_steps` equal steps.
TimeGrids build_grids(double horizon, int num_constraint_steps, int sub_steps = 1);

} // namespace cbsde

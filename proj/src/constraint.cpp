#include "cbsde/constraint.hpp"

#include "cbsde/errors.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace cbsde {

namespace {

void require_finite(const Eigen::Ref<const Eigen::VectorXd>& v, const char* what) {
    if (!v.allFinite()) {
        throw DomainError(std::string(what) + ": non-finite input");
    }
}

void require_dim(const ConvexBall& c, const Eigen::Ref<const Eigen::VectorXd>& v, const char* what) {
    if (v.size() != c.dim()) {
        throw ContractError(std::string(what) + ": dimension mismatch");
    }
}

double sign(double v) { return (v > 0.0) - (v < 0.0); }

} // namespace

std::string to_string(BallNorm norm) {
    return norm == BallNorm::l2 ? "l2" : "linf";
}

BallNorm ball_norm_from_string(const std::string& name) {
    if (name == "l2") return BallNorm::l2;
    if (name == "linf") return BallNorm::linf;
    throw ConfigError("unknown ball norm '" + name + "' (expected l2 or linf)");
}

ConvexBall::ConvexBall(double radius, int dim, BallNorm norm) : radius_(radius), dim_(dim), norm_(norm) {
    if (!(radius > 0.0) || !std::isfinite(radius)) {
        throw ConfigError("constraint radius must be positive and finite");
    }
    if (dim < 1) {
        throw ConfigError("constraint dimension must be >= 1");
    }
}

bool ConvexBall::contains(const Eigen::Ref<const Eigen::VectorXd>& z) const {
    require_dim(*this, z, "contains");
    const double n = norm_ == BallNorm::l2 ? z.norm() : z.lpNorm<Eigen::Infinity>();
    return n <= radius_;
}

double support_function(const ConvexBall& c, const Eigen::Ref<const Eigen::VectorXd>& y) {
    require_dim(c, y, "support_function");
    require_finite(y, "support_function");
    return c.norm() == BallNorm::l2 ? c.radius() * y.norm() : c.radius() * y.lpNorm<1>();
}

double h_operator(const ConvexBall& c, const Eigen::Ref<const Eigen::VectorXd>& p) {
    require_dim(c, p, "h_operator");
    require_finite(p, "h_operator");
    if (c.norm() == BallNorm::l2) {
        return c.radius() - p.norm();
    }
    // Box: the minimum of Σ (r − |p_i|)|y_i| over the unit sphere.
    const Eigen::ArrayXd slack = c.radius() - p.array().abs();
    const double violated = (slack < 0.0).select(slack, 0.0).matrix().norm();
    return violated > 0.0 ? -violated : slack.minCoeff();
}

Eigen::VectorXd project(const ConvexBall& c, const Eigen::Ref<const Eigen::VectorXd>& g) {
    require_dim(c, g, "project");
    require_finite(g, "project");
    if (c.norm() == BallNorm::linf) {
        return g.array().max(-c.radius()).min(c.radius()).matrix();
    }
    const double n = g.norm();
    if (n <= c.radius()) return g;
    return (c.radius() / n) * g;
}

double gradient_penalty(const ConvexBall& c, const Eigen::Ref<const Eigen::VectorXd>& g) {
    require_dim(c, g, "gradient_penalty");
    require_finite(g, "gradient_penalty");
    if (c.norm() == BallNorm::linf || c.dim() == 1) {
        return (g.array().abs() - c.radius()).max(0.0).sum();
    }
    const double n = g.norm();
    if (n <= c.radius()) return 0.0;
    return (1.0 - c.radius() / n) * g.lpNorm<1>();
}

Eigen::VectorXd gradient_penalty_subgradient(const ConvexBall& c,
                                             const Eigen::Ref<const Eigen::VectorXd>& g) {
    require_dim(c, g, "gradient_penalty_subgradient");
    Eigen::VectorXd out = Eigen::VectorXd::Zero(g.size());
    if (c.norm() == BallNorm::linf || c.dim() == 1) {
        for (Eigen::Index i = 0; i < g.size(); ++i) {
            if (std::abs(g[i]) > c.radius()) out[i] = sign(g[i]);
        }
        return out;
    }
    const double n = g.norm();
    if (n <= c.radius()) return out;
    const double l1 = g.lpNorm<1>();
    for (Eigen::Index i = 0; i < g.size(); ++i) {
        out[i] = sign(g[i]) * (1.0 - c.radius() / n) + l1 * c.radius() * g[i] / (n * n * n);
    }
    return out;
}

std::vector<double> TimeGrids::flattened() const {
    std::vector<double> out;
    for (const auto& sub : sub_grids) {
        if (out.empty()) out.push_back(sub.front());
        out.insert(out.end(), sub.begin() + 1, sub.end());
    }
    return out;
}

std::vector<int> TimeGrids::constraint_indices() const {
    std::vector<int> out{0};
    for (const auto& sub : sub_grids) {
        out.push_back(out.back() + static_cast<int>(sub.size()) - 1);
    }
    return out;
}

void TimeGrids::validate() const {
    if (!(horizon > 0.0)) throw ConfigError("time grid horizon must be positive");
    if (constraint_dates.size() < 2) throw ConfigError("need at least two constraint dates");
    if (constraint_dates.front() != 0.0 || constraint_dates.back() != horizon) {
        throw ConfigError("constraint dates must start at 0 and end at the horizon");
    }
    if (sub_grids.size() + 1 != constraint_dates.size()) {
        throw ConfigError("one sub-grid per constraint interval is required");
    }
    for (std::size_t k = 0; k + 1 < constraint_dates.size(); ++k) {
        if (!(constraint_dates[k] < constraint_dates[k + 1])) {
            throw ConfigError("constraint dates must be strictly increasing");
        }
        const auto& sub = sub_grids[k];
        if (sub.size() < 2 || sub.front() != constraint_dates[k] || sub.back() != constraint_dates[k + 1]) {
            throw ConfigError("sub-grid endpoints must match the constraint dates");
        }
        for (std::size_t i = 0; i + 1 < sub.size(); ++i) {
            if (!(sub[i] < sub[i + 1])) throw ConfigError("sub-grid times must be strictly increasing");
        }
    }
}

TimeGrids build_grids(double horizon, int num_constraint_steps, int sub_steps) {
    if (!(horizon > 0.0) || !std::isfinite(horizon)) throw ConfigError("horizon must be positive");
    if (num_constraint_steps < 1) throw ConfigError("number of constraint steps must be >= 1");
    if (sub_steps < 1) throw ConfigError("number of sub-steps must be >= 1");

    TimeGrids grids;
    grids.horizon = horizon;
    const auto kappa = static_cast<double>(num_constraint_steps);
    for (int j = 0; j <= num_constraint_steps; ++j) {
        grids.constraint_dates.push_back(j == num_constraint_steps ? horizon : j * horizon / kappa);
    }
    const double total = static_cast<double>(num_constraint_steps) * sub_steps;
    for (int k = 0; k < num_constraint_steps; ++k) {
        std::vector<double> sub;
        for (int i = 0; i <= sub_steps; ++i) {
            if (i == 0) {
                sub.push_back(grids.constraint_dates[k]);
            } else if (i == sub_steps) {
                sub.push_back(grids.constraint_dates[k + 1]);
            } else {
                sub.push_back((k * sub_steps + i) * horizon / total);
            }
        }
        grids.sub_grids.push_back(std::move(sub));
    }
    return grids;
}

} // namespace cbsde

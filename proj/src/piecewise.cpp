#include "cbsde/piecewise.hpp"

#include "cbsde/errors.hpp"

#include <algorithm>
#include <cmath>

namespace cbsde {

PiecewiseLinear1D::PiecewiseLinear1D(std::vector<double> breakpoints, std::vector<double> slopes, double value_at_first)
    : breakpoints_(std::move(breakpoints)), slopes_(std::move(slopes)), value_at_first_(value_at_first) {
    if (slopes_.size() != breakpoints_.size() + 1) {
        throw ConfigError("piecewise-linear: need one slope more than breakpoints");
    }
    for (std::size_t i = 0; i + 1 < breakpoints_.size(); ++i) {
        if (!(breakpoints_[i] < breakpoints_[i + 1])) throw ConfigError("piecewise-linear: breakpoints must increase");
    }
    for (double s : slopes_) {
        if (!std::isfinite(s)) throw ConfigError("piecewise-linear: slopes must be finite");
    }
    values_.resize(breakpoints_.size());
    if (!values_.empty()) values_[0] = value_at_first_;
    for (std::size_t i = 1; i < breakpoints_.size(); ++i) {
        values_[i] = values_[i - 1] + slopes_[i] * (breakpoints_[i] - breakpoints_[i - 1]);
    }
}

PiecewiseLinear1D PiecewiseLinear1D::from_samples(const std::vector<double>& xs, const std::vector<double>& ys,
                                                  double slope_tol) {
    if (xs.size() != ys.size() || xs.size() < 2) throw ConfigError("piecewise-linear: need at least two samples");
    std::vector<double> seg;
    for (std::size_t i = 0; i + 1 < xs.size(); ++i) {
        const double dx = xs[i + 1] - xs[i];
        if (!(dx > 0.0)) throw ConfigError("piecewise-linear: sample abscissae must increase");
        seg.push_back((ys[i + 1] - ys[i]) / dx);
    }
    std::vector<double> bps{xs.front()};
    std::vector<double> kept_y{ys.front()};
    for (std::size_t i = 1; i < seg.size(); ++i) {
        if (std::abs(seg[i] - seg[i - 1]) > slope_tol) {
            bps.push_back(xs[i]);
            kept_y.push_back(ys[i]);
        }
    }
    bps.push_back(xs.back());
    kept_y.push_back(ys.back());
    std::vector<double> slopes{0.0};
    for (std::size_t i = 1; i < bps.size(); ++i) {
        slopes.push_back((kept_y[i] - kept_y[i - 1]) / (bps[i] - bps[i - 1]));
    }
    slopes.front() = slopes[1];
    slopes.push_back(slopes.back());
    return PiecewiseLinear1D(std::move(bps), std::move(slopes), ys.front());
}

PiecewiseLinear1D PiecewiseLinear1D::constant(double c) {
    return PiecewiseLinear1D({0.0}, {0.0, 0.0}, c);
}

double PiecewiseLinear1D::operator()(double x) const {
    if (breakpoints_.empty()) return value_at_first_ + slopes_[0] * x;
    if (x <= breakpoints_.front()) return value_at_first_ + slopes_.front() * (x - breakpoints_.front());
    const auto it = std::upper_bound(breakpoints_.begin(), breakpoints_.end(), x);
    const auto i = static_cast<std::size_t>(it - breakpoints_.begin()) - 1;
    return values_[i] + slopes_[i + 1] * (x - breakpoints_[i]);
}

double PiecewiseLinear1D::max_abs_slope() const {
    double m = 0.0;
    for (double s : slopes_) m = std::max(m, std::abs(s));
    return m;
}

} // namespace cbsde

#pragma once

#include <vector>

namespace cbsde {

/// Continuous piecewise-linear function of one variable.
///
/// slopes has one more entry than breakpoints: slopes[0] applies left of the first
/// breakpoint, slopes.back() right of the last one.
class PiecewiseLinear1D {
public:
    PiecewiseLinear1D(std::vector<double> breakpoints, std::vector<double> slopes, double value_at_first);

    /// Interpolant through (xs[i], ys[i]); collinear neighbours are merged within `slope_tol`.
    /// Extrapolates with the end slopes.
    static PiecewiseLinear1D from_samples(const std::vector<double>& xs, const std::vector<double>& ys,
                                          double slope_tol = 1e-12);

    /// Constant function.
    static PiecewiseLinear1D constant(double c);

    double operator()(double x) const;

    const std::vector<double>& breakpoints() const { return breakpoints_; }
    const std::vector<double>& slopes() const { return slopes_; }
    double value_at_first() const { return value_at_first_; }
    double max_abs_slope() const;

private:
    std::vector<double> breakpoints_;
    std::vector<double> slopes_;
    double value_at_first_;
    std::vector<double> values_; // value at each breakpoint
};

} // namespace cbsde

#pragma once

#include "cbsde/payoff.hpp"
#include "cbsde/piecewise.hpp"
#include "cbsde/sde.hpp"

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

namespace cbsde {

/// Black–Scholes call. Handles K ≤ 0, T = 0 and σ = 0 as limits.
double bs_call(double spot, double strike, double r, double sigma, double horizon);
/// Put by parity.
double bs_put(double spot, double strike, double r, double sigma, double horizon);

struct PriceEstimate {
    double price = 0.0;
    double stderr_ = 0.0;
    long n_samples = 0;
};

/// e^{−rT} mean φ(X_T) over exact risk-neutral samples, with its standard error.
PriceEstimate mc_price(const BlackScholesModel& model, const Payoff& payoff, double horizon, long n_samples,
                       std::uint64_t seed);

/// Exact risk-neutral price of a piecewise-linear payoff of one asset with spot `spot`,
/// written as a constant, a forward and a sum of calls.
double closed_form_price(const BlackScholesModel& model, const PiecewiseLinear1D& pw, double horizon, double spot);

/// Price of x ↦ (1/d) Σ pw(x_i), priced coordinatewise from model.x0.
double closed_form_price(const BlackScholesModel& model, const PiecewiseLinear1D& pw, double horizon);

struct PriceRow {
    std::string config_id;
    std::string method;
    double price = 0.0;
    double stderr_ = 0.0;
    long n_samples = 0;
};

/// CSV config_id,method,price,stderr,n_samples.
void write_price_csv(const std::vector<PriceRow>& rows, std::ostream& out);

} // namespace cbsde

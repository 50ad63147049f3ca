#include "cbsde/reference.hpp"

#include "cbsde/errors.hpp"
#include "cbsde/rng.hpp"

#include <cmath>
#include <iomanip>
#include <ostream>

namespace cbsde {

namespace {

double norm_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

constexpr long kChunk = 1L << 16;

} // namespace

double bs_call(double spot, double strike, double r, double sigma, double horizon) {
    const double df = std::exp(-r * horizon);
    if (strike <= 0.0) return spot - strike * df;
    const double vol = sigma * std::sqrt(horizon);
    if (!(vol > 0.0)) return std::max(spot - strike * df, 0.0);
    const double d1 = (std::log(spot / strike) + (r + 0.5 * sigma * sigma) * horizon) / vol;
    return spot * norm_cdf(d1) - strike * df * norm_cdf(d1 - vol);
}

double bs_put(double spot, double strike, double r, double sigma, double horizon) {
    return bs_call(spot, strike, r, sigma, horizon) - spot + strike * std::exp(-r * horizon);
}

PriceEstimate mc_price(const BlackScholesModel& model, const Payoff& payoff, double horizon, long n_samples,
                       std::uint64_t seed) {
    if (n_samples < 1) throw ConfigError("mc_price: n_samples must be positive");
    if (payoff.dim() != model.dim()) throw ContractError("mc_price: payoff and model dimensions differ");
    double sum = 0.0;
    double sum_sq = 0.0;
    // Chunks draw from their own substreams; sums are accumulated in chunk order.
    for (long start = 0, chunk = 0; start < n_samples; start += kChunk, ++chunk) {
        const int n = static_cast<int>(std::min(kChunk, n_samples - start));
        const Eigen::MatrixXd x = sample_terminal_risk_neutral(model, horizon, n, seed, (stream::pricing << 32) | static_cast<std::uint64_t>(chunk));
        const Eigen::VectorXd v = payoff.evaluate(x);
        sum += v.sum();
        sum_sq += v.squaredNorm();
    }
    const double n = static_cast<double>(n_samples);
    const double mean = sum / n;
    const double var = n > 1 ? std::max(sum_sq - n * mean * mean, 0.0) / (n - 1.0) : 0.0;
    const double df = std::exp(-model.r * horizon);
    return {df * mean, df * std::sqrt(var / n), n_samples};
}

double closed_form_price(const BlackScholesModel& model, const PiecewiseLinear1D& pw, double horizon, double spot) {
    // On (0, ∞): pw(x) = pw(0) + s₀x + Σ_{b > 0} (s⁺ − s⁻)(x − b)⁺.
    const auto& bps = pw.breakpoints();
    const auto& slopes = pw.slopes();
    std::size_t i = 0;
    while (i < bps.size() && bps[i] <= 0.0) ++i;
    const double df = std::exp(-model.r * horizon);
    double price = pw(0.0) * df + slopes[i] * spot;
    for (; i < bps.size(); ++i) {
        price += (slopes[i + 1] - slopes[i]) * bs_call(spot, bps[i], model.r, model.sigma, horizon);
    }
    return price;
}

double closed_form_price(const BlackScholesModel& model, const PiecewiseLinear1D& pw, double horizon) {
    double s = 0.0;
    for (int i = 0; i < model.dim(); ++i) s += closed_form_price(model, pw, horizon, model.x0[i]);
    return s / model.dim();
}

void write_price_csv(const std::vector<PriceRow>& rows, std::ostream& out) {
    out << "config_id,method,price,stderr,n_samples\n" << std::setprecision(10);
    for (const auto& r : rows) {
        out << r.config_id << ',' << r.method << ',' << r.price << ',' << r.stderr_ << ',' << r.n_samples << '\n';
    }
}

} // namespace cbsde

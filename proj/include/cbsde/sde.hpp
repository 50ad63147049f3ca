#pragma once

#include "cbsde/constraint.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <iosfwd>
#include <vector>

namespace cbsde {

/// dX = μX dt + σ diag(X) dB, with lending rate r and borrowing rate R for the pricing driver.
struct BlackScholesModel {
    double mu = 0.07;
    double sigma = 0.3;
    double r = 0.05;
    double R = 0.05;
    Eigen::VectorXd x0 = Eigen::VectorXd::Ones(1);

    int dim() const { return static_cast<int>(x0.size()); }

    /// Throws ConfigError on σ ≤ 0 or non-positive x0. R < r is allowed.
    void validate() const;
    bool rates_ordered() const { return R >= r; }
};

struct SeedRecord {
    std::uint64_t seed = 0;
    std::uint64_t stream = 0;
};

/// Simulated paths on a time grid. states[i] and increments[i] are d × n_paths,
/// increments[i] being the Brownian increment that moved states[i] to states[i+1].
struct PathBatch {
    std::vector<double> times;
    std::vector<Eigen::MatrixXd> states;
    std::vector<Eigen::MatrixXd> increments;
    SeedRecord seed_record;

    int num_paths() const { return states.empty() ? 0 : static_cast<int>(states.front().cols()); }
    int num_times() const { return static_cast<int>(times.size()); }
    int dim() const { return states.empty() ? 0 : static_cast<int>(states.front().rows()); }
};

/// Paths per RNG substream; fixes the result independently of how blocks are scheduled.
inline constexpr int kPathsPerBlock = 256;

/// x + μx dt + σ x∘dB.
Eigen::VectorXd euler_step(const BlackScholesModel& model, double t, const Eigen::Ref<const Eigen::VectorXd>& x,
                           double dt, const Eigen::Ref<const Eigen::VectorXd>& dB);

/// Euler scheme over the flattened grid, started at x0.
PathBatch simulate_paths(const BlackScholesModel& model, const TimeGrids& grids, int n_paths, std::uint64_t seed,
                         std::uint64_t stream_id = 0);

/// Same, on an explicit list of increasing times starting at 0.
PathBatch simulate_paths(const BlackScholesModel& model, const std::vector<double>& times, int n_paths,
                         std::uint64_t seed, std::uint64_t stream_id = 0);

/// X_T = x0 exp((r − σ²/2)T + σ√T Z) for the given standard normals (d × n).
Eigen::MatrixXd terminal_from_normals(const BlackScholesModel& model, double horizon, const Eigen::MatrixXd& normals);

/// Exact risk-neutral terminal samples, d × n_paths.
Eigen::MatrixXd sample_terminal_risk_neutral(const BlackScholesModel& model, double horizon, int n_paths,
                                             std::uint64_t seed, std::uint64_t stream_id = 0);

/// CSV with header path_id,time,coord,value.
void write_paths_csv(const PathBatch& batch, std::ostream& out);

} // namespace cbsde

#pragma once

#include "cbsde/constraint.hpp"
#include "cbsde/facelift.hpp"
#include "cbsde/mlp.hpp"
#include "cbsde/payoff.hpp"
#include "cbsde/sde.hpp"
#include "cbsde/train.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace cbsde {

enum class DriverMode { literal, negative_part };

std::string to_string(DriverMode m);
DriverMode driver_mode_from_string(const std::string& name);

/// Differential-rates driver with θ = (μ − r)/σ and a = y − Σz/σ:
///   literal:        f = −ry − θΣz − (R − r) a
///   negative part:  f = −ry − θΣz − (R − r) min(a, 0)
/// σ⁻¹ is the inverse of the diffusion matrix σ diag(x), so x drops out.
struct DriverSpec {
    double r = 0.05;
    double R = 0.05;
    double mu = 0.07;
    double sigma = 0.3;
    DriverMode mode = DriverMode::literal;
    /// Replaces the driver by f ≡ 0.
    bool zero = false;

    static DriverSpec from_model(const BlackScholesModel& m, DriverMode mode = DriverMode::literal);
};

struct DriverValue {
    double f = 0.0;
    double df_dy = 0.0;
    /// ∂f/∂z_i, the same for every coordinate.
    double df_dz = 0.0;
};

/// DomainError when a component of x is zero or x is not finite.
double driver_f(const DriverSpec& spec, double t, const Eigen::Ref<const Eigen::VectorXd>& x, double y,
                const Eigen::Ref<const Eigen::VectorXd>& z);

/// Value and partial derivatives given y and s = Σz.
DriverValue driver_terms(const DriverSpec& spec, double y, double z_sum);

/// y − f(t,x,y,z)h + z·ΔB.
double one_step_target(const DriverSpec& spec, double t, const Eigen::Ref<const Eigen::VectorXd>& x, double y,
                       const Eigen::Ref<const Eigen::VectorXd>& z, double h, const Eigen::Ref<const Eigen::VectorXd>& dB);

struct SchemeConfig {
    TimeGrids grids = build_grids(1.0, 20, 1);
    /// No constraint when empty: the scheme is a plain backward deep-BSDE solver.
    std::optional<ConvexBall> constraint;
    /// |value| bound; when empty, 2 × max |facelifted terminal| on the terminal pool.
    std::optional<double> clip;
    FaceliftTrainSpec terminal_facelift;
    FaceliftTrainSpec step_facelift;
    NetSpec step_net{50, 2, Activation::tanh};
    TrainLoopConfig step_train;
    /// Iterations for steps after the first when warm-starting; 0 means step_train.max_iterations.
    long warm_iterations = 0;
    bool warm_start = true;
    /// Training pool: paths simulated once and sampled by index.
    int pool_paths = 100000;
    DriverMode driver = DriverMode::literal;
    bool zero_driver = false;
    /// Apply the facelift at date 0 as well (samples there are a point mass at x0).
    bool facelift_at_origin = false;
    /// Directory for per-step network checkpoints; none when empty.
    std::string checkpoint_dir;

    void validate(const BlackScholesModel& model) const;
};

struct StepNets {
    int step = 0;
    double time = 0.0;
    Mlp value_net;
    Mlp z_net;
    /// Facelifted value network when the constraint was applied at this date.
    std::optional<Mlp> facelift_net;
    double clip = 0.0;
    bool facelifted = false;

    /// clip(facelift_net or value_net) on a batch.
    Eigen::VectorXd value(const Eigen::MatrixXd& x) const;
};

struct KIncrement {
    double mean_up = 0.0;   ///< mean (post − pre)⁺
    double mean_down = 0.0; ///< mean (pre − post)⁺
    double mean = 0.0;      ///< mean (post − pre)
    double q50 = 0.0;
    double q90 = 0.0;
    double max = 0.0;
};

/// Increments post − pre over evaluation values.
KIncrement k_increment(const Eigen::VectorXd& pre, const Eigen::VectorXd& post);

struct StepDiagnostics {
    int step = 0;
    double time = 0.0;
    double residual_loss = 0.0;
    long best_iteration = 0;
    bool facelift_applied = false;
    bool facelift_skipped = false;
    KIncrement increment;
    std::vector<FaceliftRound> facelift_rounds;
    double wall_time = 0.0;
};

struct SolveResult {
    double y0 = 0.0;
    double clip = 0.0;
    std::vector<StepNets> steps;
    std::vector<StepDiagnostics> diagnostics;
    /// Terminal facelift diagnostics (index = number of grid steps).
    std::optional<StepDiagnostics> terminal;
    std::uint64_t seed = 0;
    double wall_time = 0.0;
};

/// Regression of next-date values onto y − f h + z·ΔB for one grid step. Paths are drawn by
/// index from `pool`; `eval` supplies the fixed evaluation set. Warm-starts from `init` when given.
struct StepData {
    Eigen::MatrixXd x;      ///< d × P states at t_i
    Eigen::MatrixXd dB;     ///< d × P increments over [t_i, t_{i+1}]
    Eigen::VectorXd target; ///< P next-date values
};

struct StepTrainResult {
    Mlp value_net;
    Mlp z_net;
    double residual_loss = 0.0;
    long best_iteration = 0;
    std::vector<TraceEntry> trace;
};

StepTrainResult train_step(int step, double t, double h, const DriverSpec& driver, const StepData& pool,
                           const StepData& eval, const NetSpec& net, const TrainLoopConfig& cfg,
                           const std::optional<std::pair<Mlp, Mlp>>& init, std::uint64_t seed);

/// Facelift of clip(value_net, M) sampled at the pool states. Returns the facelift result,
/// the skipped flag set when the clipped net is already feasible on the evaluation points.
FaceliftResult apply_constraint(int step, const Mlp& value_net, const ConvexBall& c, const FaceliftTrainSpec& spec,
                                double clip, const Eigen::MatrixXd& pool_states, std::uint64_t seed);

/// Backward scheme: facelift the terminal payoff, then for each step from the last one
/// down to 0 regress and apply the constraint at constraint dates.
SolveResult solve(const BlackScholesModel& model, const Payoff& payoff, const SchemeConfig& scheme, std::uint64_t seed);

struct MultiRunResult {
    double mean = 0.0;
    std::optional<double> std;
    std::vector<double> y0;
    std::vector<std::uint64_t> seeds;
    std::vector<SolveResult> runs;
};

/// Seed of run i under a master seed.
std::uint64_t run_seed(std::uint64_t master, int run);

MultiRunResult multi_run(const BlackScholesModel& model, const Payoff& payoff, const SchemeConfig& scheme,
                         std::uint64_t master_seed, int n_runs);

/// CSV run_id,k,time,residual_loss,k_increment,k_decrement,Y0,wall_time (one row per step).
void write_results_csv(const std::vector<SolveResult>& runs, std::ostream& out);

/// Writes step_<k>_value.ckpt, step_<k>_z.ckpt and step_<k>_facelift.ckpt into dir.
void save_step_checkpoints(const SolveResult& result, const std::string& dir);

} // namespace cbsde

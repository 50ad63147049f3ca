#pragma once

#include "cbsde/constraint.hpp"
#include "cbsde/mlp.hpp"
#include "cbsde/payoff.hpp"
#include "cbsde/rng.hpp"
#include "cbsde/train.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

namespace cbsde {

/// Axis-aligned box [lower, upper] in ℝ^d.
struct Box {
    Eigen::VectorXd lower;
    Eigen::VectorXd upper;

    static Box cube(double lo, double hi, int dim);

    int dim() const { return static_cast<int>(lower.size()); }
    bool contains(const Eigen::Ref<const Eigen::VectorXd>& x) const;
    void validate() const;

    /// n uniform samples, d × n.
    Eigen::MatrixXd sample(int n, Rng& rng) const;
};

/// Function evaluated on a batch of points (d × N) giving N values.
using BatchFn = std::function<Eigen::VectorXd(const Eigen::MatrixXd&)>;
/// Draws n points, d × n.
using PointSampler = std::function<Eigen::MatrixXd(int n, Rng& rng)>;

BatchFn batch_fn(Payoff payoff);
BatchFn batch_fn(Mlp net, std::optional<double> clip = std::nullopt);

PointSampler box_sampler(Box box);
/// Uniform draws with replacement from the columns of `pool`.
PointSampler pool_sampler(Eigen::MatrixXd pool);

/// Payoff tabulated on a regular lattice covering a box plus a margin.
///
/// The margin (max φ − min φ)/radius on every side is the distance beyond which
/// δ_C outweighs any gain in φ, so the discrete sup is not truncated.
class GridOracle {
public:
    GridOracle(const Payoff& payoff, Box box, double h, double radius);

    /// Lattice with given origin, step and counts per axis; values ordered with axis 0 fastest.
    GridOracle(Box box, Eigen::VectorXd origin, double h, std::vector<int> counts, Eigen::VectorXd values);

    const Box& box() const { return box_; }
    double h() const { return h_; }
    int dim() const { return box_.dim(); }
    Eigen::Index num_points() const { return values_.size(); }
    const std::vector<int>& counts() const { return counts_; }
    const Eigen::VectorXd& origin() const { return origin_; }
    const Eigen::VectorXd& values() const { return values_; }

    Eigen::VectorXd point(Eigen::Index flat) const;

    /// The same lattice holding `values`.
    GridOracle with_values(Eigen::VectorXd values) const;

private:
    Box box_;
    Eigen::VectorXd origin_;
    double h_;
    std::vector<int> counts_;
    Eigen::VectorXd values_;
};

/// max over lattice points g of φ(g) − δ_C(g − x). DomainError when x is outside the box.
double brute_force_facelift(const GridOracle& oracle, const ConvexBall& c, const Eigen::Ref<const Eigen::VectorXd>& x);

/// Discrete facelift at every lattice point. Exact on the lattice; uses axis-wise sweeps
/// for one dimension and for boxes, a direct double loop for Euclidean balls in d > 1.
Eigen::VectorXd tabulate_facelift(const GridOracle& oracle, const ConvexBall& c);

/// (L_φ + radius)·h.
double oracle_error_bound(double lipschitz, double radius, double h);

/// One-dimensional facelift from the oracle as a piecewise-linear function (lattice
/// interpolant, extrapolated with the end slopes).
PiecewiseLinear1D facelift_piecewise(const GridOracle& oracle, const ConvexBall& c);

struct FaceliftTrainSpec {
    double eps_pen = 1.0 / 50.0;
    int rounds = 3;
    Box sampling_box = Box::cube(0.6, 1.4, 1);
    NetSpec net{50, 2, Activation::relu};
    TrainLoopConfig train;
    /// Previous-round term as (NN^{k−1} − φ)⁺/eps, constant in the parameters.
    bool literal_previous_term = false;

    void validate() const;
};

/// Loss components averaged over a batch.
struct FaceliftLossParts {
    double fit = 0.0;
    double gradient_penalty = 0.0;
    double domination = 0.0;
    double previous = 0.0;
    double total(double eps_pen) const { return fit + (gradient_penalty + domination + previous) / eps_pen; }
};

/// Batch objective mean |NN − φ| + [gp(C, D NN) + (φ − NN)⁺ + (NN − prev)⁺]/eps_pen.
///
/// `previous` may be empty (round 0). With `literal_previous` the last term is
/// (prev − φ)⁺ and contributes no gradient. `parts`, when given, receives the components.
BatchLoss facelift_batch_loss(const ConvexBall& c, double eps_pen, Eigen::VectorXd target,
                              Eigen::VectorXd previous, bool literal_previous = false,
                              FaceliftLossParts* parts = nullptr);

/// Objective value of `net` on the points x.
FaceliftLossParts facelift_loss(const Mlp& net, const ConvexBall& c, const Eigen::MatrixXd& x,
                                const Eigen::VectorXd& target, const Eigen::VectorXd& previous,
                                bool literal_previous = false);

struct ErrorEstimate {
    double mse = 0.0;
    double stderr_ = 0.0;
};

/// Mean and standard error of (a − b)² over the points.
ErrorEstimate squared_error(const Eigen::VectorXd& a, const Eigen::VectorXd& b);

/// Monte-Carlo E[(f − reference)²(ξ)] with ξ uniform in the box.
ErrorEstimate facelift_error(const BatchFn& f, const BatchFn& reference, const Box& box, int n_eval, Rng& rng);

struct FaceliftRound {
    int round = 0;
    double eval_loss = 0.0;
    ErrorEstimate to_target;
    ErrorEstimate to_reference{std::numeric_limits<double>::quiet_NaN(), std::numeric_limits<double>::quiet_NaN()};
    /// Fraction of eval points with gp > 10·eps_pen·(mean fit loss).
    double infeasible_fraction = 0.0;
    /// Fraction of eval points with NN^k ≤ NN^{k−1} + tolerance; NaN for round 0.
    double monotone_fraction = std::numeric_limits<double>::quiet_NaN();
    long best_iteration = 0;
    bool skipped = false;
};

struct FaceliftResult {
    Mlp net;
    std::vector<FaceliftRound> rounds;
    /// Trained net of every entry in `rounds`, including a degraded last one.
    std::vector<Mlp> round_nets;
    /// Round whose net is returned.
    int accepted_round = 0;
    bool stopped_early = false;
    std::vector<TraceEntry> trace;
};

struct FaceliftProblem {
    int dim = 1;
    BatchFn target;
    PointSampler sampler;
    /// Optional reference facelift recorded in the round diagnostics.
    BatchFn reference;
    /// Starting network for round 0; a fresh one from spec.net when absent.
    std::optional<Mlp> initial;
    /// Skip training when no eval point violates the constraint (the target is taken as feasible).
    bool skip_if_feasible = false;
    /// Absolute tolerance in the monotone-fraction diagnostic.
    double monotone_tolerance = 1e-3;
};

/// Iterative penalized facelift: round 0 fits the target, round k also penalizes exceeding
/// round k−1. Stops when E[(NN^k − φ)²] on the eval set increases and returns the last
/// round that did not. Each round warm-starts from the previous one. TrainingError from a
/// round is rethrown with the round index in its message.
FaceliftResult iterative_facelift(const FaceliftProblem& problem, const ConvexBall& c, const FaceliftTrainSpec& spec,
                                  std::uint64_t seed);

/// Convenience form for a payoff sampled uniformly on spec.sampling_box.
FaceliftResult iterative_facelift(const Payoff& payoff, const ConvexBall& c, const FaceliftTrainSpec& spec,
                                  std::uint64_t seed, BatchFn reference = {});

/// CSV with a header `x,<name_1>,…` and one row per abscissa (one-dimensional inputs).
void write_curve_csv(const std::string& path, const std::vector<double>& xs,
                     const std::vector<std::pair<std::string, BatchFn>>& columns);

/// CSV `k,mse,stderr,...` with one row per round.
void write_error_trace_csv(const std::string& path, const std::vector<FaceliftRound>& rounds);

} // namespace cbsde

#pragma once

#include "cbsde/rng.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace cbsde {

struct AdamState {
    Eigen::VectorXd first_moment;
    Eigen::VectorXd second_moment;
    long step = 0;
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;

    explicit AdamState(Eigen::Index n_params = 0, double lr = 1e-3);
};

/// One bias-corrected Adam update of `params` in place.
void adam_step(AdamState& state, Eigen::VectorXd& params, const Eigen::VectorXd& grads);

enum class LrSchedule { constant, plateau };

struct TrainLoopConfig {
    int batch_size = 1000;
    long max_iterations = 100000;
    int eval_every = 100;
    int eval_batch = 10000;
    double learning_rate = 1e-3;
    LrSchedule schedule = LrSchedule::constant;
    /// Plateau schedule: after `plateau_window` evaluations without a relative
    /// improvement of `plateau_min_improvement`, multiply the rate by `plateau_factor`,
    /// never going below `min_lr_fraction` times the initial rate.
    int plateau_window = 10;
    double plateau_factor = 0.5;
    double plateau_min_improvement = 1e-3;
    double min_lr_fraction = 0.01;
    std::uint64_t seed = 0;

    void validate() const;
};

std::string to_string(LrSchedule s);
LrSchedule lr_schedule_from_string(const std::string& name);

struct TraceEntry {
    long iteration = 0;
    double eval_loss = 0.0;
    double learning_rate = 0.0;
};

struct TrainResult {
    Eigen::VectorXd best_params;
    double best_eval_loss = 0.0;
    long best_iteration = 0;
    std::vector<TraceEntry> trace;
};

/// Minibatch loss: fills `grad` with the parameter gradient and returns the loss.
using MinibatchLoss = std::function<double(const Eigen::VectorXd& params, int batch_size, Rng& rng,
                                           Eigen::VectorXd& grad)>;
using EvalLoss = std::function<double(const Eigen::VectorXd& params)>;
using ParamProjection = std::function<void(Eigen::VectorXd& params)>;

/// Minibatch Adam with periodic evaluation and best-parameter retention.
///
/// The initial parameters are evaluated at iteration 0 and compete for "best", so a
/// warm start is never made worse. With max_iterations = 0 the initial parameters are
/// returned with an empty trace. A non-finite minibatch or evaluation loss raises
/// TrainingError carrying the iteration and the parameter norm.
TrainResult train(Eigen::VectorXd params, const MinibatchLoss& minibatch, const EvalLoss& evaluate,
                  const TrainLoopConfig& cfg, const ParamProjection& project = {});

} // namespace cbsde

#include "cbsde/train.hpp"

#include "cbsde/errors.hpp"

#include <cmath>
#include <limits>
#include <sstream>

namespace cbsde {

AdamState::AdamState(Eigen::Index n_params, double lr)
    : first_moment(Eigen::VectorXd::Zero(n_params)), second_moment(Eigen::VectorXd::Zero(n_params)),
      learning_rate(lr) {}

void adam_step(AdamState& state, Eigen::VectorXd& params, const Eigen::VectorXd& grads) {
    if (params.size() != grads.size() || state.first_moment.size() != params.size()) {
        throw ContractError("adam_step: shape mismatch");
    }
    ++state.step;
    state.first_moment = state.beta1 * state.first_moment + (1.0 - state.beta1) * grads;
    state.second_moment = state.beta2 * state.second_moment + (1.0 - state.beta2) * grads.cwiseAbs2();
    const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
    const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
    params.array() -= state.learning_rate * (state.first_moment.array() / c1)
                      / ((state.second_moment.array() / c2).sqrt() + state.epsilon);
}

void TrainLoopConfig::validate() const {
    if (batch_size < 1) throw ConfigError("batch_size must be positive");
    if (max_iterations < 0) throw ConfigError("max_iterations must be nonnegative");
    if (eval_every < 1) throw ConfigError("eval_every must be positive");
    if (max_iterations > 0 && eval_every > max_iterations) throw ConfigError("eval_every exceeds max_iterations");
    if (eval_batch < 1) throw ConfigError("eval_batch must be positive");
    if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
    if (plateau_window < 1 || !(plateau_factor > 0.0 && plateau_factor < 1.0) || !(min_lr_fraction > 0.0)) {
        throw ConfigError("invalid plateau schedule parameters");
    }
}

std::string to_string(LrSchedule s) {
    return s == LrSchedule::constant ? "constant" : "plateau";
}

LrSchedule lr_schedule_from_string(const std::string& name) {
    if (name == "constant") return LrSchedule::constant;
    if (name == "plateau") return LrSchedule::plateau;
    throw ConfigError("unknown learning-rate schedule '" + name + "'");
}

TrainResult train(Eigen::VectorXd params, const MinibatchLoss& minibatch, const EvalLoss& evaluate,
                  const TrainLoopConfig& cfg, const ParamProjection& project) {
    cfg.validate();
    TrainResult result;
    result.best_params = params;
    result.best_eval_loss = std::numeric_limits<double>::infinity();
    if (cfg.max_iterations == 0) return result;

    auto fail = [&](const char* what, long it) {
        std::ostringstream msg;
        msg << what << " at iteration " << it << " (parameter norm " << params.norm() << ")";
        throw TrainingError(msg.str(), it, params.norm());
    };

    AdamState adam(params.size(), cfg.learning_rate);
    Rng rng = make_stream(cfg.seed, {stream::training});
    Eigen::VectorXd grad(params.size());

    double plateau_ref = std::numeric_limits<double>::infinity();
    int stale = 0;
    auto record = [&](long it) {
        const double loss = evaluate(params);
        if (!std::isfinite(loss)) fail("non-finite evaluation loss", it);
        result.trace.push_back({it, loss, adam.learning_rate});
        if (loss < result.best_eval_loss) {
            result.best_eval_loss = loss;
            result.best_params = params;
            result.best_iteration = it;
        }
        if (cfg.schedule == LrSchedule::plateau) {
            if (loss < plateau_ref * (1.0 - cfg.plateau_min_improvement)) {
                plateau_ref = loss;
                stale = 0;
            } else if (++stale >= cfg.plateau_window) {
                adam.learning_rate = std::max(adam.learning_rate * cfg.plateau_factor,
                                              cfg.learning_rate * cfg.min_lr_fraction);
                stale = 0;
                plateau_ref = std::min(plateau_ref, loss);
            }
        }
    };

    record(0);
    for (long it = 1; it <= cfg.max_iterations; ++it) {
        grad.setZero();
        const double loss = minibatch(params, cfg.batch_size, rng, grad);
        if (!std::isfinite(loss) || !grad.allFinite()) fail("non-finite minibatch loss", it);
        adam_step(adam, params, grad);
        if (project) project(params);
        if (it % cfg.eval_every == 0 || it == cfg.max_iterations) record(it);
    }
    return result;
}

} // namespace cbsde

#include "doctest.h"

#include "cbsde/errors.hpp"
#include "cbsde/mlp.hpp"
#include "cbsde/train.hpp"

#include <cmath>

using namespace cbsde;
using Eigen::MatrixXd;
using Eigen::VectorXd;

TEST_CASE("first Adam step has magnitude close to the learning rate") {
    AdamState st(3, 1e-3);
    VectorXd p = VectorXd::Zero(3);
    VectorXd g(3);
    g << 0.5, -20.0, 1e-3;
    adam_step(st, p, g);
    for (int i = 0; i < 3; ++i) {
        CHECK(std::abs(p[i]) >= 0.0009);
        CHECK(std::abs(p[i]) <= 0.001);
        CHECK(p[i] * g[i] < 0.0);
    }
    CHECK(st.step == 1);
}

TEST_CASE("Adam leaves parameters unchanged on zero gradients") {
    AdamState st(2);
    VectorXd p(2);
    p << 1.0, -2.0;
    const VectorXd before = p;
    for (int i = 0; i < 5; ++i) adam_step(st, p, VectorXd::Zero(2));
    CHECK(p == before);
}

TEST_CASE("Adam step after a sign flip stays below the learning rate") {
    AdamState st(1, 1e-3);
    VectorXd p = VectorXd::Zero(1);
    adam_step(st, p, VectorXd::Constant(1, 1.0));
    const double after_first = p[0];
    adam_step(st, p, VectorXd::Constant(1, -1.0));
    CHECK(std::abs(p[0] - after_first) < 1e-3);
    CHECK_THROWS_AS(adam_step(st, p, VectorXd::Zero(2)), ContractError);
}

TEST_CASE("config validation") {
    TrainLoopConfig cfg;
    CHECK_NOTHROW(cfg.validate());
    cfg.batch_size = -1;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = {};
    cfg.learning_rate = 0.0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    CHECK(lr_schedule_from_string(to_string(LrSchedule::plateau)) == LrSchedule::plateau);
    CHECK_THROWS_AS(lr_schedule_from_string("cosine"), ConfigError);
}

namespace {

// Fit a small tanh net to the constant 0.3 on uniform points in [-1, 1].
struct ConstantFit {
    Mlp net;
    MatrixXd eval_x;

    explicit ConstantFit(std::uint64_t seed) {
        Rng rng = make_stream(seed, {stream::init});
        net = Mlp::glorot(1, 8, 1, 1, Activation::tanh, rng);
        eval_x = VectorXd::LinSpaced(200, -1.0, 1.0).transpose();
    }

    static double mse_loss(const NetOutputs& out, NetOutputs& adj) {
        const double n = static_cast<double>(out.values.cols());
        const MatrixXd r = out.values.array() - 0.3;
        adj.values = 2.0 * r / n;
        return r.squaredNorm() / n;
    }

    MinibatchLoss minibatch() {
        return [this](const VectorXd& p, int batch, Rng& rng, VectorXd& grad) {
            net.set_params(p);
            std::uniform_real_distribution<double> u(-1.0, 1.0);
            MatrixXd x(1, batch);
            for (int i = 0; i < batch; ++i) x(0, i) = u(rng);
            const LossGradient lg = loss_and_param_gradients(net, x, false, mse_loss);
            grad = lg.gradient;
            return lg.loss;
        };
    }

    EvalLoss evaluate() {
        return [this](const VectorXd& p) {
            net.set_params(p);
            const MatrixXd r = net.forward(eval_x).array() - 0.3;
            return r.squaredNorm() / static_cast<double>(r.cols());
        };
    }
};

TrainLoopConfig small_config() {
    TrainLoopConfig cfg;
    cfg.batch_size = 64;
    cfg.max_iterations = 2000;
    cfg.eval_every = 50;
    cfg.learning_rate = 1e-2;
    cfg.seed = 7;
    return cfg;
}

} // namespace

TEST_CASE("training fits a constant") {
    ConstantFit fit(1);
    const TrainResult res = train(fit.net.params(), fit.minibatch(), fit.evaluate(), small_config());
    CHECK(res.best_eval_loss <= 1e-4);
    for (const auto& e : res.trace) CHECK(res.best_eval_loss <= e.eval_loss);
    CHECK(res.trace.front().iteration == 0);
}

TEST_CASE("zero iterations return the initial parameters") {
    ConstantFit fit(2);
    TrainLoopConfig cfg = small_config();
    cfg.max_iterations = 0;
    const TrainResult res = train(fit.net.params(), fit.minibatch(), fit.evaluate(), cfg);
    CHECK(res.trace.empty());
    CHECK(res.best_params == fit.net.params());
}

TEST_CASE("training is deterministic for a fixed seed") {
    ConstantFit a(3), b(3);
    TrainLoopConfig cfg = small_config();
    cfg.max_iterations = 300;
    const TrainResult ra = train(a.net.params(), a.minibatch(), a.evaluate(), cfg);
    const TrainResult rb = train(b.net.params(), b.minibatch(), b.evaluate(), cfg);
    CHECK(ra.best_params == rb.best_params);
    CHECK(ra.best_iteration == rb.best_iteration);
}

TEST_CASE("plateau schedule decays the rate without going below the floor") {
    ConstantFit fit(4);
    TrainLoopConfig cfg = small_config();
    cfg.schedule = LrSchedule::plateau;
    cfg.plateau_window = 2;
    cfg.plateau_min_improvement = 0.5;
    cfg.min_lr_fraction = 0.1;
    const TrainResult res = train(fit.net.params(), fit.minibatch(), fit.evaluate(), cfg);
    CHECK(res.trace.back().learning_rate < cfg.learning_rate);
    for (const auto& e : res.trace) CHECK(e.learning_rate >= cfg.learning_rate * cfg.min_lr_fraction - 1e-15);
}

TEST_CASE("non-finite loss raises TrainingError") {
    TrainLoopConfig cfg = small_config();
    cfg.max_iterations = 100;
    MinibatchLoss bad = [](const VectorXd& p, int, Rng&, VectorXd& grad) {
        grad = VectorXd::Zero(p.size());
        return std::nan("");
    };
    EvalLoss ok = [](const VectorXd&) { return 1.0; };
    try {
        train(VectorXd::Ones(4), bad, ok, cfg);
        FAIL("expected TrainingError");
    } catch (const TrainingError& e) {
        CHECK(e.iteration() >= 1);
        CHECK(e.param_norm() == doctest::Approx(2.0));
    }
}

TEST_CASE("projection is applied after each step") {
    TrainLoopConfig cfg = small_config();
    cfg.max_iterations = 50;
    MinibatchLoss lin = [](const VectorXd& p, int, Rng&, VectorXd& grad) {
        grad = -VectorXd::Ones(p.size());
        return -p.sum();
    };
    EvalLoss ev = [](const VectorXd& p) { return -p.sum(); };
    const TrainResult res = train(VectorXd::Zero(2), lin, ev, cfg, [](VectorXd& p) { p = p.cwiseMin(0.05); });
    CHECK(res.best_params.maxCoeff() <= 0.05);
}

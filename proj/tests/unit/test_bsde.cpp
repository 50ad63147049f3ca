#include "doctest.h"

#include "cbsde/bsde.hpp"
#include "cbsde/errors.hpp"

#include <cmath>
#include <sstream>

using namespace cbsde;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

DriverSpec spec(double r, double R, DriverMode mode = DriverMode::literal) {
    DriverSpec s;
    s.r = r;
    s.R = R;
    s.mu = 0.07;
    s.sigma = 0.3;
    s.mode = mode;
    return s;
}

VectorXd v1(double a) { return VectorXd::Constant(1, a); }

TrainLoopConfig quick_train(long iterations) {
    TrainLoopConfig cfg;
    cfg.max_iterations = iterations;
    cfg.batch_size = 256;
    cfg.eval_every = 100;
    cfg.eval_batch = 2000;
    cfg.learning_rate = 3e-3;
    return cfg;
}

// Samples for one step of length h from states uniform in [lo, hi].
StepData one_step_data(int n, double lo, double hi, double h, double sigma, std::uint64_t seed, bool linear_target) {
    Rng rng(seed);
    std::uniform_real_distribution<double> u(lo, hi);
    std::normal_distribution<double> g(0.0, std::sqrt(h));
    StepData d{MatrixXd(1, n), MatrixXd(1, n), VectorXd(n)};
    for (int i = 0; i < n; ++i) {
        d.x(0, i) = u(rng);
        d.dB(0, i) = g(rng);
        d.target[i] = linear_target ? d.x(0, i) * (1.0 + sigma * d.dB(0, i)) : 0.37;
    }
    return d;
}

} // namespace

TEST_CASE("driver examples") {
    const VectorXd x = v1(1.0);
    CHECK(driver_f(spec(0.05, 0.05), 0.0, x, 1.0, v1(0.0)) == doctest::Approx(-0.05));
    const double theta = (0.07 - 0.05) / 0.3;
    CHECK(driver_f(spec(0.05, 0.05), 0.0, x, 0.4, v1(0.2)) == doctest::Approx(-0.05 * 0.4 - theta * 0.2));
    CHECK(driver_f(spec(0.05, 0.07), 0.0, x, 1.0, v1(0.0)) == doctest::Approx(-0.07));
    // a = y − z/σ > 0: the negative part vanishes.
    CHECK(driver_f(spec(0.05, 0.07, DriverMode::negative_part), 0.0, x, 1.0, v1(0.0)) == doctest::Approx(-0.05));
    CHECK(driver_f(spec(0.05, 0.07, DriverMode::negative_part), 0.0, x, 0.0, v1(0.3))
          == doctest::Approx(-theta * 0.3 + 0.02 * 1.0));
    DriverSpec zero = spec(0.05, 0.07);
    zero.zero = true;
    CHECK(driver_f(zero, 0.0, x, 3.0, v1(1.0)) == 0.0);
    CHECK_THROWS_AS(driver_f(spec(0.05, 0.05), 0.0, v1(0.0), 1.0, v1(0.0)), DomainError);
    CHECK(driver_mode_from_string(to_string(DriverMode::negative_part)) == DriverMode::negative_part);
}

TEST_CASE("driver derivatives match finite differences") {
    for (DriverMode mode : {DriverMode::literal, DriverMode::negative_part}) {
        const DriverSpec s = spec(0.05, 0.09, mode);
        for (double y : {0.3, 1.2}) {
            for (double z : {-0.4, 0.1, 0.5}) {
                const DriverValue dv = driver_terms(s, y, z);
                const double e = 1e-6;
                CHECK(dv.df_dy == doctest::Approx((driver_terms(s, y + e, z).f - driver_terms(s, y - e, z).f) / (2 * e)));
                CHECK(dv.df_dz == doctest::Approx((driver_terms(s, y, z + e).f - driver_terms(s, y, z - e).f) / (2 * e)));
            }
        }
    }
}

TEST_CASE("one-step target examples") {
    DriverSpec zero = spec(0.05, 0.05);
    zero.zero = true;
    CHECK(one_step_target(zero, 0.0, v1(1.0), 1.0, v1(0.0), 0.05, v1(0.3)) == 1.0);
    CHECK(one_step_target(zero, 0.0, VectorXd::Ones(2), 0.0, VectorXd::Ones(2), 0.05, Eigen::Vector2d(0.1, -0.1))
          == doctest::Approx(0.0));
    DriverSpec flat = spec(0.0, 0.0);
    flat.mu = 0.0;
    CHECK(one_step_target(flat, 0.0, v1(1.0), 2.0, v1(0.0), 0.05, v1(0.2)) == doctest::Approx(2.0));
    CHECK_THROWS_AS(one_step_target(flat, 0.0, v1(1.0), 2.0, v1(0.0), 0.0, v1(0.2)), DomainError);
}

TEST_CASE("K-increment summary") {
    const VectorXd pre = VectorXd::LinSpaced(11, 0.0, 1.0);
    const KIncrement none = k_increment(pre, pre);
    CHECK(none.mean_up == 0.0);
    CHECK(none.mean_down == 0.0);
    const KIncrement up = k_increment(pre, (pre.array() + 0.1).matrix());
    CHECK(up.mean_up == doctest::Approx(0.1));
    CHECK(up.mean_down == doctest::Approx(0.0));
    CHECK(up.q90 == doctest::Approx(0.1));
    CHECK_THROWS_AS(k_increment(pre, VectorXd::Zero(3)), ContractError);
}

TEST_CASE("train_step recovers a constant solution") {
    DriverSpec zero = spec(0.05, 0.05);
    zero.zero = true;
    const StepData pool = one_step_data(4000, 0.7, 1.3, 0.05, 0.3, 1, false);
    const StepData eval = one_step_data(2000, 0.7, 1.3, 0.05, 0.3, 2, false);
    const StepTrainResult res = train_step(0, 0.0, 0.05, zero, pool, eval, {20, 1, Activation::tanh}, quick_train(2000),
                                           std::nullopt, 3);
    const VectorXd u = res.value_net.forward(eval.x).row(0).transpose();
    const VectorXd z = res.z_net.forward(eval.x).row(0).transpose();
    CHECK((u.array() - 0.37).square().mean() <= 1e-4);
    CHECK(z.array().square().mean() <= 1e-4);
}

TEST_CASE("train_step recovers the martingale representation of the asset") {
    DriverSpec zero = spec(0.0, 0.0);
    zero.zero = true;
    const double sigma = 0.3, h = 0.05;
    const StepData pool = one_step_data(20000, 0.8, 1.2, h, sigma, 4, true);
    const StepData eval = one_step_data(2000, 0.8, 1.2, h, sigma, 5, true);
    const StepTrainResult res = train_step(0, 0.0, h, zero, pool, eval, {20, 1, Activation::tanh}, quick_train(3000),
                                           std::nullopt, 6);
    for (double x : {0.85, 1.0, 1.15}) {
        CHECK(res.value_net.forward_point(v1(x))[0] == doctest::Approx(x).epsilon(0.05));
        CHECK(res.z_net.forward_point(v1(x))[0] == doctest::Approx(sigma * x).epsilon(0.05));
    }
    const StepTrainResult again = train_step(0, 0.0, h, zero, pool, eval, {20, 1, Activation::tanh}, quick_train(300),
                                             std::nullopt, 6);
    const StepTrainResult again2 = train_step(0, 0.0, h, zero, pool, eval, {20, 1, Activation::tanh}, quick_train(300),
                                              std::nullopt, 6);
    CHECK(again.value_net == again2.value_net);
    CHECK(again.z_net == again2.z_net);
}

namespace {

// φ = case 2 exactly as a relu net; extra hidden units carry zero output weight.
Mlp case2_snapshot(int width, Rng& rng) {
    Mlp net({1, width, 1}, {Activation::relu});
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (int i = 0; i < width; ++i) {
        net.weight(0)(i, 0) = u(rng);
        net.bias(0)[i] = u(rng);
    }
    const double kinks[3] = {0.8, 1.0, 1.2}, weights[3] = {4.0, -4.0, 1.0};
    for (int i = 0; i < 3; ++i) {
        net.weight(0)(i, 0) = 1.0;
        net.bias(0)[i] = -kinks[i];
        net.weight(1)(0, i) = weights[i];
    }
    return net;
}

FaceliftTrainSpec quick_facelift() {
    FaceliftTrainSpec fs;
    fs.rounds = 2;
    fs.train = quick_train(2000);
    fs.train.batch_size = 500;
    fs.train.learning_rate = 3e-3;
    return fs;
}

} // namespace

TEST_CASE("apply_constraint facelifts a case-2 network") {
    Rng rng(7);
    const Mlp net = case2_snapshot(30, rng);
    const MatrixXd states = Box::cube(0.6, 1.4, 1).sample(20000, rng);
    for (double x : {0.7, 0.9, 1.1, 1.3}) CHECK(net.forward_point(v1(x))[0] == doctest::Approx(payoff_case2(x)));
    const ConvexBall c(2.0, 1);
    const FaceliftResult fr = apply_constraint(3, net, c, quick_facelift(), 10.0, states, 8);
    CHECK_FALSE(fr.rounds.front().skipped);
    Rng er(9);
    const double mse = facelift_error(batch_fn(fr.net), batch_fn(analytic_facelift_case2_for(c)), Box::cube(0.6, 1.4, 1),
                                      20000, er).mse;
    CHECK(mse <= 1e-3);
}

TEST_CASE("apply_constraint leaves a feasible network in place") {
    Rng rng(10);
    Mlp net = Mlp::glorot(1, 10, 1, 1, Activation::tanh, rng);
    net.params() *= 0.1;
    const MatrixXd states = Box::cube(0.6, 1.4, 1).sample(5000, rng);
    const FaceliftResult fr = apply_constraint(2, net, ConvexBall(5.0, 1), quick_facelift(), 10.0, states, 11);
    CHECK(fr.rounds.front().skipped);
    CHECK((fr.net.forward(states) - net.forward(states)).squaredNorm() / 5000.0 <= 1e-3);
}

TEST_CASE("step values are clipped") {
    StepNets sn;
    sn.value_net = Mlp({1, 1, 1}, {Activation::relu});
    sn.value_net.weight(0)(0, 0) = 1.0;
    sn.value_net.weight(1)(0, 0) = 5.0;
    sn.clip = 0.5;
    const MatrixXd x = VectorXd::LinSpaced(20, 0.0, 2.0).transpose();
    CHECK(sn.value(x).maxCoeff() <= 0.5);
    CHECK(sn.value(x)[0] == 0.0);
}

namespace {

SchemeConfig tiny_scheme() {
    SchemeConfig s;
    s.grids = build_grids(1.0, 1, 1);
    s.pool_paths = 4000;
    s.step_net = {10, 1, Activation::tanh};
    s.step_train = quick_train(1000);
    s.terminal_facelift = quick_facelift();
    s.terminal_facelift.train.max_iterations = 500;
    s.terminal_facelift.net = {10, 1, Activation::relu};
    s.step_facelift = s.terminal_facelift;
    return s;
}

} // namespace

TEST_CASE("single-step solve of a constant payoff") {
    BlackScholesModel m;
    SchemeConfig s = tiny_scheme();
    s.zero_driver = true;
    s.constraint = ConvexBall(10.0, 1);
    const SolveResult res = solve(m, Payoff::constant(0.42), s, 12);
    CHECK(std::abs(res.y0 - 0.42) <= 1e-3);
    REQUIRE(res.terminal);
    CHECK(res.terminal->facelift_skipped);
    CHECK(res.steps.size() == 1);
    CHECK(res.diagnostics.size() == 1);
}

TEST_CASE("scheme validation") {
    BlackScholesModel m;
    SchemeConfig s;
    CHECK_NOTHROW(s.validate(m));
    s.pool_paths = 0;
    CHECK_THROWS_AS(s.validate(m), ConfigError);
    s = {};
    s.constraint = ConvexBall(1.0, 2);
    CHECK_THROWS_AS(s.validate(m), ConfigError);
    s = {};
    s.clip = -1.0;
    CHECK_THROWS_AS(s.validate(m), ConfigError);
}

TEST_CASE("multi_run seeds and determinism") {
    BlackScholesModel m;
    SchemeConfig s = tiny_scheme();
    s.step_train.max_iterations = 200;
    const MultiRunResult a = multi_run(m, make_case2(), s, 99, 2);
    const MultiRunResult b = multi_run(m, make_case2(), s, 99, 2);
    CHECK(a.y0 == b.y0);
    CHECK(a.seeds[0] != a.seeds[1]);
    CHECK(a.seeds[1] == run_seed(99, 1));
    REQUIRE(a.std);
    CHECK(a.mean == doctest::Approx(0.5 * (a.y0[0] + a.y0[1])));
    const MultiRunResult one = multi_run(m, make_case2(), s, 99, 1);
    CHECK_FALSE(one.std);

    std::ostringstream out;
    write_results_csv(a.runs, out);
    CHECK(out.str().rfind("run_id,k,time,residual_loss,k_increment,k_decrement,Y0,wall_time\n", 0) == 0);
}

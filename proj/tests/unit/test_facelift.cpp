#include "doctest.h"

#include "gradcheck.hpp"

#include "cbsde/errors.hpp"
#include "cbsde/facelift.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>

using namespace cbsde;
using namespace cbsde::testing;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

Box unit_box(int d) { return Box::cube(0.0, 2.0, d); }

// Largest forward-difference slope along any axis of a lattice function. Both ball
// shapes bound every axis slope by the radius.
double max_lattice_slope(const GridOracle& g, const VectorXd& v) {
    const int d = g.dim();
    double worst = 0.0;
    std::vector<Eigen::Index> stride(d, 1);
    for (int a = 1; a < d; ++a) stride[a] = stride[a - 1] * g.counts()[a - 1];
    for (Eigen::Index flat = 0; flat < v.size(); ++flat) {
        Eigen::Index rest = flat;
        VectorXd slope = VectorXd::Zero(d);
        bool interior = true;
        for (int a = 0; a < d; ++a) {
            const Eigen::Index idx = rest % g.counts()[a];
            rest /= g.counts()[a];
            if (idx + 1 >= g.counts()[a]) {
                interior = false;
                break;
            }
            slope[a] = (v[flat + stride[a]] - v[flat]) / g.h();
        }
        if (!interior) continue;
        worst = std::max(worst, slope.cwiseAbs().maxCoeff());
    }
    return worst;
}

} // namespace

TEST_CASE("box") {
    const Box b = Box::cube(0.6, 1.4, 2);
    CHECK(b.dim() == 2);
    CHECK(b.contains(VectorXd::Ones(2)));
    CHECK_FALSE(b.contains(VectorXd::Constant(2, 1.5)));
    Rng rng(1);
    const MatrixXd s = b.sample(500, rng);
    for (Eigen::Index j = 0; j < s.cols(); ++j) CHECK(b.contains(s.col(j)));
    Box bad{VectorXd::Ones(1), VectorXd::Zero(1)};
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("brute-force facelift examples") {
    const ConvexBall c(2.0, 1);
    const GridOracle g(make_case2(), unit_box(1), 1e-3, c.radius());
    CHECK(std::abs(brute_force_facelift(g, c, VectorXd::Constant(1, 0.9)) - 0.6) <= 3e-3);
    CHECK_THROWS_AS(brute_force_facelift(g, c, VectorXd::Constant(1, 2.5)), DomainError);

    // Radius at or above the Lipschitz bound leaves φ unchanged.
    const ConvexBall wide(5.0, 1);
    const GridOracle gw(make_case2(), unit_box(1), 1e-3, wide.radius());
    for (double x : {0.3, 0.85, 1.0, 1.7}) {
        CHECK(brute_force_facelift(gw, wide, VectorXd::Constant(1, x)) == doctest::Approx(payoff_case2(x)).epsilon(1e-9));
    }

    const GridOracle gc(Payoff::constant(0.4, 2), unit_box(2), 0.05, 1.0);
    CHECK(brute_force_facelift(gc, ConvexBall(1.0, 2), VectorXd::Constant(2, 0.7)) == doctest::Approx(0.4));
}

TEST_CASE("oracle lattice covers the margin") {
    const GridOracle g(make_case2(), Box::cube(0.6, 1.4, 1), 1e-2, 2.0);
    // max φ − min φ on the box is 1.0, so the margin is 0.5.
    CHECK(g.origin()[0] <= 0.6 - 0.5 + 1e-12);
    CHECK(g.point(g.num_points() - 1)[0] >= 1.4 + 0.5 - 1e-12);
}

TEST_CASE("oracle properties in one dimension") {
    struct Case {
        Payoff p;
        double radius;
    };
    for (const Case& cs : {Case{make_case1(), 0.5}, Case{make_case2(), 2.0}, Case{make_case2(), 1.0}, Case{make_case3(), 1.5}}) {
        const ConvexBall c(cs.radius, 1);
        const double h = 2e-3;
        const GridOracle g(cs.p, unit_box(1), h, c.radius());
        const VectorXd f = tabulate_facelift(g, c);
        CHECK(((f - g.values()).minCoeff()) >= 0.0);
        const VectorXd ff = tabulate_facelift(g.with_values(f), c);
        CHECK((ff - f).cwiseAbs().maxCoeff() <= oracle_error_bound(cs.p.lipschitz(), c.radius(), h));
        CHECK(max_lattice_slope(g, f) <= c.radius() + 1e-9);
    }
}

TEST_CASE("tabulated facelift agrees with brute force") {
    Rng rng(2);
    for (BallNorm norm : {BallNorm::l2, BallNorm::linf}) {
        const ConvexBall c(1.0, 2, norm);
        const GridOracle g(make_case2_nd(2), Box::cube(0.6, 1.4, 2), 0.05, c.radius());
        const VectorXd f = tabulate_facelift(g, c);
        CHECK((f - g.values()).minCoeff() >= 0.0);
        std::uniform_int_distribution<Eigen::Index> pick(0, g.num_points() - 1);
        for (int i = 0; i < 40; ++i) {
            const Eigen::Index k = pick(rng);
            const VectorXd x = g.point(k);
            if (!g.box().contains(x)) continue;
            CHECK(f[k] == doctest::Approx(brute_force_facelift(g, c, x)).epsilon(1e-12));
        }
        CHECK(max_lattice_slope(g, f) <= c.radius() + 1e-9);
    }
}

TEST_CASE("box oracle reproduces the separable analytic facelift") {
    const int d = 2;
    const ConvexBall c(1.0, d, BallNorm::linf);
    const double h = 0.01;
    const GridOracle g(make_case2_nd(d), Box::cube(0.6, 1.4, d), h, c.radius());
    const VectorXd f = tabulate_facelift(g, c);
    double worst = 0.0;
    for (Eigen::Index k = 0; k < g.num_points(); ++k) {
        const VectorXd x = g.point(k);
        if (!g.box().contains(x)) continue;
        worst = std::max(worst, std::abs(f[k] - analytic_facelift_case2_nd(x, d * c.radius())));
    }
    CHECK(worst <= oracle_error_bound(4.0, c.radius(), h));
}

TEST_CASE("case-1 oracle matches the 0.2-peak closed form") {
    const ConvexBall c(0.5, 1);
    const GridOracle g(make_case1(), unit_box(1), 1e-3, c.radius());
    const PiecewiseLinear1D pw = facelift_piecewise(g, c);
    for (double x = 0.6; x <= 1.4; x += 0.01) {
        CHECK(std::abs(pw(x) - analytic_facelift_case1(x, 0.5)) <= oracle_error_bound(1.0, 0.5, 1e-3));
    }
}

TEST_CASE("facelift loss examples") {
    const double eps = 1.0 / 50.0;
    const ConvexBall c(2.0, 1);
    const int n = 5;
    NetOutputs out{MatrixXd::Zero(1, n), {MatrixXd::Constant(1, n, 1.0)}};
    const VectorXd phi = VectorXd::LinSpaced(n, 0.1, 0.5);
    auto run = [&](const NetOutputs& o, const VectorXd& prev, bool literal = false) {
        NetOutputs adj{MatrixXd::Zero(1, n), {MatrixXd::Zero(1, n)}};
        FaceliftLossParts parts;
        const double v = facelift_batch_loss(c, eps, phi, prev, literal, &parts)(o, adj);
        CHECK(v == doctest::Approx(parts.total(eps)));
        return v;
    };

    out.values = phi.transpose();
    CHECK(run(out, VectorXd()) == doctest::Approx(0.0));

    out.values = (phi.array() - 1.0).matrix().transpose();
    CHECK(run(out, VectorXd()) == doctest::Approx(1.0 + 1.0 / eps));

    out.values = phi.transpose();
    out.jacobian[0].setConstant(3.0);
    CHECK(run(out, VectorXd()) == doctest::Approx(1.0 / eps));

    out.jacobian[0].setConstant(1.0);
    const VectorXd prev = (phi.array() - 0.1).matrix();
    CHECK(run(out, prev) == doctest::Approx(0.1 / eps));
    CHECK(run(out, prev, true) == doctest::Approx(0.0));
}

TEST_CASE("facelift loss gradients match central differences") {
    Rng rng(3);
    for (int trial = 0; trial < 20; ++trial) {
        const int d = 1 + trial % 3;
        const ConvexBall c(0.8, d, trial % 2 ? BallNorm::l2 : BallNorm::linf);
        const Mlp net = random_net(rng, d, 1, trial % 2 ? Activation::tanh : Activation::elu);
        const MatrixXd x = random_points(rng, d, 8);
        const VectorXd fx = net.forward(x).row(0).transpose();
        std::normal_distribution<double> g(0.0, 0.5);
        VectorXd target(8), prev(8);
        for (int i = 0; i < 8; ++i) {
            target[i] = fx[i] + g(rng);
            prev[i] = fx[i] + g(rng);
        }
        CHECK(facelift_loss_gradcheck(net, c, x, target, prev, 0.05).rel_err <= 1e-4);
    }
}

TEST_CASE("facelift error examples") {
    Rng rng(4);
    const BatchFn ref = batch_fn(make_case2());
    const Box box = Box::cube(0.6, 1.4, 1);
    CHECK(facelift_error(ref, ref, box, 1000, rng).mse == 0.0);
    const BatchFn shifted = [&](const MatrixXd& x) -> VectorXd { return (ref(x).array() + 0.3).matrix(); };
    const ErrorEstimate e = facelift_error(shifted, ref, box, 1000, rng);
    CHECK(e.mse == doctest::Approx(0.09));
    CHECK(e.stderr_ == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("iterative facelift on a feasible target returns it") {
    FaceliftTrainSpec spec;
    spec.rounds = 2;
    spec.net = {20, 1, Activation::relu};
    spec.train.max_iterations = 1500;
    spec.train.batch_size = 256;
    spec.train.eval_batch = 2000;
    spec.train.eval_every = 100;
    spec.train.learning_rate = 3e-3;
    const PiecewiseLinear1D lin({1.0}, {0.5, 0.5}, 0.2);
    const Payoff p = Payoff::piecewise_linear(lin);
    const FaceliftResult res = iterative_facelift(p, ConvexBall(2.0, 1), spec, 11, batch_fn(p));
    REQUIRE(!res.rounds.empty());
    CHECK(res.rounds.front().to_target.mse <= 1e-3);
    CHECK(res.rounds.front().to_reference.mse == doctest::Approx(res.rounds.front().to_target.mse));
    CHECK(std::isnan(res.rounds.front().monotone_fraction));
    CHECK(res.accepted_round < static_cast<int>(res.rounds.size()));

    FaceliftProblem problem;
    problem.dim = 1;
    problem.target = batch_fn(res.net);
    problem.sampler = box_sampler(spec.sampling_box);
    problem.initial = res.net;
    problem.skip_if_feasible = true;
    const ConvexBall c(2.0, 1);
    const FaceliftResult skipped = iterative_facelift(problem, c, spec, 12);
    CHECK(skipped.rounds.front().skipped);
    CHECK(skipped.net == res.net);
}

TEST_CASE("iterative facelift is deterministic and lifts case 2") {
    FaceliftTrainSpec spec;
    spec.rounds = 2;
    spec.net = {30, 2, Activation::relu};
    spec.train.max_iterations = 2000;
    spec.train.batch_size = 500;
    spec.train.eval_batch = 4000;
    spec.train.eval_every = 100;
    const ConvexBall c(2.0, 1);
    const BatchFn analytic = batch_fn(analytic_facelift_case2_for(c));
    const FaceliftResult a = iterative_facelift(make_case2(), c, spec, 5, analytic);
    const FaceliftResult b = iterative_facelift(make_case2(), c, spec, 5, analytic);
    CHECK(a.net == b.net);
    const FaceliftRound& last = a.rounds[static_cast<std::size_t>(a.accepted_round)];
    CHECK(last.to_reference.mse <= 1e-3);

    // The brute-force oracle and the closed form rate the trained net alike.
    const GridOracle g(make_case2(), Box::cube(0.6, 1.4, 1), 1e-3, c.radius());
    const PiecewiseLinear1D ora = facelift_piecewise(g, c);
    const BatchFn oracle = [&ora](const MatrixXd& x) -> VectorXd {
        return x.row(0).transpose().unaryExpr([&ora](double v) { return ora(v); });
    };
    Rng r1(9), r2(9);
    const double e_oracle = facelift_error(batch_fn(a.net), oracle, spec.sampling_box, 20000, r1).mse;
    const double e_analytic = facelift_error(batch_fn(a.net), analytic, spec.sampling_box, 20000, r2).mse;
    CHECK(e_oracle <= 2.0 * e_analytic);
    CHECK(e_analytic <= 2.0 * e_oracle);
}

TEST_CASE("facelift spec validation") {
    FaceliftTrainSpec spec;
    CHECK_NOTHROW(spec.validate());
    spec.eps_pen = 0.0;
    CHECK_THROWS_AS(spec.validate(), ConfigError);
    spec = {};
    spec.rounds = 0;
    CHECK_THROWS_AS(spec.validate(), ConfigError);
}

TEST_CASE("curve and trace CSV") {
    const auto dir = std::filesystem::temp_directory_path() / "cbsde_unit_csv";
    std::filesystem::create_directories(dir);
    const std::string path = (dir / "curve.csv").string();
    write_curve_csv(path, {0.9, 1.0}, {{"phi", batch_fn(make_case2())}});
    std::ifstream in(path);
    std::string header, row;
    std::getline(in, header);
    std::getline(in, row);
    CHECK(header == "x,phi");
    CHECK(row.rfind("0.9,", 0) == 0);

    FaceliftRound r;
    r.to_reference = {0.5, 0.1};
    const std::string tp = (dir / "trace.csv").string();
    write_error_trace_csv(tp, {r});
    std::ifstream tin(tp);
    std::getline(tin, header);
    CHECK(header.rfind("k,mse,stderr", 0) == 0);
    std::filesystem::remove_all(dir);
}

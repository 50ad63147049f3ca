#include "doctest.h"

#include "cbsde/constraint.hpp"
#include "cbsde/errors.hpp"

#include <cmath>
#include <limits>
#include <random>

using namespace cbsde;
using Eigen::VectorXd;

namespace {

VectorXd vec(std::initializer_list<double> v) {
    VectorXd out(static_cast<Eigen::Index>(v.size()));
    Eigen::Index i = 0;
    for (double x : v) out[i++] = x;
    return out;
}

VectorXd random_vec(std::mt19937_64& g, int d, double scale) {
    std::normal_distribution<double> n(0.0, scale);
    VectorXd v(d);
    for (int i = 0; i < d; ++i) v[i] = n(g);
    return v;
}

// Exact L1 distance from g to the Euclidean disc of radius r, by dense search over the disc.
double l1_distance_to_disc(const VectorXd& g, double r, int n) {
    double best = std::numeric_limits<double>::infinity();
    for (int i = 0; i <= n; ++i) {
        for (int j = 0; j <= n; ++j) {
            const double x = -r + 2.0 * r * i / n;
            const double y = -r + 2.0 * r * j / n;
            if (x * x + y * y > r * r) continue;
            best = std::min(best, std::abs(g[0] - x) + std::abs(g[1] - y));
        }
    }
    return best;
}

} // namespace

TEST_CASE("ball construction") {
    CHECK_THROWS_AS(ConvexBall(0.0, 1), ConfigError);
    CHECK_THROWS_AS(ConvexBall(-1.0, 1), ConfigError);
    CHECK_THROWS_AS(ConvexBall(1.0, 0), ConfigError);
    const ConvexBall c(0.5, 3);
    CHECK(c.contains(VectorXd::Zero(3)));
    CHECK(ball_norm_from_string("linf") == BallNorm::linf);
    CHECK_THROWS_AS(ball_norm_from_string("l7"), ConfigError);
}

TEST_CASE("support function examples") {
    CHECK(support_function(ConvexBall(2.0, 2), vec({3, 4})) == doctest::Approx(10.0));
    CHECK(support_function(ConvexBall(0.75, 1), vec({0})) == 0.0);
    CHECK(support_function(ConvexBall(1.0, 4), vec({1, 1, 1, 1})) == doctest::Approx(2.0));
    CHECK(support_function(ConvexBall(1.0, 2, BallNorm::linf), vec({3, -4})) == doctest::Approx(7.0));
    CHECK_THROWS_AS(support_function(ConvexBall(1.0, 1), vec({NAN})), DomainError);
    CHECK_THROWS_AS(support_function(ConvexBall(1.0, 2), vec({1})), ContractError);
}

TEST_CASE("h operator examples") {
    CHECK(h_operator(ConvexBall(2.0, 2), vec({0, 0})) == doctest::Approx(2.0));
    CHECK(h_operator(ConvexBall(1.0, 2), vec({3, 4})) == doctest::Approx(-4.0));
    CHECK(h_operator(ConvexBall(0.5, 1), vec({0.5})) == doctest::Approx(0.0));
    CHECK_THROWS_AS(h_operator(ConvexBall(1.0, 1), vec({INFINITY})), DomainError);
}

TEST_CASE("h operator of the box matches a sampled infimum over the unit sphere") {
    const ConvexBall c(1.0, 2, BallNorm::linf);
    std::mt19937_64 g(3);
    for (int trial = 0; trial < 20; ++trial) {
        const VectorXd p = random_vec(g, 2, 1.5);
        double inf = std::numeric_limits<double>::infinity();
        for (int k = 0; k < 20000; ++k) {
            const double a = 2.0 * M_PI * k / 20000.0;
            const VectorXd y = vec({std::cos(a), std::sin(a)});
            inf = std::min(inf, support_function(c, y) - y.dot(p));
        }
        CHECK(h_operator(c, p) == doctest::Approx(inf).epsilon(1e-6));
    }
}

TEST_CASE("projection examples") {
    CHECK(project(ConvexBall(5.0, 2), vec({3, 4})).isApprox(vec({3, 4})));
    CHECK(project(ConvexBall(1.0, 2), vec({3, 4})).isApprox(vec({0.6, 0.8})));
    CHECK(project(ConvexBall(2.0, 2), vec({0, 0})).norm() == 0.0);
}

TEST_CASE("gradient penalty examples") {
    CHECK(gradient_penalty(ConvexBall(2.0, 1), vec({3})) == doctest::Approx(1.0));
    CHECK(gradient_penalty(ConvexBall(5.0, 2), vec({3, 4})) == 0.0);
    const double gp = gradient_penalty(ConvexBall(1.0, 2), vec({3, 4}));
    CHECK(gp == doctest::Approx(5.6));
    // Bounded below by the exact L1 distance to the disc.
    CHECK(gp >= l1_distance_to_disc(vec({3, 4}), 1.0, 2000) - 1e-9);
}

TEST_CASE("gradient penalty subgradient matches finite differences away from kinks") {
    std::mt19937_64 g(11);
    for (BallNorm norm : {BallNorm::l2, BallNorm::linf}) {
        const ConvexBall c(0.7, 3, norm);
        for (int trial = 0; trial < 20; ++trial) {
            const VectorXd v = random_vec(g, 3, 1.0);
            const VectorXd sg = gradient_penalty_subgradient(c, v);
            for (int i = 0; i < 3; ++i) {
                VectorXd a = v, b = v;
                a[i] += 1e-6;
                b[i] -= 1e-6;
                const double fd = (gradient_penalty(c, a) - gradient_penalty(c, b)) / 2e-6;
                CHECK(sg[i] == doctest::Approx(fd).epsilon(1e-4));
            }
        }
    }
}

TEST_CASE("properties on random points") {
    std::mt19937_64 g(5);
    std::uniform_real_distribution<double> scale(0.0, 3.0);
    for (BallNorm norm : {BallNorm::l2, BallNorm::linf}) {
        for (int d : {1, 2, 4}) {
            const ConvexBall c(1.3, d, norm);
            for (int trial = 0; trial < 200; ++trial) {
                const VectorXd y = random_vec(g, d, 1.0);
                const double a = scale(g);
                CHECK(support_function(c, a * y) == doctest::Approx(a * support_function(c, y)).epsilon(1e-14));

                const VectorXd p = random_vec(g, d, 1.0);
                CHECK((h_operator(c, p) >= 0.0) == c.contains(p));

                const VectorXd pr = project(c, p);
                CHECK((gradient_penalty(c, p) == 0.0) == (pr == p));
                CHECK(project(c, pr).isApprox(pr));
                const VectorXd q = random_vec(g, d, 1.0);
                CHECK((project(c, p) - project(c, q)).norm() <= (p - q).norm() + 1e-12);
            }
        }
    }
}

TEST_CASE("grid construction") {
    const TimeGrids a = build_grids(1.0, 20, 1);
    REQUIRE(a.constraint_dates.size() == 21);
    for (int j = 0; j < 20; ++j) CHECK(a.constraint_dates[j + 1] - a.constraint_dates[j] == doctest::Approx(0.05));
    CHECK(a.constraint_dates.back() == 1.0);

    const TimeGrids b = build_grids(1.0, 1, 1);
    CHECK(b.flattened() == std::vector<double>{0.0, 1.0});

    const TimeGrids c = build_grids(2.0, 4, 2);
    CHECK(c.constraint_dates == std::vector<double>{0.0, 0.5, 1.0, 1.5, 2.0});
    const auto flat = c.flattened();
    REQUIRE(flat.size() == 9);
    for (std::size_t i = 0; i + 1 < flat.size(); ++i) CHECK(flat[i + 1] - flat[i] == doctest::Approx(0.25));
    CHECK(c.constraint_indices() == std::vector<int>{0, 2, 4, 6, 8});
    c.validate();

    CHECK_THROWS_AS(build_grids(0.0, 1, 1), ConfigError);
    CHECK_THROWS_AS(build_grids(1.0, 0, 1), ConfigError);
    CHECK_THROWS_AS(build_grids(1.0, 1, 0), ConfigError);
}

#include "cbsde/facelift.hpp"

#include "cbsde/errors.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace cbsde {

using Eigen::MatrixXd;
using Eigen::VectorXd;

Box Box::cube(double lo, double hi, int dim) {
    return {VectorXd::Constant(dim, lo), VectorXd::Constant(dim, hi)};
}

bool Box::contains(const Eigen::Ref<const VectorXd>& x) const {
    if (x.size() != lower.size()) return false;
    return (x.array() >= lower.array()).all() && (x.array() <= upper.array()).all();
}

void Box::validate() const {
    if (lower.size() < 1 || lower.size() != upper.size()) throw ConfigError("box: bounds must have the same positive size");
    if (!lower.allFinite() || !upper.allFinite()) throw ConfigError("box: bounds must be finite");
    if (!(lower.array() < upper.array()).all()) throw ConfigError("box: lower must be below upper on every axis");
}

MatrixXd Box::sample(int n, Rng& rng) const {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    MatrixXd x(dim(), n);
    for (int j = 0; j < n; ++j) {
        for (int i = 0; i < dim(); ++i) x(i, j) = lower[i] + (upper[i] - lower[i]) * u(rng);
    }
    return x;
}

BatchFn batch_fn(Payoff payoff) {
    return [payoff = std::move(payoff)](const MatrixXd& x) { return payoff.evaluate(x); };
}

BatchFn batch_fn(Mlp net, std::optional<double> clip) {
    if (net.output_dim() != 1) throw ConfigError("batch_fn: network must have one output");
    return [net = std::move(net), clip](const MatrixXd& x) -> VectorXd {
        VectorXd v = net.forward(x).row(0).transpose();
        if (clip) v = v.cwiseMax(-*clip).cwiseMin(*clip);
        return v;
    };
}

PointSampler box_sampler(Box box) {
    box.validate();
    return [box = std::move(box)](int n, Rng& rng) { return box.sample(n, rng); };
}

PointSampler pool_sampler(MatrixXd pool) {
    if (pool.cols() < 1) throw ConfigError("pool_sampler: empty pool");
    return [pool = std::move(pool)](int n, Rng& rng) {
        std::uniform_int_distribution<Eigen::Index> pick(0, pool.cols() - 1);
        MatrixXd x(pool.rows(), n);
        for (int j = 0; j < n; ++j) x.col(j) = pool.col(pick(rng));
        return x;
    };
}

// ---------------------------------------------------------------------------
// Grid oracle

GridOracle::GridOracle(const Payoff& payoff, Box box, double h, double radius) : box_(std::move(box)), h_(h) {
    box_.validate();
    if (!(h > 0.0)) throw ConfigError("grid oracle: h must be positive");
    if (!(radius > 0.0)) throw ConfigError("grid oracle: radius must be positive");
    if (payoff.dim() != box_.dim()) throw ContractError("grid oracle: payoff and box dimensions differ");
    const int d = box_.dim();

    // Range of φ on the box lattice sets the margin.
    std::vector<int> inner(d);
    for (int i = 0; i < d; ++i) inner[i] = static_cast<int>(std::floor((box_.upper[i] - box_.lower[i]) / h + 1e-9)) + 1;
    Eigen::Index n_inner = 1;
    for (int n : inner) n_inner *= n;
    double lo = std::numeric_limits<double>::infinity();
    double hi = -lo;
    VectorXd p(d);
    for (Eigen::Index flat = 0; flat < n_inner; ++flat) {
        Eigen::Index rem = flat;
        for (int i = 0; i < d; ++i) {
            p[i] = box_.lower[i] + static_cast<double>(rem % inner[i]) * h;
            rem /= inner[i];
        }
        const double v = payoff(p);
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    const int m = static_cast<int>(std::ceil((hi - lo) / radius / h));

    origin_ = box_.lower.array() - m * h;
    counts_.resize(d);
    Eigen::Index total = 1;
    for (int i = 0; i < d; ++i) {
        counts_[i] = inner[i] + 2 * m;
        total *= counts_[i];
    }
    values_.resize(total);
    for (Eigen::Index flat = 0; flat < total; ++flat) values_[flat] = payoff(point(flat));
}

GridOracle::GridOracle(Box box, VectorXd origin, double h, std::vector<int> counts, VectorXd values)
    : box_(std::move(box)), origin_(std::move(origin)), h_(h), counts_(std::move(counts)), values_(std::move(values)) {
    box_.validate();
    Eigen::Index total = 1;
    for (int n : counts_) total *= n;
    if (origin_.size() != box_.dim() || static_cast<int>(counts_.size()) != box_.dim() || total != values_.size()) {
        throw ContractError("grid oracle: inconsistent lattice description");
    }
}

VectorXd GridOracle::point(Eigen::Index flat) const {
    VectorXd p(dim());
    for (int i = 0; i < dim(); ++i) {
        p[i] = origin_[i] + static_cast<double>(flat % counts_[i]) * h_;
        flat /= counts_[i];
    }
    return p;
}

GridOracle GridOracle::with_values(VectorXd values) const {
    return GridOracle(box_, origin_, h_, counts_, std::move(values));
}

double brute_force_facelift(const GridOracle& oracle, const ConvexBall& c, const Eigen::Ref<const VectorXd>& x) {
    if (c.dim() != oracle.dim() || x.size() != oracle.dim()) throw ContractError("brute_force_facelift: dimension mismatch");
    if (!x.allFinite()) throw DomainError("brute_force_facelift: non-finite point");
    if (!oracle.box().contains(x)) throw DomainError("brute_force_facelift: point outside the oracle box");
    const auto& v = oracle.values();
    double best = -std::numeric_limits<double>::infinity();
    if (oracle.dim() == 1) {
        const double o = oracle.origin()[0];
        const double h = oracle.h();
        const double r = c.radius();
        for (Eigen::Index k = 0; k < v.size(); ++k) {
            best = std::max(best, v[k] - r * std::abs(o + static_cast<double>(k) * h - x[0]));
        }
        return best;
    }
    VectorXd y(oracle.dim());
    for (Eigen::Index k = 0; k < v.size(); ++k) {
        y = oracle.point(k) - x;
        best = std::max(best, v[k] - support_function(c, y));
    }
    return best;
}

VectorXd tabulate_facelift(const GridOracle& oracle, const ConvexBall& c) {
    if (c.dim() != oracle.dim()) throw ContractError("tabulate_facelift: dimension mismatch");
    VectorXd v = oracle.values();
    const double h = oracle.h();
    const double step = c.radius() * h;
    const auto& counts = oracle.counts();
    if (oracle.dim() == 1 || c.norm() == BallNorm::linf) {
        // δ_C is separable (r‖y‖₁), so the discrete sup factorizes into 1D sweeps per axis.
        Eigen::Index stride = 1;
        for (int axis = 0; axis < oracle.dim(); ++axis) {
            const int n = counts[axis];
            const Eigen::Index block = stride * n;
            for (Eigen::Index base = 0; base < v.size(); base += block) {
                for (Eigen::Index off = 0; off < stride; ++off) {
                    const Eigen::Index s = base + off;
                    for (int k = 1; k < n; ++k) {
                        v[s + k * stride] = std::max(v[s + k * stride], v[s + (k - 1) * stride] - step);
                    }
                    for (int k = n - 2; k >= 0; --k) {
                        v[s + k * stride] = std::max(v[s + k * stride], v[s + (k + 1) * stride] - step);
                    }
                }
            }
            stride = block;
        }
        return v;
    }
    const auto& phi = oracle.values();
    MatrixXd pts(oracle.dim(), phi.size());
    for (Eigen::Index k = 0; k < phi.size(); ++k) pts.col(k) = oracle.point(k);
    for (Eigen::Index i = 0; i < phi.size(); ++i) {
        double best = -std::numeric_limits<double>::infinity();
        for (Eigen::Index k = 0; k < phi.size(); ++k) {
            best = std::max(best, phi[k] - c.radius() * (pts.col(k) - pts.col(i)).norm());
        }
        v[i] = best;
    }
    return v;
}

double oracle_error_bound(double lipschitz, double radius, double h) {
    return (lipschitz + radius) * h;
}

PiecewiseLinear1D facelift_piecewise(const GridOracle& oracle, const ConvexBall& c) {
    if (oracle.dim() != 1) throw ContractError("facelift_piecewise: one-dimensional oracle required");
    const VectorXd v = tabulate_facelift(oracle, c);
    std::vector<double> xs(v.size());
    std::vector<double> ys(v.data(), v.data() + v.size());
    for (Eigen::Index k = 0; k < v.size(); ++k) xs[k] = oracle.origin()[0] + static_cast<double>(k) * oracle.h();
    return PiecewiseLinear1D::from_samples(xs, ys, 1e-9);
}

// ---------------------------------------------------------------------------
// Penalized objective

void FaceliftTrainSpec::validate() const {
    if (!(eps_pen > 0.0)) throw ConfigError("eps_pen must be positive");
    if (rounds < 1) throw ConfigError("facelift rounds must be >= 1");
    sampling_box.validate();
    net.validate();
    train.validate();
}

namespace {

struct PenaltyTerms {
    VectorXd value;             // gp per sample
    std::vector<VectorXd> grad; // ∂gp/∂(D NN)_j per sample
};

// Gradient penalty and its subgradient for every column of a 1 × N Jacobian set.
PenaltyTerms penalty_terms(const ConvexBall& c, const std::vector<MatrixXd>& jac, bool with_grad) {
    const int d = c.dim();
    const Eigen::Index n = jac.front().cols();
    PenaltyTerms out;
    out.value = VectorXd::Zero(n);
    if (with_grad) out.grad.assign(d, VectorXd::Zero(n));
    const double r = c.radius();
    if (d == 1 || c.norm() == BallNorm::linf) {
        for (int j = 0; j < d; ++j) {
            const auto g = jac[j].row(0).transpose().array();
            out.value.array() += (g.abs() - r).max(0.0);
            if (with_grad) {
                out.grad[j] = ((g.abs() > r).cast<double>() * ((g > 0.0).cast<double>() - (g < 0.0).cast<double>())).matrix();
            }
        }
        return out;
    }
    VectorXd g(d);
    for (Eigen::Index s = 0; s < n; ++s) {
        for (int j = 0; j < d; ++j) g[j] = jac[j](0, s);
        out.value[s] = gradient_penalty(c, g);
        if (with_grad && out.value[s] > 0.0) {
            const VectorXd sg = gradient_penalty_subgradient(c, g);
            for (int j = 0; j < d; ++j) out.grad[j][s] = sg[j];
        }
    }
    return out;
}

} // namespace

BatchLoss facelift_batch_loss(const ConvexBall& c, double eps_pen, VectorXd target, VectorXd previous,
                              bool literal_previous, FaceliftLossParts* parts) {
    if (!(eps_pen > 0.0)) throw ConfigError("eps_pen must be positive");
    return [c, eps_pen, target = std::move(target), previous = std::move(previous), literal_previous,
            parts](const NetOutputs& out, NetOutputs& adj) {
        const Eigen::Index n = out.values.cols();
        if (out.values.rows() != 1 || target.size() != n || (previous.size() != 0 && previous.size() != n)) {
            throw ContractError("facelift loss: batch shape mismatch");
        }
        if (static_cast<int>(out.jacobian.size()) != c.dim()) throw ContractError("facelift loss: Jacobian required");
        const double inv_n = 1.0 / static_cast<double>(n);
        const auto nn = out.values.row(0).transpose().array();
        const auto diff = nn - target.array();

        FaceliftLossParts p;
        p.fit = diff.abs().mean();
        p.domination = (-diff).max(0.0).mean();
        Eigen::ArrayXd dv = ((diff > 0.0).cast<double>() - (diff < 0.0).cast<double>())
                            - (diff < 0.0).cast<double>() / eps_pen;
        if (previous.size() != 0) {
            if (literal_previous) {
                p.previous = (previous.array() - target.array()).max(0.0).mean();
            } else {
                const auto above = nn - previous.array();
                p.previous = above.max(0.0).mean();
                dv += (above > 0.0).cast<double>() / eps_pen;
            }
        }
        const PenaltyTerms gp = penalty_terms(c, out.jacobian, true);
        p.gradient_penalty = gp.value.mean();

        adj.values.row(0) = (dv * inv_n).matrix().transpose();
        for (int j = 0; j < c.dim(); ++j) adj.jacobian[j].row(0) = (gp.grad[j] * (inv_n / eps_pen)).transpose();
        if (parts) *parts = p;
        return p.total(eps_pen);
    };
}

FaceliftLossParts facelift_loss(const Mlp& net, const ConvexBall& c, const MatrixXd& x, const VectorXd& target,
                                const VectorXd& previous, bool literal_previous) {
    if (net.input_dim() != c.dim()) throw ContractError("facelift_loss: dimension mismatch");
    const NetOutputs out = net.evaluate(x, true);
    const auto nn = out.values.row(0).transpose().array();
    const auto diff = nn - target.array();
    FaceliftLossParts p;
    p.fit = diff.abs().mean();
    p.domination = (-diff).max(0.0).mean();
    if (previous.size() != 0) {
        p.previous = literal_previous ? (previous.array() - target.array()).max(0.0).mean()
                                      : (nn - previous.array()).max(0.0).mean();
    }
    p.gradient_penalty = penalty_terms(c, out.jacobian, false).value.mean();
    return p;
}

ErrorEstimate squared_error(const VectorXd& a, const VectorXd& b) {
    if (a.size() != b.size() || a.size() == 0) throw ContractError("squared_error: size mismatch");
    const Eigen::ArrayXd e = (a - b).array().square();
    const double n = static_cast<double>(e.size());
    const double mean = e.mean();
    const double var = e.size() > 1 ? (e - mean).square().sum() / (n - 1.0) : 0.0;
    return {mean, std::sqrt(var / n)};
}

ErrorEstimate facelift_error(const BatchFn& f, const BatchFn& reference, const Box& box, int n_eval, Rng& rng) {
    if (n_eval < 1) throw ConfigError("facelift_error: n_eval must be positive");
    const MatrixXd x = box.sample(n_eval, rng);
    return squared_error(f(x), reference(x));
}

// ---------------------------------------------------------------------------
// Iterative facelift

namespace {

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
    Rng g = make_stream(seed, {a, b});
    return g();
}

} // namespace

FaceliftResult iterative_facelift(const FaceliftProblem& problem, const ConvexBall& c, const FaceliftTrainSpec& spec,
                                  std::uint64_t seed) {
    spec.validate();
    if (!problem.target || !problem.sampler) throw ConfigError("facelift problem needs a target and a sampler");
    if (problem.dim != c.dim()) throw ContractError("facelift: constraint and problem dimensions differ");

    Rng eval_rng = make_stream(seed, {stream::facelift, 0});
    const MatrixXd xe = problem.sampler(spec.train.eval_batch, eval_rng);
    const VectorXd te = problem.target(xe);
    const VectorXd re = problem.reference ? problem.reference(xe) : VectorXd();

    Mlp net;
    if (problem.initial) {
        net = *problem.initial;
    } else {
        Rng init = make_stream(seed, {stream::init});
        net = spec.net.build(problem.dim, 1, init);
        normalize_inputs_from(net, xe);
    }
    if (net.input_dim() != problem.dim || net.output_dim() != 1) throw ContractError("facelift: initial network has the wrong shape");

    FaceliftResult result;
    auto diagnose = [&](const Mlp& candidate, int round, const Mlp* prev) {
        FaceliftRound rec;
        rec.round = round;
        const NetOutputs out = candidate.evaluate(xe, true);
        const VectorXd nn = out.values.row(0).transpose();
        rec.to_target = squared_error(nn, te);
        if (re.size() != 0) rec.to_reference = squared_error(nn, re);
        const double fit = (nn - te).cwiseAbs().mean();
        const VectorXd gp = penalty_terms(c, out.jacobian, false).value;
        rec.infeasible_fraction = (gp.array() > 10.0 * spec.eps_pen * fit).cast<double>().mean();
        if (prev) {
            const VectorXd pv = prev->forward(xe).row(0).transpose();
            rec.monotone_fraction = (nn.array() <= pv.array() + problem.monotone_tolerance).cast<double>().mean();
        }
        return rec;
    };

    if (problem.skip_if_feasible && problem.initial) {
        const NetOutputs out = net.evaluate(xe, true);
        const VectorXd nn = out.values.row(0).transpose();
        const bool feasible = penalty_terms(c, out.jacobian, false).value.maxCoeff() == 0.0;
        if (feasible && nn == te) {
            FaceliftRound rec = diagnose(net, 0, nullptr);
            rec.skipped = true;
            result.net = net;
            result.rounds.push_back(rec);
            result.round_nets.push_back(net);
            return result;
        }
    }

    Mlp work = net;
    std::optional<Mlp> prev;
    long iteration_offset = 0;
    for (int k = 0; k < spec.rounds; ++k) {
        const VectorXd prev_e = prev ? VectorXd(prev->forward(xe).row(0).transpose()) : VectorXd();
        MinibatchLoss minibatch = [&](const VectorXd& params, int batch, Rng& rng, VectorXd& grad) {
            work.set_params(params);
            const MatrixXd x = problem.sampler(batch, rng);
            VectorXd t = problem.target(x);
            VectorXd pv = prev ? VectorXd(prev->forward(x).row(0).transpose()) : VectorXd();
            const LossGradient lg = loss_and_param_gradients(
                work, x, true, facelift_batch_loss(c, spec.eps_pen, std::move(t), std::move(pv), spec.literal_previous_term));
            grad = lg.gradient;
            return lg.loss;
        };
        EvalLoss evaluate = [&](const VectorXd& params) {
            work.set_params(params);
            return facelift_loss(work, c, xe, te, prev_e, spec.literal_previous_term).total(spec.eps_pen);
        };
        TrainLoopConfig cfg = spec.train;
        cfg.seed = derive_seed(seed, stream::facelift, static_cast<std::uint64_t>(k) + 1);

        TrainResult tr;
        try {
            tr = train(net.params(), minibatch, evaluate, cfg);
        } catch (const TrainingError& e) {
            throw TrainingError("facelift round " + std::to_string(k) + ": " + e.what(), e.iteration(), e.param_norm());
        }
        Mlp candidate = net;
        candidate.set_params(tr.best_params);
        FaceliftRound rec = diagnose(candidate, k, prev ? &*prev : nullptr);
        rec.eval_loss = tr.best_eval_loss;
        rec.best_iteration = tr.best_iteration;
        for (const auto& t : tr.trace) result.trace.push_back({iteration_offset + t.iteration, t.eval_loss, t.learning_rate});
        iteration_offset += cfg.max_iterations;

        const bool degraded = k > 0 && rec.to_target.mse > result.rounds.back().to_target.mse;
        result.rounds.push_back(rec);
        result.round_nets.push_back(candidate);
        if (degraded) {
            result.stopped_early = true;
            break;
        }
        net = candidate;
        result.accepted_round = k;
        prev = candidate;
    }
    result.net = net;
    return result;
}

FaceliftResult iterative_facelift(const Payoff& payoff, const ConvexBall& c, const FaceliftTrainSpec& spec,
                                  std::uint64_t seed, BatchFn reference) {
    if (payoff.dim() != spec.sampling_box.dim()) throw ConfigError("facelift: payoff and sampling box dimensions differ");
    FaceliftProblem problem;
    problem.dim = payoff.dim();
    problem.target = batch_fn(payoff);
    problem.sampler = box_sampler(spec.sampling_box);
    problem.reference = std::move(reference);
    return iterative_facelift(problem, c, spec, seed);
}

// ---------------------------------------------------------------------------
// CSV

void write_curve_csv(const std::string& path, const std::vector<double>& xs,
                     const std::vector<std::pair<std::string, BatchFn>>& columns) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open " + path);
    MatrixXd x(1, static_cast<Eigen::Index>(xs.size()));
    for (std::size_t i = 0; i < xs.size(); ++i) x(0, static_cast<Eigen::Index>(i)) = xs[i];
    std::vector<VectorXd> cols;
    out << "x";
    for (const auto& [name, fn] : columns) {
        out << ',' << name;
        cols.push_back(fn(x));
    }
    out << '\n' << std::setprecision(10);
    for (std::size_t i = 0; i < xs.size(); ++i) {
        out << xs[i];
        for (const auto& col : cols) out << ',' << col[static_cast<Eigen::Index>(i)];
        out << '\n';
    }
}

void write_error_trace_csv(const std::string& path, const std::vector<FaceliftRound>& rounds) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open " + path);
    out << "k,mse,stderr,mse_target,infeasible_fraction,monotone_fraction,eval_loss\n" << std::setprecision(10);
    for (const auto& r : rounds) {
        out << r.round << ',' << r.to_reference.mse << ',' << r.to_reference.stderr_ << ',' << r.to_target.mse << ','
            << r.infeasible_fraction << ',' << r.monotone_fraction << ',' << r.eval_loss << '\n';
    }
}

} // namespace cbsde

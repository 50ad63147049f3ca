#include "cbsde/bsde.hpp"

#include "cbsde/errors.hpp"
#include "cbsde/rng.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <iomanip>
#include <ostream>

namespace cbsde {

using Eigen::MatrixXd;
using Eigen::VectorXd;

std::string to_string(DriverMode m) {
    return m == DriverMode::literal ? "literal" : "negative-part";
}

DriverMode driver_mode_from_string(const std::string& name) {
    if (name == "literal") return DriverMode::literal;
    if (name == "negative-part" || name == "negative_part") return DriverMode::negative_part;
    throw ConfigError("unknown driver mode '" + name + "'");
}

DriverSpec DriverSpec::from_model(const BlackScholesModel& m, DriverMode mode) {
    DriverSpec s;
    s.r = m.r;
    s.R = m.R;
    s.mu = m.mu;
    s.sigma = m.sigma;
    s.mode = mode;
    return s;
}

DriverValue driver_terms(const DriverSpec& spec, double y, double z_sum) {
    if (spec.zero) return {};
    const double theta = (spec.mu - spec.r) / spec.sigma;
    const double spread = spec.R - spec.r;
    const double a = y - z_sum / spec.sigma;
    DriverValue v;
    v.f = -spec.r * y - theta * z_sum;
    v.df_dy = -spec.r;
    v.df_dz = -theta;
    if (spec.mode == DriverMode::literal || a < 0.0) {
        v.f -= spread * a;
        v.df_dy -= spread;
        v.df_dz += spread / spec.sigma;
    }
    return v;
}

double driver_f(const DriverSpec& spec, double /*t*/, const Eigen::Ref<const VectorXd>& x, double y,
                const Eigen::Ref<const VectorXd>& z) {
    if (!x.allFinite() || (x.array() == 0.0).any()) throw DomainError("driver: x must be finite with nonzero components");
    if (z.size() != x.size()) throw ContractError("driver: z and x dimensions differ");
    return driver_terms(spec, y, z.sum()).f;
}

double one_step_target(const DriverSpec& spec, double t, const Eigen::Ref<const VectorXd>& x, double y,
                       const Eigen::Ref<const VectorXd>& z, double h, const Eigen::Ref<const VectorXd>& dB) {
    if (!(h > 0.0)) throw DomainError("one_step_target: h must be positive");
    if (dB.size() != z.size()) throw ContractError("one_step_target: z and dB dimensions differ");
    return y - driver_f(spec, t, x, y, z) * h + z.dot(dB);
}

void SchemeConfig::validate(const BlackScholesModel& model) const {
    model.validate();
    grids.validate();
    step_net.validate();
    step_train.validate();
    if (warm_iterations < 0) throw ConfigError("warm_iterations must be nonnegative");
    if (pool_paths < 1) throw ConfigError("pool_paths must be positive");
    if (clip && !(*clip > 0.0)) throw ConfigError("clip bound must be positive");
    if (constraint) {
        if (constraint->dim() != model.dim()) throw ConfigError("constraint and model dimensions differ");
        terminal_facelift.validate();
        step_facelift.validate();
    }
}

VectorXd StepNets::value(const MatrixXd& x) const {
    const Mlp& net = facelift_net ? *facelift_net : value_net;
    VectorXd v = net.forward(x).row(0).transpose();
    return v.cwiseMax(-clip).cwiseMin(clip);
}

KIncrement k_increment(const VectorXd& pre, const VectorXd& post) {
    if (pre.size() != post.size() || pre.size() == 0) throw ContractError("k_increment: size mismatch");
    const VectorXd diff = post - pre;
    KIncrement k;
    k.mean = diff.mean();
    k.mean_up = diff.cwiseMax(0.0).mean();
    k.mean_down = (-diff).cwiseMax(0.0).mean();
    std::vector<double> v(diff.data(), diff.data() + diff.size());
    auto quantile = [&v](double q) {
        const auto idx = static_cast<std::size_t>(q * static_cast<double>(v.size() - 1));
        std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(idx), v.end());
        return v[idx];
    };
    k.q50 = quantile(0.5);
    k.q90 = quantile(0.9);
    k.max = diff.maxCoeff();
    return k;
}

namespace {

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
    Rng g = make_stream(seed, {a, b});
    return g();
}

// Residual loss of the pair (u, z) on a batch, with adjoints for both networks when requested.
struct ResidualEval {
    double loss = 0.0;
    MatrixXd adj_u; // 1 × N
    MatrixXd adj_z; // d × N
};

ResidualEval residual(const DriverSpec& driver, double h, const MatrixXd& yv, const MatrixXd& zv, const MatrixXd& dB,
                      const VectorXd& target, bool with_adjoint) {
    const Eigen::Index n = yv.cols();
    ResidualEval out;
    if (with_adjoint) {
        out.adj_u.resize(1, n);
        out.adj_z.resize(zv.rows(), n);
    }
    const double inv_n = 1.0 / static_cast<double>(n);
    double sum = 0.0;
    for (Eigen::Index s = 0; s < n; ++s) {
        const double y = yv(0, s);
        const double zs = zv.col(s).sum();
        const DriverValue dv = driver_terms(driver, y, zs);
        const double F = y - dv.f * h + zv.col(s).dot(dB.col(s));
        const double r = target[s] - F;
        sum += r * r;
        if (with_adjoint) {
            const double gF = -2.0 * r * inv_n;
            out.adj_u(0, s) = gF * (1.0 - h * dv.df_dy);
            out.adj_z.col(s) = gF * (dB.col(s).array() - h * dv.df_dz).matrix();
        }
    }
    out.loss = sum * inv_n;
    return out;
}

} // namespace

StepTrainResult train_step(int step, double t, double h, const DriverSpec& driver, const StepData& pool,
                           const StepData& eval, const NetSpec& net, const TrainLoopConfig& cfg,
                           const std::optional<std::pair<Mlp, Mlp>>& init, std::uint64_t seed) {
    (void)t;
    if (!(h > 0.0)) throw DomainError("train_step: step size must be positive");
    const int d = static_cast<int>(pool.x.rows());
    if (pool.x.cols() != pool.target.size() || pool.dB.cols() != pool.x.cols() || pool.dB.rows() != d
        || eval.x.cols() != eval.target.size() || eval.dB.cols() != eval.x.cols()) {
        throw ContractError("train_step: inconsistent step data");
    }

    Mlp u, z;
    if (init) {
        u = init->first;
        z = init->second;
    } else {
        Rng rng = make_stream(seed, {stream::init});
        u = net.build(d, 1, rng);
        z = net.build(d, d, rng);
        normalize_inputs_from(u, eval.x);
        normalize_inputs_from(z, eval.x);
    }
    const Eigen::Index nu = u.num_params();
    VectorXd params(nu + z.num_params());
    params << u.params(), z.params();

    const Eigen::Index pool_size = pool.x.cols();
    MinibatchLoss minibatch = [&](const VectorXd& p, int b, Rng& rng, VectorXd& grad) {
        u.set_params(p.head(nu));
        z.set_params(p.tail(p.size() - nu));
        std::uniform_int_distribution<Eigen::Index> pick(0, pool_size - 1);
        MatrixXd x(d, b), dB(d, b);
        VectorXd target(b);
        for (int s = 0; s < b; ++s) {
            const Eigen::Index k = pick(rng);
            x.col(s) = pool.x.col(k);
            dB.col(s) = pool.dB.col(k);
            target[s] = pool.target[k];
        }
        const MatrixXd zv = z.forward(x);
        ResidualEval re;
        const LossGradient gu = loss_and_param_gradients(u, x, false, [&](const NetOutputs& out, NetOutputs& adj) {
            re = residual(driver, h, out.values, zv, dB, target, true);
            adj.values = re.adj_u;
            return re.loss;
        });
        const LossGradient gz = loss_and_param_gradients(z, x, false, [&](const NetOutputs&, NetOutputs& adj) {
            adj.values = re.adj_z;
            return re.loss;
        });
        grad.resize(p.size());
        grad << gu.gradient, gz.gradient;
        return gu.loss;
    };
    EvalLoss evaluate = [&](const VectorXd& p) {
        u.set_params(p.head(nu));
        z.set_params(p.tail(p.size() - nu));
        return residual(driver, h, u.forward(eval.x), z.forward(eval.x), eval.dB, eval.target, false).loss;
    };

    TrainLoopConfig c = cfg;
    c.seed = seed;
    TrainResult tr;
    try {
        tr = train(params, minibatch, evaluate, c);
    } catch (const TrainingError& e) {
        throw TrainingError("step " + std::to_string(step) + ": " + e.what(), e.iteration(), e.param_norm());
    }
    StepTrainResult out;
    out.value_net = u;
    out.z_net = z;
    out.value_net.set_params(tr.best_params.head(nu));
    out.z_net.set_params(tr.best_params.tail(tr.best_params.size() - nu));
    out.residual_loss = tr.best_eval_loss;
    out.best_iteration = tr.best_iteration;
    out.trace = std::move(tr.trace);
    return out;
}

FaceliftResult apply_constraint(int step, const Mlp& value_net, const ConvexBall& c, const FaceliftTrainSpec& spec,
                                double clip, const MatrixXd& pool_states, std::uint64_t seed) {
    FaceliftProblem problem;
    problem.dim = value_net.input_dim();
    problem.target = batch_fn(value_net, clip);
    problem.sampler = pool_sampler(pool_states);
    problem.initial = value_net;
    problem.skip_if_feasible = true;
    try {
        return iterative_facelift(problem, c, spec, seed);
    } catch (const TrainingError& e) {
        throw TrainingError("step " + std::to_string(step) + ": " + e.what(), e.iteration(), e.param_norm());
    }
}

SolveResult solve(const BlackScholesModel& model, const Payoff& payoff, const SchemeConfig& scheme, std::uint64_t seed) {
    using clock = std::chrono::steady_clock;
    const auto start = clock::now();
    scheme.validate(model);
    if (payoff.dim() != model.dim()) throw ConfigError("payoff and model dimensions differ");

    const std::vector<double> times = scheme.grids.flattened();
    const int n_steps = static_cast<int>(times.size()) - 1;
    const std::vector<int> cidx = scheme.grids.constraint_indices();
    auto is_constraint_date = [&cidx](int i) { return std::find(cidx.begin(), cidx.end(), i) != cidx.end(); };

    DriverSpec driver = DriverSpec::from_model(model, scheme.driver);
    driver.zero = scheme.zero_driver;

    const PathBatch pool = simulate_paths(model, times, scheme.pool_paths, seed, stream::paths);
    const PathBatch eval = simulate_paths(model, times, scheme.step_train.eval_batch, seed, stream::eval_paths);

    SolveResult result;
    result.seed = seed;

    // Terminal condition.
    const MatrixXd& xT_pool = pool.states[n_steps];
    const MatrixXd& xT_eval = eval.states[n_steps];
    BatchFn terminal;
    double clip = 0.0;
    // A payoff whose Lipschitz bound fits inside C is its own facelift.
    const bool payoff_feasible = scheme.constraint && payoff.lipschitz() <= scheme.constraint->radius();
    if (scheme.constraint && payoff_feasible) {
        StepDiagnostics diag;
        diag.step = n_steps;
        diag.time = times.back();
        diag.facelift_applied = true;
        diag.facelift_skipped = true;
        const VectorXd g = payoff.evaluate(xT_eval);
        diag.increment = k_increment(g, g);
        result.terminal = diag;
    }
    if (scheme.constraint && !payoff_feasible) {
        const auto t0 = clock::now();
        FaceliftProblem problem;
        problem.dim = model.dim();
        problem.target = batch_fn(payoff);
        problem.sampler = pool_sampler(xT_pool);
        FaceliftResult fr;
        try {
            fr = iterative_facelift(problem, *scheme.constraint, scheme.terminal_facelift,
                                    derive_seed(seed, stream::facelift, static_cast<std::uint64_t>(n_steps)));
        } catch (const TrainingError& e) {
            throw TrainingError(std::string("terminal facelift: ") + e.what(), e.iteration(), e.param_norm());
        }
        clip = scheme.clip ? *scheme.clip : 2.0 * fr.net.forward(xT_pool).cwiseAbs().maxCoeff();
        terminal = batch_fn(fr.net, clip);
        StepDiagnostics diag;
        diag.step = n_steps;
        diag.time = times.back();
        diag.facelift_applied = true;
        diag.increment = k_increment(payoff.evaluate(xT_eval), terminal(xT_eval));
        diag.facelift_rounds = fr.rounds;
        diag.wall_time = std::chrono::duration<double>(clock::now() - t0).count();
        result.terminal = diag;
        StepNets tn;
        tn.step = n_steps;
        tn.time = times.back();
        tn.value_net = fr.net;
        tn.clip = clip;
        tn.facelifted = true;
        result.steps.push_back(tn);
    } else {
        const VectorXd g = payoff.evaluate(xT_pool);
        clip = scheme.clip ? *scheme.clip : 2.0 * g.cwiseAbs().maxCoeff();
        if (!(clip > 0.0)) clip = 1.0;
        terminal = [payoff, clip](const MatrixXd& x) -> VectorXd { return payoff.evaluate(x).cwiseMax(-clip).cwiseMin(clip); };
    }
    result.clip = clip;

    VectorXd next_pool = terminal(xT_pool);
    VectorXd next_eval = terminal(xT_eval);
    std::optional<std::pair<Mlp, Mlp>> init;
    std::vector<StepNets> steps;
    std::vector<StepDiagnostics> diags;

    for (int i = n_steps - 1; i >= 0; --i) {
        const auto t0 = clock::now();
        const double h = times[i + 1] - times[i];
        StepData pd{pool.states[i], pool.increments[i], next_pool};
        StepData ed{eval.states[i], eval.increments[i], next_eval};
        TrainLoopConfig cfg = scheme.step_train;
        if (init && scheme.warm_iterations > 0) {
            cfg.max_iterations = scheme.warm_iterations;
            cfg.eval_every = static_cast<int>(std::min<long>(cfg.eval_every, cfg.max_iterations));
        }
        StepTrainResult sr = train_step(i, times[i], h, driver, pd, ed, scheme.step_net, cfg,
                                        scheme.warm_start ? init : std::nullopt,
                                        derive_seed(seed, stream::training, static_cast<std::uint64_t>(i)));

        StepNets sn;
        sn.step = i;
        sn.time = times[i];
        sn.value_net = sr.value_net;
        sn.z_net = sr.z_net;
        sn.clip = clip;

        StepDiagnostics diag;
        diag.step = i;
        diag.time = times[i];
        diag.residual_loss = sr.residual_loss;
        diag.best_iteration = sr.best_iteration;

        if (scheme.constraint && is_constraint_date(i) && (i > 0 || scheme.facelift_at_origin)) {
            const VectorXd pre = sn.value(eval.states[i]);
            FaceliftResult fr = apply_constraint(i, sr.value_net, *scheme.constraint, scheme.step_facelift, clip,
                                                 pool.states[i],
                                                 derive_seed(seed, stream::facelift, static_cast<std::uint64_t>(i)));
            diag.facelift_applied = true;
            diag.facelift_skipped = !fr.rounds.empty() && fr.rounds.front().skipped;
            diag.facelift_rounds = fr.rounds;
            if (!diag.facelift_skipped) {
                sn.facelift_net = fr.net;
                sn.facelifted = true;
            }
            diag.increment = k_increment(pre, sn.value(eval.states[i]));
        }

        next_pool = sn.value(pool.states[i]);
        next_eval = sn.value(eval.states[i]);
        init = std::make_pair(sr.value_net, sr.z_net);
        diag.wall_time = std::chrono::duration<double>(clock::now() - t0).count();
        steps.push_back(std::move(sn));
        diags.push_back(diag);
    }

    std::reverse(steps.begin(), steps.end());
    std::reverse(diags.begin(), diags.end());
    result.y0 = steps.front().value(model.x0)[0];
    // result.steps holds the terminal entry (if any) last.
    steps.insert(steps.end(), result.steps.begin(), result.steps.end());
    result.steps = std::move(steps);
    result.diagnostics = std::move(diags);
    result.wall_time = std::chrono::duration<double>(clock::now() - start).count();
    if (!scheme.checkpoint_dir.empty()) save_step_checkpoints(result, scheme.checkpoint_dir);
    return result;
}

std::uint64_t run_seed(std::uint64_t master, int run) {
    return derive_seed(master, stream::run, static_cast<std::uint64_t>(run));
}

MultiRunResult multi_run(const BlackScholesModel& model, const Payoff& payoff, const SchemeConfig& scheme,
                         std::uint64_t master_seed, int n_runs) {
    if (n_runs < 1) throw ConfigError("n_runs must be positive");
    MultiRunResult out;
    for (int i = 0; i < n_runs; ++i) {
        const std::uint64_t s = run_seed(master_seed, i);
        SchemeConfig sc = scheme;
        if (!sc.checkpoint_dir.empty()) sc.checkpoint_dir += "/run_" + std::to_string(i);
        out.runs.push_back(solve(model, payoff, sc, s));
        out.seeds.push_back(s);
        out.y0.push_back(out.runs.back().y0);
    }
    double sum = 0.0;
    for (double v : out.y0) sum += v;
    out.mean = sum / n_runs;
    if (n_runs > 1) {
        double ss = 0.0;
        for (double v : out.y0) ss += (v - out.mean) * (v - out.mean);
        out.std = std::sqrt(ss / (n_runs - 1));
    }
    return out;
}

void write_results_csv(const std::vector<SolveResult>& runs, std::ostream& out) {
    out << "run_id,k,time,residual_loss,k_increment,k_decrement,Y0,wall_time\n" << std::setprecision(10);
    for (std::size_t r = 0; r < runs.size(); ++r) {
        const auto& run = runs[r];
        auto row = [&](const StepDiagnostics& d) {
            out << r << ',' << d.step << ',' << d.time << ',' << d.residual_loss << ',' << d.increment.mean_up << ','
                << d.increment.mean_down << ',' << run.y0 << ',' << d.wall_time << '\n';
        };
        for (const auto& d : run.diagnostics) row(d);
        if (run.terminal) row(*run.terminal);
    }
}

void save_step_checkpoints(const SolveResult& result, const std::string& dir) {
    std::filesystem::create_directories(dir);
    for (const auto& s : result.steps) {
        const std::string base = dir + "/step_" + std::to_string(s.step);
        if (s.value_net.num_params() > 0) save_checkpoint(s.value_net, base + "_value.ckpt");
        if (s.z_net.num_params() > 0) save_checkpoint(s.z_net, base + "_z.ckpt");
        if (s.facelift_net) save_checkpoint(*s.facelift_net, base + "_facelift.ckpt");
    }
}

} // namespace cbsde

#include "cbsde/sde.hpp"

#include "cbsde/errors.hpp"
#include "cbsde/rng.hpp"

#include <cmath>
#include <ostream>
#include <random>

namespace cbsde {

void BlackScholesModel::validate() const {
    if (!(sigma > 0.0) || !std::isfinite(sigma)) throw ConfigError("sigma must be positive");
    if (x0.size() < 1) throw ConfigError("x0 must have at least one coordinate");
    if (!((x0.array() > 0.0).all()) || !x0.allFinite()) throw ConfigError("x0 must be positive");
    if (!std::isfinite(mu) || !std::isfinite(r) || !std::isfinite(R)) throw ConfigError("rates must be finite");
}

Eigen::VectorXd euler_step(const BlackScholesModel& model, double /*t*/, const Eigen::Ref<const Eigen::VectorXd>& x,
                           double dt, const Eigen::Ref<const Eigen::VectorXd>& dB) {
    if (!(dt > 0.0)) throw DomainError("euler_step: dt must be positive");
    if (x.size() != dB.size()) throw ContractError("euler_step: dimension mismatch");
    return (x.array() * (1.0 + model.mu * dt + model.sigma * dB.array())).matrix();
}

PathBatch simulate_paths(const BlackScholesModel& model, const TimeGrids& grids, int n_paths, std::uint64_t seed,
                         std::uint64_t stream_id) {
    return simulate_paths(model, grids.flattened(), n_paths, seed, stream_id);
}

PathBatch simulate_paths(const BlackScholesModel& model, const std::vector<double>& times, int n_paths,
                         std::uint64_t seed, std::uint64_t stream_id) {
    model.validate();
    if (n_paths < 1) throw ConfigError("simulate_paths: n_paths must be >= 1");
    if (times.size() < 2 || times.front() != 0.0) throw ConfigError("simulate_paths: grid must start at 0");
    const int d = model.dim();
    const int n_steps = static_cast<int>(times.size()) - 1;

    std::vector<double> sqrt_dt(n_steps);
    for (int i = 0; i < n_steps; ++i) {
        const double dt = times[i + 1] - times[i];
        if (!(dt > 0.0)) throw ConfigError("simulate_paths: times must be strictly increasing");
        sqrt_dt[i] = std::sqrt(dt);
    }

    PathBatch batch;
    batch.times = times;
    batch.seed_record = {seed, stream_id};
    batch.states.assign(times.size(), Eigen::MatrixXd(d, n_paths));
    batch.increments.assign(n_steps, Eigen::MatrixXd(d, n_paths));
    batch.states[0] = model.x0.replicate(1, n_paths);

    const int n_blocks = (n_paths + kPathsPerBlock - 1) / kPathsPerBlock;
    for (int b = 0; b < n_blocks; ++b) {
        Rng rng = make_stream(seed, {stream::paths, stream_id, static_cast<std::uint64_t>(b)});
        std::normal_distribution<double> normal;
        const int first = b * kPathsPerBlock;
        const int last = std::min(n_paths, first + kPathsPerBlock);
        for (int p = first; p < last; ++p) {
            for (int i = 0; i < n_steps; ++i) {
                const double dt = times[i + 1] - times[i];
                for (int c = 0; c < d; ++c) {
                    const double dB = sqrt_dt[i] * normal(rng);
                    batch.increments[i](c, p) = dB;
                    const double x = batch.states[i](c, p);
                    batch.states[i + 1](c, p) = x * (1.0 + model.mu * dt + model.sigma * dB);
                }
            }
        }
    }
    return batch;
}

Eigen::MatrixXd terminal_from_normals(const BlackScholesModel& model, double horizon, const Eigen::MatrixXd& normals) {
    if (!(horizon > 0.0)) throw DomainError("terminal sampling: horizon must be positive");
    if (normals.rows() != model.dim()) throw ContractError("terminal sampling: dimension mismatch");
    const double drift = (model.r - 0.5 * model.sigma * model.sigma) * horizon;
    const double vol = model.sigma * std::sqrt(horizon);
    Eigen::MatrixXd out = (drift + vol * normals.array()).exp().matrix();
    return model.x0.asDiagonal() * out;
}

Eigen::MatrixXd sample_terminal_risk_neutral(const BlackScholesModel& model, double horizon, int n_paths,
                                             std::uint64_t seed, std::uint64_t stream_id) {
    model.validate();
    if (n_paths < 1) throw ConfigError("sample_terminal_risk_neutral: n_paths must be >= 1");
    const int d = model.dim();
    Eigen::MatrixXd normals(d, n_paths);
    const int n_blocks = (n_paths + kPathsPerBlock - 1) / kPathsPerBlock;
    for (int b = 0; b < n_blocks; ++b) {
        Rng rng = make_stream(seed, {stream::terminal, stream_id, static_cast<std::uint64_t>(b)});
        std::normal_distribution<double> normal;
        const int first = b * kPathsPerBlock;
        const int last = std::min(n_paths, first + kPathsPerBlock);
        for (int p = first; p < last; ++p) {
            for (int c = 0; c < d; ++c) normals(c, p) = normal(rng);
        }
    }
    return terminal_from_normals(model, horizon, normals);
}

void write_paths_csv(const PathBatch& batch, std::ostream& out) {
    out << "path_id,time,coord,value\n";
    out.precision(17);
    for (int p = 0; p < batch.num_paths(); ++p) {
        for (int i = 0; i < batch.num_times(); ++i) {
            for (int c = 0; c < batch.dim(); ++c) {
                out << p << ',' << batch.times[i] << ',' << c << ',' << batch.states[i](c, p) << '\n';
            }
        }
    }
}

} // namespace cbsde

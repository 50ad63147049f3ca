#pragma once

#include "cbsde/bsde.hpp"
#include "cbsde/facelift.hpp"

#include "json.hpp"

#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace cbsde {

using Json = nlohmann::ordered_json;

enum class ExperimentKind { facelift, bsde_price, reference_price, oracle_dump };

std::string to_string(ExperimentKind k);

struct ExperimentInfo {
    std::string id;
    ExperimentKind kind;
    /// What the experiment emits.
    std::string produces;
};

const std::vector<ExperimentInfo>& experiment_catalogue();
std::optional<ExperimentInfo> find_experiment(const std::string& id);

/// Build identifier compiled into the library (short git hash or "unknown").
std::string build_id();

/// Fully populated configuration of a registered experiment. ConfigError for unknown ids.
Json default_config(const std::string& id, bool desk_scale);

struct Diagnostic {
    std::string path;
    std::string message;
};

/// Violations of a resolved configuration; empty when the configuration can run.
std::vector<Diagnostic> validate_config(const Json& config);

struct ResolvedConfig {
    Json config;
    std::vector<Diagnostic> diagnostics;
};

/// Defaults of the experiment named in `user` (or `fallback_id`) at the scale given by
/// user["desk_scale"] (default true), with `user` merged over them. Unknown keys and
/// every validation failure are reported. A manifest is accepted in place of a config.
/// ConfigError when the experiment id is unknown.
ResolvedConfig resolve_config(const Json& user, const std::string& fallback_id);

struct RunReport {
    Json manifest;
    std::vector<std::string> outputs; ///< file names relative to the output directory
};

/// Runs a resolved, valid configuration; writes CSVs and manifest.json into out_dir.
/// Progress goes to `log` tagged with run ids.
RunReport run_experiment(const Json& config, const std::string& out_dir, std::ostream& log);

/// Typed views of configuration blocks (used by the runner and the tests).
TrainLoopConfig train_config_from(const Json& j);
NetSpec net_spec_from(const Json& j);
FaceliftTrainSpec facelift_spec_from(const Json& j, int dim);
BlackScholesModel model_from(const Json& j, int dim, double R);

/// Radius of the constraint for a listed d̂ in dimension d (d̂/d for boxes when the listed
/// values are total slopes d·d̂).
double constraint_radius(const Json& constraint, double dhat, int dim);
ConvexBall constraint_from(const Json& constraint, double dhat, int dim);

} // namespace cbsde

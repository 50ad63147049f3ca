// Experiment runner: one subcommand per experiment kind plus `validate` and `list`.

#include "cbsde/errors.hpp"
#include "cbsde/experiment.hpp"

#include "CLI11.hpp"

#include <fstream>
#include <iostream>
#include <optional>
#include <string>

namespace {

struct Flags {
    std::string config_path;
    std::string experiment;
    std::optional<std::uint64_t> seed;
    std::optional<int> runs;
    std::optional<std::string> out_dir;
    std::optional<bool> desk_scale;
};

void add_flags(CLI::App* sub, Flags& f) {
    sub->add_option("--config", f.config_path, "JSON configuration or manifest file");
    sub->add_option("--experiment", f.experiment, "experiment id");
    sub->add_option("--seed", f.seed, "master seed");
    sub->add_option("--runs", f.runs, "number of independent runs");
    sub->add_option("--out-dir", f.out_dir, "output directory");
    sub->add_option("--desk-scale", f.desk_scale, "desk-scale preset (true/false)");
}

cbsde::Json load_user(const Flags& f) {
    cbsde::Json user = cbsde::Json::object();
    if (!f.config_path.empty()) {
        std::ifstream in(f.config_path);
        if (!in) throw cbsde::ConfigError("cannot read " + f.config_path);
        try {
            user = cbsde::Json::parse(in);
        } catch (const cbsde::Json::parse_error& e) {
            throw cbsde::ConfigError(f.config_path + ": " + e.what());
        }
        if (user.is_object() && user.contains("manifest_version")) user = user.at("config");
    }
    if (!user.is_object()) throw cbsde::ConfigError("configuration must be a JSON object");
    if (!f.experiment.empty()) user["experiment"] = f.experiment;
    if (f.seed) user["seed"] = *f.seed;
    if (f.runs) user["runs"] = *f.runs;
    if (f.out_dir) user["out_dir"] = *f.out_dir;
    if (f.desk_scale) user["desk_scale"] = *f.desk_scale;
    return user;
}

void print_diagnostics(const std::vector<cbsde::Diagnostic>& diags) {
    for (const auto& d : diags) std::cerr << "error: " << d.path << ": " << d.message << "\n";
}

int run(const std::string& kind, const std::string& fallback, const Flags& f) {
    const auto r = cbsde::resolve_config(load_user(f), fallback);
    if (!r.diagnostics.empty()) {
        print_diagnostics(r.diagnostics);
        return 2;
    }
    const auto info = cbsde::find_experiment(r.config.at("experiment").get<std::string>());
    if (cbsde::to_string(info->kind) != kind) {
        std::cerr << "error: experiment '" << info->id << "' is of kind " << cbsde::to_string(info->kind)
                  << ", not " << kind << "\n";
        return 2;
    }
    const std::string out_dir = r.config.at("out_dir").get<std::string>();
    const auto rep = cbsde::run_experiment(r.config, out_dir, std::cerr);
    std::cerr << "wrote " << rep.outputs.size() + 1 << " files to " << out_dir << "\n";
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Constrained deep-BSDE experiments"};
    app.require_subcommand(1);

    struct Sub {
        std::string name, fallback;
        Flags flags;
    };
    std::vector<Sub> subs = {{"facelift", "facelift-case2", {}},
                             {"bsde-price", "bsde-price", {}},
                             {"reference-price", "reference-price", {}},
                             {"oracle-dump", "oracle-dump", {}}};
    std::vector<CLI::App*> apps;
    for (auto& s : subs) {
        auto* a = app.add_subcommand(s.name, "run a " + s.name + " experiment (default " + s.fallback + ")");
        add_flags(a, s.flags);
        apps.push_back(a);
    }
    Flags vflags;
    auto* validate = app.add_subcommand("validate", "print the resolved configuration and its diagnostics");
    add_flags(validate, vflags);
    auto* list = app.add_subcommand("list", "list registered experiments");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (list->parsed()) {
            for (const auto& e : cbsde::experiment_catalogue())
                std::cout << e.id << "\t" << cbsde::to_string(e.kind) << "\t" << e.produces << "\n";
            return 0;
        }
        if (validate->parsed()) {
            const auto r = cbsde::resolve_config(load_user(vflags), "facelift-case2");
            std::cout << r.config.dump(2) << "\n";
            print_diagnostics(r.diagnostics);
            return r.diagnostics.empty() ? 0 : 2;
        }
        for (std::size_t i = 0; i < subs.size(); ++i)
            if (apps[i]->parsed()) return run(subs[i].name, subs[i].fallback, subs[i].flags);
    } catch (const cbsde::ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}

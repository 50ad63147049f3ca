#include "cbsde/experiment.hpp"

#include "cbsde/errors.hpp"
#include "cbsde/reference.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <ostream>
#include <sstream>

#ifndef CBSDE_BUILD_ID
#define CBSDE_BUILD_ID "unknown"
#endif

namespace cbsde {

using Eigen::MatrixXd;
using Eigen::VectorXd;
namespace fs = std::filesystem;

namespace {

constexpr int kManifestVersion = 1;

Json train_json(int batch, long iterations, int eval_every, int eval_batch, double lr, LrSchedule schedule) {
    TrainLoopConfig d;
    return Json{{"batch_size", batch},
                {"max_iterations", iterations},
                {"eval_every", eval_every},
                {"eval_batch", eval_batch},
                {"learning_rate", lr},
                {"schedule", to_string(schedule)},
                {"plateau_window", d.plateau_window},
                {"plateau_factor", d.plateau_factor},
                {"plateau_min_improvement", d.plateau_min_improvement},
                {"min_lr_fraction", d.min_lr_fraction}};
}

Json net_json(int width, int hidden, Activation a) {
    return Json{{"width", width}, {"hidden", hidden}, {"activation", to_string(a)}};
}

Json facelift_block(double eps, int rounds, const Json& net, const Json& train) {
    return Json{{"eps_pen", eps}, {"rounds", rounds}, {"net", net}, {"train", train}, {"literal_previous_term", false}};
}

Json model_json() {
    return Json{{"mu", 0.07}, {"sigma", 0.3}, {"r", 0.05}, {"T", 1.0}, {"x0", 1.0}};
}

Json constraint_json(const std::string& norm, std::vector<double> dhat, bool total) {
    return Json{{"enabled", true}, {"norm", norm}, {"dhat", dhat}, {"dhat_is_total", total}};
}

std::string num(double v) {
    std::ostringstream s;
    s << std::setprecision(6) << v;
    return s.str();
}

std::string exact(double v) {
    std::ostringstream s;
    s << std::setprecision(17) << v;
    return s.str();
}

} // namespace

std::string to_string(ExperimentKind k) {
    switch (k) {
    case ExperimentKind::facelift: return "facelift";
    case ExperimentKind::bsde_price: return "bsde-price";
    case ExperimentKind::reference_price: return "reference-price";
    case ExperimentKind::oracle_dump: return "oracle-dump";
    }
    return "?";
}

const std::vector<ExperimentInfo>& experiment_catalogue() {
    static const std::vector<ExperimentInfo> cat = {
        {"facelift-case1", ExperimentKind::facelift, "butterfly facelift curves, d-hat 0.75 and 0.5, three penalty scales"},
        {"facelift-case2", ExperimentKind::facelift, "case-2 facelift curves, d-hat 2 and 1, three penalty scales"},
        {"facelift-case3", ExperimentKind::facelift, "case-3 facelift curves and derivatives, two penalty scales"},
        {"facelift-case2nd", ExperimentKind::facelift, "error against the analytic facelift per iteration, several dimensions"},
        {"bsde-price", ExperimentKind::bsde_price, "Y0 mean and std over runs for d-hat 3, 2, 1 and R 0.05, 0.07, 0.09"},
        {"bsde-price-nd", ExperimentKind::bsde_price, "Y0 for the averaged case-2 payoff, d 2, 4, 6, penalty 1/50"},
        {"bsde-price-nd-eps250", ExperimentKind::bsde_price, "Y0 for the averaged case-2 payoff, d 2, 4, 6, penalty 1/250"},
        {"reference-price", ExperimentKind::reference_price, "risk-neutral prices of the facelifted payoffs"},
        {"oracle-dump", ExperimentKind::oracle_dump, "grid-oracle facelift values"},
    };
    return cat;
}

std::optional<ExperimentInfo> find_experiment(const std::string& id) {
    for (const auto& e : experiment_catalogue())
        if (e.id == id) return e;
    return std::nullopt;
}

std::string build_id() {
    return CBSDE_BUILD_ID;
}

Json default_config(const std::string& id, bool desk) {
    const auto info = find_experiment(id);
    if (!info) throw ConfigError("unknown experiment id '" + id + "'");

    Json c;
    c["experiment"] = id;
    c["desk_scale"] = desk;
    c["seed"] = 1;
    c["runs"] = 1;
    c["out_dir"] = "out";
    c["model"] = model_json();

    const Json fl_net = desk ? net_json(50, 2, Activation::relu) : net_json(200, 2, Activation::relu);
    const Json fl_train = desk ? train_json(1000, 20000, 100, 10000, 1e-3, LrSchedule::constant)
                               : train_json(1000, 100000, 100, 10000, 1e-3, LrSchedule::constant);

    switch (info->kind) {
    case ExperimentKind::facelift: {
        c["dims"] = {1};
        Json fl = facelift_block(0.02, 3, fl_net, fl_train);
        fl["box"] = {0.6, 1.4};
        fl["monotone_tolerance"] = 1e-3;
        Json ev{{"reference", "analytic"}, {"n_eval", 100000}, {"curve_points", 401}, {"oracle_h", 1e-3}};
        if (id == "facelift-case1") {
            c["payoff"] = "case1";
            c["constraint"] = constraint_json("l2", {0.75, 0.5}, false);
            fl["eps_pen"] = {1.0 / 200, 1.0 / 50, 1.0 / 10};
        } else if (id == "facelift-case2") {
            c["payoff"] = "case2";
            c["constraint"] = constraint_json("l2", {2.0, 1.0}, false);
            fl["eps_pen"] = {1.0 / 200, 1.0 / 50, 1.0 / 20};
        } else if (id == "facelift-case3") {
            c["payoff"] = "case3";
            c["constraint"] = constraint_json("l2", {1.0, 2.0}, false);
            fl["eps_pen"] = {1.0 / 100, 1.0 / 10};
            fl["box"] = {-2.0, 2.0};
            ev["reference"] = "oracle";
        } else {
            c["payoff"] = "case2nd";
            c["dims"] = desk ? Json{1, 2, 4} : Json{1, 2, 4, 10};
            c["constraint"] = constraint_json("linf", {2.0}, true);
            fl["eps_pen"] = {1.0 / 4000};
            fl["rounds"] = 10;
            if (desk) fl["train"]["max_iterations"] = 5000;
            ev["curve_points"] = 201;
        }
        c["facelift"] = fl;
        c["evaluation"] = ev;
        break;
    }
    case ExperimentKind::bsde_price: {
        c["runs"] = desk ? 3 : 5;
        c["payoff"] = id == "bsde-price" ? "case2" : "case2nd";
        c["dims"] = id == "bsde-price" ? Json{1} : Json{2, 4, 6};
        c["constraint"] = id == "bsde-price" ? constraint_json("l2", {3.0, 2.0, 1.0}, false)
                                             : constraint_json("linf", {3.0, 2.0, 1.0}, true);
        const double eps = id == "bsde-price-nd-eps250" ? 1.0 / 250 : 1.0 / 50;
        Json b;
        b["R"] = id == "bsde-price" ? Json{0.05, 0.07, 0.09} : Json{0.05};
        b["steps"] = 20;
        b["sub_steps"] = 1;
        b["driver"] = "literal";
        b["zero_driver"] = false;
        b["clip"] = nullptr;
        b["pool_paths"] = desk ? 100000 : 500000;
        b["warm_start"] = true;
        b["warm_iterations"] = desk ? 500 : 0;
        b["facelift_at_origin"] = false;
        b["step_net"] = desk ? net_json(50, 2, Activation::tanh) : net_json(200, 2, Activation::tanh);
        b["step_train"] = desk ? train_json(1000, 2000, 100, 10000, 1e-3, LrSchedule::constant)
                               : train_json(1000, 50000, 100, 10000, 1e-3, LrSchedule::plateau);
        Json tf_train = fl_train, sf_train = fl_train;
        if (desk) {
            tf_train["max_iterations"] = 3000;
            sf_train["max_iterations"] = 1000;
        }
        b["terminal_facelift"] = facelift_block(eps, 3, fl_net, tf_train);
        b["step_facelift"] = facelift_block(eps, 3, fl_net, sf_train);
        b["save_checkpoints"] = false;
        c["bsde"] = b;
        break;
    }
    case ExperimentKind::reference_price:
        c["payoff"] = "case2";
        c["dims"] = {1};
        c["constraint"] = constraint_json("l2", {3.0, 2.0, 1.0}, false);
        c["reference"] = Json{{"n_samples", desk ? 100000 : 10000000}, {"methods", {"mc", "closed_form"}},
                              {"include_raw", true}, {"oracle_h", 1e-3}};
        break;
    case ExperimentKind::oracle_dump:
        c["payoff"] = "case2";
        c["dims"] = {1};
        c["constraint"] = constraint_json("l2", {2.0}, false);
        c["oracle"] = Json{{"h", 1e-3}, {"box", {0.0, 2.0}}};
        break;
    }
    return c;
}

// ---------------------------------------------------------------------------
// Typed views

TrainLoopConfig train_config_from(const Json& j) {
    TrainLoopConfig c;
    c.batch_size = j.at("batch_size").get<int>();
    c.max_iterations = j.at("max_iterations").get<long>();
    c.eval_every = j.at("eval_every").get<int>();
    c.eval_batch = j.at("eval_batch").get<int>();
    c.learning_rate = j.at("learning_rate").get<double>();
    c.schedule = lr_schedule_from_string(j.at("schedule").get<std::string>());
    c.plateau_window = j.at("plateau_window").get<int>();
    c.plateau_factor = j.at("plateau_factor").get<double>();
    c.plateau_min_improvement = j.at("plateau_min_improvement").get<double>();
    c.min_lr_fraction = j.at("min_lr_fraction").get<double>();
    return c;
}

NetSpec net_spec_from(const Json& j) {
    NetSpec n;
    n.width = j.at("width").get<int>();
    n.hidden = j.at("hidden").get<int>();
    n.activation = activation_from_string(j.at("activation").get<std::string>());
    return n;
}

FaceliftTrainSpec facelift_spec_from(const Json& j, int dim) {
    FaceliftTrainSpec s;
    s.eps_pen = j.at("eps_pen").is_array() ? j.at("eps_pen").at(0).get<double>() : j.at("eps_pen").get<double>();
    s.rounds = j.at("rounds").get<int>();
    s.net = net_spec_from(j.at("net"));
    s.train = train_config_from(j.at("train"));
    s.literal_previous_term = j.at("literal_previous_term").get<bool>();
    if (j.contains("box")) {
        s.sampling_box = Box::cube(j["box"].at(0).get<double>(), j["box"].at(1).get<double>(), dim);
    } else {
        s.sampling_box = Box::cube(0.6, 1.4, dim);
    }
    return s;
}

BlackScholesModel model_from(const Json& j, int dim, double R) {
    BlackScholesModel m;
    m.mu = j.at("mu").get<double>();
    m.sigma = j.at("sigma").get<double>();
    m.r = j.at("r").get<double>();
    m.R = R;
    m.x0 = VectorXd::Constant(dim, j.at("x0").get<double>());
    return m;
}

double constraint_radius(const Json& c, double dhat, int dim) {
    return c.at("dhat_is_total").get<bool>() ? dhat / dim : dhat;
}

ConvexBall constraint_from(const Json& c, double dhat, int dim) {
    return ConvexBall(constraint_radius(c, dhat, dim), dim, ball_norm_from_string(c.at("norm").get<std::string>()));
}

// ---------------------------------------------------------------------------
// Validation

namespace {

struct Checker {
    std::vector<Diagnostic> out;

    void add(const std::string& path, const std::string& msg) { out.push_back({path, msg}); }

    const Json* at(const Json& j, const std::string& path, const std::string& key) {
        if (!j.is_object() || !j.contains(key)) {
            add(path + key, "missing");
            return nullptr;
        }
        return &j[key];
    }

    std::optional<double> number(const Json& j, const std::string& path, const std::string& key) {
        const Json* v = at(j, path, key);
        if (!v) return std::nullopt;
        if (!v->is_number()) {
            add(path + key, "must be a number");
            return std::nullopt;
        }
        return v->get<double>();
    }

    std::optional<long> integer(const Json& j, const std::string& path, const std::string& key) {
        const Json* v = at(j, path, key);
        if (!v) return std::nullopt;
        if (!v->is_number_integer()) {
            add(path + key, "must be an integer");
            return std::nullopt;
        }
        return v->get<long>();
    }

    std::optional<bool> boolean(const Json& j, const std::string& path, const std::string& key) {
        const Json* v = at(j, path, key);
        if (!v) return std::nullopt;
        if (!v->is_boolean()) {
            add(path + key, "must be true or false");
            return std::nullopt;
        }
        return v->get<bool>();
    }

    std::optional<std::string> string(const Json& j, const std::string& path, const std::string& key) {
        const Json* v = at(j, path, key);
        if (!v) return std::nullopt;
        if (!v->is_string()) {
            add(path + key, "must be a string");
            return std::nullopt;
        }
        return v->get<std::string>();
    }

    std::vector<double> numbers(const Json& j, const std::string& path, const std::string& key) {
        const Json* v = at(j, path, key);
        if (!v) return {};
        Json arr = v->is_array() ? *v : Json::array({*v});
        if (arr.empty()) {
            add(path + key, "must not be empty");
            return {};
        }
        std::vector<double> r;
        for (const auto& e : arr) {
            if (!e.is_number()) {
                add(path + key, "entries must be numbers");
                return {};
            }
            r.push_back(e.get<double>());
        }
        return r;
    }

    void positive(const Json& j, const std::string& path, const std::string& key) {
        if (auto v = number(j, path, key); v && !(*v > 0.0)) add(path + key, "must be positive");
    }

    void at_least(const Json& j, const std::string& path, const std::string& key, long lo) {
        if (auto v = integer(j, path, key); v && *v < lo) add(path + key, "must be at least " + std::to_string(lo));
    }

    void train(const Json& j, const std::string& path) {
        if (!j.is_object()) {
            add(path, "must be an object");
            return;
        }
        const std::string p = path + ".";
        at_least(j, p, "batch_size", 1);
        at_least(j, p, "max_iterations", 0);
        at_least(j, p, "eval_every", 1);
        at_least(j, p, "eval_batch", 1);
        positive(j, p, "learning_rate");
        if (auto s = string(j, p, "schedule")) {
            try {
                lr_schedule_from_string(*s);
            } catch (const ConfigError& e) {
                add(p + "schedule", e.what());
            }
        }
        at_least(j, p, "plateau_window", 1);
        if (auto f = number(j, p, "plateau_factor"); f && !(*f > 0.0 && *f < 1.0)) add(p + "plateau_factor", "must be in (0, 1)");
        if (auto f = number(j, p, "plateau_min_improvement"); f && *f < 0.0) add(p + "plateau_min_improvement", "must be nonnegative");
        if (auto f = number(j, p, "min_lr_fraction"); f && !(*f > 0.0 && *f <= 1.0)) add(p + "min_lr_fraction", "must be in (0, 1]");
        auto it = integer(j, p, "max_iterations");
        auto ev = integer(j, p, "eval_every");
        if (it && ev && *it > 0 && *ev > *it) add(p + "eval_every", "exceeds max_iterations");
    }

    void net(const Json& j, const std::string& path) {
        if (!j.is_object()) {
            add(path, "must be an object");
            return;
        }
        const std::string p = path + ".";
        at_least(j, p, "width", 1);
        at_least(j, p, "hidden", 1);
        if (auto s = string(j, p, "activation")) {
            try {
                activation_from_string(*s);
            } catch (const ConfigError& e) {
                add(p + "activation", e.what());
            }
        }
    }

    void facelift(const Json& j, const std::string& path, bool eps_list) {
        if (!j.is_object()) {
            add(path, "must be an object");
            return;
        }
        const std::string p = path + ".";
        if (eps_list) {
            for (double e : numbers(j, p, "eps_pen"))
                if (!(e > 0.0)) add(p + "eps_pen", "entries must be positive");
        } else {
            positive(j, p, "eps_pen");
        }
        at_least(j, p, "rounds", 1);
        boolean(j, p, "literal_previous_term");
        if (const Json* n = at(j, p, "net")) net(*n, p + "net");
        if (const Json* t = at(j, p, "train")) train(*t, p + "train");
    }
};

// Recursively merges `src` into `dst`; keys absent from `dst` are reported.
void merge_into(Json& dst, const Json& src, const std::string& path, std::vector<Diagnostic>& diags) {
    for (auto it = src.begin(); it != src.end(); ++it) {
        const std::string p = path.empty() ? it.key() : path + "." + it.key();
        if (!dst.contains(it.key())) {
            diags.push_back({p, "unknown key"});
            continue;
        }
        Json& d = dst[it.key()];
        if (d.is_object() && it.value().is_object()) {
            merge_into(d, it.value(), p, diags);
        } else {
            d = it.value();
        }
    }
}

bool analytic_available(const std::string& payoff) {
    return payoff == "case1" || payoff == "case2" || payoff == "case2nd";
}

} // namespace

std::vector<Diagnostic> validate_config(const Json& c) {
    Checker ck;
    const auto id = ck.string(c, "", "experiment");
    if (!id) return ck.out;
    const auto info = find_experiment(*id);
    if (!info) {
        ck.add("experiment", "unknown experiment id '" + *id + "'");
        return ck.out;
    }
    ck.boolean(c, "", "desk_scale");
    ck.at_least(c, "", "seed", 0);
    ck.at_least(c, "", "runs", 1);
    ck.string(c, "", "out_dir");

    if (const Json* m = ck.at(c, "", "model")) {
        ck.positive(*m, "model.", "sigma");
        ck.positive(*m, "model.", "T");
        ck.positive(*m, "model.", "x0");
        ck.number(*m, "model.", "mu");
        ck.number(*m, "model.", "r");
    }

    const auto payoff = ck.string(c, "", "payoff");
    std::vector<int> dims;
    if (const Json* d = ck.at(c, "", "dims")) {
        const Json arr = d->is_array() ? *d : Json::array({*d});
        for (const auto& e : arr) {
            if (!e.is_number_integer() || e.get<int>() < 1) {
                ck.add("dims", "entries must be positive integers");
                dims.clear();
                break;
            }
            dims.push_back(e.get<int>());
        }
        if (arr.empty()) ck.add("dims", "must not be empty");
    }
    if (payoff) {
        for (int d : dims) {
            try {
                make_named_payoff(*payoff, d);
            } catch (const ConfigError& e) {
                ck.add("payoff", e.what());
                break;
            }
        }
    }

    std::vector<double> dhats;
    bool constrained = true;
    std::string norm = "l2";
    bool total = false;
    if (const Json* cn = ck.at(c, "", "constraint")) {
        if (auto en = ck.boolean(*cn, "constraint.", "enabled")) constrained = *en;
        if (auto n = ck.string(*cn, "constraint.", "norm")) {
            try {
                ball_norm_from_string(*n);
                norm = *n;
            } catch (const ConfigError& e) {
                ck.add("constraint.norm", e.what());
            }
        }
        if (auto t = ck.boolean(*cn, "constraint.", "dhat_is_total")) total = *t;
        dhats = ck.numbers(*cn, "constraint.", "dhat");
        for (double v : dhats)
            if (!(v > 0.0)) ck.add("constraint.dhat", "entries must be positive");
    }
    // Coordinate slope seen by the analytic case-2 formulas.
    auto coord_slope = [&](double v, int d) { return norm == "linf" ? (total ? v : v * d) : v; };
    const bool wants_analytic_case2 = payoff && (*payoff == "case2" || *payoff == "case2nd");

    switch (info->kind) {
    case ExperimentKind::facelift: {
        if (const Json* f = ck.at(c, "", "facelift")) {
            ck.facelift(*f, "facelift", true);
            if (f->contains("box")) {
                const auto b = ck.numbers(*f, "facelift.", "box");
                if (b.size() != 2 || !(b[0] < b[1])) ck.add("facelift.box", "must be [lo, hi] with lo < hi");
            } else {
                ck.add("facelift.box", "missing");
            }
            ck.positive(*f, "facelift.", "monotone_tolerance");
        }
        if (const Json* e = ck.at(c, "", "evaluation")) {
            ck.at_least(*e, "evaluation.", "n_eval", 2);
            ck.at_least(*e, "evaluation.", "curve_points", 2);
            ck.positive(*e, "evaluation.", "oracle_h");
            if (auto ref = ck.string(*e, "evaluation.", "reference")) {
                if (*ref != "analytic" && *ref != "oracle") {
                    ck.add("evaluation.reference", "must be 'analytic' or 'oracle'");
                } else if (*ref == "analytic" && payoff) {
                    if (!analytic_available(*payoff)) ck.add("evaluation.reference", "no analytic facelift for " + *payoff);
                    for (double v : dhats)
                        for (int d : dims) {
                            const double s = coord_slope(v, d);
                            if (wants_analytic_case2 && (s > 4.0 || s < 1.0))
                                ck.add("constraint.dhat", "analytic case-2 facelift is valid for 1 <= d-hat <= 4 (got " + num(s) + ")");
                            if (*payoff == "case1" && s > 1.0)
                                ck.add("constraint.dhat", "analytic case-1 facelift is valid for d-hat <= 1 (got " + num(s) + ")");
                            if (d > 1 && norm == "l2")
                                ck.add("constraint.norm", "analytic reference in d > 1 needs the box constraint");
                        }
                } else if (*ref == "oracle") {
                    for (int d : dims)
                        if (d > 1) ck.add("evaluation.reference", "oracle reference is one-dimensional only");
                }
            }
        }
        if (!constrained) ck.add("constraint.enabled", "facelift experiments need a constraint");
        break;
    }
    case ExperimentKind::bsde_price: {
        if (const Json* b = ck.at(c, "", "bsde")) {
            const std::string p = "bsde.";
            for (double r : ck.numbers(*b, p, "R")) (void)r;
            ck.at_least(*b, p, "steps", 1);
            ck.at_least(*b, p, "sub_steps", 1);
            if (auto d = ck.string(*b, p, "driver")) {
                try {
                    driver_mode_from_string(*d);
                } catch (const ConfigError& e) {
                    ck.add(p + "driver", e.what());
                }
            }
            ck.boolean(*b, p, "zero_driver");
            if (const Json* cl = ck.at(*b, p, "clip"); cl && !cl->is_null() && !(cl->is_number() && cl->get<double>() > 0.0))
                ck.add(p + "clip", "must be null or positive");
            ck.at_least(*b, p, "pool_paths", 1);
            ck.boolean(*b, p, "warm_start");
            ck.at_least(*b, p, "warm_iterations", 0);
            ck.boolean(*b, p, "facelift_at_origin");
            ck.boolean(*b, p, "save_checkpoints");
            if (const Json* n = ck.at(*b, p, "step_net")) ck.net(*n, p + "step_net");
            if (const Json* t = ck.at(*b, p, "step_train")) ck.train(*t, p + "step_train");
            if (const Json* t = ck.at(*b, p, "terminal_facelift")) ck.facelift(*t, p + "terminal_facelift", false);
            if (const Json* t = ck.at(*b, p, "step_facelift")) ck.facelift(*t, p + "step_facelift", false);
        }
        break;
    }
    case ExperimentKind::reference_price: {
        if (const Json* r = ck.at(c, "", "reference")) {
            ck.at_least(*r, "reference.", "n_samples", 2);
            ck.boolean(*r, "reference.", "include_raw");
            ck.positive(*r, "reference.", "oracle_h");
            if (const Json* m = ck.at(*r, "reference.", "methods")) {
                if (!m->is_array() || m->empty()) ck.add("reference.methods", "must be a non-empty list");
                else
                    for (const auto& e : *m)
                        if (!e.is_string() || (e != "mc" && e != "closed_form"))
                            ck.add("reference.methods", "entries must be 'mc' or 'closed_form'");
            }
        }
        if (payoff && !analytic_available(*payoff) && payoff != std::optional<std::string>("case3"))
            ck.add("payoff", "no facelift available for pricing");
        for (int d : dims)
            if (d > 1 && payoff && *payoff != "case2nd") ck.add("dims", "only case2nd is priced in d > 1");
        if (payoff && *payoff == "case2nd")
            for (double v : dhats)
                for (int d : dims)
                    if (coord_slope(v, d) > 4.0 || coord_slope(v, d) < 1.0)
                        ck.add("constraint.dhat", "analytic case-2 facelift is valid for 1 <= d-hat <= 4");
        break;
    }
    case ExperimentKind::oracle_dump: {
        if (const Json* o = ck.at(c, "", "oracle")) {
            ck.positive(*o, "oracle.", "h");
            const auto b = ck.numbers(*o, "oracle.", "box");
            if (b.size() != 2 || !(b[0] < b[1])) ck.add("oracle.box", "must be [lo, hi] with lo < hi");
            const auto h = o->contains("h") && (*o)["h"].is_number() ? (*o)["h"].get<double>() : 0.0;
            if (h > 0.0 && b.size() == 2) {
                for (int d : dims) {
                    const double per_axis = (b[1] - b[0]) / h + 1.0;
                    const double pts = std::pow(per_axis, d);
                    if (pts > 2e7) ck.add("oracle.h", "lattice too large in dimension " + std::to_string(d));
                    if (d > 1 && norm == "l2" && pts > 4e4)
                        ck.add("oracle.h", "Euclidean-ball oracle in d > 1 is quadratic in the lattice size; coarsen h");
                }
            }
        }
        break;
    }
    }
    return ck.out;
}

ResolvedConfig resolve_config(const Json& user_in, const std::string& fallback_id) {
    Json user = user_in.is_null() ? Json::object() : user_in;
    if (!user.is_object()) throw ConfigError("configuration must be an object");
    if (user.contains("manifest_version")) user = user.at("config");
    const std::string id = user.value("experiment", fallback_id);
    bool desk = true;
    if (user.contains("desk_scale") && user["desk_scale"].is_boolean()) desk = user["desk_scale"].get<bool>();

    ResolvedConfig r;
    r.config = default_config(id, desk);
    merge_into(r.config, user, "", r.diagnostics);
    for (auto& d : validate_config(r.config)) r.diagnostics.push_back(std::move(d));
    return r;
}

// ---------------------------------------------------------------------------
// Runners

namespace {

std::vector<int> dims_of(const Json& c) {
    std::vector<int> out;
    const Json& d = c.at("dims");
    if (d.is_array()) {
        for (const auto& e : d) out.push_back(e.get<int>());
    } else {
        out.push_back(d.get<int>());
    }
    return out;
}

std::vector<double> list_of(const Json& j) {
    std::vector<double> out;
    if (j.is_array()) {
        for (const auto& e : j) out.push_back(e.get<double>());
    } else {
        out.push_back(j.get<double>());
    }
    return out;
}

double coord_slope_of(const Json& constraint, double dhat, int dim) {
    const ConvexBall c = constraint_from(constraint, dhat, dim);
    return c.norm() == BallNorm::linf ? c.radius() * dim : c.radius();
}

std::uint64_t seed_of(const Json& c) {
    return c.at("seed").get<std::uint64_t>();
}

class Outputs {
public:
    Outputs(std::string dir) : dir_(std::move(dir)) { fs::create_directories(dir_); }

    std::ofstream open(const std::string& name) {
        names_.push_back(name);
        std::ofstream f(path(name));
        if (!f) throw std::runtime_error("cannot write " + path(name));
        f << std::setprecision(17);
        return f;
    }

    std::string path(const std::string& name) const { return (fs::path(dir_) / name).string(); }
    void record(const std::string& name) { names_.push_back(name); }
    const std::vector<std::string>& names() const { return names_; }

private:
    std::string dir_;
    std::vector<std::string> names_;
};

// 1D facelift of a named payoff from the grid oracle on [lo, hi].
PiecewiseLinear1D oracle_facelift_1d(const Payoff& p, const ConvexBall& c, double lo, double hi, double h) {
    const GridOracle g(p, Box::cube(lo, hi, 1), h, c.radius());
    return facelift_piecewise(g, c);
}

BatchFn pw_batch(PiecewiseLinear1D pw) {
    return [pw = std::move(pw)](const MatrixXd& x) -> VectorXd {
        VectorXd out(x.cols());
        for (Eigen::Index i = 0; i < x.cols(); ++i) {
            double s = 0.0;
            for (Eigen::Index j = 0; j < x.rows(); ++j) s += pw(x(j, i));
            out[i] = s / static_cast<double>(x.rows());
        }
        return out;
    };
}

// Reference facelift for the facelift experiments.
BatchFn facelift_reference(const std::string& payoff, const std::string& mode, const ConvexBall& c, int dim,
                           double slope, double lo, double hi, double h) {
    if (mode == "analytic") {
        if (payoff == "case1") {
            return pw_batch(PiecewiseLinear1D::from_samples({0.0, 1.0 - 0.2 / slope, 1.0, 1.0 + 0.2 / slope, 2.0},
                                                            {0.0, 0.0, 0.2, 0.0, 0.0}));
        }
        (void)dim;
        return pw_batch(analytic_facelift_case2_piecewise(slope));
    }
    const Payoff p = make_named_payoff(payoff, 1);
    return pw_batch(oracle_facelift_1d(p, c, lo, hi, h));
}

void run_facelift(const Json& c, Outputs& out, std::ostream& log, Json& seeds) {
    const std::string payoff_name = c.at("payoff").get<std::string>();
    const Json& fl = c.at("facelift");
    const Json& ev = c.at("evaluation");
    const double lo = fl.at("box").at(0).get<double>(), hi = fl.at("box").at(1).get<double>();
    const std::string ref_mode = ev.at("reference").get<std::string>();
    const int n_eval = ev.at("n_eval").get<int>();
    const int n_curve = ev.at("curve_points").get<int>();
    const double oracle_h = ev.at("oracle_h").get<double>();
    const int runs = c.at("runs").get<int>();

    std::ofstream summary = out.open("results.csv");
    summary << "run_id,dim,dhat,radius,eps_pen,k,mse_reference,stderr,mse_target,infeasible_fraction,monotone_fraction,"
               "eval_loss,accepted,stopped_early\n";

    for (int run = 0; run < runs; ++run) {
        const std::uint64_t seed = run_seed(seed_of(c), run);
        seeds.push_back(seed);
        for (int dim : dims_of(c)) {
            const Payoff payoff = make_named_payoff(payoff_name, dim);
            for (double dhat : list_of(c.at("constraint").at("dhat"))) {
                const ConvexBall ball = constraint_from(c.at("constraint"), dhat, dim);
                const double slope = coord_slope_of(c.at("constraint"), dhat, dim);
                const BatchFn reference = facelift_reference(payoff_name, ref_mode, ball, dim, slope, lo, hi, oracle_h);
                std::optional<PiecewiseLinear1D> oracle;
                if (dim == 1) oracle = oracle_facelift_1d(make_named_payoff(payoff_name, 1), ball, lo, hi, oracle_h);

                for (double eps : list_of(fl.at("eps_pen"))) {
                    FaceliftTrainSpec spec = facelift_spec_from(fl, dim);
                    spec.eps_pen = eps;
                    std::ostringstream tag;
                    tag << "d" << dim << "_dhat" << num(dhat) << "_eps" << num(eps);
                    if (runs > 1) tag << "_run" << run;
                    log << "[run " << run << " " << tag.str() << "] facelift " << payoff_name << " radius "
                        << num(ball.radius()) << "\n";

                    FaceliftProblem problem;
                    problem.dim = dim;
                    problem.target = batch_fn(payoff);
                    problem.sampler = box_sampler(spec.sampling_box);
                    problem.reference = reference;
                    problem.monotone_tolerance = fl.at("monotone_tolerance").get<double>();
                    const auto t0 = std::chrono::steady_clock::now();
                    const FaceliftResult res = iterative_facelift(problem, ball, spec, seed);
                    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

                    // Error against the reference per round, on one common uniform sample.
                    std::vector<FaceliftRound> rounds = res.rounds;
                    for (std::size_t k = 0; k < rounds.size(); ++k) {
                        Rng er = make_stream(seed, {stream::facelift, 1000});
                        rounds[k].to_reference = facelift_error(batch_fn(res.round_nets[k]), reference,
                                                                spec.sampling_box, n_eval, er);
                        summary << run << ',' << dim << ',' << exact(dhat) << ',' << exact(ball.radius()) << ','
                                << exact(eps) << ',' << rounds[k].round << ',' << exact(rounds[k].to_reference.mse) << ','
                                << exact(rounds[k].to_reference.stderr_) << ',' << exact(rounds[k].to_target.mse) << ','
                                << exact(rounds[k].infeasible_fraction) << ',' << exact(rounds[k].monotone_fraction) << ','
                                << exact(rounds[k].eval_loss) << ',' << (static_cast<int>(k) == res.accepted_round ? 1 : 0)
                                << ',' << (res.stopped_early ? 1 : 0) << '\n';
                    }
                    const std::string trace_name = "error_trace_" + tag.str() + ".csv";
                    write_error_trace_csv(out.path(trace_name), rounds);
                    out.record(trace_name);

                    // Curves on the box (1D) or along the diagonal (nD).
                    const std::string curve_name = "curve_" + tag.str() + ".csv";
                    std::ofstream cv = out.open(curve_name);
                    cv << (dim == 1 ? "x" : "s") << ",phi,reference";
                    if (oracle) cv << ",oracle";
                    for (std::size_t k = 0; k < res.round_nets.size(); ++k) cv << ",NN_" << k;
                    for (std::size_t k = 0; k < res.round_nets.size(); ++k) cv << ",dNN_" << k;
                    cv << '\n';
                    MatrixXd xs(dim, n_curve);
                    for (int i = 0; i < n_curve; ++i) xs.col(i).setConstant(lo + (hi - lo) * i / (n_curve - 1));
                    const VectorXd phi = payoff.evaluate(xs), ref = reference(xs);
                    std::vector<VectorXd> vals, ders;
                    for (const Mlp& net : res.round_nets) {
                        vals.push_back(net.forward(xs).row(0).transpose());
                        // Directional derivative along (1, …, 1).
                        const auto jac = net.input_gradient(xs);
                        VectorXd dv = VectorXd::Zero(n_curve);
                        for (const auto& jj : jac) dv += jj.row(0).transpose();
                        ders.push_back(dv);
                    }
                    for (int i = 0; i < n_curve; ++i) {
                        cv << exact(xs(0, i)) << ',' << exact(phi[i]) << ',' << exact(ref[i]);
                        if (oracle) cv << ',' << exact((*oracle)(xs(0, i)));
                        for (const auto& v : vals) cv << ',' << exact(v[i]);
                        for (const auto& v : ders) cv << ',' << exact(v[i]);
                        cv << '\n';
                    }
                    log << "[run " << run << " " << tag.str() << "] accepted round " << res.accepted_round
                        << " mse_reference " << rounds[static_cast<std::size_t>(res.accepted_round)].to_reference.mse
                        << " (" << num(secs) << " s)\n";
                }
            }
        }
    }
}

SchemeConfig scheme_from(const Json& b, const std::optional<ConvexBall>& c, int dim) {
    SchemeConfig s;
    s.grids = build_grids(1.0, b.at("steps").get<int>(), b.at("sub_steps").get<int>());
    s.constraint = c;
    if (!b.at("clip").is_null()) s.clip = b.at("clip").get<double>();
    s.terminal_facelift = facelift_spec_from(b.at("terminal_facelift"), dim);
    s.step_facelift = facelift_spec_from(b.at("step_facelift"), dim);
    s.step_net = net_spec_from(b.at("step_net"));
    s.step_train = train_config_from(b.at("step_train"));
    s.warm_iterations = b.at("warm_iterations").get<long>();
    s.warm_start = b.at("warm_start").get<bool>();
    s.pool_paths = b.at("pool_paths").get<int>();
    s.driver = driver_mode_from_string(b.at("driver").get<std::string>());
    s.zero_driver = b.at("zero_driver").get<bool>();
    s.facelift_at_origin = b.at("facelift_at_origin").get<bool>();
    return s;
}

// Closed-form risk-neutral price of the (facelifted) payoff when one exists.
std::optional<double> closed_form_reference(const std::string& payoff, const BlackScholesModel& m, double T,
                                            std::optional<double> slope) {
    PiecewiseLinear1D pw = case2_piecewise();
    if (payoff == "case1") pw = case1_piecewise();
    else if (payoff != "case2" && payoff != "case2nd") return std::nullopt;
    if (slope) {
        if (payoff == "case1") return std::nullopt;
        if (*slope < 1.0) return std::nullopt;
        if (*slope > 4.0) return closed_form_price(m, pw, T); // φ is already 4-Lipschitz
        pw = analytic_facelift_case2_piecewise(*slope);
    }
    return closed_form_price(m, pw, T);
}

void run_bsde(const Json& c, Outputs& out, std::ostream& log, Json& seeds) {
    const Json& b = c.at("bsde");
    const std::string payoff_name = c.at("payoff").get<std::string>();
    const bool constrained = c.at("constraint").at("enabled").get<bool>();
    const int runs = c.at("runs").get<int>();
    const double T = c.at("model").at("T").get<double>();
    const std::uint64_t master = seed_of(c);
    for (int i = 0; i < runs; ++i) seeds.push_back(run_seed(master, i));

    std::ofstream table = out.open("table.csv");
    table << "config_id,dim,dhat,radius,R,n_runs,mean,std,reference\n";
    std::ofstream runs_csv = out.open("runs.csv");
    runs_csv << "config_id,run_id,seed,Y0,wall_time\n";
    std::ofstream results = out.open("results.csv");
    results << "config_id,run_id,k,time,residual_loss,k_increment,k_decrement,Y0,wall_time\n";
    std::ofstream incr = out.open("k_increments.csv");
    incr << "config_id,run_id,k,facelift_applied,facelift_skipped,mean_up,mean_down,mean,q50,q90,max\n";

    const std::vector<double> dhats = constrained ? list_of(c.at("constraint").at("dhat")) : std::vector<double>{0.0};
    for (int dim : dims_of(c)) {
        const Payoff payoff = make_named_payoff(payoff_name, dim);
        for (double dhat : dhats) {
            std::optional<ConvexBall> ball;
            if (constrained) ball = constraint_from(c.at("constraint"), dhat, dim);
            for (double R : list_of(b.at("R"))) {
                BlackScholesModel m = model_from(c.at("model"), dim, R);
                SchemeConfig s = scheme_from(b, ball, dim);
                s.grids = build_grids(T, b.at("steps").get<int>(), b.at("sub_steps").get<int>());
                std::ostringstream tag;
                tag << "d" << dim << "_dhat" << (constrained ? num(dhat) : std::string("none")) << "_R" << num(R);
                const std::string id = tag.str();

                std::vector<SolveResult> results_v;
                std::vector<double> y0;
                for (int i = 0; i < runs; ++i) {
                    const std::uint64_t seed = run_seed(master, i);
                    if (b.at("save_checkpoints").get<bool>()) {
                        s.checkpoint_dir = out.path("checkpoints_" + id + "_run" + std::to_string(i));
                    }
                    log << "[run " << i << " " << id << "] solving, seed " << seed << "\n";
                    SolveResult r = solve(m, payoff, s, seed);
                    log << "[run " << i << " " << id << "] Y0 " << r.y0 << " (" << num(r.wall_time) << " s)\n";
                    runs_csv << id << ',' << i << ',' << seed << ',' << exact(r.y0) << ',' << exact(r.wall_time) << '\n';
                    auto put_incr = [&](const StepDiagnostics& d) {
                        incr << id << ',' << i << ',' << d.step << ',' << (d.facelift_applied ? 1 : 0) << ','
                             << (d.facelift_skipped ? 1 : 0) << ',' << exact(d.increment.mean_up) << ','
                             << exact(d.increment.mean_down) << ',' << exact(d.increment.mean) << ','
                             << exact(d.increment.q50) << ',' << exact(d.increment.q90) << ',' << exact(d.increment.max)
                             << '\n';
                    };
                    for (const auto& d : r.diagnostics) put_incr(d);
                    if (r.terminal) put_incr(*r.terminal);
                    y0.push_back(r.y0);
                    results_v.push_back(std::move(r));
                }
                std::ostringstream rs;
                rs << std::setprecision(17);
                write_results_csv(results_v, rs);
                std::istringstream lines(rs.str());
                std::string line;
                std::getline(lines, line); // header
                while (std::getline(lines, line)) results << id << ',' << line << '\n';

                const double mean = std::accumulate(y0.begin(), y0.end(), 0.0) / static_cast<double>(y0.size());
                double var = 0.0;
                for (double v : y0) var += (v - mean) * (v - mean);
                const double sd = y0.size() > 1 ? std::sqrt(var / static_cast<double>(y0.size() - 1)) : std::nan("");
                std::optional<double> ref;
                if (R == m.r) {
                    ref = closed_form_reference(payoff_name, m, T,
                                                constrained ? std::optional<double>(coord_slope_of(c.at("constraint"), dhat, dim))
                                                            : std::nullopt);
                }
                table << id << ',' << dim << ',' << (constrained ? exact(dhat) : std::string("")) << ','
                      << (ball ? exact(ball->radius()) : std::string("")) << ',' << exact(R) << ',' << runs << ','
                      << exact(mean) << ',' << (y0.size() > 1 ? exact(sd) : std::string("")) << ','
                      << (ref ? exact(*ref) : std::string("")) << '\n';
            }
        }
    }
}

void run_reference(const Json& c, Outputs& out, std::ostream& log, Json& seeds) {
    const Json& rf = c.at("reference");
    const std::string payoff_name = c.at("payoff").get<std::string>();
    const long n = rf.at("n_samples").get<long>();
    const double T = c.at("model").at("T").get<double>();
    const double oracle_h = rf.at("oracle_h").get<double>();
    const std::uint64_t seed = run_seed(seed_of(c), 0);
    seeds.push_back(seed);
    std::vector<std::string> methods;
    for (const auto& m : rf.at("methods")) methods.push_back(m.get<std::string>());

    std::vector<PriceRow> rows;
    auto price = [&](const std::string& id, const BlackScholesModel& m, const PiecewiseLinear1D& pw, int dim) {
        for (const auto& method : methods) {
            if (method == "closed_form") {
                rows.push_back({id, "closed_form", closed_form_price(m, pw, T), 0.0, 0});
            } else {
                const PriceEstimate e = mc_price(m, Payoff::separable(pw, dim), T, n, seed);
                rows.push_back({id, "mc", e.price, e.stderr_, e.n_samples});
            }
            log << "[run 0 " << id << "] " << method << " " << rows.back().price << "\n";
        }
    };
    for (int dim : dims_of(c)) {
        const BlackScholesModel m = model_from(c.at("model"), dim, c.at("model").at("r").get<double>());
        const Payoff base = make_named_payoff(payoff_name, dim);
        const std::string prefix = payoff_name + "_d" + std::to_string(dim);
        if (rf.at("include_raw").get<bool>()) {
            std::optional<PiecewiseLinear1D> pw = base.piecewise();
            if (!pw) pw = PiecewiseLinear1D::from_samples({-1.0, 0.0}, {0.0, 0.0}); // replaced below for smooth payoffs
            if (payoff_name == "case3") pw = oracle_facelift_1d(base, ConvexBall(1e6, 1), -10.0, 10.0, oracle_h);
            price(prefix + "_raw", m, *pw, dim);
        }
        for (double dhat : list_of(c.at("constraint").at("dhat"))) {
            const double slope = coord_slope_of(c.at("constraint"), dhat, dim);
            PiecewiseLinear1D pw = case2_piecewise();
            if (payoff_name == "case2" || payoff_name == "case2nd") {
                pw = analytic_facelift_case2_piecewise(slope);
            } else {
                const Payoff p1 = make_named_payoff(payoff_name, 1);
                const double lo = payoff_name == "case3" ? -10.0 : 0.0, hi = payoff_name == "case3" ? 10.0 : 3.0;
                pw = oracle_facelift_1d(p1, ConvexBall(slope, 1), lo, hi, oracle_h);
            }
            price(prefix + "_dhat" + num(dhat), m, pw, dim);
        }
    }
    std::ofstream f = out.open("prices.csv");
    write_price_csv(rows, f);
}

void run_oracle(const Json& c, Outputs& out, std::ostream& log, Json& seeds) {
    (void)seeds;
    const Json& o = c.at("oracle");
    const std::string payoff_name = c.at("payoff").get<std::string>();
    const double h = o.at("h").get<double>();
    const double lo = o.at("box").at(0).get<double>(), hi = o.at("box").at(1).get<double>();
    for (int dim : dims_of(c)) {
        const Payoff p = make_named_payoff(payoff_name, dim);
        for (double dhat : list_of(c.at("constraint").at("dhat"))) {
            const ConvexBall ball = constraint_from(c.at("constraint"), dhat, dim);
            const GridOracle g(p, Box::cube(lo, hi, dim), h, ball.radius());
            const VectorXd f = tabulate_facelift(g, ball);
            const std::string name = "oracle_d" + std::to_string(dim) + "_dhat" + num(dhat) + ".csv";
            std::ofstream cv = out.open(name);
            for (int j = 0; j < dim; ++j) cv << (dim == 1 ? std::string("x") : "x" + std::to_string(j + 1)) << ',';
            const bool analytic = (payoff_name == "case2" || payoff_name == "case2nd")
                                  && coord_slope_of(c.at("constraint"), dhat, dim) <= 4.0
                                  && coord_slope_of(c.at("constraint"), dhat, dim) >= 1.0
                                  && (dim == 1 || ball.norm() == BallNorm::linf);
            cv << "phi,facelift" << (analytic ? ",analytic" : "") << '\n';
            for (Eigen::Index k = 0; k < g.num_points(); ++k) {
                const VectorXd x = g.point(k);
                if (!g.box().contains(x)) continue;
                for (int j = 0; j < dim; ++j) cv << exact(x[j]) << ',';
                cv << exact(g.values()[k]) << ',' << exact(f[k]);
                if (analytic) cv << ',' << exact(analytic_facelift_case2_nd(x, coord_slope_of(c.at("constraint"), dhat, dim)));
                cv << '\n';
            }
            log << "[run 0 " << name << "] " << g.num_points() << " lattice points\n";
        }
    }
}

} // namespace

RunReport run_experiment(const Json& config, const std::string& out_dir, std::ostream& log) {
    const auto diags = validate_config(config);
    if (!diags.empty()) throw ConfigError("invalid configuration: " + diags.front().path + ": " + diags.front().message);
    const auto info = find_experiment(config.at("experiment").get<std::string>());

    Outputs out(out_dir);
    Json seeds = Json::array();
    switch (info->kind) {
    case ExperimentKind::facelift: run_facelift(config, out, log, seeds); break;
    case ExperimentKind::bsde_price: run_bsde(config, out, log, seeds); break;
    case ExperimentKind::reference_price: run_reference(config, out, log, seeds); break;
    case ExperimentKind::oracle_dump: run_oracle(config, out, log, seeds); break;
    }

    RunReport rep;
    rep.outputs = out.names();
    rep.manifest = Json{{"manifest_version", kManifestVersion},
                        {"build_id", build_id()},
                        {"experiment", info->id},
                        {"produces", info->produces},
                        {"seeds", seeds},
                        {"outputs", rep.outputs},
                        {"config", config}};
    std::ofstream mf(out.path("manifest.json"));
    mf << rep.manifest.dump(2) << '\n';
    return rep;
}

} // namespace cbsde

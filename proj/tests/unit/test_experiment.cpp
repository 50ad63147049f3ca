#include "cbsde/errors.hpp"
#include "cbsde/experiment.hpp"

#include "doctest.h"

#include <filesystem>
#include <fstream>
#include <sstream>

using namespace cbsde;

namespace {

bool has_diagnostic(const std::vector<Diagnostic>& d, const std::string& path) {
    for (const auto& x : d)
        if (x.path == path) return true;
    return false;
}

} // namespace

TEST_CASE("every catalogue entry has a valid default at both scales") {
    for (const auto& e : experiment_catalogue()) {
        for (bool desk : {true, false}) {
            const Json c = default_config(e.id, desk);
            const auto d = validate_config(c);
            CHECK_MESSAGE(d.empty(), e.id << " " << (d.empty() ? "" : d.front().path + ": " + d.front().message));
        }
    }
    CHECK_THROWS_AS(default_config("nope", true), ConfigError);
}

TEST_CASE("empty config echoes the full default") {
    const ResolvedConfig r = resolve_config(Json::object(), "bsde-price");
    CHECK(r.diagnostics.empty());
    CHECK(r.config == default_config("bsde-price", true));
    CHECK(resolve_config(Json(), "oracle-dump").config == default_config("oracle-dump", true));
}

TEST_CASE("desk scale flag selects the preset") {
    const ResolvedConfig r = resolve_config(Json{{"desk_scale", false}}, "facelift-case2");
    CHECK(r.config["facelift"]["net"]["width"] == 200);
    CHECK(resolve_config(Json::object(), "facelift-case2").config["facelift"]["net"]["width"] == 50);
}

TEST_CASE("validation reports bad values") {
    SUBCASE("analytic case-2 beyond its range") {
        const auto r = resolve_config(Json{{"constraint", {{"dhat", {5.0}}}}}, "facelift-case2");
        CHECK(has_diagnostic(r.diagnostics, "constraint.dhat"));
        const auto low = resolve_config(Json{{"constraint", {{"dhat", {0.5}}}}}, "facelift-case2");
        CHECK(has_diagnostic(low.diagnostics, "constraint.dhat"));
        // The oracle reference has no such limit.
        const auto ok = resolve_config(Json{{"constraint", {{"dhat", {5.0}}}}, {"evaluation", {{"reference", "oracle"}}}},
                                       "facelift-case2");
        CHECK(ok.diagnostics.empty());
    }
    SUBCASE("negative batch size") {
        const auto r = resolve_config(Json{{"facelift", {{"train", {{"batch_size", -1}}}}}}, "facelift-case2");
        CHECK(has_diagnostic(r.diagnostics, "facelift.train.batch_size"));
        const auto b = resolve_config(Json{{"bsde", {{"step_train", {{"batch_size", 0}}}}}}, "bsde-price");
        CHECK(has_diagnostic(b.diagnostics, "bsde.step_train.batch_size"));
    }
    SUBCASE("unknown keys and types") {
        const auto r = resolve_config(Json{{"modle", 1}, {"runs", "three"}, {"bsde", {{"steps", 0}}}}, "bsde-price");
        CHECK(has_diagnostic(r.diagnostics, "modle"));
        CHECK(has_diagnostic(r.diagnostics, "runs"));
        CHECK(has_diagnostic(r.diagnostics, "bsde.steps"));
    }
    SUBCASE("schedule and activation names") {
        const auto r = resolve_config(
            Json{{"facelift", {{"train", {{"schedule", "cosine"}}}, {"net", {{"activation", "gelu"}}}}}}, "facelift-case1");
        CHECK(has_diagnostic(r.diagnostics, "facelift.train.schedule"));
        CHECK(has_diagnostic(r.diagnostics, "facelift.net.activation"));
    }
    SUBCASE("oracle lattice size") {
        const auto r = resolve_config(Json{{"dims", {3}}, {"oracle", {{"h", 1e-3}}}}, "oracle-dump");
        CHECK(has_diagnostic(r.diagnostics, "oracle.h"));
    }
    SUBCASE("experiment id") {
        CHECK_THROWS_AS(resolve_config(Json{{"experiment", "nope"}}, "bsde-price"), ConfigError);
    }
}

TEST_CASE("manifest is accepted in place of a config") {
    Json cfg = default_config("reference-price", true);
    cfg["seed"] = 9;
    const Json manifest{{"manifest_version", 1}, {"config", cfg}};
    const ResolvedConfig r = resolve_config(manifest, "facelift-case2");
    CHECK(r.diagnostics.empty());
    CHECK(r.config == cfg);
}

TEST_CASE("constraint radius for total slopes") {
    const Json box{{"enabled", true}, {"norm", "linf"}, {"dhat", {2.0}}, {"dhat_is_total", true}};
    CHECK(constraint_radius(box, 2.0, 4) == doctest::Approx(0.5));
    const ConvexBall c = constraint_from(box, 2.0, 4);
    CHECK(c.norm() == BallNorm::linf);
    CHECK(c.dim() == 4);
    Json ball = box;
    ball["dhat_is_total"] = false;
    CHECK(constraint_radius(ball, 2.0, 4) == doctest::Approx(2.0));
}

TEST_CASE("typed views read the blocks") {
    const Json c = default_config("bsde-price", true);
    const TrainLoopConfig t = train_config_from(c["bsde"]["step_train"]);
    CHECK(t.max_iterations == 2000);
    const NetSpec n = net_spec_from(c["bsde"]["step_net"]);
    CHECK(n.width == 50);
    CHECK(n.activation == Activation::tanh);
    const FaceliftTrainSpec f = facelift_spec_from(c["bsde"]["terminal_facelift"], 2);
    CHECK(f.sampling_box.dim() == 2);
    CHECK(f.eps_pen == doctest::Approx(0.02));
    const BlackScholesModel m = model_from(c["model"], 3, 0.07);
    CHECK(m.x0.size() == 3);
    CHECK(m.R == doctest::Approx(0.07));
}

TEST_CASE("reference and oracle runs write their files and re-run identically") {
    namespace fs = std::filesystem;
    const fs::path root = fs::temp_directory_path() / "cbsde_experiment_test";
    fs::remove_all(root);
    std::ostringstream log;
    for (const std::string id : {"reference-price", "oracle-dump"}) {
        const Json c = resolve_config(Json::object(), id).config;
        const RunReport a = run_experiment(c, (root / (id + "_a")).string(), log);
        const RunReport b = run_experiment(a.manifest["config"], (root / (id + "_b")).string(), log);
        REQUIRE(!a.outputs.empty());
        CHECK(a.manifest["build_id"] == build_id());
        CHECK(a.manifest["experiment"] == id);
        for (const auto& f : a.outputs) {
            std::ifstream fa(root / (id + "_a") / f), fb(root / (id + "_b") / f);
            const std::string sa((std::istreambuf_iterator<char>(fa)), {}), sb((std::istreambuf_iterator<char>(fb)), {});
            CHECK(!sa.empty());
            CHECK(sa == sb);
        }
    }
    CHECK(log.str().find("[run 0") != std::string::npos);
    std::ifstream prices(root / "reference-price_a" / "prices.csv");
    std::string header;
    std::getline(prices, header);
    CHECK(header == "config_id,method,price,stderr,n_samples");
    fs::remove_all(root);
}

TEST_CASE("run_experiment refuses an invalid config") {
    Json c = default_config("oracle-dump", true);
    c["oracle"]["h"] = -1.0;
    std::ostringstream log;
    CHECK_THROWS_AS(run_experiment(c, "/tmp/cbsde_never", log), ConfigError);
}

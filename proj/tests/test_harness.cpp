#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "json.hpp"
#include "rf/errors.hpp"
#include "rf/harness.hpp"
#include "rf/model.hpp"

using namespace rf;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    REQUIRE(f.good());
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

fs::path fresh_dir(const std::string& name) {
    fs::path dir = fs::temp_directory_path() / ("rf_harness_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

// tiny model so every experiment is cheap
std::string small_model_json() {
    return R"("model": {"n_layers": 2, "d_model": 16, "n_heads": 2, "d_mlp": 32,
                        "vocab": 48, "n_ctx": 32, "ln_eps": 1e-5, "seed": 5})";
}

std::string config_text(const std::string& experiment, const std::string& out_dir,
                        const std::string& extra = "") {
    std::string s = "{\"experiment\": \"" + experiment + "\", \"seed\": 11, \"out_dir\": \"" +
                    out_dir + "\", " + small_model_json();
    if (!extra.empty()) s += ", " + extra;
    s += "}";
    return s;
}

} // namespace

TEST_CASE("config json round-trips losslessly") {
    ExperimentConfig c;
    c.experiment = "green";
    c.seed = 99;
    c.out_dir = "somewhere";
    c.gate = true;
    c.model.n_layers = 3;
    c.model.seed = 7;
    c.checkpoint = "ck.bin";
    c.task.n_keys = 5;
    c.task.train_steps = 12;
    c.observable = {4, 9, 3, true};
    c.sweep.epsilons = {0.25, -0.5};
    c.sweep.relative = false;
    c.sweep.sites = {{1, 2}, {0, 0}};
    c.sweep.n_sites = 7;
    c.sweep.layer_mid = 2;
    c.sweep.source = {1, 1};
    c.sweep.target = {3, 4};
    c.sweep.dy_star = 0.125;
    c.sweep.k = 3;
    c.sweep.rank = 9;
    c.sweep.eps_s = 0.375;
    c.sweep.lambda = 0.5;
    c.sweep.factor = 4;
    c.thresholds.tau = 0.125;

    const std::string text = config_to_json_text(c);
    ExperimentConfig back = config_from_json_text(text);
    CHECK(config_to_json_text(back) == text);

    CHECK(back.experiment == "green");
    CHECK(back.seed == 99);
    CHECK(back.gate);
    CHECK(back.model.n_layers == 3);
    CHECK(back.checkpoint == "ck.bin");
    CHECK(back.observable.position == 3);
    CHECK(back.observable.linear_readout);
    CHECK(back.sweep.sites.size() == 2);
    CHECK(back.sweep.sites[1] == Site{0, 0});
    CHECK(back.sweep.target == Site{3, 4});
    CHECK(back.sweep.rank == 9);
    CHECK(back.thresholds.tau == 0.125);

    // defaults round-trip too
    ExperimentConfig d;
    d.experiment = "linearity";
    ExperimentConfig d2 = config_from_json_text(config_to_json_text(d));
    CHECK(config_to_json_text(d2) == config_to_json_text(d));
}

TEST_CASE("config errors name the offending key") {
    CHECK_THROWS_WITH_AS(config_from_json_text(R"({"experiment":"linearity","bogus":1})"),
                         doctest::Contains("bogus"), config_error);
    CHECK_THROWS_WITH_AS(
        config_from_json_text(R"({"experiment":"linearity","sweep":{"epsilonz":[1]}})"),
        doctest::Contains("epsilonz"), config_error);
    CHECK_THROWS_WITH_AS(config_from_json_text(R"({"experiment":"warp"})"),
                         doctest::Contains("warp"), config_error);
    CHECK_THROWS_AS(config_from_json_text(R"({"seed": 3})"), config_error);
    CHECK_THROWS_WITH_AS(config_from_json_text(R"({"experiment":"linearity","seed":"abc"})"),
                         doctest::Contains("seed"), config_error);
    CHECK_THROWS_AS(config_from_json_text(R"({"experiment":"infer","sweep":{"k":-1}})"),
                    config_error);
    CHECK_THROWS_AS(
        config_from_json_text(R"({"experiment":"linearity","sweep":{"sites":[[1]]}})"),
        config_error);
}

TEST_CASE("validate_config reports diagnostics without running the model") {
    Diagnostics ok = validate_config_text(R"({"experiment": "sites"})");
    CHECK(ok.ok());
    CHECK(ok.warnings.empty());

    Diagnostics warn = validate_config_text(
        R"({"experiment": "linearity", "sweep": {"epsilons": [0.01, 0.02]}})");
    CHECK(warn.ok());
    REQUIRE(warn.warnings.size() == 1);
    CHECK(warn.warnings[0].find("both signs") != std::string::npos);

    Diagnostics parse = validate_config_text("{\"experiment\": ");
    CHECK(!parse.ok());
    REQUIRE(parse.errors.size() == 1);
    // parse errors carry a location
    CHECK(parse.errors[0].find("parse error") != std::string::npos);

    Diagnostics unk = validate_config_text(R"({"experiment": "sites", "zz": 0})");
    CHECK(!unk.ok());
    CHECK(unk.errors[0].find("zz") != std::string::npos);

    Diagnostics missing = validate_config_file("/definitely/not/here.json");
    CHECK(!missing.ok());
}

TEST_CASE("run_experiment writes csv, metadata, and summary with the pinned schema") {
    const fs::path dir = fresh_dir("linearity");
    ExperimentConfig c = config_from_json_text(config_text("linearity", dir.string()));
    CHECK(run_experiment(c) == 0);

    const std::string csv = slurp(dir / "linearity.csv");
    CHECK(csv.rfind("epsilon,dy_meas,dy_pred_slope,eta_nl,eta_sup,in_band\n", 0) == 0);
    CHECK(csv.back() == '\n');

    auto meta = nlohmann::json::parse(slurp(dir / "linearity_metadata.json"));
    CHECK(meta.at("version").get<std::string>() == kHarnessVersion);
    CHECK(meta.at("master_seed").get<std::uint64_t>() == 11);
    CHECK(meta.at("config_hash").is_number_unsigned());
    CHECK(meta.at("config").at("experiment") == "linearity");
    CHECK(meta.at("rng_children").is_object());
    // reproducibility metadata only — no wall-clock or host state
    CHECK(meta.dump().find("time") == std::string::npos);

    auto summary = nlohmann::json::parse(slurp(dir / "linearity_summary.json"));
    CHECK(summary.at("gate_ok").get<bool>());
    CHECK(summary.at("median_eta_nl").get<double>() < 0.2);
}

TEST_CASE("rerun with identical config is byte-identical") {
    const fs::path dir1 = fresh_dir("det1");
    const fs::path dir2 = fresh_dir("det2");
    for (const std::string exp : {"sites", "green", "field"}) {
        ExperimentConfig c = config_from_json_text(config_text(exp, dir1.string()));
        CHECK(run_experiment(c) == 0);
        c.out_dir = dir2.string();
        CHECK(run_experiment(c) == 0);
        CHECK(slurp(dir1 / (exp + ".csv")) == slurp(dir2 / (exp + ".csv")));
        CHECK(slurp(dir1 / (exp + "_summary.json")) == slurp(dir2 / (exp + "_summary.json")));
    }
}

TEST_CASE("gate mode returns 3 on a failed headline check and 0 otherwise") {
    const fs::path dir = fresh_dir("gate");
    // an impossible tau makes the linearity gate fail without breaking the run
    ExperimentConfig c = config_from_json_text(
        config_text("linearity", dir.string(), R"("thresholds": {"tau": 1e-15})"));
    CHECK(run_experiment(c) == 0); // gate off: reported in summary only
    auto summary = nlohmann::json::parse(slurp(dir / "linearity_summary.json"));
    CHECK(!summary.at("gate_ok").get<bool>());
    c.gate = true;
    CHECK(run_experiment(c) == 3);
}

TEST_CASE("every experiment id runs and leaves its three outputs") {
    const fs::path dir = fresh_dir("all");
    const char* headers[] = {
        "epsilon,dy_meas,dy_pred_slope,eta_nl,eta_sup,in_band",
        "layer,token,epsilon,dy_meas,dy_pred,e_abs,e_rel,regime",
        "d_layer,d_token,mean_response_norm,count",
        "epsilon,eta_comp_linearized,eta_comp_measured",
        "layer,token,score",
        "i,j,g_jvp,g_vjp",
        "layer,toward_fraction,answer_rank_patched",
        "layer,token,amplitude",
        "source_layer,source_token,target_layer,target_token,score,unmapped",
    };
    const std::string ids[] = {"linearity", "predict", "field",    "compose", "sites",
                               "green",     "displace", "infer",   "transfer"};
    for (int i = 0; i < 9; ++i) {
        ExperimentConfig c = config_from_json_text(
            config_text(ids[i], (dir / ids[i]).string(), R"("sweep": {"n_sites": 12})"));
        CHECK(run_experiment(c) == 0);
        const std::string csv = slurp(dir / ids[i] / (ids[i] + ".csv"));
        CHECK(csv.rfind(std::string(headers[i]) + "\n", 0) == 0);
        CHECK(fs::exists(dir / ids[i] / (ids[i] + "_metadata.json")));
        CHECK(fs::exists(dir / ids[i] / (ids[i] + "_summary.json")));
    }
    // transfer also serializes the discrete map
    CHECK(fs::exists(dir / "transfer" / "transfer_map.json"));
}

TEST_CASE("run_training writes a loadable checkpoint and reaches the task") {
    const fs::path dir = fresh_dir("train");
    ExperimentConfig c = config_from_json_text(config_text(
        "displace", dir.string(),
        R"("task": {"train_steps": 4000, "lr": 0.003, "n_keys": 4, "n_vals": 4})"));
    const std::string ck = (dir / "kv.ckpt").string();
    CHECK(run_training(c, ck) == 0);

    Parameters p = load_checkpoint(ck);
    CHECK(p.cfg.n_layers == 2);
    auto report = nlohmann::json::parse(slurp(dir / "train_summary.json"));
    CHECK(report.at("final_accuracy").get<double>() >= 0.99);
    CHECK(report.at("steps_run").get<int>() <= 4000);

    // the checkpoint drives experiments: displacement at the top slice flips the answer
    ExperimentConfig d = config_from_json_text(
        config_text("displace", (dir / "disp").string(), "\"checkpoint\": \"" + ck + "\""));
    CHECK(run_experiment(d) == 0);
    auto summary = nlohmann::json::parse(slurp((dir / "disp") / "displace_summary.json"));
    CHECK(summary.at("toward_fraction_final").get<double>() == doctest::Approx(1.0).epsilon(1e-6));

    ExperimentConfig bad = c;
    bad.task.train_steps = 0;
    CHECK_THROWS_AS(run_training(bad, ck), config_error);
}

TEST_CASE("load_config_file round-trips through disk and missing files throw") {
    const fs::path dir = fresh_dir("file");
    const std::string text = config_text("compose", dir.string());
    {
        std::ofstream f(dir / "cfg.json", std::ios::binary);
        f << text;
    }
    ExperimentConfig c = load_config_file((dir / "cfg.json").string());
    CHECK(c.experiment == "compose");
    CHECK(c.model.d_model == 16);
    CHECK_THROWS_AS(load_config_file((dir / "nope.json").string()), io_error);
}

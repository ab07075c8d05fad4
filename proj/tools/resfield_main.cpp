// resfield: batch experiment runner.
//
// One subcommand per experiment id, plus `validate` (config schema check) and
// `train` (fit the task model, save a checkpoint). Global flags can also come
// from RESFIELD_* environment variables; explicit flags win.
//
// Exit codes: 0 success, 1 usage/config error, 2 numeric failure,
// 3 headline-threshold failure in --gate mode.

#include <omp.h>

#include <cstdint>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "rf/errors.hpp"
#include "rf/harness.hpp"

namespace {

const std::vector<std::string> kExperimentIds = {"linearity", "predict", "field",
                                                 "compose",   "sites",   "green",
                                                 "displace",  "infer",   "transfer"};

struct CommonFlags {
    std::string config_path;
    std::string out_dir;
    std::uint64_t seed = 0;
    int threads = 0;
    bool gate = false;
};

void add_common(CLI::App* sub, CommonFlags& f) {
    sub->add_option("--config", f.config_path, "JSON experiment config")
        ->envname("RESFIELD_CONFIG")
        ->check(CLI::ExistingFile);
    sub->add_option("--out", f.out_dir, "output directory")->envname("RESFIELD_OUT");
    sub->add_option("--seed", f.seed, "master seed override")->envname("RESFIELD_SEED");
    sub->add_option("--threads", f.threads, "OpenMP thread count")->envname("RESFIELD_THREADS");
    sub->add_flag("--gate", f.gate, "exit 3 when the headline check fails")
        ->envname("RESFIELD_GATE");
}

rf::ExperimentConfig resolve_config(const CLI::App* sub, const CommonFlags& f,
                                    const std::string& experiment) {
    rf::ExperimentConfig c;
    if (!f.config_path.empty()) c = rf::load_config_file(f.config_path);
    if (!experiment.empty()) {
        if (!c.experiment.empty() && c.experiment != experiment) {
            throw rf::config_error("config file is for experiment '" + c.experiment +
                                   "' but the '" + experiment + "' subcommand was invoked");
        }
        c.experiment = experiment;
    }
    if (sub->count("--out")) c.out_dir = f.out_dir;
    if (sub->count("--seed")) c.seed = f.seed;
    if (sub->count("--gate")) c.gate = true;
    if (sub->count("--threads")) {
        if (f.threads < 1) throw rf::config_error("--threads must be at least 1");
        omp_set_num_threads(f.threads);
    }
    return c;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"resfield: response-field experiments on a small transformer"};
    app.require_subcommand(1);

    CommonFlags flags;
    for (const std::string& id : kExperimentIds) {
        add_common(app.add_subcommand(id, "run the '" + id + "' experiment"), flags);
    }

    std::string validate_path;
    CLI::App* validate = app.add_subcommand("validate", "schema-check a config file");
    validate->add_option("config", validate_path, "JSON config file")->required();

    CLI::App* train = app.add_subcommand("train", "train on the task, save a checkpoint");
    add_common(train, flags);
    std::string checkpoint_out = "model.ckpt";
    int train_steps = -1;
    train->add_option("--checkpoint-out", checkpoint_out, "checkpoint path to write");
    train->add_option("--steps", train_steps, "override task.train_steps");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1; // --help exits 0, every usage problem maps to 1
    }

    try {
        if (validate->parsed()) {
            rf::Diagnostics d = rf::validate_config_file(validate_path);
            for (const std::string& w : d.warnings) std::cout << "warning: " << w << "\n";
            for (const std::string& e : d.errors) std::cout << "error: " << e << "\n";
            std::cout << (d.ok() ? "ok" : "invalid") << "\n";
            return d.ok() ? 0 : 1;
        }

        const CLI::App* sub = app.get_subcommands().front();
        if (train->parsed()) {
            rf::ExperimentConfig c = resolve_config(sub, flags, "");
            if (train_steps >= 0) c.task.train_steps = train_steps;
            const int rc = rf::run_training(c, checkpoint_out);
            std::cout << "wrote " << checkpoint_out << "\n";
            if (rc == 3) std::cout << "gate: training accuracy below threshold\n";
            return rc;
        }

        rf::ExperimentConfig c = resolve_config(sub, flags, sub->get_name());
        const int rc = rf::run_experiment(c);
        std::cout << "wrote " << c.out_dir << "/" << c.experiment << ".csv\n";
        if (rc == 3) std::cout << "gate: headline check failed, see summary JSON\n";
        return rc;
    } catch (const rf::numeric_error& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return 2;
    } catch (const rf::error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}

#pragma once
// Batch experiment runner: JSON config in, deterministic CSV sweeps plus
// metadata/summary JSON out. One experiment family per run.
//
// CSV schemas (stable; new columns may only be appended):
//   linearity: epsilon,dy_meas,dy_pred_slope,eta_nl,eta_sup,in_band
//   predict:   layer,token,epsilon,dy_meas,dy_pred,e_abs,e_rel,regime
//   field:     d_layer,d_token,mean_response_norm,count
//   compose:   epsilon,eta_comp_linearized,eta_comp_measured
//   sites:     layer,token,score
//   green:     i,j,g_jvp,g_vjp
//   displace:  layer,toward_fraction,answer_rank_patched
//   infer:     layer,token,amplitude
//   transfer:  source_layer,source_token,target_layer,target_token,score,unmapped

#include <cstdint>
#include <string>
#include <vector>

#include "rf/model.hpp"
#include "rf/tensor.hpp"

namespace rf {

inline constexpr const char* kHarnessVersion = "resfield 1.0.0";

struct TaskSpec {
    std::uint64_t seed = 1;
    int n_keys = 8;
    int n_vals = 8;
    int n_context_facts = 4;
    int key_a = 0;
    int key_b = 1;
    int train_steps = 0; // 0 = untrained model
    double lr = 1e-3;
    int batch = 8;
};

struct SweepSpec {
    std::vector<double> epsilons;
    bool relative = true;      // scale epsilons by ||R|| at the patched site
    std::vector<Site> sites;   // empty = experiment-specific default/sampling
    int n_sites = 50;
    int n_pairs = 16;
    int layer_mid = -1;        // compose hand-off layer; -1 = n_layers/2
    Site source{-1, -1};       // green source; -1 = default
    Site target{-1, -1};       // green target
    double dy_star = 0.0;      // infer: absolute target when nonzero
    double dy_star_rel = 1e-4; // infer: else dy* = rel * ||a|| * ||R|| at the top site
    int k = 0;                 // infer sparsity budget
    std::size_t rank = 32;     // transfer fingerprint rank
    double eps_s = 0.2;        // transfer depth window
    double lambda = 1e-2;      // transfer ridge weight
    int factor = 2;            // transfer refinement factor; 1 = self-match
    std::size_t n_anchors = 8;
    std::size_t anchor_dirs = 4;
};

struct ThresholdSpec {
    double tau = 0.2;
    double eps0 = 1e-8;
    double fd_step = 1e-5;
};

struct ExperimentConfig {
    std::string experiment;
    std::uint64_t seed = 0; // master seed; every random draw is a child of it
    std::string out_dir = "out";
    bool gate = false;
    ModelConfig model;
    std::string checkpoint; // when set, overrides model init
    TaskSpec task;
    Observable observable{-1, -1, -1, false}; // target -1 = derive from task
    SweepSpec sweep;
    ThresholdSpec thresholds;
};

// lossless JSON round-trip; unknown keys are config errors naming the key
ExperimentConfig config_from_json_text(const std::string& text);
std::string config_to_json_text(const ExperimentConfig& c);

struct Diagnostics {
    std::vector<std::string> errors;
    std::vector<std::string> warnings;
    bool ok() const { return errors.empty(); }
};

// schema check only — no model evaluation
Diagnostics validate_config_text(const std::string& text);
Diagnostics validate_config_file(const std::string& path);

ExperimentConfig load_config_file(const std::string& path);

// runs one experiment, writes <id>.csv, <id>_metadata.json, <id>_summary.json
// under out_dir. Returns 0, or 3 when gate mode is on and a headline
// threshold fails. Config and numeric problems surface as exceptions.
int run_experiment(const ExperimentConfig& c);

// trains the configured model on its task and writes a checkpoint + report
int run_training(const ExperimentConfig& c, const std::string& checkpoint_out);

} // namespace rf

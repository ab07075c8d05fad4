#include "rf/harness.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include "json.hpp"
#include "rf/autodiff.hpp"
#include "rf/errors.hpp"
#include "rf/inference.hpp"
#include "rf/intervention.hpp"
#include "rf/kvtask.hpp"
#include "rf/metrics.hpp"
#include "rf/rng.hpp"
#include "rf/transfer.hpp"

namespace rf {

namespace {

using json = nlohmann::json;
using ojson = nlohmann::ordered_json;

// documented child keys of the master seed, echoed into metadata
constexpr std::uint64_t kKeyDirection = 1;
constexpr std::uint64_t kKeyDirection2 = 2;
constexpr std::uint64_t kKeySites = 3;
constexpr std::uint64_t kKeyProbes = 4;
constexpr std::uint64_t kKeyTrainer = 10;

// shortest round-trip formatting; locale-independent by construction
std::string fmt(double v) {
    char buf[40];
    auto r = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, r.ptr);
}

std::string fmt(int v) { return std::to_string(v); }

class Csv {
public:
    explicit Csv(std::string header) : body_(std::move(header)) { body_ += '\n'; }
    template <typename... Ts>
    void row(const Ts&... cells) {
        bool first = true;
        ((body_ += (first ? "" : ","), body_ += cell(cells), first = false), ...);
        body_ += '\n';
    }
    const std::string& str() const { return body_; }

private:
    static std::string cell(double v) { return fmt(v); }
    static std::string cell(int v) { return fmt(v); }
    static std::string cell(std::size_t v) { return std::to_string(v); }
    static std::string cell(bool v) { return v ? "1" : "0"; }
    static std::string cell(const std::string& v) { return v; }
    static std::string cell(const char* v) { return v; }
    std::string body_;
};

void check_keys(const json& j, const std::string& ctx, const std::set<std::string>& allowed) {
    if (!j.is_object()) throw config_error("config section '" + ctx + "' must be an object");
    for (const auto& item : j.items()) {
        if (!allowed.count(item.key())) {
            throw config_error("unknown key '" + item.key() + "' in " + ctx);
        }
    }
}

template <typename T>
T get_or(const json& j, const std::string& key, T def) {
    if (!j.contains(key)) return def;
    try {
        return j.at(key).get<T>();
    } catch (const json::exception&) {
        throw config_error("config key '" + key + "' has the wrong type");
    }
}

Site get_site(const json& j, const std::string& key, Site def) {
    if (!j.contains(key)) return def;
    const auto& v = j.at(key);
    if (!v.is_array() || v.size() != 2 || !v[0].is_number_integer() || !v[1].is_number_integer()) {
        throw config_error("config key '" + key + "' must be [layer, token]");
    }
    return {v[0].get<int>(), v[1].get<int>()};
}

const std::set<std::string> kExperiments = {"linearity", "predict", "field",    "compose", "sites",
                                            "green",     "displace", "infer",   "transfer"};

ExperimentConfig parse_config(const json& j) {
    check_keys(j, "config root",
               {"experiment", "seed", "out_dir", "gate", "model", "checkpoint", "task",
                "observable", "sweep", "thresholds"});
    ExperimentConfig c;
    c.experiment = get_or<std::string>(j, "experiment", "");
    if (c.experiment.empty()) throw config_error("config is missing 'experiment'");
    if (!kExperiments.count(c.experiment)) {
        throw config_error("unknown experiment id '" + c.experiment + "'");
    }
    c.seed = get_or<std::uint64_t>(j, "seed", 0);
    c.out_dir = get_or<std::string>(j, "out_dir", "out");
    if (c.out_dir.empty()) throw config_error("out_dir must not be empty");
    c.gate = get_or<bool>(j, "gate", false);
    c.checkpoint = get_or<std::string>(j, "checkpoint", "");

    if (j.contains("model")) {
        const auto& m = j.at("model");
        check_keys(m, "model",
                   {"seed", "n_layers", "d_model", "n_heads", "d_mlp", "vocab", "n_ctx", "ln_eps"});
        c.model.seed = get_or<std::uint64_t>(m, "seed", c.model.seed);
        c.model.n_layers = get_or<int>(m, "n_layers", c.model.n_layers);
        c.model.d_model = get_or<int>(m, "d_model", c.model.d_model);
        c.model.n_heads = get_or<int>(m, "n_heads", c.model.n_heads);
        c.model.d_mlp = get_or<int>(m, "d_mlp", c.model.d_mlp);
        c.model.vocab = get_or<int>(m, "vocab", c.model.vocab);
        c.model.n_ctx = get_or<int>(m, "n_ctx", c.model.n_ctx);
        c.model.ln_eps = get_or<double>(m, "ln_eps", c.model.ln_eps);
    }
    if (c.checkpoint.empty()) c.model.validate();

    if (j.contains("task")) {
        const auto& t = j.at("task");
        check_keys(t, "task",
                   {"seed", "n_keys", "n_vals", "n_context_facts", "key_a", "key_b", "train_steps",
                    "lr", "batch"});
        c.task.seed = get_or<std::uint64_t>(t, "seed", c.task.seed);
        c.task.n_keys = get_or<int>(t, "n_keys", c.task.n_keys);
        c.task.n_vals = get_or<int>(t, "n_vals", c.task.n_vals);
        c.task.n_context_facts = get_or<int>(t, "n_context_facts", c.task.n_context_facts);
        c.task.key_a = get_or<int>(t, "key_a", c.task.key_a);
        c.task.key_b = get_or<int>(t, "key_b", c.task.key_b);
        c.task.train_steps = get_or<int>(t, "train_steps", c.task.train_steps);
        c.task.lr = get_or<double>(t, "lr", c.task.lr);
        c.task.batch = get_or<int>(t, "batch", c.task.batch);
    }
    if (c.task.key_a < 0 || c.task.key_a >= c.task.n_keys || c.task.key_b < 0 ||
        c.task.key_b >= c.task.n_keys) {
        throw config_error("task keys must lie in [0, n_keys)");
    }
    if (c.task.train_steps < 0) throw config_error("train_steps must be non-negative");

    if (j.contains("observable")) {
        const auto& o = j.at("observable");
        check_keys(o, "observable", {"target", "reference", "position", "linear_readout"});
        c.observable.target = get_or<int>(o, "target", -1);
        c.observable.reference = get_or<int>(o, "reference", -1);
        c.observable.position = get_or<int>(o, "position", -1);
        c.observable.linear_readout = get_or<bool>(o, "linear_readout", false);
    }

    if (j.contains("sweep")) {
        const auto& s = j.at("sweep");
        check_keys(s, "sweep",
                   {"epsilons", "relative", "sites", "n_sites", "n_pairs", "layer_mid", "source",
                    "target", "dy_star", "dy_star_rel", "k", "rank", "eps_s", "lambda", "factor",
                    "n_anchors", "anchor_dirs"});
        c.sweep.epsilons = get_or<std::vector<double>>(s, "epsilons", {});
        c.sweep.relative = get_or<bool>(s, "relative", c.sweep.relative);
        if (s.contains("sites")) {
            if (!s.at("sites").is_array()) throw config_error("sweep.sites must be an array");
            for (const auto& e : s.at("sites")) {
                if (!e.is_array() || e.size() != 2) {
                    throw config_error("sweep.sites entries must be [layer, token]");
                }
                c.sweep.sites.push_back({e[0].get<int>(), e[1].get<int>()});
            }
        }
        c.sweep.n_sites = get_or<int>(s, "n_sites", c.sweep.n_sites);
        c.sweep.n_pairs = get_or<int>(s, "n_pairs", c.sweep.n_pairs);
        c.sweep.layer_mid = get_or<int>(s, "layer_mid", c.sweep.layer_mid);
        c.sweep.source = get_site(s, "source", c.sweep.source);
        c.sweep.target = get_site(s, "target", c.sweep.target);
        c.sweep.dy_star = get_or<double>(s, "dy_star", c.sweep.dy_star);
        c.sweep.dy_star_rel = get_or<double>(s, "dy_star_rel", c.sweep.dy_star_rel);
        c.sweep.k = get_or<int>(s, "k", c.sweep.k);
        c.sweep.rank = get_or<std::size_t>(s, "rank", c.sweep.rank);
        c.sweep.eps_s = get_or<double>(s, "eps_s", c.sweep.eps_s);
        c.sweep.lambda = get_or<double>(s, "lambda", c.sweep.lambda);
        c.sweep.factor = get_or<int>(s, "factor", c.sweep.factor);
        c.sweep.n_anchors = get_or<std::size_t>(s, "n_anchors", c.sweep.n_anchors);
        c.sweep.anchor_dirs = get_or<std::size_t>(s, "anchor_dirs", c.sweep.anchor_dirs);
    }
    if (c.sweep.n_sites <= 0) throw config_error("sweep.n_sites must be positive");
    if (c.sweep.k < 0) throw config_error("sweep.k must be non-negative");
    if (c.sweep.factor < 1) throw config_error("sweep.factor must be at least 1");
    if (c.sweep.rank == 0) throw config_error("sweep.rank must be positive");
    if (!(c.sweep.eps_s > 0.0)) throw config_error("sweep.eps_s must be positive");
    if (c.sweep.lambda < 0.0) throw config_error("sweep.lambda must be non-negative");

    if (j.contains("thresholds")) {
        const auto& t = j.at("thresholds");
        check_keys(t, "thresholds", {"tau", "eps0", "fd_step"});
        c.thresholds.tau = get_or<double>(t, "tau", c.thresholds.tau);
        c.thresholds.eps0 = get_or<double>(t, "eps0", c.thresholds.eps0);
        c.thresholds.fd_step = get_or<double>(t, "fd_step", c.thresholds.fd_step);
    }
    if (!(c.thresholds.tau > 0.0) || !(c.thresholds.eps0 > 0.0) || !(c.thresholds.fd_step > 0.0)) {
        throw config_error("thresholds must be positive");
    }
    return c;
}

ojson config_json(const ExperimentConfig& c) {
    ojson j;
    j["experiment"] = c.experiment;
    j["seed"] = c.seed;
    j["out_dir"] = c.out_dir;
    j["gate"] = c.gate;
    j["model"] = {{"seed", c.model.seed},   {"n_layers", c.model.n_layers},
                  {"d_model", c.model.d_model}, {"n_heads", c.model.n_heads},
                  {"d_mlp", c.model.d_mlp},     {"vocab", c.model.vocab},
                  {"n_ctx", c.model.n_ctx},     {"ln_eps", c.model.ln_eps}};
    j["checkpoint"] = c.checkpoint;
    j["task"] = {{"seed", c.task.seed},
                 {"n_keys", c.task.n_keys},
                 {"n_vals", c.task.n_vals},
                 {"n_context_facts", c.task.n_context_facts},
                 {"key_a", c.task.key_a},
                 {"key_b", c.task.key_b},
                 {"train_steps", c.task.train_steps},
                 {"lr", c.task.lr},
                 {"batch", c.task.batch}};
    j["observable"] = {{"target", c.observable.target},
                       {"reference", c.observable.reference},
                       {"position", c.observable.position},
                       {"linear_readout", c.observable.linear_readout}};
    ojson sweep;
    sweep["epsilons"] = c.sweep.epsilons;
    sweep["relative"] = c.sweep.relative;
    sweep["sites"] = ojson::array();
    for (const Site& s : c.sweep.sites) sweep["sites"].push_back({s.layer, s.token});
    sweep["n_sites"] = c.sweep.n_sites;
    sweep["n_pairs"] = c.sweep.n_pairs;
    sweep["layer_mid"] = c.sweep.layer_mid;
    sweep["source"] = {c.sweep.source.layer, c.sweep.source.token};
    sweep["target"] = {c.sweep.target.layer, c.sweep.target.token};
    sweep["dy_star"] = c.sweep.dy_star;
    sweep["dy_star_rel"] = c.sweep.dy_star_rel;
    sweep["k"] = c.sweep.k;
    sweep["rank"] = c.sweep.rank;
    sweep["eps_s"] = c.sweep.eps_s;
    sweep["lambda"] = c.sweep.lambda;
    sweep["factor"] = c.sweep.factor;
    sweep["n_anchors"] = c.sweep.n_anchors;
    sweep["anchor_dirs"] = c.sweep.anchor_dirs;
    j["sweep"] = std::move(sweep);
    j["thresholds"] = {{"tau", c.thresholds.tau},
                       {"eps0", c.thresholds.eps0},
                       {"fd_step", c.thresholds.fd_step}};
    return j;
}

// ---- shared experiment context -------------------------------------------------

struct RunContext {
    ExperimentConfig cfg;
    Parameters params;
    KvTask task;
    std::vector<int> prompt_a, prompt_b;
    Observable obs;
    TrainReport train_report;
};

RunContext make_context(const ExperimentConfig& c) {
    RunContext ctx{c, {}, {}, {}, {}, {}, {}};
    if (!c.checkpoint.empty()) {
        ctx.params = load_checkpoint(c.checkpoint);
    } else {
        ctx.params = init_model(c.model);
    }
    ctx.task = make_kv_task(c.task.seed, c.task.n_keys, c.task.n_vals, ctx.params.cfg.vocab,
                            c.task.n_context_facts);
    if ((int)ctx.task.prompt_len() > ctx.params.cfg.n_ctx) {
        throw config_error("task prompt does not fit the model context");
    }
    if (c.task.train_steps > 0) {
        ctx.params = train_on_task(ctx.params, ctx.task, c.task.train_steps, c.task.lr,
                                   c.task.batch, RngStream(c.seed).child(kKeyTrainer).seed(),
                                   &ctx.train_report);
    }
    ctx.prompt_a = ctx.task.prompt_for_key(c.task.key_a);
    ctx.prompt_b = ctx.task.prompt_for_key(c.task.key_b);
    if (c.observable.target >= 0) {
        ctx.obs = c.observable;
    } else {
        ctx.obs = {ctx.task.answer_token(c.task.key_a), ctx.task.distractor_token(c.task.key_a),
                   -1, c.observable.linear_readout};
    }
    validate_observable(ctx.params.cfg, ctx.prompt_a.size(), ctx.obs);
    return ctx;
}

Site default_site(const RunContext& ctx) {
    return {std::max(1, ctx.params.cfg.n_layers / 2), ctx.task.query_position()};
}

std::vector<double> default_eps_fractions() {
    std::vector<double> g;
    for (double f : {0.02, 0.05, 0.1, 0.2, 0.35, 0.5, 0.7, 1.0}) {
        g.push_back(0.05 * f);
        g.push_back(-0.05 * f);
    }
    return g;
}

std::vector<double> resolve_epsilons(const RunContext& ctx, Site site) {
    std::vector<double> eps =
        ctx.cfg.sweep.epsilons.empty() ? default_eps_fractions() : ctx.cfg.sweep.epsilons;
    if (ctx.cfg.sweep.relative) {
        ForwardResult clean = forward(ctx.params, ctx.prompt_a);
        const double rn = norm2(clean.residuals.row(site.layer, site.token));
        for (double& e : eps) e *= rn;
    }
    return eps;
}

double median_of(std::vector<double> v) {
    if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
    for (double x : v) {
        if (std::isnan(x)) return std::numeric_limits<double>::quiet_NaN();
    }
    std::sort(v.begin(), v.end());
    const std::size_t m = v.size() / 2;
    return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

struct RunOutput {
    std::string csv;
    ojson summary;
    bool gate_ok = true;
    std::vector<std::pair<std::string, std::string>> extra_files;
};

// ---- experiment runners ---------------------------------------------------------

RunOutput run_linearity(const RunContext& ctx) {
    const Site site = ctx.cfg.sweep.sites.empty() ? default_site(ctx) : ctx.cfg.sweep.sites[0];
    const std::size_t d = (std::size_t)ctx.params.cfg.d_model;
    RngStream master(ctx.cfg.seed);
    RngStream r1 = master.child(kKeyDirection);
    RngStream r2 = master.child(kKeyDirection2);
    PatchSource j1;
    j1.site = site;
    j1.direction = unit_vector(r1, d);
    PatchSource j2 = j1;
    j2.direction = unit_vector(r2, d);

    auto eps = resolve_epsilons(ctx, site);
    LinearityReport lin = linearity_sweep(ctx.params, ctx.prompt_a, j1, eps, ctx.obs, {},
                                          ctx.cfg.thresholds.tau, ctx.cfg.thresholds.eps0);
    LinearityReport sup = superposition_sweep(ctx.params, ctx.prompt_a, j1, j2, eps, ctx.obs, {},
                                              ctx.cfg.thresholds.tau, ctx.cfg.thresholds.eps0);

    Csv csv("epsilon,dy_meas,dy_pred_slope,eta_nl,eta_sup,in_band");
    for (std::size_t i = 0; i < eps.size(); ++i) {
        csv.row(eps[i], lin.dy[i], lin.slope * eps[i], lin.eta_nl[i], sup.eta_sup[i],
                lin.in_band[i]);
    }

    RunOutput out;
    out.csv = csv.str();
    const double med_nl = median_of(lin.eta_nl);
    const double med_sup = median_of(sup.eta_sup);
    out.summary["site"] = {site.layer, site.token};
    out.summary["slope"] = lin.slope;
    out.summary["slope_ok"] = lin.slope_ok;
    out.summary["median_eta_nl"] = med_nl;
    out.summary["median_eta_sup"] = med_sup;
    out.summary["tau"] = ctx.cfg.thresholds.tau;
    out.gate_ok = lin.slope_ok && med_nl < ctx.cfg.thresholds.tau && med_sup < ctx.cfg.thresholds.tau;
    return out;
}

RunOutput run_predict(const RunContext& ctx) {
    SensitivityField a = sensitivity_field(ctx.params, ctx.prompt_a, ctx.obs);
    ForwardResult clean = forward(ctx.params, ctx.prompt_a);
    RngStream rng = RngStream(ctx.cfg.seed).child(kKeySites);
    const std::size_t d = (std::size_t)ctx.params.cfg.d_model;
    const int readout =
        ctx.obs.position < 0 ? (int)ctx.prompt_a.size() - 1 : ctx.obs.position;
    const double frac = ctx.cfg.sweep.epsilons.empty() ? 0.01 : ctx.cfg.sweep.epsilons[0];

    std::vector<PredictionRecord> records;
    Csv csv("layer,token,epsilon,dy_meas,dy_pred,e_abs,e_rel,regime");
    for (int i = 0; i < ctx.cfg.sweep.n_sites; ++i) {
        PatchSource patch;
        patch.site = {(int)rng.uniform_index((std::size_t)ctx.params.cfg.n_layers + 1),
                      (int)rng.uniform_index((std::size_t)readout + 1)};
        patch.direction = unit_vector(rng, d);
        const double rn = norm2(clean.residuals.row(patch.site.layer, patch.site.token));
        patch.epsilon = ctx.cfg.sweep.relative ? frac * rn : frac;
        PredictionRecord rec =
            prediction_record(ctx.params, ctx.prompt_a, a, patch, ctx.obs, ctx.cfg.thresholds.eps0);
        csv.row(rec.site.layer, rec.site.token, rec.epsilon, rec.dy_meas, rec.dy_pred, rec.e_abs,
                rec.e_rel, rec.regime);
        records.push_back(std::move(rec));
    }
    PredictionSummary sum = prediction_errors(records);

    RunOutput out;
    out.csv = csv.str();
    out.summary["n"] = sum.n;
    out.summary["n_good"] = sum.n_good;
    out.summary["n_low_signal"] = sum.n_low_signal;
    out.summary["n_nonlinear"] = sum.n_nonlinear;
    out.summary["n_mixed"] = sum.n_mixed;
    out.summary["median_e_rel"] = sum.median_e_rel;
    out.summary["p25_e_rel"] = sum.p25_e_rel;
    out.summary["p75_e_rel"] = sum.p75_e_rel;
    out.summary["median_e_abs"] = sum.median_e_abs;
    out.gate_ok = sum.n > sum.n_low_signal && sum.median_e_rel < 0.05;
    return out;
}

RunOutput run_field(const RunContext& ctx) {
    const std::size_t d = (std::size_t)ctx.params.cfg.d_model;
    RngStream rng = RngStream(ctx.cfg.seed).child(kKeyDirection);
    auto dir = unit_vector(rng, d);

    std::vector<Site> sources = ctx.cfg.sweep.sites;
    if (sources.empty()) {
        for (int l = 0; l <= ctx.params.cfg.n_layers; ++l) {
            for (int x = 0; x < (int)ctx.prompt_a.size(); ++x) sources.push_back({l, x});
        }
    }
    double epsilon = ctx.cfg.sweep.epsilons.empty() ? 0.05 : ctx.cfg.sweep.epsilons[0];
    if (ctx.cfg.sweep.relative) {
        ForwardResult clean = forward(ctx.params, ctx.prompt_a);
        double mean_rn = 0.0;
        for (const Site& s : sources) mean_rn += norm2(clean.residuals.row(s.layer, s.token));
        epsilon *= mean_rn / (double)sources.size();
    }
    RelativeResponseMap map = relative_response_map(ctx.params, ctx.prompt_a, sources, dir, epsilon);

    Csv csv("d_layer,d_token,mean_response_norm,count");
    for (int dl = 0; dl < map.n_dlayers; ++dl) {
        for (int dx = 0; dx < map.n_dtokens; ++dx) {
            csv.row(dl, dx, map.mean_at(dl, dx), map.count_at(dl, dx));
        }
    }
    RunOutput out;
    out.csv = csv.str();
    out.summary["epsilon"] = epsilon;
    out.summary["n_sources"] = sources.size();
    out.summary["origin_bin_mean"] = map.mean_at(0, 0);
    // the origin bin must hold exactly the injected amplitude
    out.gate_ok = std::abs(map.mean_at(0, 0) - std::abs(epsilon)) <= 1e-9 * std::abs(epsilon);
    return out;
}

RunOutput run_compose(const RunContext& ctx) {
    const Site site = ctx.cfg.sweep.sites.empty() ? Site{1, ctx.task.query_position()}
                                                  : ctx.cfg.sweep.sites[0];
    const int mid = ctx.cfg.sweep.layer_mid < 0 ? ctx.params.cfg.n_layers / 2
                                                : ctx.cfg.sweep.layer_mid;
    RngStream rng = RngStream(ctx.cfg.seed).child(kKeyDirection);
    PatchSource patch;
    patch.site = site;
    patch.direction = unit_vector(rng, (std::size_t)ctx.params.cfg.d_model);

    std::vector<double> eps = ctx.cfg.sweep.epsilons;
    if (eps.empty()) eps = {1e-1, 5e-2, 2.5e-2};
    CompositionReport lin = composition_test(ctx.params, ctx.prompt_a, patch, mid, eps, true,
                                             ctx.cfg.thresholds.eps0);
    CompositionReport meas = composition_test(ctx.params, ctx.prompt_a, patch, mid, eps, false,
                                              ctx.cfg.thresholds.eps0);

    Csv csv("epsilon,eta_comp_linearized,eta_comp_measured");
    for (std::size_t i = 0; i < eps.size(); ++i) csv.row(eps[i], lin.eta[i], meas.eta[i]);

    bool decay_ok = true;
    for (std::size_t i = 0; i + 1 < eps.size(); ++i) {
        if (std::abs(eps[i + 1] - 0.5 * eps[i]) < 1e-12 * std::abs(eps[i])) {
            decay_ok = decay_ok && lin.eta[i + 1] <= 0.6 * lin.eta[i];
        }
    }
    double meas_max = 0.0;
    for (double e : meas.eta) meas_max = std::max(meas_max, e);

    RunOutput out;
    out.csv = csv.str();
    out.summary["site"] = {site.layer, site.token};
    out.summary["layer_mid"] = mid;
    out.summary["first_order_decay_ok"] = decay_ok;
    out.summary["max_eta_measured"] = meas_max;
    out.gate_ok = decay_ok && meas_max < 1e-10;
    return out;
}

RunOutput run_sites(const RunContext& ctx) {
    SensitivityField a = sensitivity_field(ctx.params, ctx.prompt_a, ctx.obs);
    SiteScoreField s = site_scores(a);

    Csv csv("layer,token,score");
    Site best{0, 0};
    double best_score = -1.0;
    for (int l = 0; l < s.layers; ++l) {
        for (int x = 0; x < s.tokens; ++x) {
            csv.row(l, x, s.at(l, x));
            if (s.at(l, x) > best_score) {
                best_score = s.at(l, x);
                best = {l, x};
            }
        }
    }
    RunOutput out;
    out.csv = csv.str();
    out.summary["argmax_site"] = {best.layer, best.token};
    out.summary["argmax_score"] = best_score;
    out.summary["layer_marginal"] = s.layer_marginal;
    out.summary["token_marginal"] = s.token_marginal;
    out.gate_ok = best_score > 0.0;
    return out;
}

RunOutput run_green(const RunContext& ctx) {
    Site source = ctx.cfg.sweep.source;
    Site target = ctx.cfg.sweep.target;
    if (source.layer < 0) source = {1, ctx.task.query_position()};
    if (target.layer < 0) target = {ctx.params.cfg.n_layers, ctx.task.readout_position()};

    ForwardTrace tr = forward_trace(ctx.params, ctx.prompt_a);
    GreenSlice gj = green_slice(tr, source, target, true);
    GreenSlice gv = green_slice(tr, source, target, false);

    Csv csv("i,j,g_jvp,g_vjp");
    double max_diff = 0.0;
    const std::size_t d = (std::size_t)ctx.params.cfg.d_model;
    for (std::size_t i = 0; i < d; ++i) {
        for (std::size_t j = 0; j < d; ++j) {
            csv.row((int)i, (int)j, gj.g.at(i, j), gv.g.at(i, j));
            max_diff = std::max(max_diff, std::abs(gj.g.at(i, j) - gv.g.at(i, j)));
        }
    }
    ConcentrationReport conc = slice_concentration(gj);

    RunOutput out;
    out.csv = csv.str();
    out.summary["source"] = {source.layer, source.token};
    out.summary["target"] = {target.layer, target.token};
    out.summary["causal_zero"] = gj.causal_zero;
    out.summary["max_jvp_vjp_diff"] = max_diff;
    out.summary["k50"] = conc.k50;
    out.summary["k90"] = conc.k90;
    out.summary["k99"] = conc.k99;
    out.summary["degenerate"] = conc.degenerate;
    out.gate_ok = max_diff <= 1e-10;
    return out;
}

RunOutput run_displace(const RunContext& ctx) {
    const int last = ctx.task.readout_position();
    const int ans_a = ctx.task.answer_token(ctx.cfg.task.key_a);
    const int ans_b = ctx.task.answer_token(ctx.cfg.task.key_b);
    const double epsilon = ctx.cfg.sweep.epsilons.empty() ? 1.0 : ctx.cfg.sweep.epsilons[0];

    ForwardResult ra = forward(ctx.params, ctx.prompt_a);
    ForwardResult rb = forward(ctx.params, ctx.prompt_b);

    Csv csv("layer,toward_fraction,answer_rank_patched");
    std::vector<double> fracs;
    for (int l = 0; l <= ctx.params.cfg.n_layers; ++l) {
        const Site site{l, last};
        const double f = toward_fraction(ctx.params, ctx.prompt_a, ctx.prompt_b, site, epsilon,
                                         ans_a, ans_b, ctx.cfg.thresholds.eps0);
        PatchSource patch;
        patch.site = site;
        patch.direction = prompt_displacement(ra.residuals, rb.residuals, site);
        patch.epsilon = epsilon;
        ForwardResult patched = apply_patch(ctx.params, ctx.prompt_a, patch);
        const int rank = answer_rank(patched.logits, ans_b, last);
        csv.row(l, f, rank);
        fracs.push_back(f);
    }

    const int third = (int)fracs.size() / 3;
    std::vector<double> first(fracs.begin(), fracs.begin() + std::max(1, third));
    std::vector<double> lastv(fracs.end() - std::max(1, third), fracs.end());

    RunOutput out;
    out.csv = csv.str();
    out.summary["epsilon"] = epsilon;
    out.summary["toward_fraction_final"] = fracs.back();
    out.summary["median_first_third"] = median_of(first);
    out.summary["median_last_third"] = median_of(lastv);
    out.gate_ok = epsilon != 1.0 || std::abs(fracs.back() - 1.0) <= 1e-6;
    return out;
}

RunOutput run_infer(const RunContext& ctx) {
    SensitivityField a = sensitivity_field(ctx.params, ctx.prompt_a, ctx.obs);
    ForwardResult clean = forward(ctx.params, ctx.prompt_a);
    const int readout =
        ctx.obs.position < 0 ? (int)ctx.prompt_a.size() - 1 : ctx.obs.position;

    AdmissibleSet adm;
    adm.sites = ctx.cfg.sweep.sites;
    if (adm.sites.empty()) {
        for (int l = 0; l <= ctx.params.cfg.n_layers; ++l) {
            for (int x = 0; x <= readout; ++x) adm.sites.push_back({l, x});
        }
    }
    adm.k = ctx.cfg.sweep.k;
    validate_admissible(adm, ctx.params.cfg, ctx.prompt_a.size());

    double dy_star = ctx.cfg.sweep.dy_star;
    if (dy_star == 0.0) {
        SiteScoreField scores = site_scores(a);
        Site best{0, 0};
        double best_s = -1.0;
        for (const Site& s : adm.sites) {
            if (scores.at(s.layer, s.token) > best_s) {
                best_s = scores.at(s.layer, s.token);
                best = s;
            }
        }
        const double rn = norm2(clean.residuals.row(best.layer, best.token));
        dy_star = ctx.cfg.sweep.dy_star_rel * best_s * rn;
    }

    InferenceSolution sol = solve_scalar_target(a, adm, dy_star);
    AchievementReport rep = validate_solution(ctx.params, ctx.prompt_a, sol, ctx.obs, dy_star);

    Csv csv("layer,token,amplitude");
    for (const auto& s : sol.active) csv.row(s.site.layer, s.site.token, s.amplitude);

    RunOutput out;
    out.csv = csv.str();
    out.summary["dy_star"] = dy_star;
    out.summary["feasible"] = sol.feasible;
    out.summary["predicted_dy"] = sol.predicted_dy;
    out.summary["achieved_dy"] = rep.achieved_value;
    out.summary["achievement"] = rep.achievement;
    out.summary["rel_error"] = rep.rel_error;
    out.summary["in_band"] = rep.in_band;
    out.summary["source_norm"] = sol.source_norm;
    out.summary["k"] = adm.k;
    out.summary["n_active"] = sol.active.size();
    out.gate_ok = sol.feasible && rep.in_band && std::abs(rep.achievement - 1.0) <= 0.05;
    return out;
}

RunOutput run_transfer(const RunContext& ctx) {
    const int factor = ctx.cfg.sweep.factor;
    const Parameters& coarse = ctx.params;
    Parameters fine = refine_depth(coarse, factor);

    ProbeSet probes =
        make_probe_set(RngStream(ctx.cfg.seed).child(kKeyProbes).seed(),
                       (std::size_t)coarse.cfg.d_model, ctx.prompt_a.size(),
                       ctx.cfg.sweep.n_anchors, ctx.cfg.sweep.anchor_dirs);

    std::vector<Site> src_sites = ctx.cfg.sweep.sites;
    if (src_sites.empty()) {
        for (int l = 0; l <= coarse.cfg.n_layers; ++l) {
            for (int x = 0; x < (int)ctx.prompt_a.size(); ++x) src_sites.push_back({l, x});
        }
    }
    std::vector<Site> dst_sites;
    for (int l = 0; l <= fine.cfg.n_layers; ++l) {
        for (int x = 0; x < (int)ctx.prompt_a.size(); ++x) dst_sites.push_back({l, x});
    }

    FingerprintSet fs =
        response_fingerprints(coarse, ctx.prompt_a, src_sites, probes, ctx.cfg.sweep.rank);
    FingerprintSet fd =
        response_fingerprints(fine, ctx.prompt_a, dst_sites, probes, ctx.cfg.sweep.rank);
    TransferMap map = estimate_intertwiner(fs, fd, ctx.cfg.sweep.eps_s, ctx.cfg.sweep.lambda);
    transfer_map(map);

    Csv csv("source_layer,source_token,target_layer,target_token,score,unmapped");
    int mapped = 0, within = 0, identity = 0;
    for (std::size_t s = 0; s < src_sites.size(); ++s) {
        if (map.mapped_to[s] < 0) {
            csv.row(src_sites[s].layer, src_sites[s].token, -1, -1, 0.0, true);
            continue;
        }
        const Site t = map.target_sites[(std::size_t)map.mapped_to[s]];
        csv.row(src_sites[s].layer, src_sites[s].token, t.layer, t.token,
                map.p.at((std::size_t)map.mapped_to[s], s), false);
        ++mapped;
        if (std::abs(t.layer - factor * src_sites[s].layer) <= 1) ++within;
        if (t == src_sites[s]) ++identity;
    }

    RunOutput out;
    out.csv = csv.str();
    out.summary["factor"] = factor;
    out.summary["n_sources"] = src_sites.size();
    out.summary["n_mapped"] = mapped;
    out.summary["n_empty_windows"] = map.n_empty_windows;
    out.summary["fraction_within_one_layer"] = (double)within / (double)src_sites.size();
    if (factor == 1) out.summary["fraction_identity"] = (double)identity / (double)src_sites.size();
    out.extra_files.push_back({ctx.cfg.experiment + "_map.json", transfer_map_to_json(map)});
    out.gate_ok = factor == 1 ? identity * 100 >= (int)src_sites.size() * 95
                              : within * 100 >= (int)src_sites.size() * 80;
    return out;
}

void write_file(const std::filesystem::path& path, const std::string& content) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw io_error("cannot open output file " + path.string());
    f.write(content.data(), (std::streamsize)content.size());
    if (!f) throw io_error("failed writing output file " + path.string());
}

} // namespace

ExperimentConfig config_from_json_text(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw config_error(std::string("config parse error: ") + e.what());
    }
    return parse_config(j);
}

std::string config_to_json_text(const ExperimentConfig& c) { return config_json(c).dump(2); }

Diagnostics validate_config_text(const std::string& text) {
    Diagnostics d;
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        d.errors.push_back(std::string("parse error: ") + e.what());
        return d;
    }
    ExperimentConfig c;
    try {
        c = parse_config(j);
    } catch (const error& e) {
        d.errors.push_back(e.what());
        return d;
    }
    if (c.experiment == "linearity" && !c.sweep.epsilons.empty()) {
        bool pos = false, neg = false;
        for (double e : c.sweep.epsilons) {
            pos = pos || e > 0.0;
            neg = neg || e < 0.0;
        }
        if (!pos || !neg) {
            d.warnings.push_back(
                "linearity epsilon grid does not cover both signs; band fit degraded");
        }
    }
    if (c.experiment == "displace" && c.task.key_a == c.task.key_b) {
        d.warnings.push_back("displace with key_a == key_b measures a zero displacement");
    }
    if (!c.checkpoint.empty() && !std::filesystem::exists(c.checkpoint)) {
        d.warnings.push_back("checkpoint file does not exist yet: " + c.checkpoint);
    }
    return d;
}

Diagnostics validate_config_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) {
        Diagnostics d;
        d.errors.push_back("cannot read config file " + path);
        return d;
    }
    std::stringstream ss;
    ss << f.rdbuf();
    return validate_config_text(ss.str());
}

ExperimentConfig load_config_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw io_error("cannot read config file " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return config_from_json_text(ss.str());
}

int run_experiment(const ExperimentConfig& c) {
    if (!kExperiments.count(c.experiment)) {
        throw config_error("unknown experiment id '" + c.experiment + "'");
    }
    RunContext ctx = make_context(c);

    RunOutput out;
    if (c.experiment == "linearity") out = run_linearity(ctx);
    else if (c.experiment == "predict") out = run_predict(ctx);
    else if (c.experiment == "field") out = run_field(ctx);
    else if (c.experiment == "compose") out = run_compose(ctx);
    else if (c.experiment == "sites") out = run_sites(ctx);
    else if (c.experiment == "green") out = run_green(ctx);
    else if (c.experiment == "displace") out = run_displace(ctx);
    else if (c.experiment == "infer") out = run_infer(ctx);
    else out = run_transfer(ctx);

    const std::string echo = config_to_json_text(c);
    // the hash covers everything that affects file contents; the output
    // destination and gate mode are excluded so moved reruns hash alike
    ExperimentConfig canon = c;
    canon.out_dir = "out";
    canon.gate = false;
    const std::uint64_t hash = fnv1a(config_to_json_text(canon));
    ojson meta;
    meta["version"] = kHarnessVersion;
    meta["experiment"] = c.experiment;
    meta["master_seed"] = c.seed;
    meta["config_hash"] = hash;
    meta["config"] = ojson::parse(echo);
    meta["rng_children"] = {{"direction", kKeyDirection},
                            {"direction2", kKeyDirection2},
                            {"sites", kKeySites},
                            {"probes", kKeyProbes},
                            {"trainer", kKeyTrainer}};
    if (c.task.train_steps > 0) {
        meta["training"] = {{"steps_run", ctx.train_report.steps_run},
                            {"final_loss", ctx.train_report.final_loss},
                            {"final_accuracy", ctx.train_report.final_accuracy}};
    }

    out.summary["version"] = kHarnessVersion;
    out.summary["experiment"] = c.experiment;
    out.summary["master_seed"] = c.seed;
    out.summary["config_hash"] = hash;
    out.summary["gate_ok"] = out.gate_ok;

    std::filesystem::create_directories(c.out_dir);
    const std::filesystem::path dir(c.out_dir);
    write_file(dir / (c.experiment + ".csv"), out.csv);
    write_file(dir / (c.experiment + "_metadata.json"), meta.dump(2) + "\n");
    write_file(dir / (c.experiment + "_summary.json"), out.summary.dump(2) + "\n");
    for (const auto& [name, content] : out.extra_files) write_file(dir / name, content);

    return (c.gate && !out.gate_ok) ? 3 : 0;
}

int run_training(const ExperimentConfig& c, const std::string& checkpoint_out) {
    if (c.task.train_steps <= 0) throw config_error("training requires task.train_steps > 0");
    RunContext ctx = make_context(c); // trains inside
    const auto parent = std::filesystem::path(checkpoint_out).parent_path();
    if (!parent.empty()) std::filesystem::create_directories(parent);
    save_checkpoint(checkpoint_out, ctx.params);

    ojson report;
    report["version"] = kHarnessVersion;
    report["checkpoint"] = checkpoint_out;
    report["steps_run"] = ctx.train_report.steps_run;
    report["final_loss"] = ctx.train_report.final_loss;
    report["final_accuracy"] = ctx.train_report.final_accuracy;
    std::filesystem::create_directories(c.out_dir);
    write_file(std::filesystem::path(c.out_dir) / "train_summary.json", report.dump(2) + "\n");

    return (c.gate && ctx.train_report.final_accuracy < 0.99) ? 3 : 0;
}

} // namespace rf

#include "rf/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace rf {

namespace {

double median_of(std::vector<double> v) {
    if (v.empty()) return 0.0;
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

double quantile_of(std::vector<double> v, double q) {
    if (v.empty()) return 0.0;
    std::sort(v.begin(), v.end());
    const double idx = q * (v.size() - 1);
    const std::size_t lo = static_cast<std::size_t>(idx);
    const std::size_t hi = std::min(lo + 1, v.size() - 1);
    const double w = idx - lo;
    return v[lo] * (1.0 - w) + v[hi] * w;
}

// Through-origin least squares over the band points.
void fit_slope(LinearityReport& rep, const LinearityBand& band) {
    double eps_max = 0.0;
    for (double e : rep.epsilons) eps_max = std::max(eps_max, std::abs(e));
    if (eps_max == 0.0) throw config_error("epsilon grid must contain non-zero amplitudes");

    double sxy = 0.0, sxx = 0.0;
    int n_band = 0;
    rep.in_band.resize(rep.epsilons.size());
    for (std::size_t i = 0; i < rep.epsilons.size(); ++i) {
        const double ae = std::abs(rep.epsilons[i]);
        const bool in = ae >= band.lo * eps_max && ae <= band.hi * eps_max;
        rep.in_band[i] = in;
        if (in) {
            sxy += rep.epsilons[i] * rep.dy[i];
            sxx += rep.epsilons[i] * rep.epsilons[i];
            ++n_band;
        }
    }
    if (n_band < 2) {
        throw config_error("slope band contains fewer than two epsilon grid points");
    }
    rep.slope = sxy / sxx;
    // degenerate when even the largest amplitude would predict below the floor
    rep.slope_ok = std::abs(rep.slope) * eps_max > rep.eps0;

    rep.eta_nl.resize(rep.epsilons.size());
    for (std::size_t i = 0; i < rep.epsilons.size(); ++i) {
        const double denom = std::abs(rep.epsilons[i] * rep.slope);
        rep.eta_nl[i] = rep.slope_ok && denom > 0.0
                            ? std::abs(rep.dy[i] - rep.epsilons[i] * rep.slope) / denom
                            : std::numeric_limits<double>::quiet_NaN();
    }
}

} // namespace

LinearityReport linearity_sweep(const Parameters& p, std::span<const int> tokens,
                                const PatchSource& patch, std::span<const double> epsilons,
                                const Observable& obs, LinearityBand band, double tau,
                                double eps0) {
    validate_patch(p.cfg, tokens.size(), patch);
    validate_observable(p.cfg, tokens.size(), obs);
    if (epsilons.empty()) throw config_error("linearity sweep needs a non-empty epsilon grid");

    ForwardResult clean = forward(p, tokens);
    const double y0 = observable_value(p, clean, obs);

    LinearityReport rep;
    rep.site = patch.site;
    rep.tau = tau;
    rep.eps0 = eps0;
    rep.epsilons.assign(epsilons.begin(), epsilons.end());
    for (double eps : rep.epsilons) {
        PatchSource q = patch;
        q.epsilon = eps;
        ForwardResult r = forward(p, tokens, lower_patch(q, tokens.size(), p.cfg.d_model));
        rep.dy.push_back(observable_value(p, r, obs) - y0);
    }
    fit_slope(rep, band);
    return rep;
}

LinearityReport superposition_sweep(const Parameters& p, std::span<const int> tokens,
                                    const PatchSource& j1, const PatchSource& j2,
                                    std::span<const double> epsilons, const Observable& obs,
                                    LinearityBand band, double tau, double eps0) {
    validate_patch(p.cfg, tokens.size(), j1);
    validate_patch(p.cfg, tokens.size(), j2);
    validate_observable(p.cfg, tokens.size(), obs);
    if (!(j1.site == j2.site)) throw config_error("superposition patches must share the site");
    if (epsilons.empty()) throw config_error("superposition sweep needs a non-empty epsilon grid");

    const std::size_t d = p.cfg.d_model;
    PatchSource j12 = j1;
    const auto pj1 = projected_direction(j1, d);
    const auto pj2 = projected_direction(j2, d);
    j12.projection.clear();
    j12.direction.resize(d);
    for (std::size_t i = 0; i < d; ++i) j12.direction[i] = pj1[i] + pj2[i];

    ForwardResult clean = forward(p, tokens);
    const double y0 = observable_value(p, clean, obs);
    auto sweep_dy = [&](const PatchSource& base, double eps) {
        PatchSource q = base;
        q.epsilon = eps;
        ForwardResult r = forward(p, tokens, lower_patch(q, tokens.size(), d));
        return observable_value(p, r, obs) - y0;
    };

    LinearityReport rep;
    rep.site = j1.site;
    rep.tau = tau;
    rep.eps0 = eps0;
    rep.epsilons.assign(epsilons.begin(), epsilons.end());
    for (double eps : rep.epsilons) {
        rep.dy.push_back(sweep_dy(j1, eps));
        rep.dy2.push_back(sweep_dy(j2, eps));
        rep.dy12.push_back(sweep_dy(j12, eps));
    }
    fit_slope(rep, band);
    rep.eta_sup.resize(rep.epsilons.size());
    for (std::size_t i = 0; i < rep.epsilons.size(); ++i) {
        const double denom = std::max(std::abs(rep.dy[i]) + std::abs(rep.dy2[i]), eps0);
        rep.eta_sup[i] = std::abs(rep.dy12[i] - rep.dy[i] - rep.dy2[i]) / denom;
    }
    return rep;
}

double predict_dy(const SensitivityField& a, const PatchSource& patch) {
    if (patch.site.layer < 0 || patch.site.layer >= static_cast<int>(a.layers) ||
        patch.site.token < 0 || patch.site.token >= static_cast<int>(a.tokens)) {
        throw config_error("patch site outside the sensitivity field grid");
    }
    if (patch.direction.size() != a.dim) {
        throw config_error("patch direction does not match the sensitivity field dimension");
    }
    const auto pj = projected_direction(patch, a.dim);
    double dy = 0.0;
    // an interval source is predicted by summing the per-slice first-order terms
    for (int l = patch.first_layer(); l <= patch.last_layer(); ++l) {
        if (l >= static_cast<int>(a.layers)) {
            throw config_error("patch interval outside the sensitivity field grid");
        }
        dy += patch.epsilon * dot(a.row(l, patch.site.token), pj);
    }
    return dy;
}

PredictionRecord prediction_record(const Parameters& p, std::span<const int> tokens,
                                   const SensitivityField& a, const PatchSource& patch,
                                   const Observable& obs, double eps0) {
    PredictionRecord rec;
    rec.site = patch.site;
    rec.epsilon = patch.epsilon;
    rec.dy_meas = measure_dy(p, tokens, patch, obs);
    rec.dy_pred = predict_dy(a, patch);
    rec.e_abs = std::abs(rec.dy_meas - rec.dy_pred);
    rec.e_rel = rec.e_abs / std::max(std::abs(rec.dy_meas), eps0);
    if (std::abs(rec.dy_meas) <= 10.0 * eps0) {
        rec.regime = "low-signal";
    } else if (rec.e_rel < 0.1) {
        rec.regime = "good";
    } else if (rec.e_rel >= 0.5) {
        rec.regime = "nonlinear";
    } else {
        rec.regime = "mixed";
    }
    return rec;
}

PredictionSummary prediction_errors(std::span<const PredictionRecord> records) {
    PredictionSummary s;
    s.n = static_cast<int>(records.size());
    std::vector<double> rels, abss;
    for (const auto& r : records) {
        if (r.regime == "good") ++s.n_good;
        else if (r.regime == "low-signal") ++s.n_low_signal;
        else if (r.regime == "nonlinear") ++s.n_nonlinear;
        else ++s.n_mixed;
        abss.push_back(r.e_abs);
        if (r.regime != "low-signal") rels.push_back(r.e_rel);
    }
    s.median_e_rel = median_of(rels);
    s.p25_e_rel = quantile_of(rels, 0.25);
    s.p75_e_rel = quantile_of(rels, 0.75);
    s.median_e_abs = median_of(abss);
    return s;
}

SiteScoreField site_scores(const SensitivityField& a) {
    SiteScoreField f;
    f.layers = static_cast<int>(a.layers);
    f.tokens = static_cast<int>(a.tokens);
    f.score.assign(a.layers * a.tokens, 0.0);
    f.layer_marginal.assign(a.layers, 0.0);
    f.token_marginal.assign(a.tokens, 0.0);
    for (std::size_t l = 0; l < a.layers; ++l) {
        for (std::size_t x = 0; x < a.tokens; ++x) {
            const double s = norm2(a.row(l, x));
            f.score[l * a.tokens + x] = s;
            f.layer_marginal[l] += s;
            f.token_marginal[x] += s;
        }
    }
    return f;
}

GreenSlice green_slice(const ForwardTrace& t, Site source, Site target, bool use_jvp) {
    const Parameters& p = *t.params;
    const std::size_t d = p.cfg.d_model;
    validate_site(p.cfg, t.tokens.size(), source);
    validate_site(p.cfg, t.tokens.size(), target);

    GreenSlice gs;
    gs.source = source;
    gs.target = target;
    gs.g = Tensor({d, d});
    if (target.layer < source.layer || target.token < source.token) {
        gs.causal_zero = true;
        return gs;
    }
    if (use_jvp) {
        std::vector<double> e(d, 0.0);
        for (std::size_t j = 0; j < d; ++j) {
            e[j] = 1.0;
            TangentField tan = jvp_residual(t, source, e);
            e[j] = 0.0;
            auto row = tan.row(target.layer, target.token);
            for (std::size_t i = 0; i < d; ++i) gs.g.at(i, j) = row[i];
        }
    } else {
        for (std::size_t i = 0; i < d; ++i) {
            SensitivityField grad = vjp_component(t, target, static_cast<int>(i));
            auto row = grad.row(source.layer, source.token);
            for (std::size_t j = 0; j < d; ++j) gs.g.at(i, j) = row[j];
        }
    }
    return gs;
}

ConcentrationReport slice_concentration(const GreenSlice& slice) {
    ConcentrationReport rep;
    std::vector<double> sq(slice.g.numel());
    for (std::size_t e = 0; e < sq.size(); ++e) {
        sq[e] = slice.g.data[e] * slice.g.data[e];
        rep.total_sq += sq[e];
    }
    if (rep.total_sq <= 0.0) {
        rep.degenerate = true;
        return rep;
    }
    std::sort(sq.begin(), sq.end(), std::greater<double>());
    double cum = 0.0;
    int k = 0;
    for (double v : sq) {
        cum += v;
        ++k;
        if (rep.k50 == 0 && cum >= 0.5 * rep.total_sq) rep.k50 = k;
        if (rep.k90 == 0 && cum >= 0.9 * rep.total_sq) rep.k90 = k;
        if (rep.k99 == 0 && cum >= 0.99 * rep.total_sq) rep.k99 = k;
    }
    if (rep.k99 == 0) rep.k99 = k; // fp guard: cum may land a hair under the target
    if (rep.k90 == 0) rep.k90 = rep.k99;
    if (rep.k50 == 0) rep.k50 = rep.k90;
    return rep;
}

std::vector<double> prompt_displacement(const ResidualField& run_a, const ResidualField& run_b,
                                        Site site) {
    if (run_a.layers != run_b.layers || run_a.tokens != run_b.tokens || run_a.dim != run_b.dim) {
        throw config_error("prompt runs have mismatched residual grids");
    }
    if (site.layer < 0 || site.layer >= static_cast<int>(run_a.layers) || site.token < 0 ||
        site.token >= static_cast<int>(run_a.tokens)) {
        throw config_error("displacement site outside the residual grid");
    }
    auto ra = run_a.row(site.layer, site.token);
    auto rb = run_b.row(site.layer, site.token);
    std::vector<double> j(run_a.dim);
    for (std::size_t i = 0; i < j.size(); ++i) j[i] = rb[i] - ra[i];
    return j;
}

double toward_fraction(const Parameters& p, std::span<const int> tokens_a,
                       std::span<const int> tokens_b, Site site, double epsilon, int ans_a,
                       int ans_b, double eps0) {
    if (tokens_a.size() != tokens_b.size()) {
        throw config_error("prompt pair must have equal length");
    }
    Observable obs{ans_b, ans_a, -1, false}; // y = logit(B answer) - logit(A answer)
    validate_observable(p.cfg, tokens_a.size(), obs);

    ForwardResult run_a = forward(p, tokens_a);
    ForwardResult run_b = forward(p, tokens_b);
    const double delta_ab =
        observable_value(p, run_b, obs) - observable_value(p, run_a, obs);

    PatchSource patch;
    patch.site = site;
    patch.direction = prompt_displacement(run_a.residuals, run_b.residuals, site);
    patch.epsilon = epsilon;
    ForwardResult patched = forward(p, tokens_a, lower_patch(patch, tokens_a.size(), p.cfg.d_model));
    const double dy = observable_value(p, patched, obs) - observable_value(p, run_a, obs);

    const double sign = delta_ab >= 0.0 ? 1.0 : -1.0;
    return dy / (sign * std::max(std::abs(delta_ab), eps0));
}

std::vector<double> direction_angles(std::span<const double> j,
                                     const std::vector<std::vector<double>>& refs) {
    const double nj = norm2(j);
    std::vector<double> out;
    out.reserve(refs.size());
    for (const auto& r : refs) {
        if (r.size() != j.size()) throw config_error("reference direction has wrong dimension");
        const double nr = norm2(r);
        if (nj == 0.0 || nr == 0.0) {
            out.push_back(std::numeric_limits<double>::quiet_NaN()); // degenerate, flagged
            continue;
        }
        double c = dot(j, r) / (nj * nr);
        c = std::clamp(c, -1.0, 1.0);
        out.push_back(std::acos(c) * 180.0 / M_PI);
    }
    return out;
}

int answer_rank(const Tensor& logits, int token, int position) {
    const std::size_t n = logits.rows();
    const std::size_t V = logits.cols();
    if (token < 0 || static_cast<std::size_t>(token) >= V) {
        throw config_error("rank token outside vocab");
    }
    const std::size_t x = position < 0 ? n - 1 : static_cast<std::size_t>(position);
    if (x >= n) throw config_error("rank position out of range");
    const double lt = logits.at(x, token);
    int rank = 1;
    for (std::size_t v = 0; v < V; ++v) {
        const double lv = logits.at(x, v);
        if (lv > lt || (lv == lt && static_cast<int>(v) < token)) ++rank;
    }
    return rank;
}

} // namespace rf

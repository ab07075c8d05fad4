#pragma once

#include <string>
#include <vector>

#include "rf/intervention.hpp"

namespace rf {

// ---- linearity / superposition -----------------------------------------------

// Slope-fit band: epsilons with |eps| in [lo, hi] * max|eps| enter the
// through-origin least-squares slope estimate.
struct LinearityBand {
    double lo = 0.02;
    double hi = 0.10;
};

struct LinearityReport {
    Site site;
    std::vector<double> epsilons;
    std::vector<double> dy;          // measured dy for J (J1 in superposition runs)
    std::vector<double> dy2;         // superposition runs only
    std::vector<double> dy12;        //   "
    double slope = 0.0;              // estimated dy'(0)
    bool slope_ok = false;           // false when the fitted slope is numerically degenerate
    std::vector<double> eta_nl;      // |dy - eps*slope| / |eps*slope|; NaN when degenerate
    std::vector<double> eta_sup;     // superposition runs only
    std::vector<bool> in_band;       // epsilon used for the slope fit
    double tau = 0.2;                // perturbative threshold, echoed into reports
    double eps0 = 1e-8;
};

LinearityReport linearity_sweep(const Parameters& p, std::span<const int> tokens,
                                const PatchSource& patch, std::span<const double> epsilons,
                                const Observable& obs, LinearityBand band = {},
                                double tau = 0.2, double eps0 = 1e-8);

// Same sweep with two directions injected separately and jointly; J1+J2 is
// injected without renormalization. Patches must share the site.
LinearityReport superposition_sweep(const Parameters& p, std::span<const int> tokens,
                                    const PatchSource& j1, const PatchSource& j2,
                                    std::span<const double> epsilons, const Observable& obs,
                                    LinearityBand band = {}, double tau = 0.2,
                                    double eps0 = 1e-8);

// ---- first-order prediction ---------------------------------------------------

// dy_pred = eps * <a(site), P(J)> (Green/sensitivity prediction of a patch).
double predict_dy(const SensitivityField& a, const PatchSource& patch);

struct PredictionRecord {
    Site site;
    double epsilon = 0.0;
    double dy_meas = 0.0;
    double dy_pred = 0.0;
    double e_abs = 0.0;
    double e_rel = 0.0;
    std::string regime; // "good" | "low-signal" | "nonlinear" | "mixed"
};

// Measures the patch, predicts it from the sensitivity field, and classifies:
// low-signal when |dy_meas| <= 10*eps0, good when E_rel < 0.1, nonlinear when
// E_rel >= 0.5, mixed otherwise.
PredictionRecord prediction_record(const Parameters& p, std::span<const int> tokens,
                                   const SensitivityField& a, const PatchSource& patch,
                                   const Observable& obs, double eps0 = 1e-8);

struct PredictionSummary {
    int n = 0;
    int n_good = 0, n_low_signal = 0, n_nonlinear = 0, n_mixed = 0;
    double median_e_rel = 0.0;  // over records that are not low-signal
    double p25_e_rel = 0.0, p75_e_rel = 0.0;
    double median_e_abs = 0.0;  // over all records
};

PredictionSummary prediction_errors(std::span<const PredictionRecord> records);

// ---- site scores --------------------------------------------------------------

struct SiteScoreField {
    int layers = 0, tokens = 0;
    std::vector<double> score;           // s(l, x) = ||a(l, x)||_2
    std::vector<double> layer_marginal;  // sum over tokens
    std::vector<double> token_marginal;  // sum over layers

    double at(int l, int x) const { return score[l * tokens + x]; }
};

SiteScoreField site_scores(const SensitivityField& a);

// ---- sliced Green operators ---------------------------------------------------

// G[i][j] = d R_target,i / d R_source,j as a dense [d x d] matrix. When the
// target precedes the source in the causal order the slice is identically
// zero and causal_zero is set (nothing is computed).
struct GreenSlice {
    Site source, target;
    Tensor g; // [d x d]
    bool causal_zero = false;
};

GreenSlice green_slice(const ForwardTrace& t, Site source, Site target, bool use_jvp);

struct ConcentrationReport {
    double total_sq = 0.0;
    int k50 = 0, k90 = 0, k99 = 0; // entries needed for 50/90/99% of sum g^2
    bool degenerate = false;       // all-zero slice
};

ConcentrationReport slice_concentration(const GreenSlice& slice);

// ---- prompt displacement ------------------------------------------------------

// J_{A->B}(site) = R_B(site) - R_A(site); runs must share the grid shape.
std::vector<double> prompt_displacement(const ResidualField& run_a, const ResidualField& run_b,
                                        Site site);

// Toward fraction f_{A->B}(eps) (Eq. above): patched shift of the A run
// normalized by the clean A->B observable shift.
double toward_fraction(const Parameters& p, std::span<const int> tokens_a,
                       std::span<const int> tokens_b, Site site, double epsilon, int ans_a,
                       int ans_b, double eps0 = 1e-8);

// Angles (degrees) between J and each reference direction; NaN for
// degenerate (zero) vectors.
std::vector<double> direction_angles(std::span<const double> j,
                                     const std::vector<std::vector<double>>& refs);

// Rank of `token` among logits at `position` (1 = top). Ties are broken by
// token id: equal-logit tokens with smaller id rank ahead.
int answer_rank(const Tensor& logits, int token, int position);

} // namespace rf

#pragma once
// Constrained inverse patching in the linear regime: given a desired scalar
// observable shift (or a desired residual change on declared slices), find a
// source on an admissible support that realizes it.  Two costs only: plain
// Euclidean norm (closed form) and norm + hard sparsity (greedy pursuit).

#include <span>
#include <vector>

#include "rf/autodiff.hpp"
#include "rf/model.hpp"
#include "rf/tensor.hpp"

namespace rf {

struct AdmissibleSet {
    std::vector<Site> sites;
    // optional per-site direction subspace, rows orthonormal in R^d.
    // empty vector = identity subspace at every site.
    std::vector<Tensor> bases;
    int k = 0;             // sparsity budget (max active sites); 0 = unlimited
    double max_norm = 0.0; // cap on the total source norm; 0 = unlimited
};

struct ActiveSource {
    Site site;
    std::vector<double> direction; // unit vector
    double amplitude = 0.0;
};

struct InferenceSolution {
    std::vector<ActiveSource> active;
    double predicted_dy = 0.0;  // scalar solver: the realized linear-model shift
    double fit_residual = 0.0;  // residual solver: ||A c - target||_2
    double source_norm = 0.0;   // Euclidean norm of the summed per-site sources
    bool feasible = true;       // false when every projected sensitivity vanishes
    bool norm_capped = false;   // minimal-norm source already exceeds max_norm
    bool rank_deficient = false;
};

// an atom is a candidate unit source at a fixed site
struct Atom {
    Site site;
    std::vector<double> direction;
};

struct AchievementReport {
    double target_value = 0.0;
    double achieved_value = 0.0;
    double achievement = 0.0; // achieved projected onto the target, floored
    double rel_error = 0.0;
    bool in_band = true; // all amplitudes within band_frac of the local ||R||
    double eps0 = 1e-8;
};

void validate_admissible(const AdmissibleSet& c, const ModelConfig& cfg, std::size_t n_tokens);

// minimal-norm source realizing dy* through the first-order response model:
// per site J_s proportional to the subspace-projected sensitivity, scaled so
// sum_s <a_s, J_s> = dy*.  With k > 0 the support is first restricted to the
// top-k sites by projected ||a|| (ties to lower layer, then lower token).
InferenceSolution solve_scalar_target(const SensitivityField& a, const AdmissibleSet& c,
                                      double dy_star);

// expand the admissible set into unit atoms: subspace rows where a basis is
// given, standard basis components otherwise (guarded against blow-up).
std::vector<Atom> basis_atoms(const AdmissibleSet& c, std::size_t d);
// one atom per site along the projected sensitivity direction
std::vector<Atom> sensitivity_atoms(const SensitivityField& a, const AdmissibleSet& c);

// forward-mode probe of every atom: column j is the concatenated response of
// atom j on the declared readout slices.  shape [slices.size()*d, atoms.size()]
Tensor probe_atom_columns(const ForwardTrace& trace, const std::vector<Atom>& atoms,
                          const std::vector<Site>& slices);

// ridge least squares over atom coefficients (lambda_reg < 0 picks the default
// 1e-6 relative to the largest Gram eigenvalue; 0 = exact minimal-norm LS).
// k > 0 switches to orthogonal matching pursuit over distinct sites.
InferenceSolution solve_residual_target(const Tensor& columns, const std::vector<Atom>& atoms,
                                        std::span<const double> target, int k, double lambda_reg,
                                        double max_norm = 0.0);

// apply a solution as real per-layer additions
std::vector<LayerDelta> lower_solution(const InferenceSolution& sol, std::size_t n_tokens,
                                       std::size_t d);

// patch for real and compare against the requested shift
AchievementReport validate_solution(const Parameters& p, std::span<const int> tokens,
                                    const InferenceSolution& sol, const Observable& obs,
                                    double dy_star, double band_frac = 0.1);
AchievementReport validate_solution_residual(const Parameters& p, std::span<const int> tokens,
                                             const InferenceSolution& sol,
                                             const std::vector<Site>& slices,
                                             std::span<const double> target,
                                             double band_frac = 0.1);

} // namespace rf

#include "rf/inference.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <exception>
#include <map>
#include <tuple>

#include <Eigen/Dense>

#include "rf/errors.hpp"

namespace rf {

namespace {

constexpr std::size_t kMaxAtoms = 4096;

void check_basis(const Tensor& b, std::size_t d, std::size_t site_idx) {
    if (b.shape.size() != 2 || b.shape[1] != d || b.shape[0] == 0 || b.shape[0] > d) {
        throw config_error("admissible basis at site " + std::to_string(site_idx) +
                           " has bad shape");
    }
    const std::size_t r = b.shape[0];
    for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = i; j < r; ++j) {
            const double g = dot(b.row(i), b.row(j));
            const double want = (i == j) ? 1.0 : 0.0;
            if (std::abs(g - want) > 1e-10) {
                throw config_error("admissible basis at site " + std::to_string(site_idx) +
                                   " is not orthonormal");
            }
        }
    }
}

// projection of v onto the site subspace (identity when no basis is given)
std::vector<double> project_row(std::span<const double> v, const Tensor* basis) {
    std::vector<double> out(v.begin(), v.end());
    if (!basis || basis->numel() == 0) return out;
    std::fill(out.begin(), out.end(), 0.0);
    for (std::size_t r = 0; r < basis->shape[0]; ++r) {
        const auto b = basis->row(r);
        const double c = dot(b, v);
        for (std::size_t i = 0; i < v.size(); ++i) out[i] += c * b[i];
    }
    return out;
}

bool site_before(Site a, Site b) {
    return std::tie(a.layer, a.token) < std::tie(b.layer, b.token);
}

double solution_norm(const std::vector<ActiveSource>& active, std::size_t d) {
    // sum per-site vectors first: atoms sharing a site are not assumed orthogonal
    std::map<std::pair<int, int>, std::vector<double>> per_site;
    for (const auto& s : active) {
        auto& j = per_site[{s.site.layer, s.site.token}];
        if (j.empty()) j.assign(d, 0.0);
        for (std::size_t i = 0; i < d; ++i) j[i] += s.amplitude * s.direction[i];
    }
    double n2 = 0.0;
    for (const auto& [key, j] : per_site) n2 += dot(j, j);
    return std::sqrt(n2);
}

} // namespace

void validate_admissible(const AdmissibleSet& c, const ModelConfig& cfg, std::size_t n_tokens) {
    if (c.sites.empty()) throw config_error("admissible set has no sites");
    for (const Site& s : c.sites) validate_site(cfg, n_tokens, s);
    if (!c.bases.empty() && c.bases.size() != c.sites.size()) {
        throw config_error("admissible bases must be absent or one per site");
    }
    for (std::size_t i = 0; i < c.bases.size(); ++i) {
        if (c.bases[i].numel() != 0) check_basis(c.bases[i], (std::size_t)cfg.d_model, i);
    }
    if (c.k < 0) throw config_error("sparsity budget must be non-negative");
    if (c.max_norm < 0.0) throw config_error("max source norm must be non-negative");
}

InferenceSolution solve_scalar_target(const SensitivityField& a, const AdmissibleSet& c,
                                      double dy_star) {
    if (c.sites.empty()) throw config_error("admissible set has no sites");
    if (!c.bases.empty() && c.bases.size() != c.sites.size()) {
        throw config_error("admissible bases must be absent or one per site");
    }
    const std::size_t d = a.dim;
    struct Cand {
        Site site;
        std::vector<double> proj;
        double norm;
    };
    std::vector<Cand> cands;
    for (std::size_t i = 0; i < c.sites.size(); ++i) {
        const Site s = c.sites[i];
        if (s.layer < 0 || s.layer >= (int)a.layers || s.token < 0 || s.token >= (int)a.tokens) {
            throw config_error("admissible site outside the sensitivity grid");
        }
        const Tensor* basis = c.bases.empty() ? nullptr : &c.bases[i];
        if (basis && basis->numel() != 0) check_basis(*basis, d, i);
        auto proj = project_row(a.row(s.layer, s.token), basis);
        cands.push_back({s, std::move(proj), 0.0});
        cands.back().norm = std::sqrt(dot(cands.back().proj, cands.back().proj));
    }

    // greedy support restriction: top-k by projected sensitivity norm
    std::sort(cands.begin(), cands.end(), [](const Cand& x, const Cand& y) {
        if (x.norm != y.norm) return x.norm > y.norm;
        return site_before(x.site, y.site);
    });
    std::size_t keep = cands.size();
    if (c.k > 0) keep = std::min<std::size_t>(keep, (std::size_t)c.k);

    double sum_n2 = 0.0;
    for (std::size_t i = 0; i < keep; ++i) sum_n2 += cands[i].norm * cands[i].norm;

    InferenceSolution sol;
    if (sum_n2 == 0.0) {
        sol.feasible = false;
        return sol;
    }
    const double mu = dy_star / sum_n2;
    double predicted = 0.0;
    for (std::size_t i = 0; i < keep; ++i) {
        if (cands[i].norm == 0.0) continue;
        ActiveSource s;
        s.site = cands[i].site;
        s.direction.resize(d);
        for (std::size_t j = 0; j < d; ++j) s.direction[j] = cands[i].proj[j] / cands[i].norm;
        s.amplitude = mu * cands[i].norm;
        predicted += s.amplitude * cands[i].norm; // <a, J> restricted to the subspace
        sol.active.push_back(std::move(s));
    }
    std::sort(sol.active.begin(), sol.active.end(),
              [](const ActiveSource& x, const ActiveSource& y) { return site_before(x.site, y.site); });
    sol.predicted_dy = predicted;
    sol.source_norm = solution_norm(sol.active, d);
    sol.norm_capped = c.max_norm > 0.0 && sol.source_norm > c.max_norm;
    return sol;
}

std::vector<Atom> basis_atoms(const AdmissibleSet& c, std::size_t d) {
    if (c.sites.empty()) throw config_error("admissible set has no sites");
    if (!c.bases.empty() && c.bases.size() != c.sites.size()) {
        throw config_error("admissible bases must be absent or one per site");
    }
    std::size_t total = 0;
    for (std::size_t i = 0; i < c.sites.size(); ++i) {
        const Tensor* basis = c.bases.empty() ? nullptr : &c.bases[i];
        total += (basis && basis->numel() != 0) ? basis->shape[0] : d;
    }
    if (total > kMaxAtoms) {
        throw config_error("admissible set expands to " + std::to_string(total) +
                           " atoms; restrict sites or give per-site bases");
    }
    std::vector<Atom> atoms;
    atoms.reserve(total);
    for (std::size_t i = 0; i < c.sites.size(); ++i) {
        const Tensor* basis = c.bases.empty() ? nullptr : &c.bases[i];
        if (basis && basis->numel() != 0) {
            check_basis(*basis, d, i);
            for (std::size_t r = 0; r < basis->shape[0]; ++r) {
                const auto b = basis->row(r);
                atoms.push_back({c.sites[i], {b.begin(), b.end()}});
            }
        } else {
            for (std::size_t j = 0; j < d; ++j) {
                Atom a{c.sites[i], std::vector<double>(d, 0.0)};
                a.direction[j] = 1.0;
                atoms.push_back(std::move(a));
            }
        }
    }
    return atoms;
}

std::vector<Atom> sensitivity_atoms(const SensitivityField& a, const AdmissibleSet& c) {
    if (c.sites.empty()) throw config_error("admissible set has no sites");
    if (!c.bases.empty() && c.bases.size() != c.sites.size()) {
        throw config_error("admissible bases must be absent or one per site");
    }
    std::vector<Atom> atoms;
    for (std::size_t i = 0; i < c.sites.size(); ++i) {
        const Site s = c.sites[i];
        if (s.layer < 0 || s.layer >= (int)a.layers || s.token < 0 || s.token >= (int)a.tokens) {
            throw config_error("admissible site outside the sensitivity grid");
        }
        const Tensor* basis = c.bases.empty() ? nullptr : &c.bases[i];
        auto proj = project_row(a.row(s.layer, s.token), basis);
        const double n = std::sqrt(dot(proj, proj));
        if (n == 0.0) continue; // no usable direction at this site
        for (double& v : proj) v /= n;
        atoms.push_back({s, std::move(proj)});
    }
    return atoms;
}

Tensor probe_atom_columns(const ForwardTrace& trace, const std::vector<Atom>& atoms,
                          const std::vector<Site>& slices) {
    if (atoms.empty()) throw config_error("no atoms to probe");
    if (slices.empty()) throw config_error("no readout slices declared");
    const std::size_t d = atoms[0].direction.size();
    const std::size_t m = slices.size() * d;
    Tensor cols({m, atoms.size()});

    std::exception_ptr eptr;
#pragma omp parallel for schedule(static)
    for (std::size_t j = 0; j < atoms.size(); ++j) {
        try {
            TangentField t = jvp_residual(trace, atoms[j].site, atoms[j].direction);
            for (std::size_t s = 0; s < slices.size(); ++s) {
                const auto row = t.row(slices[s].layer, slices[s].token);
                for (std::size_t i = 0; i < d; ++i) cols.at(s * d + i, j) = row[i];
            }
        } catch (...) {
#pragma omp critical
            if (!eptr) eptr = std::current_exception();
        }
    }
    if (eptr) std::rethrow_exception(eptr);
    return cols;
}

InferenceSolution solve_residual_target(const Tensor& columns, const std::vector<Atom>& atoms,
                                        std::span<const double> target, int k, double lambda_reg,
                                        double max_norm) {
    if (atoms.empty()) throw config_error("no atoms to solve over");
    if (columns.shape.size() != 2 || columns.shape[1] != atoms.size()) {
        throw config_error("columns matrix does not match the atom list");
    }
    if (target.size() != columns.shape[0]) {
        throw config_error("target length does not match the probed slices");
    }
    const std::size_t m = columns.shape[0];
    const std::size_t n = atoms.size();
    const std::size_t d = atoms[0].direction.size();

    using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    Eigen::Map<const Mat> a_map(columns.data.data(), (Eigen::Index)m, (Eigen::Index)n);
    Eigen::MatrixXd A = a_map;
    Eigen::Map<const Eigen::VectorXd> b(target.data(), (Eigen::Index)m);

    double lambda = lambda_reg;
    if (lambda < 0.0) {
        // Gershgorin bound on the largest Gram eigenvalue as the documented estimate
        Eigen::MatrixXd gram = A.transpose() * A;
        lambda = 1e-6 * gram.cwiseAbs().rowwise().sum().maxCoeff();
    }

    InferenceSolution sol;
    Eigen::VectorXd coef = Eigen::VectorXd::Zero((Eigen::Index)n);

    auto ls_solve = [&](const std::vector<std::size_t>& idx) -> Eigen::VectorXd {
        Eigen::MatrixXd sub((Eigen::Index)m, (Eigen::Index)idx.size());
        for (std::size_t t = 0; t < idx.size(); ++t) sub.col((Eigen::Index)t) = A.col((Eigen::Index)idx[t]);
        if (lambda > 0.0) {
            Eigen::MatrixXd g = sub.transpose() * sub;
            g.diagonal().array() += lambda;
            return g.ldlt().solve(sub.transpose() * b);
        }
        Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> cod(sub);
        if ((std::size_t)cod.rank() < idx.size()) sol.rank_deficient = true;
        return cod.solve(b);
    };

    if (k <= 0) {
        std::vector<std::size_t> all(n);
        for (std::size_t i = 0; i < n; ++i) all[i] = i;
        Eigen::VectorXd c = ls_solve(all);
        coef = c;
    } else {
        // orthogonal matching pursuit; the budget counts distinct sites
        std::vector<bool> active(n, false);
        std::vector<std::size_t> order;
        std::map<std::pair<int, int>, bool> sites;
        Eigen::VectorXd resid = b;
        const double gate = 1e-12 * std::max(1.0, b.norm());
        while (order.size() < n) {
            long best = -1;
            double best_gain = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
                if (active[j]) continue;
                const auto key = std::make_pair(atoms[j].site.layer, atoms[j].site.token);
                if (!sites.count(key) && (int)sites.size() >= k) continue;
                const double gain = std::abs(A.col((Eigen::Index)j).dot(resid));
                const bool better =
                    gain > best_gain ||
                    (gain == best_gain && best >= 0 &&
                     (site_before(atoms[j].site, atoms[(std::size_t)best].site) ||
                      (!site_before(atoms[(std::size_t)best].site, atoms[j].site) && (long)j < best)));
                if (best < 0 || better) {
                    best = (long)j;
                    best_gain = gain;
                }
            }
            if (best < 0 || best_gain <= gate) break;
            active[(std::size_t)best] = true;
            order.push_back((std::size_t)best);
            sites[{atoms[(std::size_t)best].site.layer, atoms[(std::size_t)best].site.token}] = true;
            Eigen::VectorXd c = ls_solve(order);
            Eigen::MatrixXd sub((Eigen::Index)m, (Eigen::Index)order.size());
            for (std::size_t t = 0; t < order.size(); ++t)
                sub.col((Eigen::Index)t) = A.col((Eigen::Index)order[t]);
            resid = b - sub * c;
            for (std::size_t t = 0; t < order.size(); ++t) coef[(Eigen::Index)order[t]] = c[(Eigen::Index)t];
        }
    }

    Eigen::VectorXd fit = A * coef - b;
    sol.fit_residual = fit.norm();
    for (std::size_t j = 0; j < n; ++j) {
        if (coef[(Eigen::Index)j] == 0.0) continue;
        sol.active.push_back({atoms[j].site, atoms[j].direction, coef[(Eigen::Index)j]});
    }
    std::sort(sol.active.begin(), sol.active.end(),
              [](const ActiveSource& x, const ActiveSource& y) { return site_before(x.site, y.site); });
    sol.source_norm = solution_norm(sol.active, d);
    sol.norm_capped = max_norm > 0.0 && sol.source_norm > max_norm;
    return sol;
}

std::vector<LayerDelta> lower_solution(const InferenceSolution& sol, std::size_t n_tokens,
                                       std::size_t d) {
    std::map<int, Tensor> per_layer;
    for (const auto& s : sol.active) {
        if (s.direction.size() != d) throw config_error("solution direction has wrong dimension");
        if (s.site.token < 0 || (std::size_t)s.site.token >= n_tokens) {
            throw config_error("solution token outside the prompt");
        }
        auto it = per_layer.find(s.site.layer);
        if (it == per_layer.end()) it = per_layer.emplace(s.site.layer, Tensor({n_tokens, d})).first;
        for (std::size_t i = 0; i < d; ++i) {
            it->second.at((std::size_t)s.site.token, i) += s.amplitude * s.direction[i];
        }
    }
    std::vector<LayerDelta> deltas;
    for (auto& [layer, t] : per_layer) deltas.push_back({layer, std::move(t)});
    return deltas;
}

namespace {

bool amplitudes_in_band(const InferenceSolution& sol, const ResidualField& clean,
                        double band_frac) {
    for (const auto& s : sol.active) {
        if (s.amplitude == 0.0) continue;
        const double rn = norm2(clean.row(s.site.layer, s.site.token));
        if (std::abs(s.amplitude) > band_frac * rn) return false;
    }
    return true;
}

} // namespace

AchievementReport validate_solution(const Parameters& p, std::span<const int> tokens,
                                    const InferenceSolution& sol, const Observable& obs,
                                    double dy_star, double band_frac) {
    validate_observable(p.cfg, tokens.size(), obs);
    auto deltas = lower_solution(sol, tokens.size(), (std::size_t)p.cfg.d_model);
    ForwardResult clean = forward(p, tokens);
    ForwardResult patched = forward(p, tokens, deltas);
    const double dy = observable_value(p, patched, obs) - observable_value(p, clean, obs);

    AchievementReport rep;
    rep.target_value = dy_star;
    rep.achieved_value = dy;
    const double denom = std::max(std::abs(dy_star), rep.eps0);
    const double sgn = dy_star < 0.0 ? -1.0 : 1.0;
    rep.achievement = sgn * dy / denom;
    rep.rel_error = std::abs(dy - dy_star) / denom;
    rep.in_band = amplitudes_in_band(sol, clean.residuals, band_frac);
    return rep;
}

AchievementReport validate_solution_residual(const Parameters& p, std::span<const int> tokens,
                                             const InferenceSolution& sol,
                                             const std::vector<Site>& slices,
                                             std::span<const double> target, double band_frac) {
    if (slices.empty()) throw config_error("no readout slices declared");
    const std::size_t d = (std::size_t)p.cfg.d_model;
    if (target.size() != slices.size() * d) {
        throw config_error("target length does not match the declared slices");
    }
    for (const Site& s : slices) validate_site(p.cfg, tokens.size(), s);

    auto deltas = lower_solution(sol, tokens.size(), d);
    ForwardResult clean = forward(p, tokens);
    ForwardResult patched = forward(p, tokens, deltas);

    std::vector<double> meas(target.size());
    for (std::size_t s = 0; s < slices.size(); ++s) {
        const auto rc = clean.residuals.row(slices[s].layer, slices[s].token);
        const auto rp = patched.residuals.row(slices[s].layer, slices[s].token);
        for (std::size_t i = 0; i < d; ++i) meas[s * d + i] = rp[i] - rc[i];
    }

    AchievementReport rep;
    double t2 = 0.0, m2 = 0.0, tm = 0.0, e2 = 0.0;
    for (std::size_t i = 0; i < meas.size(); ++i) {
        t2 += target[i] * target[i];
        m2 += meas[i] * meas[i];
        tm += target[i] * meas[i];
        e2 += (meas[i] - target[i]) * (meas[i] - target[i]);
    }
    rep.target_value = std::sqrt(t2);
    rep.achieved_value = std::sqrt(m2);
    rep.achievement = tm / std::max(t2, rep.eps0 * rep.eps0);
    rep.rel_error = std::sqrt(e2) / std::max(rep.target_value, rep.eps0);
    rep.in_band = amplitudes_in_band(sol, clean.residuals, band_frac);
    return rep;
}

} // namespace rf

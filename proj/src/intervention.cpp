#include "rf/intervention.hpp"

#include <cmath>

namespace rf {

void validate_patch(const ModelConfig& cfg, std::size_t n_tokens, const PatchSource& patch) {
    validate_site(cfg, n_tokens, patch.site);
    if (patch.layer_end >= 0) {
        if (patch.layer_end < patch.site.layer || patch.layer_end > cfg.n_layers) {
            throw config_error("patch layer interval [" + std::to_string(patch.site.layer) +
                               ", " + std::to_string(patch.layer_end) + "] out of range");
        }
    }
    if (patch.direction.size() != static_cast<std::size_t>(cfg.d_model)) {
        throw config_error("patch direction has wrong dimension");
    }
    if (!std::isfinite(patch.epsilon)) throw config_error("patch amplitude is not finite");
    for (const auto& row : patch.projection) {
        if (row.size() != static_cast<std::size_t>(cfg.d_model)) {
            throw config_error("projection row has wrong dimension");
        }
    }
}

std::vector<double> projected_direction(const PatchSource& patch, std::size_t d) {
    if (patch.projection.empty()) return patch.direction;
    std::vector<double> out(d, 0.0);
    for (const auto& b : patch.projection) {
        const double c = dot(b, patch.direction);
        for (std::size_t i = 0; i < d; ++i) out[i] += c * b[i];
    }
    return out;
}

std::vector<LayerDelta> lower_patch(const PatchSource& patch, std::size_t n_tokens,
                                    std::size_t d) {
    const std::vector<double> pj = projected_direction(patch, d);
    std::vector<LayerDelta> deltas;
    for (int l = patch.first_layer(); l <= patch.last_layer(); ++l) {
        LayerDelta ld{l, Tensor({n_tokens, d})};
        for (std::size_t i = 0; i < d; ++i) {
            ld.delta.at(patch.site.token, i) = patch.epsilon * pj[i];
        }
        deltas.push_back(std::move(ld));
    }
    return deltas;
}

ForwardResult apply_patch(const Parameters& p, std::span<const int> tokens,
                          const PatchSource& patch) {
    validate_patch(p.cfg, tokens.size(), patch);
    return forward(p, tokens, lower_patch(patch, tokens.size(), p.cfg.d_model));
}

double measure_dy(const Parameters& p, std::span<const int> tokens, const PatchSource& patch,
                  const Observable& obs) {
    validate_patch(p.cfg, tokens.size(), patch);
    validate_observable(p.cfg, tokens.size(), obs);
    ForwardResult clean = forward(p, tokens);
    ForwardResult patched = forward(p, tokens, lower_patch(patch, tokens.size(), p.cfg.d_model));
    return observable_value(p, patched, obs) - observable_value(p, clean, obs);
}

ResponseField response_field(const Parameters& p, std::span<const int> tokens,
                             const PatchSource& patch) {
    validate_patch(p.cfg, tokens.size(), patch);
    const std::size_t n = tokens.size();
    const std::size_t d = p.cfg.d_model;
    const int L = p.cfg.n_layers;

    ForwardResult clean = forward(p, tokens);
    ForwardResult patched = forward(p, tokens, lower_patch(patch, n, d));

    ResponseField delta(L + 1, n, d);
    // slices below the source stay exactly zero
    for (int l = patch.first_layer(); l <= L; ++l) {
        auto dc = delta.layer(l);
        auto pc = patched.residuals.layer(l);
        auto cc = clean.residuals.layer(l);
        for (std::size_t e = 0; e < dc.size(); ++e) dc[e] = pc[e] - cc[e];
    }
    return delta;
}

RelativeResponseMap relative_response_map(const Parameters& p, std::span<const int> tokens,
                                          std::span<const Site> sources,
                                          std::span<const double> direction, double epsilon) {
    if (sources.empty()) throw config_error("relative_response_map needs at least one source");
    const std::size_t n = tokens.size();
    const int L = p.cfg.n_layers;

    RelativeResponseMap map;
    map.n_dlayers = L + 1;
    map.n_dtokens = static_cast<int>(n);
    map.mean_norm.assign(map.n_dlayers * map.n_dtokens, 0.0);
    map.count.assign(map.n_dlayers * map.n_dtokens, 0);
    map.epsilon = epsilon;

    for (const Site& s : sources) {
        PatchSource patch;
        patch.site = s;
        patch.direction.assign(direction.begin(), direction.end());
        patch.epsilon = epsilon;
        ResponseField delta = response_field(p, tokens, patch);
        for (int l = s.layer; l <= L; ++l) {
            for (int x = s.token; x < static_cast<int>(n); ++x) {
                const int bin = (l - s.layer) * map.n_dtokens + (x - s.token);
                map.mean_norm[bin] += norm2(delta.row(l, x));
                map.count[bin] += 1;
            }
        }
    }
    for (std::size_t b = 0; b < map.mean_norm.size(); ++b) {
        if (map.count[b] > 0) map.mean_norm[b] /= map.count[b];
    }
    return map;
}

CompositionReport composition_test(const Parameters& p, std::span<const int> tokens,
                                   const PatchSource& patch, int layer_mid,
                                   std::span<const double> epsilons, bool linearized,
                                   double eps0) {
    validate_patch(p.cfg, tokens.size(), patch);
    const std::size_t n = tokens.size();
    const std::size_t d = p.cfg.d_model;
    const int L = p.cfg.n_layers;
    if (layer_mid < patch.last_layer() || layer_mid >= L) {
        throw config_error("layer_mid must satisfy patch layer <= layer_mid < n_layers");
    }
    if (epsilons.empty()) throw config_error("composition_test needs a non-empty epsilon grid");

    ForwardTrace clean = forward_trace(p, tokens);

    // unit tangent for the linearized hand-off, computed once and scaled
    TangentField unit_tangent;
    if (linearized) {
        unit_tangent = jvp_residual(clean, patch.site, projected_direction(patch, d));
    }

    CompositionReport rep;
    rep.layer_mid = layer_mid;
    rep.linearized = linearized;
    for (double eps : epsilons) {
        PatchSource scaled = patch;
        scaled.epsilon = eps;
        ForwardResult direct = forward(p, tokens, lower_patch(scaled, n, d));

        LayerDelta handoff{layer_mid, Tensor({n, d})};
        if (linearized) {
            auto tl = unit_tangent.layer(layer_mid);
            for (std::size_t e = 0; e < n * d; ++e) handoff.delta.data[e] = eps * tl[e];
        } else {
            auto pm = direct.residuals.layer(layer_mid);
            auto cm = clean.residuals.layer(layer_mid);
            for (std::size_t e = 0; e < n * d; ++e) handoff.delta.data[e] = pm[e] - cm[e];
        }
        ForwardResult reprop = forward(p, tokens, {handoff});

        double num = 0.0, den = 0.0;
        for (int l = layer_mid + 1; l <= L; ++l) {
            auto dl = direct.residuals.layer(l);
            auto rl = reprop.residuals.layer(l);
            auto cl = clean.residuals.layer(l);
            for (std::size_t e = 0; e < n * d; ++e) {
                const double d_direct = dl[e] - cl[e];
                const double d_reprop = rl[e] - cl[e];
                num += (d_direct - d_reprop) * (d_direct - d_reprop);
                den += d_direct * d_direct;
            }
        }
        rep.epsilons.push_back(eps);
        rep.eta.push_back(std::sqrt(num) / (std::sqrt(den) + eps0));
    }
    return rep;
}

} // namespace rf

#pragma once

#include <span>
#include <vector>

#include "rf/autodiff.hpp"
#include "rf/model.hpp"

namespace rf {

// A localized source term: direction J scaled by epsilon, added to the
// residual stream at one token of one layer slice (or of every slice in an
// inclusive layer interval). An optional projection restricts J to the span
// of the given orthonormal rows before scaling.
struct PatchSource {
    Site site;                                    // (l*, x*)
    int layer_end = -1;                           // inclusive interval end; -1 = single slice
    std::vector<double> direction;                // J, length d_model
    double epsilon = 1.0;
    std::vector<std::vector<double>> projection;  // optional orthonormal rows, each length d

    int first_layer() const { return site.layer; }
    int last_layer() const { return layer_end < 0 ? site.layer : layer_end; }
};

void validate_patch(const ModelConfig& cfg, std::size_t n_tokens, const PatchSource& patch);

// P(J): the direction after the optional projection (epsilon not applied).
std::vector<double> projected_direction(const PatchSource& patch, std::size_t d);

// Lower a patch to per-layer additive deltas for the forward engine.
std::vector<LayerDelta> lower_patch(const PatchSource& patch, std::size_t n_tokens,
                                    std::size_t d);

// Patched forward pass.
ForwardResult apply_patch(const Parameters& p, std::span<const int> tokens,
                          const PatchSource& patch);

// delta_y = y(patched) - y(clean), honoring linear_readout observables.
double measure_dy(const Parameters& p, std::span<const int> tokens, const PatchSource& patch,
                  const Observable& obs);

// deltaR(l, x) = R_patched - R_clean. Slices below the source are exactly
// zero by construction.
ResponseField response_field(const Parameters& p, std::span<const int> tokens,
                             const PatchSource& patch);

// Mean response magnitude binned by displacement from the source, aggregated
// over a set of source sites sharing one direction and amplitude.
struct RelativeResponseMap {
    int n_dlayers = 0;            // bins for d_layer in [0, n_layers]
    int n_dtokens = 0;            // bins for d_token in [0, n_tokens)
    std::vector<double> mean_norm;
    std::vector<int> count;
    double epsilon = 0.0;

    double mean_at(int dl, int dx) const { return mean_norm[dl * n_dtokens + dx]; }
    int count_at(int dl, int dx) const { return count[dl * n_dtokens + dx]; }
};

RelativeResponseMap relative_response_map(const Parameters& p, std::span<const int> tokens,
                                          std::span<const Site> sources,
                                          std::span<const double> direction, double epsilon);

// Green-composition check: patch at the source, hand the response off at
// layer_mid, re-propagate, and compare downstream slices.
//   measured mode:   hand-off is the measured full-row response at layer_mid
//   linearized mode: hand-off is eps * (JVP unit tangent at layer_mid)
struct CompositionReport {
    int layer_mid = 0;
    bool linearized = false;
    std::vector<double> epsilons;
    std::vector<double> eta;       // composition defect per epsilon
};

CompositionReport composition_test(const Parameters& p, std::span<const int> tokens,
                                   const PatchSource& patch, int layer_mid,
                                   std::span<const double> epsilons, bool linearized,
                                   double eps0 = 1e-8);

} // namespace rf

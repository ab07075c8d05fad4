#pragma once

#include <span>

#include "rf/model.hpp"

namespace rf {

// Hand-written reverse- and forward-mode derivatives against the fixed
// architecture in model.cpp. No tape: one backward sweep over the recorded
// ForwardTrace yields the sensitivity of the observable to every residual
// slice at once; one forward sweep propagates a tangent seeded at one site.

// a(l, x) = dy/dR_l(x) for all layer slices and tokens (the adjoint field of
// the observable). Throws numeric_error naming the first offending site if a
// non-finite gradient appears.
SensitivityField sensitivity_field(const Parameters& p, std::span<const int> tokens,
                                   const Observable& obs);
SensitivityField sensitivity_field(const ForwardTrace& t, const Observable& obs);

// Forward-mode tangent: dR_l(x) for a unit perturbation `dir` injected at
// `site`. Slices below site.layer are exactly zero.
TangentField jvp_residual(const ForwardTrace& t, Site site, std::span<const double> dir);

// Derivative of the observable along a tangent field (reads slice L).
double tangent_observable(const ForwardTrace& t, const TangentField& tangent,
                          const Observable& obs);

// One row of the Green function: gradient of component `channel` of the
// residual at `site` with respect to every earlier slice. Slices above
// site.layer are zero; the slice at site.layer is the basis seed.
SensitivityField vjp_component(const ForwardTrace& t, Site site, int channel);

// Gradient of the linear functional <R(site), seed> with respect to every
// earlier slice (an arbitrary-cotangent generalization of vjp_component).
SensitivityField vjp_seed(const ForwardTrace& t, Site site, std::span<const double> seed);

// Central finite difference d y(R + h*dir at site) / dh — the oracle the
// analytic passes are checked against.
double fd_patch_derivative(const Parameters& p, std::span<const int> tokens, Site site,
                           std::span<const double> dir, const Observable& obs, double h = 1e-5);

// Parameter gradients of the cross-entropy of `answer` at `position`
// (softmax over the full vocab). Returns a Parameters-shaped container;
// writes the loss value to *loss_out when non-null. Used by the trainer.
Parameters grads_cross_entropy(const ForwardTrace& t, int answer, int position,
                               double* loss_out);

void validate_site(const ModelConfig& cfg, std::size_t n_tokens, Site site);

} // namespace rf

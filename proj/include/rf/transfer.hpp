#pragma once
// Cross-scale correspondence between two models of different depth that share
// a token grid: response fingerprints built from a shared probe set, a
// depth-windowed ridge intertwiner, the discrete site map extracted from it,
// and a depth-refined model constructor that provides ground-truth pairs.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "rf/model.hpp"
#include "rf/tensor.hpp"

namespace rf {

// anchors live at normalized depths so the same probe set is meaningful for
// models of different layer counts; directions are unit rows in R^d.
struct ProbeSet {
    std::vector<double> anchor_depths; // in (0, 1]
    std::vector<int> anchor_tokens;
    Tensor directions; // [n_dirs, d]

    std::size_t n_anchors() const { return anchor_depths.size(); }
    std::size_t n_dirs() const { return directions.shape.empty() ? 0 : directions.shape[0]; }
    int anchor_layer(int n_layers, std::size_t i) const;
};

ProbeSet make_probe_set(std::uint64_t seed, std::size_t d, std::size_t n_tokens,
                        std::size_t n_anchors = 8, std::size_t n_dirs = 4);

struct Fingerprint {
    Site site;
    // outgoing[k*(A*M) + a*M + m] = effect of direction k at the site on
    // readout direction m at anchor a; incoming[(a*M + k)*M + m] = effect of
    // direction k injected at anchor a on readout direction m at the site.
    std::vector<double> outgoing;
    std::vector<double> incoming;
    std::vector<double> reduced; // own-collection truncated-SVD coordinates
};

struct FingerprintSet {
    std::vector<Fingerprint> fps;
    int n_layers = 0; // depth of the producing model, for normalized depth
    std::size_t n_anchors = 0;
    std::size_t n_dirs = 0;
    std::size_t rank = 0;
};

FingerprintSet response_fingerprints(const Parameters& p, std::span<const int> tokens,
                                     const std::vector<Site>& sites, const ProbeSet& probes,
                                     std::size_t rank);

// Euclidean distance over the matched-index raw profiles
double fingerprint_distance(const Fingerprint& a, const Fingerprint& b);

struct TransferMap {
    std::vector<Site> source_sites;
    std::vector<Site> target_sites;
    int source_layers = 0;
    int target_layers = 0;
    double eps_s = 0.25; // depth-locality window on s = layer / n_layers
    Tensor p;            // [targets, sources], nonnegative, columns sum to 1 or 0
    std::vector<int> mapped_to; // per source column, index into target_sites; -1 unmapped
    std::vector<bool> unmapped;
    std::size_t n_empty_windows = 0; // target sites whose depth window was empty
};

// ridge regression of each target fingerprint on the depth-windowed source
// fingerprints, in joint reduced coordinates; columns whose every weight is
// below an absolute floor of 1e-8 are zeroed so the large-lambda limit reads
// as unmapped rather than as noise rescaled to probability mass.
TransferMap estimate_intertwiner(const FingerprintSet& src, const FingerprintSet& dst,
                                 double eps_s, double lambda);

// fill mapped_to / unmapped: per source column, argmax of |P|, ties broken by
// lower target layer then lower target token
void transfer_map(TransferMap& map);

std::string transfer_map_to_json(const TransferMap& map);

// duplicate every block `factor` times with its residual update scaled by
// 1/factor: a finer discretization of the same update flow, giving the
// ground-truth layer correspondence l -> factor*l.
Parameters refine_depth(const Parameters& p, int factor);

} // namespace rf

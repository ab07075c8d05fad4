#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "rf/tensor.hpp"

namespace rf {

// Decoder-only pre-norm transformer at desk scale. Residual slice l is the
// stream *after* block l; slice 0 is the embedding output, slice n_layers is
// the final residual state read by the unembedding.
struct ModelConfig {
    int n_layers = 4;
    int d_model = 32;
    int n_heads = 4;
    int d_mlp = 128;
    int vocab = 64;
    int n_ctx = 64;
    double ln_eps = 1e-5;
    std::uint64_t seed = 0;

    int head_dim() const { return d_model / n_heads; }
    // Depth-time label t_l = l/L in [0,1]; derived, never fed back into compute.
    double normalized_depth(int l) const;
    void validate() const; // throws config_error
};

struct BlockParams {
    Tensor ln1_g, ln1_b;      // [d]
    Tensor wq, wk, wv;        // [d x d], weights stored row-major [out x in]
    Tensor bq, bk, bv;        // [d]
    Tensor wo, bo;            // [d x d], [d]
    Tensor ln2_g, ln2_b;      // [d]
    Tensor w1, b1;            // [m x d], [m]
    Tensor w2, b2;            // [d x m], [d]
};

struct Parameters {
    ModelConfig cfg;
    Tensor tok_emb;           // [V x d]
    Tensor pos_emb;           // [n_ctx x d]
    std::vector<BlockParams> blocks;
    Tensor lnf_g, lnf_b;      // [d]
    Tensor unembed;           // [V x d], logits = LN_f(R_L) . unembed^T (untied)
};

// Scalar observable y = logit(target) - logit(reference) at one position.
// position -1 means the last token. linear_readout bypasses the final layer
// norm and reads y = (u_t - u_r) . R_L(pos) directly, which makes y exactly
// linear in any patch applied at the final layer slice (diagnostic mode).
struct Observable {
    int target = 0;
    int reference = 0;
    int position = -1;
    bool linear_readout = false;
};

// Per-block caches saved by the forward pass; everything the hand-written
// backward (VJP) and forward tangent (JVP) passes need to linearize the block.
struct BlockTrace {
    std::vector<double> n1;                    // [n x d] LN1 output
    std::vector<double> ln1_mean, ln1_invstd;  // [n]
    std::vector<double> qh, kh, vh;            // head-major [H][n][dh]
    std::vector<double> probs;                 // [H][n][n], causal-masked rows
    std::vector<double> ctx;                   // [n x d] merged attention context
    std::vector<double> r_mid;                 // [n x d] residual after attention
    std::vector<double> n2;                    // [n x d] LN2 output
    std::vector<double> ln2_mean, ln2_invstd;  // [n]
    std::vector<double> h_pre, h_act;          // [n x m] MLP pre-activation / GELU
};

struct ForwardTrace {
    const Parameters* params = nullptr;
    std::vector<int> tokens;
    ResidualField residuals;                   // [(L+1) x n x d]
    std::vector<BlockTrace> blocks;
    std::vector<double> lnf_out;               // [n x d]
    std::vector<double> lnf_mean, lnf_invstd;  // [n]
    Tensor logits;                             // [n x V]

    std::size_t n_tokens() const { return tokens.size(); }
};

struct ForwardResult {
    Tensor logits;            // [n x V]
    ResidualField residuals;  // [(L+1) x n x d]
};

// Additive intervention on one layer slice: residual slice `layer` gets
// `delta` ([n x d]) added right after it is computed. The patched forward
// engine accepts a list of these; single-site patches, interval patches and
// full-row hand-offs all lower to LayerDelta.
struct LayerDelta {
    int layer = 0;
    Tensor delta; // [n x d]
};

Parameters init_model(const ModelConfig& cfg);

ForwardTrace forward_trace(const Parameters& p, std::span<const int> tokens);
ForwardTrace forward_trace(const Parameters& p, std::span<const int> tokens,
                           const std::vector<LayerDelta>& additions);
ForwardResult forward(const Parameters& p, std::span<const int> tokens);
ForwardResult forward(const Parameters& p, std::span<const int> tokens,
                      const std::vector<LayerDelta>& additions);

// Recompute slices l0+1..L (and logits) starting from a given value of
// residual slice l0 ([n x d]). Used to check capture consistency.
ForwardResult forward_from_slice(const Parameters& p, std::span<const int> tokens,
                                 int l0, std::span<const double> slice_values);

// Logit-difference readout (standard path; errors on bad token/position).
double read_observable(const Tensor& logits, const Observable& obs);
// Observable honoring linear_readout (needs residuals + unembedding).
double observable_value(const Parameters& p, const ForwardResult& r, const Observable& obs);
double observable_value(const Parameters& p, const ForwardTrace& t, const Observable& obs);

void validate_observable(const ModelConfig& cfg, std::size_t n_tokens, const Observable& obs);

// ---- checkpoints -----------------------------------------------------------
// Binary container: magic "RFTC", u32 version, u32 header length, JSON header
// (config + tensor manifest: name/shape/dtype/offset), then raw little-endian
// row-major blobs. Default dtype is f64 (f32 also readable/writable); see
// checkpoint.cpp for the manifest layout.
void save_checkpoint(const std::string& path, const Parameters& p,
                     const std::string& dtype = "f64");
Parameters load_checkpoint(const std::string& path);

} // namespace rf

#include "rf/model.hpp"

#include <cmath>
#include <cstring>

#include "param_walk.hpp"
#include "rf/kernels.hpp"
#include "rf/rng.hpp"

namespace rf {

double ModelConfig::normalized_depth(int l) const {
    return static_cast<double>(l) / static_cast<double>(n_layers);
}

void ModelConfig::validate() const {
    if (n_layers < 0) throw config_error("n_layers must be >= 0");
    if (d_model <= 0 || n_heads <= 0 || d_mlp <= 0) throw config_error("model dims must be positive");
    if (d_model % n_heads != 0) throw config_error("d_model must be divisible by n_heads");
    if (vocab < 2) throw config_error("vocab must be >= 2");
    if (n_ctx < 1) throw config_error("n_ctx must be >= 1");
    if (!(ln_eps > 0.0)) throw config_error("ln_eps must be positive");
}

Parameters zeros_like(const Parameters& p) {
    Parameters z;
    z.cfg = p.cfg;
    z.blocks.resize(p.blocks.size());
    std::vector<const Tensor*> srcs;
    for_each_tensor(p, [&](const std::string&, const Tensor& t) { srcs.push_back(&t); });
    std::size_t i = 0;
    for_each_tensor(z, [&](const std::string&, Tensor& t) { t = Tensor(srcs[i++]->shape); });
    return z;
}

Parameters alloc_params(const ModelConfig& cfg) {
    cfg.validate();
    const std::size_t d = cfg.d_model, m = cfg.d_mlp, V = cfg.vocab;

    Parameters p;
    p.cfg = cfg;
    p.tok_emb = Tensor({V, d});
    p.pos_emb = Tensor({static_cast<std::size_t>(cfg.n_ctx), d});
    p.blocks.resize(cfg.n_layers);
    for (auto& b : p.blocks) {
        b.ln1_g = Tensor({d});
        b.ln1_b = Tensor({d});
        b.wq = Tensor({d, d});
        b.bq = Tensor({d});
        b.wk = Tensor({d, d});
        b.bk = Tensor({d});
        b.wv = Tensor({d, d});
        b.bv = Tensor({d});
        b.wo = Tensor({d, d});
        b.bo = Tensor({d});
        b.ln2_g = Tensor({d});
        b.ln2_b = Tensor({d});
        b.w1 = Tensor({m, d});
        b.b1 = Tensor({m});
        b.w2 = Tensor({d, m});
        b.b2 = Tensor({d});
    }
    p.lnf_g = Tensor({d});
    p.lnf_b = Tensor({d});
    p.unembed = Tensor({V, d});
    return p;
}

Parameters init_model(const ModelConfig& cfg) {
    Parameters p = alloc_params(cfg);

    // Weights ~ N(0, 0.02); layer norm gains 1, all biases 0. Each tensor gets
    // its own child stream keyed by name so values do not depend on the order
    // tensors are visited.
    RngStream master(cfg.seed);
    for_each_tensor(p, [&](const std::string& name, Tensor& t) {
        const bool is_gain = name.ends_with("_g");
        const bool is_bias = t.shape.size() == 1 && !is_gain;
        if (is_gain) {
            for (auto& x : t.data) x = 1.0;
        } else if (!is_bias) {
            RngStream s = master.child(fnv1a(name));
            for (auto& x : t.data) x = 0.02 * s.normal();
        } // biases stay zero
    });
    return p;
}

// ---- forward ----------------------------------------------------------------

namespace {

void split_heads(const double* X, std::size_t n, std::size_t H, std::size_t dh, double* out) {
    const std::size_t d = H * dh;
    for (std::size_t h = 0; h < H; ++h)
        for (std::size_t x = 0; x < n; ++x)
            std::memcpy(out + (h * n + x) * dh, X + x * d + h * dh, dh * sizeof(double));
}

void merge_heads(const double* Xh, std::size_t n, std::size_t H, std::size_t dh, double* out) {
    const std::size_t d = H * dh;
    for (std::size_t h = 0; h < H; ++h)
        for (std::size_t x = 0; x < n; ++x)
            std::memcpy(out + x * d + h * dh, Xh + (h * n + x) * dh, dh * sizeof(double));
}

// One block forward from input slice u ([n x d]) into out ([n x d]),
// recording every intermediate the linearization passes need.
void run_block(const Parameters& p, int bi, std::span<const double> u, std::size_t n,
               BlockTrace& bt, double* out) {
    const auto& blk = p.blocks[bi];
    const std::size_t d = p.cfg.d_model;
    const std::size_t H = p.cfg.n_heads;
    const std::size_t dh = p.cfg.head_dim();
    const std::size_t m = p.cfg.d_mlp;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    bt.n1.resize(n * d);
    bt.ln1_mean.resize(n);
    bt.ln1_invstd.resize(n);
    kernels::layer_norm_rows(u.data(), n, d, blk.ln1_g.ptr(), blk.ln1_b.ptr(), p.cfg.ln_eps,
                             bt.n1.data(), bt.ln1_mean.data(), bt.ln1_invstd.data());

    std::vector<double> tmp(n * d);
    bt.qh.resize(n * d);
    bt.kh.resize(n * d);
    bt.vh.resize(n * d);
    kernels::matmul_nt(bt.n1.data(), n, d, blk.wq.ptr(), d, tmp.data());
    kernels::add_bias(tmp.data(), n, d, blk.bq.ptr());
    split_heads(tmp.data(), n, H, dh, bt.qh.data());
    kernels::matmul_nt(bt.n1.data(), n, d, blk.wk.ptr(), d, tmp.data());
    kernels::add_bias(tmp.data(), n, d, blk.bk.ptr());
    split_heads(tmp.data(), n, H, dh, bt.kh.data());
    kernels::matmul_nt(bt.n1.data(), n, d, blk.wv.ptr(), d, tmp.data());
    kernels::add_bias(tmp.data(), n, d, blk.bv.ptr());
    split_heads(tmp.data(), n, H, dh, bt.vh.data());

    bt.probs.resize(H * n * n);
    std::vector<double> ctxh(n * d);
    for (std::size_t h = 0; h < H; ++h) {
        double* S = bt.probs.data() + h * n * n;
        kernels::matmul_nt(bt.qh.data() + h * n * dh, n, dh, bt.kh.data() + h * n * dh, n, S);
        for (std::size_t e = 0; e < n * n; ++e) S[e] *= scale;
        kernels::softmax_causal_rows(S, n);
        kernels::matmul_nn(S, n, n, bt.vh.data() + h * n * dh, dh, ctxh.data() + h * n * dh);
    }
    bt.ctx.resize(n * d);
    merge_heads(ctxh.data(), n, H, dh, bt.ctx.data());

    std::vector<double> attn(n * d);
    kernels::matmul_nt(bt.ctx.data(), n, d, blk.wo.ptr(), d, attn.data());
    kernels::add_bias(attn.data(), n, d, blk.bo.ptr());

    bt.r_mid.resize(n * d);
    for (std::size_t e = 0; e < n * d; ++e) bt.r_mid[e] = u[e] + attn[e];

    bt.n2.resize(n * d);
    bt.ln2_mean.resize(n);
    bt.ln2_invstd.resize(n);
    kernels::layer_norm_rows(bt.r_mid.data(), n, d, blk.ln2_g.ptr(), blk.ln2_b.ptr(),
                             p.cfg.ln_eps, bt.n2.data(), bt.ln2_mean.data(), bt.ln2_invstd.data());

    bt.h_pre.resize(n * m);
    bt.h_act.resize(n * m);
    kernels::matmul_nt(bt.n2.data(), n, d, blk.w1.ptr(), m, bt.h_pre.data());
    kernels::add_bias(bt.h_pre.data(), n, m, blk.b1.ptr());
    kernels::gelu_rows(bt.h_pre.data(), n, m, bt.h_act.data());

    std::vector<double> mlp(n * d);
    kernels::matmul_nt(bt.h_act.data(), n, m, blk.w2.ptr(), d, mlp.data());
    kernels::add_bias(mlp.data(), n, d, blk.b2.ptr());

    for (std::size_t e = 0; e < n * d; ++e) out[e] = bt.r_mid[e] + mlp[e];
}

void check_tokens(const Parameters& p, std::span<const int> tokens) {
    if (tokens.empty()) throw config_error("empty prompt");
    if (tokens.size() > static_cast<std::size_t>(p.cfg.n_ctx)) {
        throw config_error("prompt length " + std::to_string(tokens.size()) +
                           " exceeds n_ctx " + std::to_string(p.cfg.n_ctx));
    }
    for (std::size_t x = 0; x < tokens.size(); ++x) {
        if (tokens[x] < 0 || tokens[x] >= p.cfg.vocab) {
            throw config_error("token id " + std::to_string(tokens[x]) + " at position " +
                               std::to_string(x) + " outside vocab");
        }
    }
}

void finish_head(const Parameters& p, ForwardTrace& t) {
    const std::size_t n = t.tokens.size();
    const std::size_t d = p.cfg.d_model;
    const std::size_t V = p.cfg.vocab;
    const int L = p.cfg.n_layers;
    t.lnf_out.resize(n * d);
    t.lnf_mean.resize(n);
    t.lnf_invstd.resize(n);
    kernels::layer_norm_rows(t.residuals.layer(L).data(), n, d, p.lnf_g.ptr(), p.lnf_b.ptr(),
                             p.cfg.ln_eps, t.lnf_out.data(), t.lnf_mean.data(),
                             t.lnf_invstd.data());
    t.logits = Tensor({n, V});
    kernels::matmul_nt(t.lnf_out.data(), n, d, p.unembed.ptr(), V, t.logits.ptr());
    check_finite({t.logits.ptr(), n * V}, "logits");
}

} // namespace

ForwardTrace forward_trace(const Parameters& p, std::span<const int> tokens,
                           const std::vector<LayerDelta>& additions) {
    p.cfg.validate();
    check_tokens(p, tokens);
    const std::size_t n = tokens.size();
    const std::size_t d = p.cfg.d_model;
    const int L = p.cfg.n_layers;

    for (const auto& a : additions) {
        if (a.layer < 0 || a.layer > L) throw config_error("patch layer out of range");
        if (a.delta.numel() != n * d) throw config_error("patch delta shape mismatch");
    }

    ForwardTrace t;
    t.params = &p;
    t.tokens.assign(tokens.begin(), tokens.end());
    t.residuals = ResidualField(L + 1, n, d);
    t.blocks.resize(L);

    auto slice = t.residuals.layer(0);
    for (std::size_t x = 0; x < n; ++x) {
        const double* te = p.tok_emb.ptr() + static_cast<std::size_t>(tokens[x]) * d;
        const double* pe = p.pos_emb.ptr() + x * d;
        double* r = slice.data() + x * d;
        for (std::size_t i = 0; i < d; ++i) r[i] = te[i] + pe[i];
    }
    for (const auto& a : additions) {
        if (a.layer == 0)
            for (std::size_t e = 0; e < n * d; ++e) slice[e] += a.delta.data[e];
    }
    check_finite(slice, "residual slice 0");

    for (int b = 0; b < L; ++b) {
        auto out = t.residuals.layer(b + 1);
        run_block(p, b, t.residuals.layer(b), n, t.blocks[b], out.data());
        for (const auto& a : additions) {
            if (a.layer == b + 1)
                for (std::size_t e = 0; e < n * d; ++e) out[e] += a.delta.data[e];
        }
        check_finite(out, "residual slice " + std::to_string(b + 1));
    }

    finish_head(p, t);
    return t;
}

ForwardTrace forward_trace(const Parameters& p, std::span<const int> tokens) {
    return forward_trace(p, tokens, {});
}

ForwardResult forward(const Parameters& p, std::span<const int> tokens,
                      const std::vector<LayerDelta>& additions) {
    ForwardTrace t = forward_trace(p, tokens, additions);
    return ForwardResult{std::move(t.logits), std::move(t.residuals)};
}

ForwardResult forward(const Parameters& p, std::span<const int> tokens) {
    return forward(p, tokens, {});
}

ForwardResult forward_from_slice(const Parameters& p, std::span<const int> tokens, int l0,
                                 std::span<const double> slice_values) {
    p.cfg.validate();
    check_tokens(p, tokens);
    const std::size_t n = tokens.size();
    const std::size_t d = p.cfg.d_model;
    const int L = p.cfg.n_layers;
    if (l0 < 0 || l0 > L) throw config_error("slice layer out of range");
    if (slice_values.size() != n * d) throw config_error("slice shape mismatch");

    ForwardTrace t;
    t.params = &p;
    t.tokens.assign(tokens.begin(), tokens.end());
    t.residuals = ResidualField(L + 1, n, d);
    t.blocks.resize(L);
    std::copy(slice_values.begin(), slice_values.end(), t.residuals.layer(l0).begin());
    for (int b = l0; b < L; ++b) {
        run_block(p, b, t.residuals.layer(b), n, t.blocks[b], t.residuals.layer(b + 1).data());
    }
    finish_head(p, t);
    return ForwardResult{std::move(t.logits), std::move(t.residuals)};
}

// ---- observable -------------------------------------------------------------

void validate_observable(const ModelConfig& cfg, std::size_t n_tokens, const Observable& obs) {
    if (obs.target < 0 || obs.target >= cfg.vocab) throw config_error("observable target outside vocab");
    if (obs.reference < 0 || obs.reference >= cfg.vocab)
        throw config_error("observable reference outside vocab");
    const int pos = obs.position;
    if (pos != -1 && (pos < 0 || pos >= static_cast<int>(n_tokens)))
        throw config_error("observable position out of range");
}

static std::size_t resolve_pos(std::size_t n, int position) {
    return position < 0 ? n - 1 : static_cast<std::size_t>(position);
}

double read_observable(const Tensor& logits, const Observable& obs) {
    const std::size_t n = logits.rows();
    const std::size_t V = logits.cols();
    if (obs.target < 0 || static_cast<std::size_t>(obs.target) >= V ||
        obs.reference < 0 || static_cast<std::size_t>(obs.reference) >= V) {
        throw config_error("observable token outside vocab");
    }
    if (obs.position != -1 && (obs.position < 0 || static_cast<std::size_t>(obs.position) >= n)) {
        throw config_error("observable position out of range");
    }
    const std::size_t x = resolve_pos(n, obs.position);
    return logits.at(x, obs.target) - logits.at(x, obs.reference);
}

static double linear_readout_value(const Parameters& p, const ResidualField& res,
                                   const Observable& obs) {
    const std::size_t x = resolve_pos(res.tokens, obs.position);
    const std::size_t d = p.cfg.d_model;
    const double* ut = p.unembed.ptr() + static_cast<std::size_t>(obs.target) * d;
    const double* ur = p.unembed.ptr() + static_cast<std::size_t>(obs.reference) * d;
    auto r = res.row(p.cfg.n_layers, x);
    double y = 0.0;
    for (std::size_t i = 0; i < d; ++i) y += (ut[i] - ur[i]) * r[i];
    return y;
}

double observable_value(const Parameters& p, const ForwardResult& r, const Observable& obs) {
    validate_observable(p.cfg, r.residuals.tokens, obs);
    if (obs.linear_readout) return linear_readout_value(p, r.residuals, obs);
    return read_observable(r.logits, obs);
}

double observable_value(const Parameters& p, const ForwardTrace& t, const Observable& obs) {
    validate_observable(p.cfg, t.tokens.size(), obs);
    if (obs.linear_readout) return linear_readout_value(p, t.residuals, obs);
    return read_observable(t.logits, obs);
}

} // namespace rf

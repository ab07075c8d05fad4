#include "rf/autodiff.hpp"

#include <cmath>
#include <cstring>
#include <vector>

#include "param_walk.hpp"
#include "rf/kernels.hpp"

namespace rf {

namespace {

// ---- layer norm linearizations ----------------------------------------------
// Forward (per row): xhat = (x - mu) * s, y = gain .* xhat + bias,
// s = 1/sqrt(var + eps). Backward and JVP share the same projection structure:
//   gx = s * (t - mean(t) - xhat * mean(t .* xhat)),  t = gain .* gy   (VJP)
//   dy = gain .* s .* (dx - mean(dx) - xhat * mean(xhat .* dx))        (JVP)

void ln_backward_rows(const double* x, std::size_t n, std::size_t d, const double* gain,
                      const double* mean, const double* invstd, const double* gy,
                      double* gx, double* ggain, double* gbias) {
    std::vector<double> t(d), xhat(d);
    for (std::size_t r = 0; r < n; ++r) {
        const double* xr = x + r * d;
        const double* gyr = gy + r * d;
        double* gxr = gx + r * d;
        const double mu = mean[r], s = invstd[r];
        double mt = 0.0, mtx = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
            xhat[i] = (xr[i] - mu) * s;
            t[i] = gain[i] * gyr[i];
            mt += t[i];
            mtx += t[i] * xhat[i];
        }
        mt /= static_cast<double>(d);
        mtx /= static_cast<double>(d);
        for (std::size_t i = 0; i < d; ++i) gxr[i] = s * (t[i] - mt - xhat[i] * mtx);
        if (ggain)
            for (std::size_t i = 0; i < d; ++i) ggain[i] += gyr[i] * xhat[i];
        if (gbias)
            for (std::size_t i = 0; i < d; ++i) gbias[i] += gyr[i];
    }
}

void ln_jvp_rows(const double* x, std::size_t n, std::size_t d, const double* gain,
                 const double* mean, const double* invstd, const double* dx, double* dy) {
    std::vector<double> xhat(d);
    for (std::size_t r = 0; r < n; ++r) {
        const double* xr = x + r * d;
        const double* dxr = dx + r * d;
        double* dyr = dy + r * d;
        const double mu = mean[r], s = invstd[r];
        double md = 0.0, mxd = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
            xhat[i] = (xr[i] - mu) * s;
            md += dxr[i];
            mxd += xhat[i] * dxr[i];
        }
        md /= static_cast<double>(d);
        mxd /= static_cast<double>(d);
        for (std::size_t i = 0; i < d; ++i) dyr[i] = gain[i] * s * (dxr[i] - md - xhat[i] * mxd);
    }
}

void colsum_accum(const double* X, std::size_t n, std::size_t d, double* out) {
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t i = 0; i < d; ++i) out[i] += X[r * d + i];
}

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

// ---- block reverse pass ------------------------------------------------------
// g enters as dy/dR_{b+1} [n x d] and leaves as dy/dR_b. When pg is non-null,
// parameter gradients accumulate into it.

void block_backward(const Parameters& p, int bi, const BlockTrace& bt,
                    std::span<const double> u, std::size_t n, double* g, BlockParams* pg) {
    const auto& blk = p.blocks[bi];
    const std::size_t d = p.cfg.d_model;
    const std::size_t H = p.cfg.n_heads;
    const std::size_t dh = p.cfg.head_dim();
    const std::size_t m = p.cfg.d_mlp;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    // MLP branch: R_{b+1} = r_mid + W2^T-side MLP(n2)
    std::vector<double> g_hact(n * m), g_hpre(n * m), g_n2(n * d), g_rmid(n * d);
    kernels::matmul_nn(g, n, d, blk.w2.ptr(), m, g_hact.data());
    if (pg) {
        std::vector<double> gW2(d * m);
        kernels::matmul_tn(g, n, d, bt.h_act.data(), m, gW2.data());
        for (std::size_t e = 0; e < d * m; ++e) pg->w2.data[e] += gW2[e];
        colsum_accum(g, n, d, pg->b2.ptr());
    }
    for (std::size_t e = 0; e < n * m; ++e) g_hpre[e] = g_hact[e] * kernels::gelu_grad(bt.h_pre[e]);
    kernels::matmul_nn(g_hpre.data(), n, m, blk.w1.ptr(), d, g_n2.data());
    if (pg) {
        std::vector<double> gW1(m * d);
        kernels::matmul_tn(g_hpre.data(), n, m, bt.n2.data(), d, gW1.data());
        for (std::size_t e = 0; e < m * d; ++e) pg->w1.data[e] += gW1[e];
        colsum_accum(g_hpre.data(), n, m, pg->b1.ptr());
    }
    ln_backward_rows(bt.r_mid.data(), n, d, blk.ln2_g.ptr(), bt.ln2_mean.data(),
                     bt.ln2_invstd.data(), g_n2.data(), g_rmid.data(),
                     pg ? pg->ln2_g.ptr() : nullptr, pg ? pg->ln2_b.ptr() : nullptr);
    // r_mid feeds both the skip connection and LN2
    for (std::size_t e = 0; e < n * d; ++e) g_rmid[e] += g[e];

    // Attention branch: r_mid = u + Wo^T-side attn(ctx)
    std::vector<double> g_ctx(n * d);
    kernels::matmul_nn(g_rmid.data(), n, d, blk.wo.ptr(), d, g_ctx.data());
    if (pg) {
        std::vector<double> gWo(d * d);
        kernels::matmul_tn(g_rmid.data(), n, d, bt.ctx.data(), d, gWo.data());
        for (std::size_t e = 0; e < d * d; ++e) pg->wo.data[e] += gWo[e];
        colsum_accum(g_rmid.data(), n, d, pg->bo.ptr());
    }

    std::vector<double> g_ctxh(n * d), g_qh(n * d), g_kh(n * d), g_vh(n * d);
    split_heads(g_ctx.data(), n, H, dh, g_ctxh.data());
    std::vector<double> gP(n * n), gS(n * n);
    for (std::size_t h = 0; h < H; ++h) {
        const double* P = bt.probs.data() + h * n * n;
        const double* Qh = bt.qh.data() + h * n * dh;
        const double* Kh = bt.kh.data() + h * n * dh;
        const double* Vh = bt.vh.data() + h * n * dh;
        const double* gC = g_ctxh.data() + h * n * dh;
        kernels::matmul_nt(gC, n, dh, Vh, n, gP.data());
        kernels::matmul_tn(P, n, n, gC, dh, g_vh.data() + h * n * dh);
        // softmax backward; P is zero above the diagonal so gS is too
        for (std::size_t i = 0; i < n; ++i) {
            double si = 0.0;
            for (std::size_t j = 0; j < n; ++j) si += P[i * n + j] * gP[i * n + j];
            for (std::size_t j = 0; j < n; ++j)
                gS[i * n + j] = P[i * n + j] * (gP[i * n + j] - si) * scale;
        }
        kernels::matmul_nn(gS.data(), n, n, Kh, dh, g_qh.data() + h * n * dh);
        kernels::matmul_tn(gS.data(), n, n, Qh, dh, g_kh.data() + h * n * dh);
    }
    std::vector<double> gQ(n * d), gK(n * d), gV(n * d), g_n1(n * d), tmp(n * d);
    merge_heads(g_qh.data(), n, H, dh, gQ.data());
    merge_heads(g_kh.data(), n, H, dh, gK.data());
    merge_heads(g_vh.data(), n, H, dh, gV.data());
    kernels::matmul_nn(gQ.data(), n, d, blk.wq.ptr(), d, g_n1.data());
    kernels::matmul_nn(gK.data(), n, d, blk.wk.ptr(), d, tmp.data());
    for (std::size_t e = 0; e < n * d; ++e) g_n1[e] += tmp[e];
    kernels::matmul_nn(gV.data(), n, d, blk.wv.ptr(), d, tmp.data());
    for (std::size_t e = 0; e < n * d; ++e) g_n1[e] += tmp[e];
    if (pg) {
        std::vector<double> gW(d * d);
        kernels::matmul_tn(gQ.data(), n, d, bt.n1.data(), d, gW.data());
        for (std::size_t e = 0; e < d * d; ++e) pg->wq.data[e] += gW[e];
        colsum_accum(gQ.data(), n, d, pg->bq.ptr());
        kernels::matmul_tn(gK.data(), n, d, bt.n1.data(), d, gW.data());
        for (std::size_t e = 0; e < d * d; ++e) pg->wk.data[e] += gW[e];
        colsum_accum(gK.data(), n, d, pg->bk.ptr());
        kernels::matmul_tn(gV.data(), n, d, bt.n1.data(), d, gW.data());
        for (std::size_t e = 0; e < d * d; ++e) pg->wv.data[e] += gW[e];
        colsum_accum(gV.data(), n, d, pg->bv.ptr());
    }

    std::vector<double> g_u(n * d);
    ln_backward_rows(u.data(), n, d, blk.ln1_g.ptr(), bt.ln1_mean.data(), bt.ln1_invstd.data(),
                     g_n1.data(), g_u.data(), pg ? pg->ln1_g.ptr() : nullptr,
                     pg ? pg->ln1_b.ptr() : nullptr);
    // u feeds both the skip connection and LN1
    for (std::size_t e = 0; e < n * d; ++e) g[e] = g_rmid[e] + g_u[e];
}

// ---- block forward tangent ---------------------------------------------------
// t enters as dR_b [n x d] and leaves as dR_{b+1}.

void block_jvp(const Parameters& p, int bi, const BlockTrace& bt, std::span<const double> u,
               std::size_t n, double* t) {
    const auto& blk = p.blocks[bi];
    const std::size_t d = p.cfg.d_model;
    const std::size_t H = p.cfg.n_heads;
    const std::size_t dh = p.cfg.head_dim();
    const std::size_t m = p.cfg.d_mlp;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    std::vector<double> dn1(n * d), tmp(n * d);
    ln_jvp_rows(u.data(), n, d, blk.ln1_g.ptr(), bt.ln1_mean.data(), bt.ln1_invstd.data(), t,
                dn1.data());

    std::vector<double> dQ(n * d), dK(n * d), dV(n * d);
    kernels::matmul_nt(dn1.data(), n, d, blk.wq.ptr(), d, dQ.data());
    kernels::matmul_nt(dn1.data(), n, d, blk.wk.ptr(), d, dK.data());
    kernels::matmul_nt(dn1.data(), n, d, blk.wv.ptr(), d, dV.data());
    std::vector<double> dqh(n * d), dkh(n * d), dvh(n * d);
    split_heads(dQ.data(), n, H, dh, dqh.data());
    split_heads(dK.data(), n, H, dh, dkh.data());
    split_heads(dV.data(), n, H, dh, dvh.data());

    std::vector<double> dS(n * n), dS2(n * n), dP(n * n), dctxh(n * d), dctx_part(n * dh);
    for (std::size_t h = 0; h < H; ++h) {
        const double* P = bt.probs.data() + h * n * n;
        const double* Qh = bt.qh.data() + h * n * dh;
        const double* Kh = bt.kh.data() + h * n * dh;
        const double* Vh = bt.vh.data() + h * n * dh;
        kernels::matmul_nt(dqh.data() + h * n * dh, n, dh, Kh, n, dS.data());
        kernels::matmul_nt(Qh, n, dh, dkh.data() + h * n * dh, n, dS2.data());
        for (std::size_t e = 0; e < n * n; ++e) dS[e] = (dS[e] + dS2[e]) * scale;
        // softmax JVP; rows of P vanish above the diagonal, masking dP there
        for (std::size_t i = 0; i < n; ++i) {
            double sp = 0.0;
            for (std::size_t j = 0; j < n; ++j) sp += P[i * n + j] * dS[i * n + j];
            for (std::size_t j = 0; j < n; ++j)
                dP[i * n + j] = P[i * n + j] * (dS[i * n + j] - sp);
        }
        double* dC = dctxh.data() + h * n * dh;
        kernels::matmul_nn(dP.data(), n, n, Vh, dh, dC);
        kernels::matmul_nn(P, n, n, dvh.data() + h * n * dh, dh, dctx_part.data());
        for (std::size_t e = 0; e < n * dh; ++e) dC[e] += dctx_part[e];
    }
    std::vector<double> dctx(n * d), dattn(n * d);
    merge_heads(dctxh.data(), n, H, dh, dctx.data());
    kernels::matmul_nt(dctx.data(), n, d, blk.wo.ptr(), d, dattn.data());

    std::vector<double> dr_mid(n * d);
    for (std::size_t e = 0; e < n * d; ++e) dr_mid[e] = t[e] + dattn[e];

    std::vector<double> dn2(n * d), dh_pre(n * m), dmlp(n * d);
    ln_jvp_rows(bt.r_mid.data(), n, d, blk.ln2_g.ptr(), bt.ln2_mean.data(), bt.ln2_invstd.data(),
                dr_mid.data(), dn2.data());
    kernels::matmul_nt(dn2.data(), n, d, blk.w1.ptr(), m, dh_pre.data());
    for (std::size_t e = 0; e < n * m; ++e) dh_pre[e] *= kernels::gelu_grad(bt.h_pre[e]);
    kernels::matmul_nt(dh_pre.data(), n, m, blk.w2.ptr(), d, dmlp.data());

    for (std::size_t e = 0; e < n * d; ++e) t[e] = dr_mid[e] + dmlp[e];
}

std::size_t resolve_pos(std::size_t n, int position) {
    return position < 0 ? n - 1 : static_cast<std::size_t>(position);
}

void check_grad_slice(const Field3& f, int l) {
    for (std::size_t x = 0; x < f.tokens; ++x) {
        auto row = f.row(l, x);
        for (std::size_t i = 0; i < f.dim; ++i) {
            if (!std::isfinite(row[i])) {
                throw numeric_error("non-finite gradient at layer " + std::to_string(l) +
                                    " token " + std::to_string(x));
            }
        }
    }
}

} // namespace

void validate_site(const ModelConfig& cfg, std::size_t n_tokens, Site site) {
    if (site.layer < 0 || site.layer > cfg.n_layers) {
        throw config_error("site layer " + std::to_string(site.layer) + " out of range [0, " +
                           std::to_string(cfg.n_layers) + "]");
    }
    if (site.token < 0 || site.token >= static_cast<int>(n_tokens)) {
        throw config_error("site token " + std::to_string(site.token) + " out of range");
    }
}

SensitivityField sensitivity_field(const ForwardTrace& t, const Observable& obs) {
    const Parameters& p = *t.params;
    const std::size_t n = t.tokens.size();
    const std::size_t d = p.cfg.d_model;
    const int L = p.cfg.n_layers;
    validate_observable(p.cfg, n, obs);
    const std::size_t pos = resolve_pos(n, obs.position);

    SensitivityField a(L + 1, n, d);
    std::vector<double> g(n * d, 0.0);
    const double* ut = p.unembed.ptr() + static_cast<std::size_t>(obs.target) * d;
    const double* ur = p.unembed.ptr() + static_cast<std::size_t>(obs.reference) * d;
    if (obs.linear_readout) {
        for (std::size_t i = 0; i < d; ++i) g[pos * d + i] = ut[i] - ur[i];
    } else {
        // y = (u_t - u_r) . LN_f(R_L(pos)); backprop the readout row through LN_f
        std::vector<double> gy(n * d, 0.0);
        for (std::size_t i = 0; i < d; ++i) gy[pos * d + i] = ut[i] - ur[i];
        ln_backward_rows(t.residuals.layer(L).data(), n, d, p.lnf_g.ptr(), t.lnf_mean.data(),
                         t.lnf_invstd.data(), gy.data(), g.data(), nullptr, nullptr);
    }
    std::copy(g.begin(), g.end(), a.layer(L).begin());
    check_grad_slice(a, L);
    for (int b = L - 1; b >= 0; --b) {
        block_backward(p, b, t.blocks[b], t.residuals.layer(b), n, g.data(), nullptr);
        std::copy(g.begin(), g.end(), a.layer(b).begin());
        check_grad_slice(a, b);
    }
    return a;
}

SensitivityField sensitivity_field(const Parameters& p, std::span<const int> tokens,
                                   const Observable& obs) {
    ForwardTrace t = forward_trace(p, tokens);
    return sensitivity_field(t, obs);
}

TangentField jvp_residual(const ForwardTrace& t, Site site, std::span<const double> dir) {
    const Parameters& p = *t.params;
    const std::size_t n = t.tokens.size();
    const std::size_t d = p.cfg.d_model;
    const int L = p.cfg.n_layers;
    validate_site(p.cfg, n, site);
    if (dir.size() != d) throw config_error("tangent direction has wrong dimension");

    TangentField out(L + 1, n, d);
    std::vector<double> tan(n * d, 0.0);
    for (std::size_t i = 0; i < d; ++i) tan[site.token * d + i] = dir[i];
    std::copy(tan.begin(), tan.end(), out.layer(site.layer).begin());
    for (int b = site.layer; b < L; ++b) {
        block_jvp(p, b, t.blocks[b], t.residuals.layer(b), n, tan.data());
        std::copy(tan.begin(), tan.end(), out.layer(b + 1).begin());
        check_grad_slice(out, b + 1);
    }
    return out;
}

double tangent_observable(const ForwardTrace& t, const TangentField& tangent,
                          const Observable& obs) {
    const Parameters& p = *t.params;
    const std::size_t n = t.tokens.size();
    const std::size_t d = p.cfg.d_model;
    const int L = p.cfg.n_layers;
    validate_observable(p.cfg, n, obs);
    const std::size_t pos = resolve_pos(n, obs.position);
    const double* ut = p.unembed.ptr() + static_cast<std::size_t>(obs.target) * d;
    const double* ur = p.unembed.ptr() + static_cast<std::size_t>(obs.reference) * d;
    auto tl = tangent.row(L, pos);
    if (obs.linear_readout) {
        double dy = 0.0;
        for (std::size_t i = 0; i < d; ++i) dy += (ut[i] - ur[i]) * tl[i];
        return dy;
    }
    std::vector<double> dln(d);
    ln_jvp_rows(t.residuals.row(L, pos).data(), 1, d, p.lnf_g.ptr(), t.lnf_mean.data() + pos,
                t.lnf_invstd.data() + pos, tl.data(), dln.data());
    double dy = 0.0;
    for (std::size_t i = 0; i < d; ++i) dy += (ut[i] - ur[i]) * dln[i];
    return dy;
}

SensitivityField vjp_component(const ForwardTrace& t, Site site, int channel) {
    const Parameters& p = *t.params;
    const std::size_t n = t.tokens.size();
    const std::size_t d = p.cfg.d_model;
    validate_site(p.cfg, n, site);
    if (channel < 0 || channel >= static_cast<int>(d)) {
        throw config_error("vjp channel out of range");
    }

    SensitivityField out(p.cfg.n_layers + 1, n, d);
    std::vector<double> g(n * d, 0.0);
    g[site.token * d + channel] = 1.0;
    std::copy(g.begin(), g.end(), out.layer(site.layer).begin());
    for (int b = site.layer - 1; b >= 0; --b) {
        block_backward(p, b, t.blocks[b], t.residuals.layer(b), n, g.data(), nullptr);
        std::copy(g.begin(), g.end(), out.layer(b).begin());
        check_grad_slice(out, b);
    }
    return out;
}

SensitivityField vjp_seed(const ForwardTrace& t, Site site, std::span<const double> seed) {
    const Parameters& p = *t.params;
    const std::size_t n = t.tokens.size();
    const std::size_t d = p.cfg.d_model;
    validate_site(p.cfg, n, site);
    if (seed.size() != d) throw config_error("vjp seed has wrong dimension");

    SensitivityField out(p.cfg.n_layers + 1, n, d);
    std::vector<double> g(n * d, 0.0);
    for (std::size_t i = 0; i < d; ++i) g[site.token * d + i] = seed[i];
    std::copy(g.begin(), g.end(), out.layer(site.layer).begin());
    for (int b = site.layer - 1; b >= 0; --b) {
        block_backward(p, b, t.blocks[b], t.residuals.layer(b), n, g.data(), nullptr);
        std::copy(g.begin(), g.end(), out.layer(b).begin());
        check_grad_slice(out, b);
    }
    return out;
}

double fd_patch_derivative(const Parameters& p, std::span<const int> tokens, Site site,
                           std::span<const double> dir, const Observable& obs, double h) {
    validate_site(p.cfg, tokens.size(), site);
    if (dir.size() != static_cast<std::size_t>(p.cfg.d_model)) {
        throw config_error("direction has wrong dimension");
    }
    if (!(h > 0.0)) throw config_error("finite-difference step must be positive");

    const std::size_t n = tokens.size();
    const std::size_t d = p.cfg.d_model;
    LayerDelta plus{site.layer, Tensor({n, d})};
    for (std::size_t i = 0; i < d; ++i) plus.delta.data[site.token * d + i] = h * dir[i];
    LayerDelta minus{site.layer, Tensor({n, d})};
    for (std::size_t i = 0; i < d; ++i) minus.delta.data[site.token * d + i] = -h * dir[i];

    ForwardResult rp = forward(p, tokens, {plus});
    ForwardResult rm = forward(p, tokens, {minus});
    const double yp = observable_value(p, rp, obs);
    const double ym = observable_value(p, rm, obs);
    return (yp - ym) / (2.0 * h);
}

Parameters grads_cross_entropy(const ForwardTrace& t, int answer, int position,
                               double* loss_out) {
    const Parameters& p = *t.params;
    const std::size_t n = t.tokens.size();
    const std::size_t d = p.cfg.d_model;
    const std::size_t V = p.cfg.vocab;
    const int L = p.cfg.n_layers;
    if (answer < 0 || answer >= static_cast<int>(V)) throw config_error("answer token outside vocab");
    const std::size_t pos = resolve_pos(n, position);
    if (pos >= n) throw config_error("loss position out of range");

    Parameters g = zeros_like(p);

    std::vector<double> prob(V);
    stable_softmax(t.logits.row(pos), prob);
    if (loss_out) *loss_out = -std::log(prob[answer]);
    std::vector<double> dlog(prob);
    dlog[answer] -= 1.0;

    // unembedding and readout-row gradients
    std::vector<double> g_lnf(n * d, 0.0);
    const double* lnf_row = t.lnf_out.data() + pos * d;
    for (std::size_t v = 0; v < V; ++v) {
        const double w = dlog[v];
        double* gu = g.unembed.ptr() + v * d;
        const double* uv = p.unembed.ptr() + v * d;
        for (std::size_t i = 0; i < d; ++i) {
            gu[i] += w * lnf_row[i];
            g_lnf[pos * d + i] += w * uv[i];
        }
    }

    std::vector<double> grad(n * d, 0.0);
    ln_backward_rows(t.residuals.layer(L).data(), n, d, p.lnf_g.ptr(), t.lnf_mean.data(),
                     t.lnf_invstd.data(), g_lnf.data(), grad.data(), g.lnf_g.ptr(),
                     g.lnf_b.ptr());
    for (int b = L - 1; b >= 0; --b) {
        block_backward(p, b, t.blocks[b], t.residuals.layer(b), n, grad.data(), &g.blocks[b]);
    }
    for (std::size_t x = 0; x < n; ++x) {
        double* gte = g.tok_emb.ptr() + static_cast<std::size_t>(t.tokens[x]) * d;
        double* gpe = g.pos_emb.ptr() + x * d;
        for (std::size_t i = 0; i < d; ++i) {
            gte[i] += grad[x * d + i];
            gpe[i] += grad[x * d + i];
        }
    }
    return g;
}

} // namespace rf
